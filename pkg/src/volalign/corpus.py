"""Deterministic paired volume/report corpus.

Each sample is a smooth-noise volume with optional Gaussian anomaly blobs
planted inside fixed axis-aligned region boxes, plus four text views: noisy
per-region sentences, a shuffled full report with filler sentences, and the
canonical ("enriched") presence/absence statements that are a pure function
of the planted labels. A rule-based canonicalizer inverts the paraphrase
noise; it stands in for an external rewriting service (see
``ExternalRewriter``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, UnmappableTextError

# amplitude, gaussian sigma (voxels) per anomaly type
DEFAULT_BLOB_PARAMS = {
    "opacity": (2.5, 2.2),
    "nodule": (4.0, 1.4),
    "effusion": (1.8, 2.3),
}

DEFAULT_PRESENT_TEMPLATES = {
    "opacity": [
        "slight opacity seen in region {r} .",
        "hazy clouding noted in region {r} .",
        "patchy haze involving region {r} .",
    ],
    "nodule": [
        "small nodule detected in region {r} .",
        "rounded lesion noted in region {r} .",
        "focal lump seen in region {r} .",
    ],
    "effusion": [
        "fluid collection seen in region {r} .",
        "layering effusion in region {r} .",
        "pocket of fluid noted in region {r} .",
    ],
}

DEFAULT_ABSENT_TEMPLATES = {
    "opacity": [
        "no opacity in region {r} .",
        "region {r} clear of haze .",
        "without clouding in region {r} .",
    ],
    "nodule": [
        "no nodule in region {r} .",
        "no rounded lesion in region {r} .",
        "region {r} without focal lump .",
    ],
    "effusion": [
        "no fluid collection in region {r} .",
        "region {r} free of layering fluid .",
        "no pocket of fluid in region {r} .",
    ],
}

DEFAULT_NORMAL_TEMPLATES = [
    "region {r} appears unremarkable .",
    "no significant abnormality in region {r} .",
    "region {r} is within normal limits .",
]

DEFAULT_FILLERS = [
    "comparison is made with prior imaging .",
    "image quality is adequate for interpretation .",
    "the examination was performed without contrast .",
    "clinical correlation is recommended .",
    "technique and positioning are standard .",
    "no prior studies are available for comparison .",
]


@dataclass
class WorldConfig:
    regions: int = 4
    volume_shape: tuple = (16, 32, 32)
    anomaly_prob: float = 0.3
    anomaly_types: tuple = ("opacity", "nodule", "effusion")
    blob_params: dict = field(default_factory=lambda: dict(DEFAULT_BLOB_PARAMS))
    present_templates: dict = field(default_factory=lambda: dict(DEFAULT_PRESENT_TEMPLATES))
    absent_templates: dict = field(default_factory=lambda: dict(DEFAULT_ABSENT_TEMPLATES))
    normal_templates: tuple = tuple(DEFAULT_NORMAL_TEMPLATES)
    filler_sentences: tuple = tuple(DEFAULT_FILLERS)
    filler_sentence_count: int = 2
    absent_mention_prob: float = 0.25
    noise_std: float = 0.05
    noise_smoothing: float = 1.5
    # Per-sample scanner-style intensity nuisance: volume -> gain * volume
    # + offset. Label-independent variation that dominates an untrained
    # encoder's embedding spread, keeping null-model zero-shot AUC at
    # chance.
    intensity_gain_jitter: float = 0.2
    intensity_offset_std: float = 0.4
    rng_seed: int = 0


@dataclass
class PairedSample:
    volume: np.ndarray                  # float32 [D, H, W]
    masks: np.ndarray                   # bool [R, D, H, W]
    region_texts: list                  # R noisy token sequences
    report: list                        # noisy token sequence
    enriched_region_texts: list         # R canonical token sequences
    enriched_report: list               # canonical token sequence
    labels: np.ndarray                  # int8 [R, K]


@dataclass
class PromptPair:
    disease: str
    present: list                       # token sequence
    absent: list


class Vocabulary:
    """Closed whitespace-token vocabulary. Id 0 is [CLS], id 1 is padding."""

    def __init__(self, words: Sequence[str]):
        self.words = ["[CLS]", "[PAD]"] + sorted(set(words))
        self.word2id = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def tokenize(self, sentence) -> list:
        words = sentence.split() if isinstance(sentence, str) else list(sentence)
        try:
            return [self.word2id[w] for w in words]
        except KeyError as e:
            raise ConfigError(f"word {e.args[0]!r} not in vocabulary") from None

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)


def _region_boxes(cfg: WorldConfig):
    """Partition (H, W) into an a x b grid of full-depth boxes, a*b = regions."""
    r = cfg.regions
    best = None
    for a in range(1, r + 1):
        if r % a == 0:
            b = r // a
            if best is None or abs(a - b) < abs(best[0] - best[1]):
                best = (a, b)
    a, b = best
    D, H, W = cfg.volume_shape
    if H % a != 0 or W % b != 0:
        raise ConfigError(f"cannot split {H}x{W} plane into {a}x{b} region boxes")
    boxes = []
    for i in range(a):
        for j in range(b):
            boxes.append(((0, D), (i * H // a, (i + 1) * H // a),
                          (j * W // b, (j + 1) * W // b)))
    return boxes


def canonical_present(r: int, disease: str) -> str:
    return f"region {r} : {disease} present ."

def canonical_absent(r: int, disease: str) -> str:
    return f"region {r} : {disease} absent ."



class World:
    """Template machinery, vocabulary and sample generation for one config."""

    def __init__(self, cfg: WorldConfig,
                 external_rewriter: Optional[Callable[[str], str]] = None):
        self.cfg = cfg
        self.boxes = _region_boxes(cfg)
        self.external_rewriter = external_rewriter
        self._validate_boxes()
        self._build_sentences()
        self._build_vocab()

    # -- setup --------------------------------------------------------------

    def _validate_boxes(self):
        if not 0.0 <= self.cfg.intensity_gain_jitter < 1.0:
            raise ConfigError("intensity_gain_jitter must be in [0, 1)")
        if self.cfg.intensity_offset_std < 0.0:
            raise ConfigError("intensity_offset_std must be >= 0")
        for name in self.cfg.anomaly_types:
            if name not in self.cfg.blob_params:
                raise ConfigError(f"no blob parameters for anomaly type {name!r}")
            _, sigma = self.cfg.blob_params[name]
            radius = int(np.ceil(3.0 * sigma))
            for box in self.boxes:
                if any(hi - lo < 2 * radius + 1 for lo, hi in box):
                    raise ConfigError(
                        f"region box {box} too small for {name!r} blob support "
                        f"(radius {radius})"
                    )

    def _build_sentences(self):
        """Instantiate every template per region and build the inverse map."""
        cfg = self.cfg
        # sentence string -> ("present"|"absent", region, disease) | ("normal", region, None)
        #                  | ("filler", None, None)
        self.sentence_meta: Dict[str, tuple] = {}
        self.present_sentences = {}   # (r, disease) -> list of noisy strings
        self.absent_sentences = {}
        self.normal_sentences = {}    # r -> list
        for r in range(cfg.regions):
            for k, disease in enumerate(cfg.anomaly_types):
                pres = [t.format(r=r) for t in cfg.present_templates[disease]]
                absn = [t.format(r=r) for t in cfg.absent_templates[disease]]
                pres.append(canonical_present(r, disease))
                absn.append(canonical_absent(r, disease))
                self.present_sentences[(r, disease)] = pres[:-1]
                self.absent_sentences[(r, disease)] = absn[:-1]
                for s in pres:
                    self._register(s, ("present", r, disease))
                for s in absn:
                    self._register(s, ("absent", r, disease))
            normals = [t.format(r=r) for t in cfg.normal_templates]
            self.normal_sentences[r] = normals
            for s in normals:
                self._register(s, ("normal", r, None))
        for s in cfg.filler_sentences:
            self._register(s, ("filler", None, None))

    def _register(self, sentence: str, meta: tuple):
        existing = self.sentence_meta.get(sentence)
        if existing is not None and existing != meta:
            raise ConfigError(f"ambiguous template sentence {sentence!r}")
        self.sentence_meta[sentence] = meta

    def _build_vocab(self):
        words = set()
        for s in self.sentence_meta:
            words.update(s.split())
        self.vocab = Vocabulary(sorted(words))

    # -- generation ---------------------------------------------------------

    def generate_sample(self, rng: np.random.Generator) -> PairedSample:
        cfg = self.cfg
        R, K = cfg.regions, len(cfg.anomaly_types)
        q = 1.0 - (1.0 - cfg.anomaly_prob) ** (1.0 / K)
        labels = (rng.random((R, K)) < q).astype(np.int8)

        volume = gaussian_filter(rng.standard_normal(cfg.volume_shape),
                                 cfg.noise_smoothing)
        volume = (volume / volume.std() * cfg.noise_std).astype(np.float32)
        masks = np.zeros((R,) + tuple(cfg.volume_shape), dtype=bool)
        for r, ((d0, d1), (h0, h1), (w0, w1)) in enumerate(self.boxes):
            masks[r, d0:d1, h0:h1, w0:w1] = True
            for k, disease in enumerate(cfg.anomaly_types):
                if labels[r, k]:
                    self._plant_blob(volume, rng, self.boxes[r], disease)
        gain = 1.0 + cfg.intensity_gain_jitter * (2.0 * rng.random() - 1.0)
        offset = rng.normal(0.0, cfg.intensity_offset_std)
        volume = (gain * volume + offset).astype(np.float32)

        region_texts, region_strs = [], []
        for r in range(R):
            sentences = []
            for k, disease in enumerate(cfg.anomaly_types):
                if labels[r, k]:
                    opts = self.present_sentences[(r, disease)]
                    sentences.append(opts[rng.integers(len(opts))])
                elif rng.random() < cfg.absent_mention_prob:
                    opts = self.absent_sentences[(r, disease)]
                    sentences.append(opts[rng.integers(len(opts))])
            if not any(labels[r]):
                opts = self.normal_sentences[r]
                sentences.insert(0, opts[rng.integers(len(opts))])
            region_strs.append(sentences)
            region_texts.append(self.vocab.tokenize(" ".join(sentences)))

        all_sentences = [s for group in region_strs for s in group]
        for _ in range(cfg.filler_sentence_count):
            all_sentences.append(
                cfg.filler_sentences[rng.integers(len(cfg.filler_sentences))]
            )
        order = rng.permutation(len(all_sentences))
        report = self.vocab.tokenize(" ".join(all_sentences[i] for i in order))

        enriched_region_texts = [
            self.vocab.tokenize(self._canonical_region(r, labels[r]))
            for r in range(R)
        ]
        enriched_report = self.vocab.tokenize(
            " ".join(self._canonical_region(r, labels[r]) for r in range(R))
        )
        return PairedSample(volume, masks, region_texts, report,
                            enriched_region_texts, enriched_report, labels)

    def _plant_blob(self, volume, rng, box, disease):
        amp, sigma = self.cfg.blob_params[disease]
        radius = int(np.ceil(3.0 * sigma))
        centers = []
        for lo, hi in box:
            centers.append(int(rng.integers(lo + radius, hi - radius)))
        cz, cy, cx = centers
        z, y, x = np.ogrid[-radius : radius + 1, -radius : radius + 1,
                           -radius : radius + 1]
        dist2 = z * z + y * y + x * x
        blob = amp * np.exp(-0.5 * dist2 / sigma ** 2)
        blob[dist2 > radius ** 2] = 0.0
        volume[cz - radius : cz + radius + 1, cy - radius : cy + radius + 1,
               cx - radius : cx + radius + 1] += blob.astype(np.float32)

    def _canonical_region(self, r: int, row) -> str:
        parts = []
        for k, disease in enumerate(self.cfg.anomaly_types):
            parts.append(canonical_present(r, disease) if row[k]
                         else canonical_absent(r, disease))
        return " ".join(parts)

    def build_splits(self, n_train: int, n_test: int):
        """Disjoint deterministic rng streams per sample."""
        if n_train < 1 or n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        root = np.random.SeedSequence(self.cfg.rng_seed)
        train_ss, test_ss = root.spawn(2)
        train = [self.generate_sample(np.random.Generator(np.random.PCG64(s)))
                 for s in train_ss.spawn(n_train)]
        test = [self.generate_sample(np.random.Generator(np.random.PCG64(s)))
                for s in test_ss.spawn(n_test)]
        return train, test

    # -- canonicalization ---------------------------------------------------

    def split_sentences(self, text: str) -> List[str]:
        words = text.split()
        sentences, current = [], []
        for w in words:
            current.append(w)
            if w == ".":
                sentences.append(" ".join(current))
                current = []
        if current:
            raise UnmappableTextError(" ".join(current))
        return sentences

    def canonicalize(self, text: str) -> str:
        """Invert the paraphrase mapping; idempotent on canonical input.

        When an external rewriter is attached it is applied first; its output
        must still parse against the template tables.
        """
        if self.external_rewriter is not None:
            text = self.external_rewriter(text)
        mentioned: Dict[int, np.ndarray] = {}
        K = len(self.cfg.anomaly_types)
        kidx = {d: k for k, d in enumerate(self.cfg.anomaly_types)}
        for sentence in self.split_sentences(text):
            meta = self.sentence_meta.get(sentence)
            if meta is None:
                raise UnmappableTextError(sentence)
            kind, r, disease = meta
            if kind == "filler":
                continue
            row = mentioned.setdefault(r, np.zeros(K, dtype=np.int8))
            if kind == "present":
                row[kidx[disease]] = 1
        return " ".join(self._canonical_region(r, mentioned[r])
                        for r in sorted(mentioned))

    def canonicalize_tokens(self, ids: Sequence[int]) -> list:
        return self.vocab.tokenize(self.canonicalize(self.vocab.detokenize(ids)))

    # -- evaluation prompts -------------------------------------------------

    def global_prompt_pairs(self) -> List[PromptPair]:
        """Prompt ensemble for whole-volume scoring.

        One canonical present/absent pair per (disease, region); the
        evaluator averages presence scores over each disease's pairs.
        Canonical statements are used because they lie inside the trained
        text distribution, and ensembling over regions keeps an untrained
        model's score at chance level.
        """
        return [
            PromptPair(d, self.vocab.tokenize(canonical_present(r, d)),
                       self.vocab.tokenize(canonical_absent(r, d)))
            for d in self.cfg.anomaly_types
            for r in range(self.cfg.regions)
        ]

    def region_prompt_pairs(self, r: int) -> List[PromptPair]:
        return [
            PromptPair(d, self.vocab.tokenize(canonical_present(r, d)),
                       self.vocab.tokenize(canonical_absent(r, d)))
            for d in self.cfg.anomaly_types
        ]
