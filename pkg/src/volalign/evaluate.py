"""Zero-shot classification, retrieval, grounding and attention export.

Everything here is read-only over the model: no tape is opened, so no
gradients and no state changes. Scores for presence-vs-absence prompts use a
two-way softmax over the prompt similarities at the model temperature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .corpus import PairedSample, PromptPair, World
from .encoders import AlignmentModel, downsample_mask
from .errors import CheckpointFormatError, EmptyRegionError
from .losses import Temperature

ATTN_MAGIC = b"MV3A"


@dataclass
class MetricReport:
    task: str
    per_disease_auc: Dict[str, float] = field(default_factory=dict)
    macro_auc: float = float("nan")
    balanced_accuracy: float = float("nan")
    precision: float = float("nan")
    weighted_f1: float = float("nan")
    recall_at: Dict[int, float] = field(default_factory=dict)
    extra: Dict[str, float] = field(default_factory=dict)
    sample_count: int = 0
    warnings: List[str] = field(default_factory=list)

    def rows(self):
        """(task, disease, metric, value) rows for the CSV emitter."""
        out = []
        for d, v in self.per_disease_auc.items():
            out.append((self.task, d, "auc", v))
        for name in ("macro_auc", "balanced_accuracy", "precision", "weighted_f1"):
            v = getattr(self, name)
            if not np.isnan(v):
                out.append((self.task, "*", name, v))
        for k, v in sorted(self.recall_at.items()):
            out.append((self.task, "*", f"recall@{k}", v))
        for k, v in self.extra.items():
            out.append((self.task, "*", k, v))
        out.append((self.task, "*", "sample_count", self.sample_count))
        return out

    def summary(self):
        return {
            "task": self.task,
            "per_disease_auc": self.per_disease_auc,
            "macro_auc": self.macro_auc,
            "balanced_accuracy": self.balanced_accuracy,
            "precision": self.precision,
            "weighted_f1": self.weighted_f1,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "extra": self.extra,
            "sample_count": self.sample_count,
            "warnings": self.warnings,
        }


# ---------------------------------------------------------------------------
# scalar metrics


def auc_score(scores, labels) -> float:
    """Rank-statistic AUC with ties counted half; nan on degenerate labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # average ranks over tie groups (1-based)
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_metrics(preds, labels):
    """(balanced accuracy, precision, weighted F1) for binary predictions."""
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = int((preds & labels).sum())
    fp = int((preds & ~labels).sum())
    fn = int((~preds & labels).sum())
    tn = int((~preds & ~labels).sum())
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    bal_acc = 0.5 * (sens + spec)
    precision = tp / (tp + fp) if tp + fp else 0.0
    # weighted F1 over both classes, weights = class support
    prec_neg = tn / (tn + fn) if tn + fn else 0.0
    f1_pos = 2 * precision * sens / (precision + sens) if precision + sens else 0.0
    f1_neg = 2 * prec_neg * spec / (prec_neg + spec) if prec_neg + spec else 0.0
    n = preds.size
    w_pos = (tp + fn) / n if n else 0.0
    w_neg = (tn + fp) / n if n else 0.0
    return bal_acc, precision, w_pos * f1_pos + w_neg * f1_neg


# ---------------------------------------------------------------------------
# batched encoding helpers (inference only, no tape)


def encode_volumes(model: AlignmentModel, volumes: np.ndarray, batch=64) -> np.ndarray:
    out = []
    for i in range(0, volumes.shape[0], batch):
        out.append(model.vision.encode_global(volumes[i : i + batch]).data)
    return np.concatenate(out, axis=0)


def encode_texts(model: AlignmentModel, sequences, batch=256) -> np.ndarray:
    out = []
    for i in range(0, len(sequences), batch):
        out.append(model.text.encode(sequences[i : i + batch]).data)
    return np.concatenate(out, axis=0)


def encode_all_regions(model: AlignmentModel, samples: List[PairedSample],
                       batch=16):
    """Region embeddings for every (sample, region); invalid entries nan.

    Returns (embs [M, R, P], valid [M, R], skipped count).
    """
    cfg = model.vision.cfg
    r_count = samples[0].masks.shape[0]
    m = len(samples)
    embs = np.full((m, r_count, cfg.proj_dim), np.nan, dtype=np.float32)
    valid = np.zeros((m, r_count), dtype=bool)
    skipped = 0
    for i in range(0, m, batch):
        chunk = samples[i : i + batch]
        volumes = np.stack([s.volume for s in chunk])
        latent = model.vision.latent(volumes)
        rows, batch_index, where = [], [], []
        for bi, s in enumerate(chunk):
            for r in range(r_count):
                grid = downsample_mask(s.masks[r], cfg)
                if grid.any():
                    rows.append(grid.reshape(-1))
                    batch_index.append(bi)
                    where.append((i + bi, r))
                else:
                    skipped += 1
        if rows:
            flat = model.vision.encode_regions(
                latent, np.array(batch_index), np.array(rows)
            ).data
            for (si, r), e in zip(where, flat):
                embs[si, r] = e
                valid[si, r] = True
    return embs, valid, skipped


def crop_to_mask(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Bounding-box crop, padded back (centered) to the full volume shape."""
    if not mask.any():
        raise EmptyRegionError("empty mask for crop emulation")
    out = np.zeros_like(volume)
    idx = np.nonzero(mask)
    slices, offsets = [], []
    for ax in range(3):
        lo, hi = idx[ax].min(), idx[ax].max() + 1
        extent = hi - lo
        off = (volume.shape[ax] - extent) // 2
        slices.append(slice(lo, hi))
        offsets.append(slice(off, off + extent))
    out[tuple(offsets)] = volume[tuple(slices)]
    return out


# ---------------------------------------------------------------------------
# tasks


def _prompt_scores(v: np.ndarray, model: AlignmentModel,
                   pairs: List[PromptPair], tau: float) -> np.ndarray:
    """[M, P] embeddings -> [M, n_diseases] presence probabilities."""
    pres = encode_texts(model, [p.present for p in pairs])
    absn = encode_texts(model, [p.absent for p in pairs])
    sp = v @ pres.T
    sa = v @ absn.T
    return 1.0 / (1.0 + np.exp(-(sp - sa) / tau))


def _classification_report(task, scores, labels, diseases) -> MetricReport:
    """scores/labels: [M, K] columns per disease."""
    rep = MetricReport(task=task, sample_count=scores.shape[0])
    aucs, bals, precs, f1s = [], [], [], []
    for k, name in enumerate(diseases):
        a = auc_score(scores[:, k], labels[:, k])
        rep.per_disease_auc[name] = a
        if np.isnan(a):
            rep.warnings.append(f"AUC undefined for {name!r} (degenerate labels)")
        else:
            aucs.append(a)
        bal, prec, f1 = confusion_metrics(scores[:, k] > 0.5, labels[:, k])
        bals.append(bal)
        precs.append(prec)
        f1s.append(f1)
    rep.macro_auc = float(np.mean(aucs)) if aucs else float("nan")
    rep.balanced_accuracy = float(np.mean(bals))
    rep.precision = float(np.mean(precs))
    rep.weighted_f1 = float(np.mean(f1s))
    return rep


def zero_shot_global(model: AlignmentModel, world: World,
                     samples: List[PairedSample]) -> MetricReport:
    pairs = world.global_prompt_pairs()
    tau = Temperature(model.tau_logit).tau
    v = encode_volumes(model, np.stack([s.volume for s in samples]))
    probs = _prompt_scores(v, model, pairs, tau)
    diseases = list(dict.fromkeys(p.disease for p in pairs))
    scores = np.stack(
        [probs[:, [i for i, p in enumerate(pairs) if p.disease == d]].mean(axis=1)
         for d in diseases], axis=1)
    labels = np.stack([s.labels.any(axis=0) for s in samples])
    return _classification_report("zero_shot_global", scores, labels, diseases)


def zero_shot_local(model: AlignmentModel, world: World,
                    samples: List[PairedSample],
                    use_crop_emulation: bool = False) -> MetricReport:
    """Per-(sample, region) classification with region prompt pairs."""
    tau = Temperature(model.tau_logit).tau
    r_count = world.cfg.regions
    diseases = list(world.cfg.anomaly_types)
    if use_crop_emulation:
        valid = np.ones((len(samples), r_count), dtype=bool)
        embs = np.zeros((len(samples), r_count, model.vision.cfg.proj_dim),
                        dtype=np.float32)
        for r in range(r_count):
            cropped = np.stack(
                [crop_to_mask(s.volume, s.masks[r]) for s in samples]
            )
            embs[:, r, :] = encode_volumes(model, cropped)
        skipped = 0
    else:
        embs, valid, skipped = encode_all_regions(model, samples)
    rows, labels = [], []
    for r in range(r_count):
        pairs = world.region_prompt_pairs(r)
        idx = np.nonzero(valid[:, r])[0]
        if idx.size == 0:
            continue
        rows.append(_prompt_scores(embs[idx, r], model, pairs, tau))
        labels.append(np.stack([samples[i].labels[r] for i in idx]))
    scores = np.concatenate(rows, axis=0)
    labels = np.concatenate(labels, axis=0)
    rep = _classification_report("zero_shot_local", scores, labels, diseases)
    if skipped:
        rep.warnings.append(f"skipped {skipped} empty (sample, region) entries")
        rep.extra["skipped_regions"] = skipped
    return rep


def _rank_of_truth(sims: np.ndarray) -> np.ndarray:
    """Row-wise rank (0-based) of the diagonal entry, stable index ties."""
    m = sims.shape[0]
    ranks = np.empty(m, dtype=np.int64)
    for i in range(m):
        order = np.argsort(-sims[i], kind="stable")
        ranks[i] = int(np.nonzero(order == i)[0][0])
    return ranks


def report_retrieval(model: AlignmentModel, world: World,
                     samples: List[PairedSample], ks=(5, 10)) -> MetricReport:
    v = encode_volumes(model, np.stack([s.volume for s in samples]))
    t = encode_texts(model, [s.report for s in samples])
    ranks = _rank_of_truth(v @ t.T)
    rep = MetricReport(task="report_retrieval", sample_count=len(samples))
    for k in ks:
        rep.recall_at[k] = float((ranks < k).mean())
    return rep


def region_grounding(model: AlignmentModel, world: World,
                     samples: List[PairedSample], ks=(10, 50)) -> MetricReport:
    """Retrieve the true region description from the pool of all of them."""
    embs, valid, _ = encode_all_regions(model, samples)
    r_count = world.cfg.regions
    texts = [s.region_texts[r] for s in samples for r in range(r_count)]
    t = encode_texts(model, texts)
    flat_valid = valid.reshape(-1)
    q = embs.reshape(-1, embs.shape[-1])[flat_valid]
    true_idx = np.nonzero(flat_valid)[0]
    sims = q @ t.T
    rep = MetricReport(task="region_grounding", sample_count=int(flat_valid.sum()))
    hits = {k: 0 for k in ks}
    for row, ti in zip(sims, true_idx):
        order = np.argsort(-row, kind="stable")
        rank = int(np.nonzero(order == ti)[0][0])
        for k in ks:
            if rank < k:
                hits[k] += 1
    for k in ks:
        rep.extra[f"top{k}_accuracy"] = hits[k] / max(1, rep.sample_count)
    return rep


# ---------------------------------------------------------------------------
# attention export


def attention_grid(model: AlignmentModel, volume: np.ndarray,
                   mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Final-block [CLS]-to-patch attention scattered onto the patch grid.

    Head-averaged; the CLS-to-CLS entry is dropped, so the grid sums to <= 1.
    With a mask, only active cells receive values.
    """
    cfg = model.vision.cfg
    capture = {}
    if mask is None:
        model.vision.encode_global(volume[None], capture=capture)
        probs = capture["probs"].mean(axis=1)[0, 0]  # [T+1]
        return probs[1:].reshape(cfg.grid).copy()
    grid_mask = downsample_mask(mask, cfg)
    model.vision.encode_region(volume, mask, capture=capture)
    probs = capture["probs"].mean(axis=1)[0, 0]
    out = np.zeros(cfg.grid, dtype=probs.dtype)
    out.reshape(-1)[np.flatnonzero(grid_mask.reshape(-1))] = probs[1 : 1 + int(grid_mask.sum())]
    return out


def write_attention_file(path, grid: np.ndarray):
    with open(path, "wb") as f:
        f.write(ATTN_MAGIC)
        f.write(struct.pack("<I", grid.ndim))
        for e in grid.shape:
            f.write(struct.pack("<I", e))
        f.write(grid.astype("<f4").tobytes())


def read_attention_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != ATTN_MAGIC:
            raise CheckpointFormatError(f"{path}: bad attention-file magic")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
        data = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise CheckpointFormatError(f"{path}: truncated attention file")
        return data.reshape(shape).copy()


def attention_region_statistic(model: AlignmentModel, world: World,
                               samples: List[PairedSample]) -> float:
    """Fraction of anomaly-positive samples whose planted regions get more
    mean [CLS] attention than the rest of the grid (unmasked pathway)."""
    cfg = model.vision.cfg
    wins = total = 0
    for s in samples:
        pos_regions = np.nonzero(s.labels.any(axis=1))[0]
        if pos_regions.size == 0 or pos_regions.size == world.cfg.regions:
            continue
        grid = attention_grid(model, s.volume)
        sel = np.zeros(cfg.grid, dtype=bool)
        for r in pos_regions:
            sel |= downsample_mask(s.masks[r], cfg)
        if grid[sel].mean() > grid[~sel].mean():
            wins += 1
        total += 1
    return wins / total if total else float("nan")
