"""Acceptance suite: one test (or small group) per release criterion.

The four full training runs used by the ablation criteria are performed once
in a session fixture and shared; everything else is self-contained. The whole
file targets < 30 minutes single-threaded, with the four 2000-step runs
accounting for most of it.
"""

import time

import numpy as np
import pytest

from conftest import unit_rows
from test_bank import simulate
from test_losses import ref_info_nce, ref_local

from volalign import autodiff as ad
from volalign import evaluate, losses, mi
from volalign.autodiff import Tensor
from volalign.bank import SemanticBank
from volalign.checkpoint import load_checkpoint, save_checkpoint
from volalign.corpus import World, WorldConfig
from volalign.encoders import AlignmentModel, TextEncoderConfig, VisionEncoderConfig
from volalign.gradcheck import check_gradients, run_standard_checks
from volalign.trainer import TrainConfig, Trainer

ABLATION_MODES = ("global_only", "local_only", "multiscale", "multiscale_semantic")


# ---------------------------------------------------------------------------
# Shared corpus and the four ablation training runs (criteria 5 and 10)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def world():
    return World(WorldConfig())


@pytest.fixture(scope="session")
def splits(world):
    return world.build_splits(1000, 200)


@pytest.fixture(scope="session")
def ablation(world, splits):
    """mode -> dict of evaluation metrics after a full 2000-step run."""
    train, test = splits
    out = {}
    t0 = time.perf_counter()
    for mode in ABLATION_MODES:
        trainer = Trainer(world, TrainConfig(loss_mode=mode, seed=0))
        trainer.run(train)
        out[mode] = {
            "global_auc": evaluate.zero_shot_global(trainer.model, world, test).macro_auc,
            "local_auc": evaluate.zero_shot_local(trainer.model, world, test).macro_auc,
            "recall_at_5": evaluate.report_retrieval(trainer.model, world, test).recall_at[5],
            "grounding_top10": evaluate.region_grounding(
                trainer.model, world, test).extra["top10_accuracy"],
            "attention_stat": evaluate.attention_region_statistic(
                trainer.model, world, test),
        }
    out["train_seconds"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# Criterion 1: gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    done, worst = run_standard_checks(n_checks=100, seed=0, tol=1e-5)
    assert done >= 100
    assert worst < 1e-5

    # Full composite objective through normalization and the temperature.
    rng = np.random.default_rng(41)
    n, r, d = 3, 2, 6

    def leaf(shape):
        return Tensor(rng.standard_normal(shape) * 0.5,
                      requires_grad=True, dtype=np.float64)

    valid = np.array([[True, True, False], [True, True, True]])
    leaves = [leaf((n, d)), leaf((n, d)), leaf((r, n, d)), leaf((r, n, d)),
              leaf((n, d)), leaf((r, n, d)),
              Tensor(np.log(0.2), requires_grad=True, dtype=np.float64)]

    def f(vg, tg, vr, tr, gnn, rnn, logit):
        bundle = losses.combined_loss(
            ad.l2_normalize(vg), ad.l2_normalize(tg), ad.l2_normalize(vr),
            ad.l2_normalize(tr), valid, ad.l2_normalize(gnn),
            ad.l2_normalize(rnn), losses.Temperature(logit))
        return bundle.total_tensor

    check_gradients(f, leaves, tol=1e-5)
    assert time.perf_counter() - t0 < 120


# ---------------------------------------------------------------------------
# Criterion 2: loss-formula oracles
# ---------------------------------------------------------------------------

def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(7)
    for _ in range(5):
        n = int(rng.integers(2, 9))
        r = int(rng.integers(1, 5))
        tau = float(rng.uniform(0.05, 0.5))
        v_g, t_g, t_gnn = (unit_rows(rng, n, 8) for _ in range(3))
        v_r, t_r, t_rnn = (np.stack([unit_rows(rng, n, 8) for _ in range(r)])
                           for _ in range(3))
        valid = rng.random((r, n)) < 0.8
        valid[:, 0] = True  # every region keeps at least one valid sample
        bundle = losses.combined_loss(
            Tensor(v_g, dtype=np.float64), Tensor(t_g, dtype=np.float64),
            Tensor(v_r, dtype=np.float64), Tensor(t_r, dtype=np.float64), valid,
            Tensor(t_gnn, dtype=np.float64), Tensor(t_rnn, dtype=np.float64),
            losses.Temperature.fixed(tau, dtype=np.float64))
        lg = 0.5 * (ref_info_nce(v_g, t_g, tau) + ref_info_nce(t_g, v_g, tau))
        ll = 0.5 * (ref_local(v_r, t_r, valid, tau) + ref_local(t_r, v_r, valid, tau))
        lgs = ref_info_nce(v_g, t_gnn, tau) + ref_info_nce(t_gnn, v_g, tau)
        lls = ref_local(v_r, t_rnn, valid, tau) + ref_local(t_rnn, v_r, valid, tau)
        assert bundle.global_align == pytest.approx(lg, abs=1e-6)
        assert bundle.local_align == pytest.approx(ll, abs=1e-6)
        assert bundle.multiscale == pytest.approx(0.5 * (lg + ll), abs=1e-6)
        assert bundle.global_semantic == pytest.approx(lgs, abs=1e-6)
        assert bundle.local_semantic == pytest.approx(lls, abs=1e-6)
        assert bundle.total == pytest.approx(0.5 * (lg + ll) + lgs + lls, abs=1e-6)

    # Exact identities.
    one = Tensor(unit_rows(np.random.default_rng(8), 1, 8), dtype=np.float64)
    temp = losses.Temperature.fixed(0.07, dtype=np.float64)
    assert losses.info_nce(one, one, temp).item() == pytest.approx(0.0)
    row = unit_rows(np.random.default_rng(9), 1, 8)
    same = Tensor(np.repeat(row, 6, axis=0), dtype=np.float64)
    assert losses.global_loss(same, same, temp).item() == pytest.approx(
        np.log(6), abs=1e-9)
    assert losses.global_semantic_loss(same, same, temp).item() == pytest.approx(
        2 * np.log(6), abs=1e-9)


# ---------------------------------------------------------------------------
# Criterion 3: trained InfoNCE bound on discrete toys
# ---------------------------------------------------------------------------

def test_criterion_3_mi_bound_suite():
    t0 = time.perf_counter()
    log8 = np.log(8)
    for seed in range(5):
        res = mi.infonce_bound_check(mi.diagonal_joint(8), n=8,
                                     n_batches=2000, seed=seed)
        assert log8 - 0.3 <= res.bound <= log8 + 1e-6, (seed, res.bound)
        assert res.bound <= res.true_mi + 0.05
    res = mi.infonce_bound_check(
        mi.independent_joint(np.ones(8), np.ones(8)), n=8, n_batches=2000, seed=0)
    assert res.bound < 0.1
    assert time.perf_counter() - t0 < 300


# ---------------------------------------------------------------------------
# Criterion 4: chain-rule inequality by exact enumeration
# ---------------------------------------------------------------------------

def test_criterion_4_chain_rule_200_random_joints():
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    for _ in range(200):
        shape = tuple(rng.integers(2, 7, size=4))
        res = mi.chain_rule_check(mi.random_joint(rng, shape))
        assert res.margin >= -1e-9, res
        assert res.holds
    assert time.perf_counter() - t0 < 60


# ---------------------------------------------------------------------------
# Criterion 5: directional ablation (Table-1/Table-4 pattern)
# ---------------------------------------------------------------------------

def test_criterion_5_runtime_budget(ablation):
    assert ablation["train_seconds"] < 1200


def test_criterion_5a_local_auc(ablation):
    ms, gl, lo = (ablation[m]["local_auc"]
                  for m in ("multiscale_semantic", "global_only", "local_only"))
    assert ms >= gl + 0.05, (ms, gl)
    assert ms >= lo - 0.02, (ms, lo)


def test_criterion_5b_report_retrieval(ablation):
    ms, gl, lo = (ablation[m]["recall_at_5"]
                  for m in ("multiscale_semantic", "global_only", "local_only"))
    assert ms >= lo + 0.05, (ms, lo)
    assert ms >= gl - 0.02, (ms, gl)


def test_criterion_5c_semantic_helps_global_auc(ablation):
    ms = ablation["multiscale_semantic"]["global_auc"]
    mu = ablation["multiscale"]["global_auc"]
    assert ms >= mu + 0.02, (ms, mu)


def test_criterion_5d_grounding(ablation):
    ms = ablation["multiscale_semantic"]["grounding_top10"]
    gl = ablation["global_only"]["grounding_top10"]
    assert ms > gl, (ms, gl)


# ---------------------------------------------------------------------------
# Criterion 6: memory-bank exactness
# ---------------------------------------------------------------------------

def test_criterion_6_bank_replay_and_retrieval():
    rng = np.random.default_rng(23)
    # Random (capacity, batch-sequence) replays against the line-by-line rule.
    for _ in range(50):
        cap = int(rng.integers(1, 33))
        dim = int(rng.integers(1, 6))
        batches = [unit_rows(rng, int(rng.integers(1, 9)), dim).astype(np.float32)
                   for _ in range(int(rng.integers(1, 12)))]
        bank = SemanticBank(cap, dim)
        for b in batches:
            bank.enqueue(b)
        store, ptr, filled = simulate(cap, batches)
        assert np.array_equal(bank.store, store)
        assert bank.ptr == ptr and bank.filled == filled

    # The spelled-out tail-fill / pointer-reset / remainder-drop case.
    bank = SemanticBank(8, 3)
    first = unit_rows(rng, 6, 3).astype(np.float32)
    bank.enqueue(first)
    assert bank.ptr == 6
    batch = unit_rows(rng, 4, 3).astype(np.float32)
    bank.enqueue(batch)
    assert bank.ptr == 0 and bank.filled == 8
    np.testing.assert_array_equal(bank.store[6], batch[0])
    np.testing.assert_array_equal(bank.store[7], batch[1])
    np.testing.assert_array_equal(bank.store[:6], first)  # remainder dropped

    # Retrieval vs. a linear-scan oracle on 1000 queries.
    bank = SemanticBank(256, 16)
    bank.enqueue(unit_rows(rng, 200, 16).astype(np.float32))
    queries = unit_rows(rng, 1000, 16).astype(np.float32)
    live = bank.store[:bank.filled]
    for q in queries:
        sims = live @ q
        best = int(np.argmax(sims))
        row, idx, sim = bank.query_top1(q)
        assert idx == best
        assert sim == sims[best]
        np.testing.assert_array_equal(row, live[best])
        order = np.argsort(-sims, kind="stable")[:5]
        got = [i for _, i, _ in bank.query_topk(q, 5)]
        np.testing.assert_array_equal(got, order)


# ---------------------------------------------------------------------------
# Criterion 7: pathway-sharing invariant
# ---------------------------------------------------------------------------

def test_criterion_7_full_mask_equals_global_over_50_inits():
    vcfg = VisionEncoderConfig(volume_shape=(16, 32, 32))
    tcfg = TextEncoderConfig(vocab_size=32)
    data_rng = np.random.default_rng(99)
    volumes = data_rng.standard_normal((2, 16, 32, 32)).astype(np.float32)
    for seed in range(50):
        model = AlignmentModel(vcfg, tcfg, np.random.default_rng(seed))
        g = model.vision.encode_global(volumes).data
        latent = model.vision.latent(volumes)
        full = np.ones((2, vcfg.num_tokens), dtype=bool)
        r = model.vision.encode_regions(latent, np.arange(2), full).data
        assert np.max(np.abs(g - r)) < 1e-5, seed


# ---------------------------------------------------------------------------
# Criterion 8: metric oracles
# ---------------------------------------------------------------------------

def ref_pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_criterion_8_metric_oracles(world):
    rng = np.random.default_rng(31)
    for _ in range(30):
        n = int(rng.integers(10, 201))
        scores = np.round(rng.standard_normal(n), 1)  # force ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert evaluate.auc_score(scores, labels) == pytest.approx(
            ref_pairwise_auc(scores, labels), abs=1e-9)

    # recall@K monotone in K, and recall@pool-size == 1, on an untrained model.
    _, test = World(WorldConfig(rng_seed=123)).build_splits(1, 500)
    model = Trainer(world, TrainConfig(seed=4)).model
    rep = evaluate.report_retrieval(model, world, test[:60],
                                    ks=(1, 5, 10, 30, 60))
    vals = [rep.recall_at[k] for k in (1, 5, 10, 30, 60)]
    assert vals == sorted(vals)
    assert vals[-1] == pytest.approx(1.0)

    # Untrained zero-shot is chance-level on 500 samples.
    auc = evaluate.zero_shot_global(model, world, test).macro_auc
    assert 0.45 <= auc <= 0.55, auc


# ---------------------------------------------------------------------------
# Criterion 9: determinism and bitwise resume
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_resume(tmp_path):
    world = World(WorldConfig(rng_seed=7))
    train, _ = world.build_splits(24, 4)
    cfg = dict(steps=20, warmup_steps=2, batch_size=4, bank_capacity=64, seed=9)

    a = Trainer(world, TrainConfig(**cfg))
    a.run(train)
    b = Trainer(world, TrainConfig(**cfg))
    b.run(train)
    for k, p in a.model.named_params().items():
        assert p.data.tobytes() == b.model.named_params()[k].data.tobytes(), k

    # Interrupt at step 8, checkpoint, resume, and compare bitwise.
    c = Trainer(world, TrainConfig(**cfg))
    c.run(train, steps=8)
    save_checkpoint(tmp_path / "half.mv3d", c)
    d = load_checkpoint(tmp_path / "half.mv3d")
    d.run(train)
    assert d.step_count == a.step_count == 20
    for k, p in a.model.named_params().items():
        assert p.data.tobytes() == d.model.named_params()[k].data.tobytes(), k
    for k in a.moments_m:
        assert a.moments_m[k].tobytes() == d.moments_m[k].tobytes()
        assert a.moments_v[k].tobytes() == d.moments_v[k].tobytes()
    assert a.bank.store.tobytes() == d.bank.store.tobytes()
    assert (a.bank.ptr, a.bank.filled) == (d.bank.ptr, d.bank.filled)


# ---------------------------------------------------------------------------
# Criterion 10: attention sanity
# ---------------------------------------------------------------------------

def test_criterion_10_attention_prefers_planted_region(ablation):
    assert ablation["multiscale_semantic"]["attention_stat"] >= 0.70
