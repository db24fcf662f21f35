"""Central finite-difference checking for the autodiff ops.

The oracle perturbs raw numpy buffers and re-runs the forward function, so it
is independent of the analytic gradient rules it checks.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


def numeric_gradient(f, tensors, index, eps=1e-4):
    """d f / d tensors[index] by central differences on the raw buffer."""
    t = tensors[index]
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(*tensors).data)
        flat[i] = orig - eps
        lo = float(f(*tensors).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def analytic_gradients(f, tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        out = f(*tensors)
        tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a, b):
    num = np.abs(a - b).max()
    den = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return num / den


def check_gradients(f, tensors, eps=1e-4, tol=1e-5):
    """Compare analytic vs central-difference gradients for a scalar-valued f.

    Returns the worst relative error over all inputs; raises AssertionError
    if it exceeds ``tol``.
    """
    analytic = analytic_gradients(f, tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        numeric = numeric_gradient(f, tensors, i, eps=eps)
        err = relative_error(analytic[i].astype(np.float64), numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch on input {i}: rel err {err:.3g} >= {tol}"
    return worst


def param64(rng, shape, scale=0.5):
    """Random float64 leaf tensor for gradient-check fixtures."""
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _weighted_sum(rng, expr_fn):
    """Wrap a tensor-valued op into a scalar via a fixed random weighting."""
    w_holder = {}

    def f(*tensors):
        out = expr_fn(*tensors)
        if "w" not in w_holder:
            w_holder["w"] = Tensor(rng.standard_normal(out.shape),
                                   dtype=np.float64)
        from . import autodiff as ad
        return ad.sum_(ad.mul(out, w_holder["w"]))

    return f


def standard_check_cases(rng):
    """Scenario builders for randomized finite-difference checks.

    Each call yields (name, scalar function, leaf tensors). Shapes are
    drawn fresh per invocation.
    """
    from . import autodiff as ad
    from .losses import Temperature, info_nce

    def dims(lo=1, hi=5, k=2):
        return tuple(int(rng.integers(lo, hi + 1)) for _ in range(k))

    cases = []
    m, n = dims()
    cases.append(("add_broadcast",
                  _weighted_sum(rng, lambda a, b: ad.add(a, b)),
                  [param64(rng, (m, n)), param64(rng, (n,))]))
    cases.append(("sub", _weighted_sum(rng, lambda a, b: ad.sub(a, b)),
                  [param64(rng, (m, n)), param64(rng, (m, n))]))
    cases.append(("mul_broadcast",
                  _weighted_sum(rng, lambda a, b: ad.mul(a, b)),
                  [param64(rng, (m, n)), param64(rng, (m, 1))]))
    cases.append(("scale", _weighted_sum(rng, lambda a: ad.scale(a, 1.7)),
                  [param64(rng, (m, n))]))
    cases.append(("exp", _weighted_sum(rng, ad.exp), [param64(rng, (m, n))]))
    pos = param64(rng, (m, n))
    pos.data = np.abs(pos.data) + 0.5
    cases.append(("log", _weighted_sum(rng, ad.log), [pos]))
    cases.append(("gelu", _weighted_sum(rng, ad.gelu),
                  [param64(rng, (m, n), scale=1.5)]))
    p, q, r = dims(2, 4, 3)
    cases.append(("matmul", _weighted_sum(rng, ad.matmul),
                  [param64(rng, (p, q)), param64(rng, (q, r))]))
    cases.append(("matmul_batched", _weighted_sum(rng, ad.matmul),
                  [param64(rng, (2, p, q)), param64(rng, (2, q, r))]))
    cases.append(("transpose_reshape",
                  _weighted_sum(rng, lambda a: ad.reshape(
                      ad.transpose(a, (1, 0, 2)), (q * p, r))),
                  [param64(rng, (p, q, r))]))
    cases.append(("concat",
                  _weighted_sum(rng, lambda a, b: ad.concat([a, b], axis=0)),
                  [param64(rng, (m, n)), param64(rng, (m + 1, n))]))
    idx = rng.integers(0, m, size=(m + 2,))
    cases.append(("gather_rows",
                  _weighted_sum(rng, lambda a: ad.gather_rows(a, idx)),
                  [param64(rng, (m, n))]))
    cases.append(("sum_axis",
                  _weighted_sum(rng, lambda a: ad.sum_(a, axis=0)),
                  [param64(rng, (m, n))]))
    cases.append(("mean_pool",
                  _weighted_sum(rng, lambda a: ad.mean_pool(a, 1)),
                  [param64(rng, (m, n + 1))]))
    cases.append(("softmax",
                  _weighted_sum(rng, lambda a: ad.softmax(a, axis=-1)),
                  [param64(rng, (m, n + 1), scale=2.0)]))
    cases.append(("log_softmax",
                  _weighted_sum(rng, lambda a: ad.log_softmax(a, axis=-1)),
                  [param64(rng, (m, n + 1), scale=2.0)]))
    g = param64(rng, (n + 2,), scale=0.2)
    g.data += 1.0
    cases.append(("layer_norm",
                  _weighted_sum(rng, lambda a, gg, bb: ad.layer_norm(a, gg, bb)),
                  [param64(rng, (m, n + 2)), g, param64(rng, (n + 2,), 0.2)]))
    big = param64(rng, (m, n + 1))
    big.data += np.sign(big.data) * 0.5  # keep norms well away from zero
    cases.append(("l2_normalize", _weighted_sum(rng, ad.l2_normalize), [big]))

    def nce(a, b):
        temp = Temperature.fixed(0.2, dtype=np.float64)
        return info_nce(ad.l2_normalize(a), ad.l2_normalize(b), temp)

    cases.append(("info_nce_composite", nce,
                  [param64(rng, (3, 4), 1.0), param64(rng, (3, 4), 1.0)]))
    return cases


def run_standard_checks(n_checks: int = 100, seed: int = 0, tol: float = 1e-5):
    """Randomized finite-difference sweep; returns (cases run, worst rel err)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_checks:
        for name, f, tensors in standard_check_cases(rng):
            err = check_gradients(f, tensors, tol=tol)
            worst = max(worst, err)
            done += 1
            if done >= n_checks:
                break
    return done, worst
