"""
plaincnn Verification Suites
Finite-difference gradient checks for every layer and a tiny end-to-end
model, plus oracle-equivalence checks for the tensor kernels. Everything
runs in float64.

Each check returns its worst relative error (per element for gradients,
scaled by magnitude for the oracles); a check passes
when that error is at or below its threshold. Oracle checks that must be
bit-exact have threshold 0.
"""

import numpy as np
import pandas as pd

from nn import (
    ArchitectureSpec,
    LayerDesc,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    init_parameters,
    maxpool2x2_backward,
    maxpool2x2_forward,
    model_backward,
    model_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)
from tensor import VERIFY_DTYPE, col2im, im2col, make_rng, matmul


STEP = 1e-5
LAYER_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-12
# Elements whose true gradient is this small are compared on an absolute scale.
REL_FLOOR = 1e-6

PERTURB_FACTOR = 1.01


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def numerical_gradient(f, x, step=STEP):
    """Central differences of scalar f() with respect to every element of x (modified in place, then restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        plus = f()
        flat[k] = old - step
        minus = f()
        flat[k] = old
        gflat[k] = (plus - minus) / (2 * step)
    return grad


def max_rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def normwise_error(got, expected):
    """Largest absolute difference relative to the largest expected magnitude."""
    got = np.asarray(got, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if not expected.size:
        return 0.0
    return float(np.max(np.abs(got - expected)) / max(float(np.max(np.abs(expected))), REL_FLOOR))


def _maybe_perturb(name, perturb, *arrays):
    if perturb != name:
        return arrays if len(arrays) > 1 else arrays[0]
    out = tuple(a * PERTURB_FACTOR for a in arrays)
    return out if len(out) > 1 else out[0]


def _randn(rng, *shape):
    return rng.standard_normal(shape).astype(VERIFY_DTYPE)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def matmul_oracle(a, b):
    """Scalar triple loop, summing left to right over k."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def im2col_oracle(x):
    """Build every im2col column by direct indexing with explicit bounds checks."""
    n, c, h, w = x.shape
    cols = np.zeros((c * 9, n * h * w), dtype=x.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                col = (b * h + i) * w + j
                for ch in range(c):
                    for u in range(3):
                        for v in range(3):
                            y, xx = i + u - 1, j + v - 1
                            if 0 <= y < h and 0 <= xx < w:
                                cols[(ch * 3 + u) * 3 + v, col] = x[b, ch, y, xx]
    return cols


def conv_oracle(x, w, b):
    """Six nested loops over a zero-padded input."""
    n, c, h, wd = x.shape
    oc = w.shape[0]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, oc, h, wd), dtype=np.float64)
    for bi in range(n):
        for o in range(oc):
            for i in range(h):
                for j in range(wd):
                    s = float(b[o])
                    for ch in range(c):
                        for u in range(3):
                            for v in range(3):
                                s += w[o, ch, u, v] * padded[bi, ch, i + u, j + v]
                    out[bi, o, i, j] = s
    return out


def _random_shape(rng, max_n=2, max_c=4, max_hw=8):
    return (
        int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_c + 1)),
        int(rng.integers(1, max_hw + 1)), int(rng.integers(1, max_hw + 1)),
    )


def check_matmul(rng, perturb=None, draws=30):
    worst = 0.0
    for _ in range(draws):
        m, k, n = (int(v) for v in rng.integers(1, 9, size=3))
        a, b = _randn(rng, m, k), _randn(rng, k, n)
        got = _maybe_perturb("matmul", perturb, matmul(a, b))
        worst = max(worst, float(np.max(np.abs(got - matmul_oracle(a, b)))))
    return worst


def check_im2col(rng, perturb=None, draws=20):
    worst = 0.0
    for _ in range(draws):
        x = _randn(rng, *_random_shape(rng, max_hw=6))
        got = _maybe_perturb("im2col", perturb, im2col(x))
        worst = max(worst, float(np.max(np.abs(got - im2col_oracle(x)))))
    return worst


def check_col2im(rng, perturb=None, draws=100):
    """Adjointness: <im2col(x), y> == <x, col2im(y)>."""
    worst = 0.0
    for _ in range(draws):
        shape = _random_shape(rng)
        x = _randn(rng, *shape)
        y = _randn(rng, shape[1] * 9, shape[0] * shape[2] * shape[3])
        products = im2col(x) * y
        lhs = float(np.sum(products))
        rhs = float(np.sum(x * _maybe_perturb("col2im", perturb, col2im(y, shape))))
        # Scaled by the summed magnitudes so a near-zero inner product stays well conditioned.
        worst = max(worst, abs(lhs - rhs) / max(float(np.sum(np.abs(products))), REL_FLOOR))
    return worst


def check_conv_oracle(rng, perturb=None, draws=50):
    worst = 0.0
    for _ in range(draws):
        shape = _random_shape(rng)
        oc = int(rng.integers(1, 5))
        x, w, b = _randn(rng, *shape), _randn(rng, oc, shape[1], 3, 3), _randn(rng, oc)
        got = _maybe_perturb("conv_oracle", perturb, conv2d_forward(x, w, b))
        worst = max(worst, normwise_error(got, conv_oracle(x, w, b)))
    return worst


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------

def check_conv(rng, perturb=None):
    x, w, b = _randn(rng, 2, 2, 4, 5), _randn(rng, 3, 2, 3, 3), _randn(rng, 3)
    proj = _randn(rng, 2, 3, 4, 5)

    def loss():
        return float(np.sum(conv2d_forward(x, w, b) * proj))

    dx, dw, db = _maybe_perturb("conv", perturb, *conv2d_backward(x, w, proj))
    return max(
        max_rel_error(dx, numerical_gradient(loss, x)),
        max_rel_error(dw, numerical_gradient(loss, w)),
        max_rel_error(db, numerical_gradient(loss, b)),
    )


def check_pool(rng, perturb=None):
    # Distinct values 0.01 apart keep every argmax stable under the step.
    shape = (2, 2, 4, 6)
    x = (rng.permutation(int(np.prod(shape))) * 0.01).reshape(shape).astype(VERIFY_DTYPE)
    proj = _randn(rng, 2, 2, 2, 3)

    def loss():
        return float(np.sum(maxpool2x2_forward(x)[0] * proj))

    _, idx = maxpool2x2_forward(x)
    dx = _maybe_perturb("pool", perturb, maxpool2x2_backward(proj, idx, x.shape))
    return max_rel_error(dx, numerical_gradient(loss, x))


def check_relu(rng, perturb=None):
    # Keep inputs away from the kink.
    x = (np.sign(_randn(rng, 3, 4, 5)) * (0.1 + rng.random((3, 4, 5)))).astype(VERIFY_DTYPE)
    proj = _randn(rng, 3, 4, 5)

    def loss():
        return float(np.sum(relu_forward(x) * proj))

    dx = _maybe_perturb("relu", perturb, relu_backward(proj, x))
    return max_rel_error(dx, numerical_gradient(loss, x))


def check_dropout(rng, perturb=None):
    worst = 0.0
    for mode in ("regular", "spatial"):
        x = _randn(rng, 2, 3, 4, 4)
        proj = _randn(rng, 2, 3, 4, 4)
        _, mask = dropout_forward(x, 0.4, mode, rng, True)

        def loss():
            return float(np.sum(x * mask * proj))

        dx = _maybe_perturb("dropout", perturb, dropout_backward(proj, mask))
        worst = max(worst, max_rel_error(dx, numerical_gradient(loss, x)))
    return worst


def check_dense(rng, perturb=None):
    x, w, b = _randn(rng, 4, 6), _randn(rng, 6, 3), _randn(rng, 3)
    proj = _randn(rng, 4, 3)

    def loss():
        return float(np.sum(dense_forward(x, w, b) * proj))

    dx, dw, db = _maybe_perturb("dense", perturb, *dense_backward(x, w, proj))
    return max(
        max_rel_error(dx, numerical_gradient(loss, x)),
        max_rel_error(dw, numerical_gradient(loss, w)),
        max_rel_error(db, numerical_gradient(loss, b)),
    )


def check_softmax(rng, perturb=None):
    logits = _randn(rng, 5, 10) * 2
    labels = rng.integers(0, 10, size=5)

    def loss():
        return softmax_cross_entropy(logits, labels)[0]

    _, probs = softmax_cross_entropy(logits, labels)
    d = _maybe_perturb("softmax", perturb, softmax_cross_entropy_backward(probs, labels, 5))
    return max_rel_error(d, numerical_gradient(loss, logits))


TINY_MODEL = ArchitectureSpec("gradcheck-tiny", (1, 4, 4), (
    LayerDesc("conv", size=2),
    LayerDesc("relu"),
    LayerDesc("conv", size=2),
    LayerDesc("relu"),
    LayerDesc("pool"),
    LayerDesc("dropout", rate=0.25, mode="regular"),
    LayerDesc("flatten"),
    LayerDesc("softmax", size=3),
))


# Dense hidden layer, spatial dropout and a batch of two.
TINY_FC_MODEL = ArchitectureSpec("gradcheck-tiny-fc", (2, 4, 4), (
    LayerDesc("conv", size=3),
    LayerDesc("relu"),
    LayerDesc("dropout", rate=0.25, mode="spatial"),
    LayerDesc("pool"),
    LayerDesc("flatten"),
    LayerDesc("dense", size=5),
    LayerDesc("relu"),
    LayerDesc("dropout", rate=0.4, mode="regular"),
    LayerDesc("softmax", size=3),
))


def check_model(rng, perturb=None, spec=TINY_MODEL, n=1, name="model"):
    """Every parameter gradient of the full loss, dropout masks held fixed."""
    params = init_parameters(spec, rng, dtype=VERIFY_DTYPE)
    for p in params.values():
        p["b"] += 0.1 * rng.standard_normal(p["b"].shape)
    x = _randn(rng, n, *spec.input_shape)
    labels = rng.integers(0, spec.output_classes, size=n)

    logits, cache = model_forward(spec, params, x, training=True, rng=rng)
    masks = cache.masks
    _, probs = softmax_cross_entropy(logits, labels)
    grads = model_backward(spec, params, cache, softmax_cross_entropy_backward(probs, labels, n))

    def loss():
        out, _ = model_forward(spec, params, x, training=True, masks=masks)
        return softmax_cross_entropy(out, labels)[0]

    worst = 0.0
    for i, p in params.items():
        for key, value in p.items():
            g = _maybe_perturb(name, perturb, grads[i][key])
            worst = max(worst, max_rel_error(g, numerical_gradient(loss, value)))
    return worst


def check_model_fc(rng, perturb=None):
    return check_model(rng, perturb, spec=TINY_FC_MODEL, n=2, name="model_fc")


CHECKS = {
    "matmul": (check_matmul, 0.0),
    "im2col": (check_im2col, 0.0),
    "col2im": (check_col2im, ORACLE_TOLERANCE),
    "conv_oracle": (check_conv_oracle, ORACLE_TOLERANCE),
    "conv": (check_conv, LAYER_TOLERANCE),
    "pool": (check_pool, LAYER_TOLERANCE),
    "relu": (check_relu, LAYER_TOLERANCE),
    "dropout": (check_dropout, LAYER_TOLERANCE),
    "dense": (check_dense, LAYER_TOLERANCE),
    "softmax": (check_softmax, LAYER_TOLERANCE),
    "model": (check_model, MODEL_TOLERANCE),
    "model_fc": (check_model_fc, MODEL_TOLERANCE),
}


def run_checks(scope="all", perturb=None, seed=0, verbose=False):
    """
    Run one check (by name) or all of them. Returns a DataFrame with
    columns check, max_rel_error, threshold, passed.

    `perturb` names a check whose analytic result is scaled by 1.01; it
    exists so tests can confirm that a broken backward is caught.
    """
    if scope != "all" and scope not in CHECKS:
        raise ValueError(f"Unknown gradcheck scope {scope!r}; expected 'all' or one of {', '.join(CHECKS)}")
    names = list(CHECKS) if scope == "all" else [scope]
    rows = []
    for name in names:
        fn, threshold = CHECKS[name]
        err = fn(make_rng(seed), perturb=perturb)
        rows.append({"check": name, "max_rel_error": err, "threshold": threshold, "passed": err <= threshold})
        if verbose:
            print(f"  {name:12s} max rel error {err:.3e}  (threshold {threshold:.0e})  {'OK' if err <= threshold else 'FAIL'}")
    return pd.DataFrame(rows, columns=["check", "max_rel_error", "threshold", "passed"])
