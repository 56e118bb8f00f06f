"""Self-checks run by ``opreg verify``: gradients, adjoints, solver and sampler oracles,
merge equivalence and the decoder-fits-dot-product experiment.

Every check runs even if an earlier one fails; each returns a :class:`CheckResult`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .darcy import GRFSpec, generate_fields, poisson_series, pushforward, sample_grf, solve_darcy
from .layers import Adam, Conv2D, Conv2DTranspose, Dense, Dropout, Flatten, build_network, forward
from .models import (
    CartesianProduct,
    DotProduct,
    OperatorModel,
    cartesian_merge,
    compute_pod_modes,
    decoder_merge,
    dot_merge,
    make_batch,
    model_forward,
    mse_loss,
    multi_decoder_merge,
    pod_merge,
)
from .data import OperatorDataset

GRAD_TOL = 1e-5
ADJOINT_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    # a random linear functional keeps every gradient entry O(1)
    return ad.sum(out * Tensor(w))


def gradient_cases(seed: int = 0) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """Scalar functions covering every layer kind, merge and the loss."""
    rng = np.random.default_rng(seed)

    def t(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale)

    w_dense = rng.standard_normal((3, 4))
    w_conv = rng.standard_normal((2, 2, 3, 4))
    w_convt = rng.standard_normal((2, 6, 6, 3))
    w_convt2 = rng.standard_normal((1, 6, 10, 2))
    w_merge = rng.standard_normal((3, 5))
    mask_seed = int(rng.integers(1 << 31))

    def dense(x, k, b):
        return _weighted_sum(ad.relu(x @ k + b), w_dense)

    def conv(x, k, b):
        return _weighted_sum(ad.conv2d(x, k, b, stride=(2, 1)), w_conv)

    def conv_t(x, k, b):
        return _weighted_sum(ad.conv2d_transpose(x, k, b, stride=(2, 2)), w_convt)

    def conv_t_strided(x, k):
        # kernel smaller than the stride, as in the airfoil decoders
        return _weighted_sum(ad.conv2d_transpose(x, k, stride=(2, 5)), w_convt2)

    def flatten_dropout(x):
        out = ad.dropout(ad.reshape(x, (2, -1)), 0.3, True, np.random.default_rng(mask_seed))
        return _weighted_sum(out, np.arange(24, dtype=float).reshape(2, 12) / 10)

    def dot(b, tr):
        return _weighted_sum(dot_merge(b, tr, 0.3), w_merge[:, :1])

    def cart(b, tr):
        return _weighted_sum(cartesian_merge(b, tr, 0.3), w_merge)

    modes = np.linalg.qr(rng.standard_normal((5, 2)))[0]
    pod_mean = rng.standard_normal(5)

    def pod(b, tr):
        return _weighted_sum(pod_merge(b, tr, pod_mean, modes), w_merge)

    dec = build_network([Flatten(), Dense(6, "relu"), Dense(5)], (2, 4), seed=seed)
    mdec = build_network([Flatten(), Dense(6, "relu"), Dense(5)], (3, 4), seed=seed + 1)

    net = build_network(
        [Conv2D(3, (2, 2), (1, 1), "relu"), Conv2DTranspose(2, (2, 2), (2, 2), "relu"), Flatten(), Dropout(0.2), Dense(3)],
        (3, 3, 1),
        seed=seed + 2,
    )

    def network(x):
        out = forward(net, x, training=True, rng=np.random.default_rng(mask_seed))
        return _weighted_sum(out, w_merge[:2, :3])

    def decoder_api(b, tr):
        return _weighted_sum(decoder_merge(b, tr, dec, 5), w_merge)

    def multi(b, a, tr):
        return _weighted_sum(multi_decoder_merge(b, a, tr, mdec, 5), w_merge)

    def loss(p, y):
        return mse_loss(p, y)

    return {
        "dense+relu": (dense, [t(3, 5), t(5, 4), t(4)]),
        "conv2d": (conv, [t(2, 5, 4, 3), t(2, 2, 3, 4), t(4)]),
        "conv2d_transpose": (conv_t, [t(2, 3, 3, 2), t(3, 3, 3, 2), t(3)]),
        "conv2d_transpose(k<s)": (conv_t_strided, [t(1, 3, 2, 1), t(2, 2, 2, 1)]),
        "flatten+dropout": (flatten_dropout, [t(2, 3, 4)]),
        "dot merge": (dot, [t(3, 4), t(3, 4)]),
        "cartesian merge": (cart, [t(3, 4), t(5, 4)]),
        "pod merge": (pod, [t(3, 5), t(5, 3)]),
        "network conv/convT/flatten/dropout/dense": (network, [t(2, 3, 3, 1)]),
        "decoder merge": (decoder_api, [t(3, 4), t(3, 4)]),
        "multi-decoder merge": (multi, [t(3, 4), t(1, 4), t(3, 4)]),
        "mse loss": (loss, [t(4, 3), t(4, 3)]),
    }


def check_gradients(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (fn, inputs) in gradient_cases(seed).items():
        t0 = time.perf_counter()
        try:
            err = grad_check(fn, inputs, eps=1e-5)
        except Exception as exc:
            out.append(CheckResult(f"grad {name}", False, f"raised {type(exc).__name__}: {exc}"))
            continue
        out.append(CheckResult(f"grad {name}", err < GRAD_TOL, f"max rel err {err:.2e} (tol {GRAD_TOL:g})", time.perf_counter() - t0))
    return out


def adjoint_error(kernel: tuple[int, int], stride: tuple[int, int], seed: int = 0) -> float:
    """``|<T x, y> - <x, T* y>| / (|<T x, y>| + tiny)`` for T = transposed conv, T* its input gradient."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 3, 3))
    k = rng.standard_normal(kernel + (2, 3))
    out = ad.conv2d_transpose(Tensor(x), Tensor(k), stride=stride)
    y = rng.standard_normal(out.shape)
    lhs = float(np.sum(out.data * y))
    # T* y: gradient of <T x, y> w.r.t. x, which must be a plain strided conv of y
    xt = Tensor(x, requires_grad=True)
    ad.backward(ad.sum(ad.conv2d_transpose(xt, Tensor(k), stride=stride) * Tensor(y)))
    rhs = float(np.sum(x * xt.grad))
    # independently: forward conv is the adjoint of transposed conv
    pad = [max(kk - s, 0) for kk, s in zip(kernel, stride)]
    padding = tuple((p // 2, p - p // 2) for p in pad)
    conv_y = ad.conv2d(Tensor(y), Tensor(k), stride=stride, padding=padding).data
    rhs2 = float(np.sum(x * conv_y))
    scale = abs(lhs) + 1e-300
    return max(abs(lhs - rhs) / scale, abs(lhs - rhs2) / scale)


def check_adjoints() -> list[CheckResult]:
    out = []
    for kernel, stride in (((2, 2), (5, 5)), ((3, 3), (2, 2)), ((5, 5), (2, 2)), ((3, 5), (3, 3)), ((2, 2), (1, 1))):
        t0 = time.perf_counter()
        err = adjoint_error(kernel, stride)
        out.append(
            CheckResult(f"adjoint k={kernel} s={stride}", err < ADJOINT_TOL, f"rel err {err:.1e}", time.perf_counter() - t0)
        )
    return out


def check_poisson(resolution: int = 61, fields: int = 100, field_resolution: int = 29, seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    h = solve_darcy(np.ones((resolution, resolution)))
    mid = (resolution - 1) // 2
    oracle = float(poisson_series(0.5, 0.5))
    rel = abs(h[mid, mid] - oracle) / oracle
    res = [CheckResult("poisson oracle", rel < 2e-3, f"h(0.5,0.5)={h[mid, mid]:.8f} vs {oracle:.8f}, rel {rel:.1e}", time.perf_counter() - t0)]
    t0 = time.perf_counter()
    bad = 0
    for f in generate_fields(field_resolution, fields, seed):
        interior = f.h[1:-1, 1:-1]
        border = np.concatenate([f.h[0], f.h[-1], f.h[:, 0], f.h[:, -1]])
        if not (np.all(interior > 0) and np.all(border == 0)):
            bad += 1
    res.append(CheckResult("maximum principle", bad == 0, f"{fields - bad}/{fields} fields positive inside, zero on boundary", time.perf_counter() - t0))
    return res


def grf_variance(samples: int = 10_000, resolution: int = 61, modes: int = 32, seed: int = 0) -> tuple[float, float, set]:
    """(spatially averaged sample variance, sum of eigenvalues, push-forward value set)."""
    spec = GRFSpec(resolution=resolution, modes=modes)
    rng = np.random.default_rng(seed)
    acc = np.zeros((resolution, resolution))
    values: set = set()
    for _ in range(samples):
        mu = sample_grf(spec, rng)
        acc += mu * mu
        values |= set(np.unique(pushforward(mu)).tolist())
    return float(acc.mean() / samples), float(spec.eigenvalues().sum()), values


def check_grf(samples: int = 10_000) -> list[CheckResult]:
    t0 = time.perf_counter()
    var, target, values = grf_variance(samples)
    rel = abs(var - target) / target
    secs = time.perf_counter() - t0
    return [
        CheckResult("grf variance", rel < 0.05, f"mean variance {var:.5e} vs sum lambda {target:.5e}, rel {rel:.2%}", secs),
        CheckResult("pushforward values", values <= {3.0, 12.0}, f"values {sorted(values)}", 0.0),
    ]


def cartesian_prod_gap(n: int = 8, big_k: int = 25, p: int = 10, seed: int = 0) -> float:
    """Max difference between Cartesian-merge and dot-merge (prod layout) predictions, shared weights."""
    rng = np.random.default_rng(seed)
    ds = OperatorDataset("aligned", rng.standard_normal((n, 6)), rng.random((big_k, 2)), rng.standard_normal((n, big_k)))
    branch = build_network([Dense(16, "relu"), Dense(p)], (6,), seed=seed + 1)
    trunk = build_network([Dense(16, "relu"), Dense(p)], (2,), seed=seed + 2)
    cart = OperatorModel("deeponet-cart", branch, trunk, CartesianProduct())
    dot = OperatorModel("deeponet", branch, trunk, DotProduct(b0=cart.merge.b0))
    cart.merge.b0.data = np.array([0.37])
    a = model_forward(cart, make_batch(ds)).data
    b = model_forward(dot, make_batch(ds.prod())).data.reshape(n, big_k)
    return float(np.max(np.abs(a - b)))


def check_cartesian_prod() -> list[CheckResult]:
    t0 = time.perf_counter()
    gap = cartesian_prod_gap()
    return [CheckResult("cartesian/prod equivalence", gap < 1e-12, f"max diff {gap:.1e}", time.perf_counter() - t0)]


def dot_product_fit(steps: int = 2000, lr: float = 5e-3, batch: int = 1024, seed: int = 0, dim: int = 4) -> float:
    """Train a dense net on ``(b, t) -> b . t`` over ``[-1, 1]^(2 dim)``; return held-out MSE."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (50_000, 2 * dim))
    y = np.sum(x[:, :dim] * x[:, dim:], axis=1, keepdims=True)
    xt = rng.uniform(-1, 1, (10_000, 2 * dim))
    yt = np.sum(xt[:, :dim] * xt[:, dim:], axis=1, keepdims=True)
    net = build_network([Dense(64, "relu"), Dense(64, "relu"), Dense(1)], (2 * dim,), seed=seed + 1)
    opt = Adam(net.params, lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(x), batch)
        loss = mse_loss(forward(net, Tensor(x[idx]), True), y[idx])
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    return float(np.mean((forward(net, Tensor(xt)).data - yt) ** 2))


def check_dot_product_fit() -> list[CheckResult]:
    t0 = time.perf_counter()
    mse = dot_product_fit()
    return [CheckResult("decoder fits dot product", mse < 1e-3, f"held-out MSE {mse:.2e} after 2000 Adam steps", time.perf_counter() - t0)]


def check_pod(seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    labels = rng.standard_normal((30, 12)) @ rng.standard_normal((12, 40))
    mean, modes, _ = compute_pod_modes(labels, 12)
    ortho = float(np.max(np.abs(modes.T @ modes - np.eye(12))))
    recon = mean + (labels - mean) @ modes @ modes.T
    rerr = float(np.max(np.abs(recon - labels)) / np.max(np.abs(labels)))
    secs = time.perf_counter() - t0
    return [
        CheckResult("pod orthonormality", ortho < 1e-10, f"max |V'V - I| {ortho:.1e}", secs),
        CheckResult("pod full-rank reconstruction", rerr < 1e-8, f"max rel err {rerr:.1e}", 0.0),
    ]


CHECKS: dict[str, Callable[[], list[CheckResult]]] = {
    "gradients": check_gradients,
    "adjoints": check_adjoints,
    "poisson": check_poisson,
    "grf": check_grf,
    "cartesian-prod": check_cartesian_prod,
    "pod": check_pod,
    "dot-product-fit": check_dot_product_fit,
}


def run_all(only: list[str] | None = None, report: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run every check (or the named subset) without stopping at failures."""
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        try:
            batch = fn()
        except Exception as exc:  # a crashing check is a failed check, keep going
            batch = [CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")]
        for r in batch:
            results.append(r)
            if report:
                report(r.line())
    return results
