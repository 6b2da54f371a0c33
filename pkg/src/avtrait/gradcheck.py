"""Central finite-difference verification of every analytic backward pass.

All checks run in float64 with h = 1e-5. Per-layer checks differentiate
every element; the whole-network check on the miniature configuration
samples a few elements per tensor (the full element count would be
needlessly slow without telling us more).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import backward, build_network, forward_train, mini_architecture, trainable_names

H = 1e-5
LAYER_TOL = 1e-5
NETWORK_TOL = 1e-4


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise |a - n| / max(|a| + |n|, 1e-4).

    The denominator floor keeps exact-zero gradients comparable: a bias
    that feeds batch norm has a true gradient of 0 (mean subtraction
    absorbs it), and dividing finite-difference noise by ~0 would report
    a spurious failure.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-4)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Full elementwise central differences of scalar f with respect to x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def sampled_numeric_grad(f, x: np.ndarray, idx: np.ndarray, h: float = H) -> np.ndarray:
    flat = x.reshape(-1)
    out = np.zeros(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# per-layer cases

def _proj(rng, shape):
    return rng.standard_normal(shape)


def _check(f_forward_backward, arrays: dict) -> float:
    """f_forward_backward() -> (loss, {name: analytic grad}); arrays are differentiated in place."""
    _, analytic = f_forward_backward()
    worst = 0.0
    for name, x in arrays.items():
        numeric = numeric_grad(lambda: f_forward_backward()[0], x)
        worst = max(worst, rel_err(analytic[name], numeric))
    return worst


def _conv_case(rng, ndim):
    if ndim == 1:
        x = rng.standard_normal((2, 3, 12))
        spec = L.ConvSpec((5,), (2,), (2,), 3, 4)
        w = rng.standard_normal((4, 3, 5)) * 0.5
    else:
        x = rng.standard_normal((2, 3, 8, 8))
        spec = L.ConvSpec((3, 3), (2, 2), (1, 1), 3, 4)
        w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    y0, _ = L.conv_forward(x, w, b, spec)
    R = _proj(rng, y0.shape)

    def run():
        y, cache = L.conv_forward(x, w, b, spec)
        loss = float(np.sum(y * R))
        dw, db, dx = L.conv_backward(cache, R)
        return loss, {"x": dx, "w": dw, "b": db}

    return run, {"x": x, "w": w, "b": b}


def _batchnorm_case(rng):
    x = rng.standard_normal((4, 3, 5))
    gamma = 1.0 + 0.2 * rng.standard_normal(3)
    beta = 0.1 * rng.standard_normal(3)

    def make_state():
        return L.BatchNormState(
            gamma=gamma,
            beta=beta,
            running_mean=np.zeros(3),
            running_var=np.ones(3),
        )

    y0, _ = L.batchnorm_forward(x, make_state(), "train")
    R = _proj(rng, y0.shape)

    def run():
        y, cache = L.batchnorm_forward(x, make_state(), "train")
        loss = float(np.sum(y * R))
        dgamma, dbeta, dx = L.batchnorm_backward(cache, R)
        return loss, {"x": dx, "gamma": dgamma, "beta": dbeta}

    return run, {"x": x, "gamma": gamma, "beta": beta}


def _maxpool_case(rng, ndim):
    if ndim == 1:
        x = rng.standard_normal((2, 2, 10))
        spec = L.ConvSpec((9,), (4,), (4,))
    else:
        x = rng.standard_normal((2, 2, 6, 6))
        spec = L.ConvSpec((3, 3), (2, 2), (1, 1))
    y0, _ = L.maxpool_forward(x, spec)
    R = _proj(rng, y0.shape)

    def run():
        y, cache = L.maxpool_forward(x, spec)
        loss = float(np.sum(y * R))
        return loss, {"x": L.maxpool_backward(cache, R)}

    return run, {"x": x}


def _gap_case(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    R = _proj(rng, (2, 3))

    def run():
        y, cache = L.global_average_pool(x)
        loss = float(np.sum(y * R))
        return loss, {"x": L.global_average_pool_backward(cache, R)}

    return run, {"x": x}


def _linear_case(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    R = _proj(rng, (4, 3))

    def run():
        y, cache = L.linear_forward(x, w, b)
        loss = float(np.sum(y * R))
        dw, db, dx = L.linear_backward(cache, R)
        return loss, {"x": dx, "w": dw, "b": db}

    return run, {"x": x, "w": w, "b": b}


def _scaled_tanh_case(rng):
    x = rng.standard_normal((3, 4))
    R = _proj(rng, (3, 4))

    def run():
        y, cache = L.scaled_tanh(x)
        loss = float(np.sum(y * R))
        return loss, {"x": L.scaled_tanh_backward(cache, R)}

    return run, {"x": x}


def _block_case(rng, kind):
    in_ch, out_ch = (3, 3) if kind == "identity" else (3, 5)
    stride = (1, 1) if kind == "identity" else (2, 2)
    x = rng.standard_normal((2, in_ch, 6, 6))
    spec1 = L.ConvSpec((3, 3), stride, (1, 1), in_ch, out_ch)
    spec2 = L.ConvSpec((3, 3), (1, 1), (1, 1), out_ch, out_ch)
    arrays = {
        "conv1.w": rng.standard_normal(spec1.out_channels * in_ch * 9).reshape(out_ch, in_ch, 3, 3) * 0.4,
        "conv1.b": rng.standard_normal(out_ch) * 0.1,
        "bn1.gamma": 1.0 + 0.2 * rng.standard_normal(out_ch),
        "bn1.beta": 0.1 * rng.standard_normal(out_ch),
        "conv2.w": rng.standard_normal((out_ch, out_ch, 3, 3)) * 0.4,
        "conv2.b": rng.standard_normal(out_ch) * 0.1,
        "bn2.gamma": 1.0 + 0.2 * rng.standard_normal(out_ch),
        "bn2.beta": 0.1 * rng.standard_normal(out_ch),
    }
    if kind == "projection":
        arrays["shortcut.w"] = rng.standard_normal((out_ch, in_ch, 1, 1)) * 0.4
        arrays["shortcut.b"] = rng.standard_normal(out_ch) * 0.1

    def make_block():
        return L.ResidualBlockParams(
            kind=kind,
            conv1_w=arrays["conv1.w"],
            conv1_b=arrays["conv1.b"],
            bn1=L.BatchNormState(arrays["bn1.gamma"], arrays["bn1.beta"], np.zeros(out_ch), np.ones(out_ch)),
            spec1=spec1,
            conv2_w=arrays["conv2.w"],
            conv2_b=arrays["conv2.b"],
            bn2=L.BatchNormState(arrays["bn2.gamma"], arrays["bn2.beta"], np.zeros(out_ch), np.ones(out_ch)),
            spec2=spec2,
            shortcut_w=arrays.get("shortcut.w"),
            shortcut_b=arrays.get("shortcut.b"),
            shortcut_spec=L.ConvSpec((1, 1), stride, (0, 0), in_ch, out_ch) if kind == "projection" else None,
        )

    y0, _ = L.residual_block_forward(x, make_block(), "train")
    R = _proj(rng, y0.shape)
    arrays["x"] = x

    def run():
        y, cache = L.residual_block_forward(x, make_block(), "train")
        loss = float(np.sum(y * R))
        grads, dx = L.residual_block_backward(cache, R)
        grads["x"] = dx
        return loss, grads

    return run, arrays


def _lstm_case(rng):
    B, D, Hn = 2, 4, 3
    arrays = {
        "x": rng.standard_normal((B, D)),
        "h": rng.standard_normal((B, Hn)),
        "c": rng.standard_normal((B, Hn)),
        "wx": rng.standard_normal((D, 4 * Hn)) * 0.5,
        "wh": rng.standard_normal((Hn, 4 * Hn)) * 0.5,
        "b": rng.standard_normal(4 * Hn) * 0.1,
    }
    Rh = _proj(rng, (B, Hn))
    Rc = _proj(rng, (B, Hn))

    def run():
        h, c, cache = L.lstm_step(arrays["x"], arrays["h"], arrays["c"], arrays["wx"], arrays["wh"], arrays["b"])
        loss = float(np.sum(h * Rh) + np.sum(c * Rc))
        dx, dh_prev, dc_prev, dwx, dwh, db = L.lstm_step_backward(cache, Rh, Rc)
        return loss, {"x": dx, "h": dh_prev, "c": dc_prev, "wx": dwx, "wh": dwh, "b": db}

    return run, arrays


_LAYER_CASES = [
    ("conv1d", lambda rng: _conv_case(rng, 1)),
    ("conv2d", lambda rng: _conv_case(rng, 2)),
    ("batchnorm", _batchnorm_case),
    ("maxpool1d", lambda rng: _maxpool_case(rng, 1)),
    ("maxpool2d", lambda rng: _maxpool_case(rng, 2)),
    ("global_average_pool", _gap_case),
    ("linear", _linear_case),
    ("scaled_tanh", _scaled_tanh_case),
    ("residual_block_identity", lambda rng: _block_case(rng, "identity")),
    ("residual_block_projection", lambda rng: _block_case(rng, "projection")),
    ("lstm_step", _lstm_case),
]


def run_layer_checks(seed: int = 0) -> list:
    rows = []
    for name, build in _LAYER_CASES:
        rng = np.random.Generator(np.random.PCG64(seed))
        run, arrays = build(rng)
        rows.append(GradCheckRow(name, _check(run, arrays), LAYER_TOL))
    return rows


def run_network_check(seed: int = 0, samples_per_tensor: int = 4) -> GradCheckRow:
    """Sampled finite differences through the whole miniature network."""
    arch = mini_architecture()
    params = build_network(arch, seed, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    audio = rng.standard_normal((2, 1, 1024))
    frames = rng.standard_normal((2, 3, 16, 16)) * 0.5
    pred0, _ = forward_train(arch, params, audio, frames)
    R = rng.standard_normal(pred0.shape)

    def loss() -> float:
        pred, _ = forward_train(arch, params, audio, frames)
        return float(np.sum(pred * R))

    pred, tape = forward_train(arch, params, audio, frames)
    analytic = backward(tape, R)
    pick = np.random.Generator(np.random.PCG64(seed + 2))
    worst = 0.0
    for name in trainable_names(arch):
        x = params[name]
        k = min(samples_per_tensor, x.size)
        idx = pick.choice(x.size, size=k, replace=False)
        numeric = sampled_numeric_grad(loss, x, idx)
        worst = max(worst, rel_err(analytic[name].reshape(-1)[idx], numeric))
    return GradCheckRow("full_miniature_network", worst, NETWORK_TOL)


def run_gradcheck(include_network: bool = True, seed: int = 0):
    rows = run_layer_checks(seed)
    if include_network:
        rows.append(run_network_check(seed))
    return rows, all(r.passed for r in rows)
