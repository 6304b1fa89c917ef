"""Central finite-difference gradient checking.

The harness perturbs individual input coordinates by +-h, re-evaluates the
scalar objective with the tape disabled, and compares against the analytic
gradient. Everything runs in float64; BLAS parallelism is pinned to one
thread while a check runs so results are exactly reproducible.

Relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-3); primitives
must stay below 1e-4 (step 1e-4), composed modules below 1e-3 (step 1e-5,
the smaller step keeps ReLU kink crossings rare).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import ops
from .errors import NumericError
from .tensor import Tensor, no_grad

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:
        return contextlib.nullcontext()


def check_scalar_fn(f: Callable[[], Tensor], tensors: Dict[str, Tensor],
                    h: float = 1e-4, coords_per_tensor: int = 4,
                    seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference
    gradients of the scalar ``f()`` over sampled coordinates of ``tensors``.

    ``f`` must recompute from the live ``Tensor`` objects so in-place
    perturbations take effect.
    """
    rng = np.random.default_rng(seed)
    with _single_thread():
        for t in tensors.values():
            t.grad = None
        loss = f()
        loss.backward()
        worst = 0.0
        for name, t in tensors.items():
            grad = t.grad
            if grad is None:
                grad = np.zeros_like(t.data)
            k = min(coords_per_tensor, t.size)
            picks = rng.choice(t.size, size=k, replace=False)
            for flat_ix in picks:
                ix = np.unravel_index(int(flat_ix), t.shape)
                orig = t.data[ix]
                t.data[ix] = orig + h
                with no_grad():
                    fp = f().item()
                t.data[ix] = orig - h
                with no_grad():
                    fm = f().item()
                t.data[ix] = orig
                fd = (fp - fm) / (2.0 * h)
                a = float(grad[ix])
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
                worst = max(worst, err)
    return worst


@dataclass
class CheckResult:
    name: str
    worst_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<22} worst_rel_err={self.worst_rel_err:.3e} "
                f"threshold={self.threshold:.0e} {status}")


def _away_from_kinks(arr: np.ndarray, margin: float = 0.1) -> np.ndarray:
    near = np.abs(arr) < margin
    return arr + near * np.where(arr >= 0, margin, -margin)


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# primitive scenarios (each returns (fn, tensors))
# ---------------------------------------------------------------------------

def _readout(t: Tensor, proj: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(t, Tensor(proj)))


def _primitive_scenarios(seed: int):
    rng = np.random.default_rng(seed)
    scen = []

    x = Tensor(_rand(rng, 2, 3, 5, 5), requires_grad=True)
    w = Tensor(_rand(rng, 4, 3, 3, 3) * 0.5, requires_grad=True)
    b = Tensor(_rand(rng, 4) * 0.1, requires_grad=True)
    proj = _rand(rng, 2, 4, 3, 3)
    scen.append(("conv2d", lambda: _readout(
        ops.conv2d(x, w, b, stride=2, padding=1), proj),
        {"input": x, "weight": w, "bias": b}))

    xd = Tensor(_rand(rng, 1, 2, 6, 6), requires_grad=True)
    wd = Tensor(_rand(rng, 3, 2, 3, 3) * 0.5, requires_grad=True)
    projd = _rand(rng, 1, 3, 6, 6)
    scen.append(("conv2d_dilated", lambda: _readout(
        ops.conv2d(xd, wd, None, padding=2, dilation=2), projd),
        {"input": xd, "weight": wd}))

    xt = Tensor(_rand(rng, 2, 4, 3, 3), requires_grad=True)
    wt = Tensor(_rand(rng, 4, 3, 2, 2) * 0.5, requires_grad=True)
    bt = Tensor(_rand(rng, 3) * 0.1, requires_grad=True)
    projt = _rand(rng, 2, 3, 6, 6)
    scen.append(("conv_transpose2d", lambda: _readout(
        ops.conv_transpose2d(xt, wt, bt, stride=2), projt),
        {"input": xt, "weight": wt, "bias": bt}))

    xp = Tensor(_rand(rng, 2, 3, 5, 7), requires_grad=True)
    projp = _rand(rng, 2, 3, 2, 3)
    scen.append(("adaptive_avg_pool", lambda: _readout(
        ops.adaptive_avg_pool2d(xp, (2, 3)), projp),
        {"input": xp}))

    xr = Tensor(_rand(rng, 1, 2, 3, 4), requires_grad=True)
    projr = _rand(rng, 1, 2, 5, 6)
    scen.append(("resize_bilinear", lambda: _readout(
        ops.resize_bilinear(xr, (5, 6)), projr),
        {"input": xr}))

    xs = Tensor(_rand(rng, 4, 7), requires_grad=True)
    projs = _rand(rng, 4, 7)
    scen.append(("softmax_rows", lambda: _readout(ops.softmax(xs, axis=-1), projs),
                 {"input": xs}))

    for kind in ("relu", "gelu", "sigmoid"):
        xe = Tensor(_away_from_kinks(_rand(rng, 3, 4, 2, 2)), requires_grad=True)
        proje = _rand(rng, 3, 4, 2, 2)
        scen.append((kind, (lambda xe=xe, kind=kind, proje=proje:
                            _readout(ops.elementwise(xe, kind), proje)),
                     {"input": xe}))

    xl = Tensor(_rand(rng, 6, 5), requires_grad=True)
    gl = Tensor(1.0 + 0.1 * _rand(rng, 5), requires_grad=True)
    bl = Tensor(0.1 * _rand(rng, 5), requires_grad=True)
    projl = _rand(rng, 6, 5)
    scen.append(("layer_norm", lambda: _readout(
        ops.layer_norm(xl, gl, bl, eps=1e-6), projl),
        {"input": xl, "gain": gl, "bias": bl}))

    am = Tensor(_rand(rng, 3, 4), requires_grad=True)
    bm = Tensor(_rand(rng, 4, 5), requires_grad=True)
    projm = _rand(rng, 3, 5)
    scen.append(("matmul", lambda: _readout(ops.matmul(am, bm), projm),
                 {"a": am, "b": bm}))

    lce = Tensor(_rand(rng, 2, 4, 3, 3), requires_grad=True)
    labels = np.array(np.random.default_rng(seed + 1).integers(0, 4, (2, 3, 3)))
    labels[0, 0, 0] = 255
    scen.append(("cross_entropy", lambda: ops.cross_entropy(lce, labels, 255)[0],
                 {"logits": lce}))

    return scen


# ---------------------------------------------------------------------------
# composite scenarios (tiny config, float64)
# ---------------------------------------------------------------------------

def _composite_scenarios(seed: int):
    from .config import tiny_config
    from .context import fuse_concat
    from .decoder import supervised_loss
    from .model import MSCloudCAM

    cfg = tiny_config(seed=seed)
    net = MSCloudCAM(cfg)
    rng = np.random.default_rng(seed + 7)
    scen = []

    x_enc = Tensor(_rand(rng, 1, 2, 32, 32), requires_grad=True)
    proj_by_shape: Dict[tuple, np.ndarray] = {}

    def pyramid_readout():
        pyr = net.encoder.encode(x_enc)
        total = None
        for t in pyr.tensors():
            pr = proj_by_shape.setdefault(t.shape, _rand(np.random.default_rng(11), *t.shape))
            term = _readout(t, pr)
            total = term if total is None else ops.add(total, term)
        return total

    enc_params = dict(list(net.encoder.named_parameters())[:3])
    scen.append(("backbone.encode", pyramid_readout,
                 {"input": x_enc, **enc_params}))

    f4 = Tensor(_rand(rng, 1, 64, 2, 2), requires_grad=True)
    proj_a = _rand(rng, 1, 8, 2, 2)
    scen.append(("context.aspp", lambda: _readout(net.aspp(f4, (2, 2)), proj_a),
                 {"f4": f4, "branch0.weight": net.aspp.branches[0].weight}))

    f3 = Tensor(_rand(rng, 1, 32, 2, 2), requires_grad=True)
    proj_p = _rand(rng, 1, 8, 2, 2)
    scen.append(("context.psp", lambda: _readout(net.psp(f3), proj_p),
                 {"f3": f3, "scale0.weight": net.psp.scale_convs[0].weight}))

    xa = Tensor(_rand(rng, 1, 8, 2, 2), requires_grad=True)
    xp = Tensor(_rand(rng, 1, 8, 2, 2), requires_grad=True)
    proj_f = _rand(rng, 1, 16, 2, 2)

    def fusion_readout():
        cat = fuse_concat(xa, xp)
        t = net.cross(cat, xp)
        z = net.bottleneck(t)
        return _readout(net.refine.forward(z), proj_f)

    scen.append(("fusion.chain", fusion_readout,
                 {"x_aspp": xa, "x_psp": xp, "wq.weight": net.cross.wq.weight,
                  "eca.weight": net.refine.eca.conv.weight}))

    z_dec = Tensor(_rand(rng, 1, 16, 2, 2), requires_grad=True)
    lab_dec = np.random.default_rng(seed + 3).integers(0, 4, (1, 32, 32))

    def decoder_readout():
        outs = net.decoder(z_dec, (32, 32))
        loss, _ = supervised_loss(outs, lab_dec, net.cfg.loss)
        return loss

    scen.append(("decoder.decode+loss", decoder_readout,
                 {"z": z_dec, "deconv0.weight": net.decoder.deconvs[0].weight}))

    x_full = Tensor(_rand(rng, 1, 2, 32, 32), requires_grad=True)
    lab_full = np.random.default_rng(seed + 5).integers(0, 4, (1, 32, 32))

    def model_readout():
        outs = net.forward(x_full)
        loss, _ = supervised_loss(outs, lab_full, net.cfg.loss)
        return loss

    scen.append(("model.forward+loss", model_readout, {"input": x_full}))
    return scen


def run_suite(scope: str = "all", seed: int = 0) -> List[CheckResult]:
    """Run the FD harness across primitives and composed modules."""
    results = []
    if scope in ("all", "primitives"):
        for name, fn, tensors in _primitive_scenarios(seed):
            worst = check_scalar_fn(fn, tensors, h=1e-4, coords_per_tensor=4, seed=seed)
            results.append(CheckResult(name, worst, PRIMITIVE_TOL))
    if scope in ("all", "composites"):
        for name, fn, tensors in _composite_scenarios(seed):
            worst = check_scalar_fn(fn, tensors, h=1e-5, coords_per_tensor=5, seed=seed)
            results.append(CheckResult(name, worst, COMPOSITE_TOL))
    return results


def assert_suite_passes(scope: str = "all", seed: int = 0) -> List[CheckResult]:
    results = run_suite(scope, seed)
    failures = [r for r in results if not r.passed]
    if failures:
        names = ", ".join(f"{r.name} ({r.worst_rel_err:.2e})" for r in failures)
        raise NumericError(f"gradient check failed: {names}")
    return results
