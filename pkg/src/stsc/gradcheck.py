"""Finite-difference verification of the analytic gradients.

Each component check samples coordinates of an input or parameter,
perturbs them by +/-eps, and compares the central difference of a scalar
objective against the taped gradient. Relative error is
|a - n| / max(|a|, |n|, floor) with floor 1e-3, evaluated in double
precision (single-precision finite differences are too noisy to certify
anything at 1e-5).
"""

from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T
from .losses import MsSsimConfig, combined_loss, ms_ssim
from .tensor import GradTape, Tensor, backward

REL_FLOOR = 1e-3


def numeric_gradient(f, at: Tensor, coordinate: int, eps: float = 1e-6) -> float:
    """(f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps) for scalar-valued f."""
    if not 0 <= coordinate < at.size:
        raise IndexError(f"coordinate {coordinate} out of range for size {at.size}")
    flat = at.data.reshape(-1)
    orig = flat[coordinate]
    flat[coordinate] = orig + eps
    hi = float(f(at))
    flat[coordinate] = orig - eps
    lo = float(f(at))
    flat[coordinate] = orig
    return (hi - lo) / (2.0 * eps)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def check_tensor_grad(build, tensors, n_coords=100, eps=1e-6, rng=None):
    """build(tape) -> scalar loss Tensor using the given leaf tensors.
    Samples n_coords coordinates across the leaves and returns the max
    relative error between taped and finite-difference gradients."""
    rng = rng or np.random.default_rng(0)
    tape = GradTape()
    loss = build(tape)
    grads = backward(tape, loss)
    worst = 0.0
    for _ in range(n_coords):
        t = tensors[int(rng.integers(len(tensors)))]
        coord = int(rng.integers(t.size))
        analytic = grads.get(t)
        a = float(analytic.reshape(-1)[coord]) if analytic is not None else 0.0
        n = numeric_gradient(lambda _: build(None).item(), t, coord, eps)
        worst = max(worst, rel_error(a, n))
    return worst


# -- component suites ---------------------------------------------------------


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64))


def check_conv2d(rng, n_coords=100):
    worst = 0.0
    geoms = [(1, 2, 6, 6, 3, 3, 1, 1), (2, 3, 8, 8, 4, 3, 2, 1),
             (1, 1, 5, 7, 2, 2, 1, 0), (1, 4, 9, 9, 2, 5, 2, 2)]
    per = max(1, n_coords // len(geoms))
    for n, ci, h, w, co, k, stride, pad in geoms:
        x = _rand(rng, n, ci, h, w)
        wt = _rand(rng, co, ci, k, k, lo=-0.5, hi=0.5)
        b = _rand(rng, co)

        def build(tape, x=x, wt=wt, b=b, stride=stride, pad=pad):
            return T.mean_all(T.sigmoid(T.conv2d(x, wt, b, stride, pad, tape), tape), tape)

        worst = max(worst, check_tensor_grad(build, [x, wt, b], per, rng=rng))
    return worst


def check_activations(rng, n_coords=100):
    x = _rand(rng, 1, 3, 6, 6, lo=-2.0, hi=2.0)
    # keep sampled points away from the ReLU kink
    x.data[np.abs(x.data) < 1e-3] = 0.1
    worst = 0.0
    for kind in ("relu", "sigmoid"):
        def build(tape, kind=kind):
            return T.mean_all(T.mul(T.activation(x, kind, tape),
                                    T.activation(x, kind, tape), tape), tape)
        worst = max(worst, check_tensor_grad(build, [x], n_coords // 2, rng=rng))
    return worst


def check_resamples(rng, n_coords=100):
    worst = 0.0
    x = _rand(rng, 1, 2, 8, 8)
    kinds = [("avg_pool_k2", None), ("nearest_up_x2", None),
             ("space_to_depth_x2", None), ("avg_pool_to", (2, 2)),
             ("nearest_to", (16, 16))]
    per = max(1, n_coords // (len(kinds) + 2))
    for kind, hw in kinds:
        def build(tape, kind=kind, hw=hw):
            y = T.resample(x, kind, hw, tape)
            return T.mean_all(T.mul(y, y, tape), tape)
        worst = max(worst, check_tensor_grad(build, [x], per, rng=rng))
    for op, hw in ((T.adaptive_avg_pool, (3, 3)), (T.nearest_resize, (12, 12))):
        def build(tape, op=op, hw=hw):
            y = op(x, hw, tape)
            return T.mean_all(T.mul(y, y, tape), tape)
        worst = max(worst, check_tensor_grad(build, [x], per, rng=rng))
    return worst


def check_gap(rng, n_coords=100):
    x = _rand(rng, 2, 3, 5, 7)

    def build(tape):
        y = T.global_avg_pool(x, tape)
        return T.mean_all(T.mul(y, y, tape), tape)

    return check_tensor_grad(build, [x], n_coords, rng=rng)


def _tiny_model(rng, **overrides):
    cfg = M.ModelConfig(base_channels=4, sem_channels=8, **overrides)
    vgg = M.random_vgg_store(rng, dtype=np.float64)
    return M.STSCModel(cfg, rng, vgg, dtype=np.float64)


def check_ctl(rng, n_coords=100):
    model = _tiny_model(rng)
    f_ste = _rand(rng, 1, 8, 8, 8)
    names = [f"fdnet.scale2.{p}" for p in
             ("transform.conv.weight", "transform.conv.bias",
              "gate.down.conv.weight", "gate.up.conv.weight")]
    leaves = [f_ste] + [model.params[n] for n in names]

    def build(tape):
        return T.mean_all(model.ctl(f_ste, 2, tape), tape)

    return check_tensor_grad(build, leaves, n_coords, rng=rng)


def check_cfrm(rng, n_coords=100):
    model = _tiny_model(rng)
    f = _rand(rng, 1, 8, 8, 8)
    leaves = [f] + [model.params[n] for n in
                    ("cfrm.k3.conv.weight", "cfrm.k5.conv.weight",
                     "cfrm.k7.conv.weight", "cfrm.fuse.conv.weight")]

    def build(tape):
        y = model.cfrm(f, "texture", tape)
        return T.mean_all(T.mul(y, y, tape), tape)

    return check_tensor_grad(build, leaves, n_coords, rng=rng)


def check_pcb(rng, n_coords=100):
    model = _tiny_model(rng)
    bottom = _rand(rng, 1, 64, 4, 4)
    leaves = [bottom, model.params["pcb.bin2.conv.weight"],
              model.params["pcb.fuse.conv.weight"]]

    def build(tape):
        y = model.pcb(bottom, tape)
        return T.mean_all(T.mul(y, y, tape), tape)

    return check_tensor_grad(build, leaves, n_coords, rng=rng)


def check_ms_ssim(rng, n_coords=100):
    base = rng.uniform(0.2, 0.8, size=(1, 2, 24, 24))
    y = Tensor(np.clip(base + rng.normal(0, 0.05, base.shape), 0.05, 0.95))
    gt = Tensor(np.clip(base + rng.normal(0, 0.05, base.shape), 0.05, 0.95))
    cfg = MsSsimConfig()

    def build(tape):
        return ms_ssim(y, gt, cfg, tape)

    return check_tensor_grad(build, [y, gt], n_coords, rng=rng, eps=1e-6)


def check_full_network(rng, n_coords=100):
    """Full forward + combined loss at 1x3x16x16 with the tiny config;
    checks trainable parameter gradients. VGG features are fixed, so they
    are computed once and reused across perturbations."""
    model = _tiny_model(rng)
    x = Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 16, 16)))
    feats = model.vgg_extract(x)
    # ground truth correlated with the current output keeps the MS-SSIM
    # terms inside their smooth region (no clamp kinks near the test point)
    y0 = model.forward(x, vgg_features=feats)
    gt = Tensor(np.clip(y0.data + rng.normal(0, 0.02, y0.shape), 0.05, 0.95))

    def build(tape):
        y = model.forward(x, tape, vgg_features=feats)
        total, _, _ = combined_loss(y, gt, 0.8, tape=tape)
        return total

    names = model.params.trainable_names()
    leaves = [model.params[n] for n in names]
    return check_tensor_grad(build, leaves, n_coords, rng=rng)


COMPONENTS = {
    "conv2d": check_conv2d,
    "activations": check_activations,
    "resamples": check_resamples,
    "global_avg_pool": check_gap,
    "ctl": check_ctl,
    "cfrm": check_cfrm,
    "pcb": check_pcb,
    "ms_ssim": check_ms_ssim,
    "full_network": check_full_network,
}


def run_suite(tol: float = 1e-5, n_coords: int = 100, seed: int = 7,
              log=print, components=None):
    """Runs every component check; returns (ok, {name: max_rel_err})."""
    results = {}
    ok = True
    for name, fn in COMPONENTS.items():
        if components and name not in components:
            continue
        err = fn(np.random.default_rng(seed), n_coords)
        results[name] = err
        status = "ok" if err <= tol else "FAIL"
        log(f"gradcheck {name}: max_rel_err={err:.3e} tol={tol:.0e} {status}")
        ok = ok and err <= tol
    return ok, results
