"""Adam optimization, LR schedule, batch sampling, and the training loop.

Reproducibility contract: one PCG64 generator seeded from TrainConfig.seed
drives every stochastic draw. Model initialization consumes it first (in
parameter registration order), then each training iteration draws, per
batch element, (image index, crop top, crop left) in that order.
Checkpoints carry the optimizer moments and the raw generator state, so a
resumed run is byte-identical to an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .formats import read_image, read_weights, scan_dataset, write_weights
from .layers import ParamStore
from .losses import MsSsimConfig, combined_loss
from .tensor import GradTape, Tensor, backward


class TrainAbort(RuntimeError):
    """Non-finite loss; message carries the offending batch indices."""


class GradientMissingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iters: int = 100_000
    batch: int = 8
    crop: int = 224
    lr0: float = 5e-4
    lr_decay: float = 0.2
    lr_period: int = 8000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 1000
    log_interval: int = 1

    def validate(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.crop % 16:
            raise ValueError("crop must be divisible by 16")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        return self


def lr_at(it: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay ** (it // cfg.lr_period)


class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: ParamStore, grads, state: AdamState, lr: float,
              cfg: TrainConfig):
    """Bias-corrected Adam update over trainable parameters in name order.
    Frozen parameters are untouched; a missing gradient is a hard error."""
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in params.trainable_names():
        p = params[name]
        g = grads.get(p)
        if g is None:
            raise GradientMissingError(f"no gradient for trainable parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        g = g.astype(p.dtype, copy=False)
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps_adam)


def load_dataset_images(dataset_dir, crop):
    layout = scan_dataset(dataset_dir, min_size=crop)
    pairs = [(name, read_image(ip).data[0], read_image(gp).data[0])
             for name, ip, gp in layout.pairs]
    if not pairs:
        raise TrainAbort(f"no usable training pairs under {dataset_dir}")
    return pairs, layout.warnings


def sample_batch(pairs, rng: np.random.Generator, crop: int, batch: int):
    """Independent (index, top, left) draws; the same window is cut from
    input and ground truth. Returns (x, gt, indices)."""
    xs, gts, idxs = [], [], []
    for _ in range(batch):
        idx = int(rng.integers(len(pairs)))
        _, xin, gt = pairs[idx]
        h, w = xin.shape[1], xin.shape[2]
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        xs.append(xin[:, top : top + crop, left : left + crop])
        gts.append(gt[:, top : top + crop, left : left + crop])
        idxs.append(idx)
    return Tensor(np.stack(xs)), Tensor(np.stack(gts)), idxs


# -- RNG state <-> tensor -------------------------------------------------------


def _rng_state_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    limbs = []
    for key in ("state", "inc"):
        v = int(st["state"][key])
        limbs += [(v >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    limbs += [int(st["has_uint32"]), int(st["uinteger"])]
    return np.asarray(limbs, dtype=np.float64)


def _rng_state_from_array(arr: np.ndarray) -> np.random.Generator:
    limbs = [int(v) for v in arr]
    def join(ls):
        return sum(l << (32 * i) for i, l in enumerate(ls))
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": join(limbs[0:4]), "inc": join(limbs[4:8])},
        "has_uint32": limbs[8],
        "uinteger": limbs[9],
    }
    return rng


# -- checkpoints ----------------------------------------------------------------

_BOOL_FIELDS = ("fdnet_enabled", "cfrm_enabled", "cfrm_shared")


def save_checkpoint(path, model: M.STSCModel, state: AdamState,
                    rng: np.random.Generator, it: int, train_cfg: TrainConfig):
    store = ParamStore()
    for name, t in model.params.items():
        store.add(name, t)
    for name in model.params.trainable_names():
        if name in state.m:
            store.add("adam.m." + name, Tensor(state.m[name]))
            store.add("adam.v." + name, Tensor(state.v[name]))

    def meta(name, value):
        store.add("meta." + name, Tensor(np.asarray([float(value)], dtype=np.float64)))

    cfg = model.cfg
    meta("iter", it)
    meta("adam_t", state.t)
    meta("seed", train_cfg.seed)
    meta("iters", train_cfg.iters)
    meta("batch", train_cfg.batch)
    meta("crop", train_cfg.crop)
    meta("lr0", train_cfg.lr0)
    meta("lambda", cfg.lam)
    meta("base_channels", cfg.base_channels)
    meta("sem_channels", cfg.sem_channels)
    meta("ctl_reduction", cfg.ctl_reduction)
    meta("branch_mode", M.BRANCH_MODES.index(cfg.branch_mode))
    meta("embed_site", 0 if cfg.embed_site == "decoder" else 1)
    for f in _BOOL_FIELDS:
        meta(f, 1 if getattr(cfg, f) else 0)
    store.add("meta.rng", Tensor(_rng_state_to_array(rng)))
    write_weights(store, path)


def model_config_from_checkpoint(store: ParamStore) -> M.ModelConfig:
    def meta(name):
        return float(store["meta." + name].data.reshape(-1)[0])

    return M.ModelConfig(
        lam=meta("lambda"),
        base_channels=int(meta("base_channels")),
        sem_channels=int(meta("sem_channels")),
        ctl_reduction=int(meta("ctl_reduction")),
        branch_mode=M.BRANCH_MODES[int(meta("branch_mode"))],
        embed_site="decoder" if int(meta("embed_site")) == 0 else "encoder",
        **{f: bool(int(meta(f))) for f in _BOOL_FIELDS},
    ).validate()


def load_model_from_checkpoint(path, dtype=np.float32):
    store = read_weights(path)
    cfg = model_config_from_checkpoint(store)
    param_names = [n for n in store.names()
                   if not n.startswith(("adam.", "meta."))]
    vgg = None
    if cfg.branch_mode != "none":
        vgg = ParamStore()
        for n in param_names:
            if n.startswith("vgg."):
                vgg.add(n, store[n])
    model = M.STSCModel(cfg, np.random.default_rng(0), vgg, dtype=dtype)
    target = ParamStore()
    for n in param_names:
        target.add(n, store[n].astype(dtype))
    model.params.load(target)
    return model, store


# -- training loop ----------------------------------------------------------------


def train(model_cfg: M.ModelConfig, train_cfg: TrainConfig, dataset_dir,
          vgg_source, out_path, resume_path=None, log=print,
          dtype=np.float32):
    """Runs the full loop and writes the final checkpoint to out_path.
    vgg_source is a ParamStore or a path to an STSCW weights file; it may
    be None when the config needs no VGG."""
    train_cfg.validate()
    pairs, warnings = load_dataset_images(dataset_dir, train_cfg.crop)
    for w in warnings:
        log(f"warning: {w}")

    if isinstance(vgg_source, (str, bytes)) or hasattr(vgg_source, "__fspath__"):
        vgg_store = read_weights(vgg_source)
    else:
        vgg_store = vgg_source

    rng = np.random.default_rng(train_cfg.seed)
    model = M.STSCModel(model_cfg, rng, vgg_store, dtype=dtype)
    state = AdamState()
    start_iter = 0
    if resume_path is not None:
        ck = read_weights(resume_path)
        target = ParamStore()
        for n in model.params.names():
            target.add(n, ck[n].astype(dtype))
        model.params.load(target)
        for n in model.params.trainable_names():
            state.m[n] = ck["adam.m." + n].data.astype(dtype).copy()
            state.v[n] = ck["adam.v." + n].data.astype(dtype).copy()
        state.t = int(ck["meta.adam_t"].data.reshape(-1)[0])
        start_iter = int(ck["meta.iter"].data.reshape(-1)[0])
        rng = _rng_state_from_array(ck["meta.rng"].data)

    ms_cfg = MsSsimConfig()
    for it in range(start_iter, train_cfg.iters):
        lr = lr_at(it, train_cfg)
        x, gt, idxs = sample_batch(pairs, rng, train_cfg.crop, train_cfg.batch)
        x, gt = x.astype(dtype), gt.astype(dtype)
        tape = GradTape()
        y = model.forward(x, tape)
        total, l1, ms = combined_loss(y, gt, model_cfg.lam, ms_cfg, tape)
        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise TrainAbort(
                f"non-finite loss {loss_val} at iter {it}; batch image indices {idxs}")
        grads = backward(tape, total)
        adam_step(model.params, grads, state, lr, train_cfg)
        if (it + 1) % train_cfg.log_interval == 0 or it == start_iter:
            log(f"iter={it + 1} lr={lr:.6g} loss={loss_val:.6f} "
                f"l1={l1.item():.6f} msssim={ms.item():.6f}")
        if train_cfg.checkpoint_interval and (it + 1) % train_cfg.checkpoint_interval == 0:
            save_checkpoint(out_path, model, state, rng, it + 1, train_cfg)
    save_checkpoint(out_path, model, state, rng, train_cfg.iters, train_cfg)
    return model, state
