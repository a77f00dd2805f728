"""The full enhancement network.

Composition: UNet-like encoder/decoder base network with a pyramid
context block at the bottleneck, a frozen VGG16 feature extractor,
texture/structure branches refined by a shared multi-path CFRM,
aggregation, and per-scale channel transformation layers (CTL) gating
the aggregated features before decoder embedding.

The shape/channel table lives in docs/architecture.md and is normative
for checkpoints. Parameter registration order (which is also the RNG
draw order at init) follows the order of construction in STSCModel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvLayer, ParamStore, init_conv, register_conv
from .tensor import GradTape, Tensor

VGG_CHANNELS = (64, 128, 256, 512)

# conv name -> (in_channels, out_channels); pools sit between blocks
VGG_CONVS = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256),
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512),
)
# features are tapped after the ReLU of these convs
VGG_TAPS = ("conv1_2", "conv2_2", "conv3_3", "conv4_3")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BRANCH_MODES = ("both", "texture_only", "structure_only", "raw_F", "none")
ABLATIONS = {
    "m0": dict(branch_mode="none"),
    "m1": dict(branch_mode="raw_F"),
    "m2": dict(branch_mode="structure_only"),
    "m3": dict(branch_mode="texture_only"),
    "m4": dict(fdnet_enabled=False),
    "full": dict(),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    scale_factor_w: int = 4
    cfrm_kernels: tuple = (3, 5, 7)
    lam: float = 0.8
    base_channels: int = 16
    sem_channels: int = 64
    ctl_reduction: int = 4
    embed_site: str = "decoder"
    branch_mode: str = "both"
    fdnet_enabled: bool = True
    cfrm_enabled: bool = True
    cfrm_shared: bool = True
    vgg_grad_to_input: bool = False
    pcb_bins: tuple = (1, 2, 4)

    def validate(self):
        if self.scale_factor_w != 4:
            raise ConfigError("only scale factor 4 is supported")
        ks = self.cfrm_kernels
        if any(k % 2 == 0 for k in ks) or list(ks) != sorted(set(ks)):
            raise ConfigError("cfrm kernels must be strictly increasing odd ints")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must be in [0,1]")
        if self.embed_site not in ("decoder", "encoder"):
            raise ConfigError(f"unknown embed site {self.embed_site!r}")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"unknown branch mode {self.branch_mode!r}")
        return self

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r} (choose from {sorted(ABLATIONS)})")
        cfg = ModelConfig(**{**self.__dict__, **ABLATIONS[name]})
        return cfg.validate()


def random_vgg_store(rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Randomly initialized stand-in with the exact VGG16 shapes. Lets the
    whole suite run without the exported pretrained weights."""
    store = ParamStore()
    for name, ci, co in VGG_CONVS:
        bound = float(np.sqrt(6.0 / (ci * 9)))
        w = rng.uniform(-bound, bound, size=(co, ci, 3, 3)).astype(dtype)
        store.add(f"vgg.{name}.weight", Tensor(w))
        store.add(f"vgg.{name}.bias", Tensor(np.zeros(co, dtype=dtype)))
    store.add("vgg.norm.mean", Tensor(np.asarray(IMAGENET_MEAN, dtype=dtype)))
    store.add("vgg.norm.std", Tensor(np.asarray(IMAGENET_STD, dtype=dtype)))
    return store


class STSCModel:
    """Holds the ParamStore and implements the composed forward pass."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 vgg_store: ParamStore | None = None, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.params = ParamStore()
        c0 = cfg.base_channels
        self.enc_channels = [c0, 2 * c0, 4 * c0, 8 * c0]
        self.bottom_channels = 16 * c0

        def conv(prefix, ci, co, k=3, stride=1, act="relu"):
            return register_conv(self.params, prefix,
                                 init_conv(ci, co, k, stride, act, rng, dtype))

        # encoder: one plain conv per scale + stride-2 conv down; a fifth
        # plain conv at the bottom
        self.enc_plain, self.enc_down = [], []
        ch_in = 3
        for i in range(4):
            ch = self.enc_channels[i]
            self.enc_plain.append(conv(f"encoder.scale{i+1}.conv", ch_in, ch))
            down_in = ch + self._encoder_embed_channels(i + 1)
            down_out = self.bottom_channels if i == 3 else self.enc_channels[i + 1]
            self.enc_down.append(conv(f"encoder.scale{i+1}.down", down_in, down_out, stride=2))
            ch_in = down_out
        self.enc_bottom = conv("encoder.bottom.conv", self.bottom_channels,
                               self.bottom_channels)

        # pyramid context block
        cb = self.bottom_channels
        self.pcb_convs = [conv(f"pcb.bin{b}.conv", cb, cb // 4, k=1)
                          for b in cfg.pcb_bins]
        self.pcb_fuse = conv("pcb.fuse.conv", cb + len(cfg.pcb_bins) * (cb // 4), cb, k=1)

        # frozen VGG extractor
        self.needs_vgg = cfg.branch_mode != "none"
        if self.needs_vgg:
            if vgg_store is None:
                raise ConfigError("branch mode requires a VGG parameter store")
            for name, ci, co in VGG_CONVS:
                wname, bname = f"vgg.{name}.weight", f"vgg.{name}.bias"
                if wname not in vgg_store:
                    raise ConfigError(f"VGG store is missing {wname}")
                self.params.add(wname, vgg_store[wname].astype(dtype), frozen=True)
                self.params.add(bname, vgg_store[bname].astype(dtype), frozen=True)
            self.params.add("vgg.norm.mean", vgg_store["vgg.norm.mean"].astype(dtype),
                            frozen=True)
            self.params.add("vgg.norm.std", vgg_store["vgg.norm.std"].astype(dtype),
                            frozen=True)

        # semantic branches
        sem = cfg.sem_channels
        self.has_branches = cfg.branch_mode in ("both", "texture_only", "structure_only")
        if self.has_branches:
            if cfg.branch_mode != "structure_only":
                self.texture_proj = conv("sfanet.texture.proj", 4 * 64 + 128, sem, k=1)
            if cfg.branch_mode != "texture_only":
                self.structure_proj = conv("sfanet.structure.proj", 4 * 256 + 512, sem, k=1)
            if cfg.cfrm_enabled:
                self.cfrm_paths = {}
                self.cfrm_fuses = {}
                branches = ["shared"] if cfg.cfrm_shared else ["texture", "structure"]
                for br in branches:
                    pfx = "cfrm" if br == "shared" else f"cfrm.{br}"
                    self.cfrm_paths[br] = [conv(f"{pfx}.k{k}.conv", sem, sem, k=k)
                                           for k in cfg.cfrm_kernels]
                    self.cfrm_fuses[br] = conv(f"{pfx}.fuse.conv",
                                               len(cfg.cfrm_kernels) * sem, sem, k=1)
            agg_in = 2 * sem if cfg.branch_mode == "both" else sem
            self.agg_conv = conv("sfanet.aggregate.conv", agg_in, sem, k=1)

        # feature dominative network: one CTL per scale
        if self.has_branches and cfg.fdnet_enabled:
            r = cfg.ctl_reduction
            self.ctl_transform, self.ctl_down, self.ctl_up = [], [], []
            for i in range(4):
                tc = self.enc_channels[i]
                if tc < r:
                    raise ConfigError(f"CTL target channels {tc} < reduction ratio {r}")
                self.ctl_transform.append(conv(f"fdnet.scale{i+1}.transform.conv", sem, tc, k=1))
                self.ctl_down.append(conv(f"fdnet.scale{i+1}.gate.down.conv", tc,
                                          max(tc // r, 1), k=1))
                self.ctl_up.append(conv(f"fdnet.scale{i+1}.gate.up.conv",
                                        max(tc // r, 1), tc, k=1, act=None))

        # decoder
        self.dec_convs = []
        for i in range(4, 0, -1):
            up_ch = self.bottom_channels if i == 4 else self.enc_channels[i]
            dec_in = up_ch + self.enc_channels[i - 1] + self._decoder_embed_channels(i)
            self.dec_convs.append(conv(f"decoder.scale{i}.conv", dec_in,
                                       self.enc_channels[i - 1]))
        self.out_conv = conv("decoder.out.conv", self.enc_channels[0], 3, act="sigmoid")

    # -- channel bookkeeping ------------------------------------------------

    def _embed_channels(self, i: int) -> int:
        cfg = self.cfg
        if cfg.branch_mode == "none":
            return 0
        if cfg.branch_mode == "raw_F":
            return VGG_CHANNELS[i - 1]
        if cfg.fdnet_enabled:
            return self.enc_channels[i - 1]
        return cfg.sem_channels

    def _encoder_embed_channels(self, i: int) -> int:
        return self._embed_channels(i) if self.cfg.embed_site == "encoder" else 0

    def _decoder_embed_channels(self, i: int) -> int:
        return self._embed_channels(i) if self.cfg.embed_site == "decoder" else 0

    # -- components ----------------------------------------------------------

    def encode(self, x: Tensor, tape: GradTape | None = None, embeds=None):
        """Returns (skips f^1..f^4, bottom). Skips sit at H..H/8; the bottom
        (after the 4th stride conv and the 5th plain conv) at H/16."""
        n, c, h, w = x.shape
        if h % 16 or w % 16:
            raise T.GeometryError(f"encode: spatial size {h}x{w} not divisible by 16")
        skips = []
        cur = x
        for i in range(4):
            f = self.enc_plain[i](cur, tape)
            skips.append(f)
            down_in = f
            if embeds is not None and self.cfg.embed_site == "encoder":
                down_in = T.concat_channels(f, embeds[i], tape)
            cur = self.enc_down[i](down_in, tape)
        bottom = self.enc_bottom(cur, tape)
        return skips, bottom

    def pcb(self, bottom: Tensor, tape: GradTape | None = None) -> Tensor:
        # bins wider than the grid clamp to it, so tiny desk inputs still
        # run and the fuse conv always sees the same channel count
        n, c, h, w = bottom.shape
        parts = bottom
        for b, cl in zip(self.cfg.pcb_bins, self.pcb_convs):
            pooled = T.adaptive_avg_pool(bottom, (min(b, h), min(b, w)), tape)
            ctx = cl(pooled, tape)
            ctx = T.nearest_resize(ctx, (h, w), tape)
            parts = T.concat_channels(parts, ctx, tape)
        return self.pcb_fuse(parts, tape)

    def vgg_extract(self, x: Tensor, tape: GradTape | None = None):
        """F_1..F_4 from the frozen VGG16 stack (post-ReLU taps). Gradients
        reach x only when cfg.vgg_grad_to_input is set and a tape is given."""
        vtape = tape if self.cfg.vgg_grad_to_input else None
        n = x.shape[0]
        mean = self.params["vgg.norm.mean"].data.reshape(1, 3, 1, 1)
        std = self.params["vgg.norm.std"].data.reshape(1, 3, 1, 1)
        mean_t = Tensor(np.broadcast_to(mean, (n, 3, 1, 1)).astype(x.dtype))
        std_t = Tensor(np.broadcast_to(std, (n, 3, 1, 1)).astype(x.dtype))
        cur = T.div(T.sub(x, mean_t, vtape), std_t, vtape)
        feats = []
        for name, ci, co in VGG_CONVS:
            layer = ConvLayer(self.params[f"vgg.{name}.weight"],
                              self.params[f"vgg.{name}.bias"], 1, 1, "relu")
            cur = layer(cur, vtape)
            if name in VGG_TAPS:
                feats.append(cur)
                if name != VGG_TAPS[-1]:
                    cur = T.max_pool_k2(cur, vtape)
        return feats

    def reorganize_texture(self, f1: Tensor, f2: Tensor, tape=None) -> Tensor:
        packed = T.space_to_depth_x2(f1, tape)
        cat = T.concat_channels(packed, f2, tape)
        return self.texture_proj(cat, tape)

    def reorganize_structure(self, f3: Tensor, f4: Tensor, tape=None) -> Tensor:
        packed = T.space_to_depth_x2(f3, tape)
        cat = T.concat_channels(packed, f4, tape)
        return self.structure_proj(cat, tape)

    def cfrm(self, f: Tensor, branch: str, tape=None) -> Tensor:
        """Multi-path refinement; pass-through when disabled. The same
        parameter tensors serve both branch invocations when shared."""
        if not self.cfg.cfrm_enabled:
            return f
        key = "shared" if self.cfg.cfrm_shared else branch
        paths = self.cfrm_paths[key]
        out = paths[0](f, tape)
        for p in paths[1:]:
            out = T.concat_channels(out, p(f, tape), tape)
        return self.cfrm_fuses[key](out, tape)

    def aggregate(self, f_te: Tensor | None, f_st: Tensor | None, tape=None) -> Tensor:
        if f_te is None and f_st is None:
            raise ConfigError("aggregate: both branches absent")
        if f_st is not None and f_te is not None:
            up = T.nearest_to(f_st, f_te.shape[2:], tape)
            cat = T.concat_channels(f_te, up, tape)
        elif f_te is not None:
            cat = f_te
        else:
            # keep the aggregated grid at H/2 in structure-only mode too
            th, tw = f_st.shape[2] * 4, f_st.shape[3] * 4
            cat = T.nearest_to(f_st, (th, tw), tape)
        return self.agg_conv(cat, tape)

    def ctl(self, f_ste: Tensor, i: int, tape=None) -> Tensor:
        """Resize to scale i's grid, 1x1 transform, then squeeze-excitation
        style channel gating with a sigmoid weight vector."""
        th, tw = self._scale_hw(f_ste, i)
        resized = self._resize_to(f_ste, (th, tw), tape)
        f_t = self.ctl_transform[i - 1](resized, tape)
        g = T.global_avg_pool(f_t, tape)
        g = self.ctl_down[i - 1](g, tape)
        g = self.ctl_up[i - 1](g, tape)
        w_t = T.sigmoid(g, tape)
        return T.mul(f_t, w_t, tape)

    @staticmethod
    def _scale_hw(f_ste, i):
        # f_ste lives at H/2; scale i wants H / 2^(i-1)
        h2, w2 = f_ste.shape[2], f_ste.shape[3]
        factor = 2 ** (i - 1)
        return (2 * h2) // factor, (2 * w2) // factor

    @staticmethod
    def _resize_to(t, hw, tape):
        th, tw = hw
        h, w = t.shape[2], t.shape[3]
        if th >= h:
            return T.nearest_to(t, hw, tape)
        return T.avg_pool_to(t, hw, tape)

    def compute_embeds(self, x: Tensor, tape=None, vgg_features=None):
        """Per-scale embedding tensors f_ste^1..f_ste^4, or None for the
        plain base network."""
        cfg = self.cfg
        if cfg.branch_mode == "none":
            return None
        feats = vgg_features if vgg_features is not None else self.vgg_extract(x, tape)
        if cfg.branch_mode == "raw_F":
            return list(feats)
        f_te = f_st = None
        if cfg.branch_mode != "structure_only":
            f_te = self.cfrm(self.reorganize_texture(feats[0], feats[1], tape),
                             "texture", tape)
        if cfg.branch_mode != "texture_only":
            f_st = self.cfrm(self.reorganize_structure(feats[2], feats[3], tape),
                             "structure", tape)
        f_ste = self.aggregate(f_te, f_st, tape)
        if cfg.fdnet_enabled:
            return [self.ctl(f_ste, i, tape) for i in range(1, 5)]
        return [self._resize_to(f_ste, self._scale_hw(f_ste, i), tape)
                for i in range(1, 5)]

    def decode(self, bottom_ctx: Tensor, skips, embeds, tape=None) -> Tensor:
        g = bottom_ctx
        for step, i in enumerate(range(4, 0, -1)):
            up = T.nearest_up_x2(g, tape)
            cat = T.concat_channels(up, skips[i - 1], tape)
            if embeds is not None and self.cfg.embed_site == "decoder":
                cat = T.concat_channels(cat, embeds[i - 1], tape)
            g = self.dec_convs[step](cat, tape)
        return self.out_conv(g, tape)

    def forward(self, x: Tensor, tape: GradTape | None = None,
                vgg_features=None) -> Tensor:
        embeds = self.compute_embeds(x, tape, vgg_features)
        enc_embeds = embeds if self.cfg.embed_site == "encoder" else None
        skips, bottom = self.encode(x, tape, enc_embeds)
        bottom_ctx = self.pcb(bottom, tape)
        return self.decode(bottom_ctx, skips, embeds, tape)


def collect_params(model: STSCModel) -> ParamStore:
    return model.params


def load_params(model: STSCModel, store: ParamStore):
    model.params.load(store)
