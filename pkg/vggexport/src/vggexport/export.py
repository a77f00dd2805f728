"""Builds the STSCW export from torchvision's pretrained VGG16.

Exports the 10 conv layers through conv4_3, the ImageNet normalization
constants, and post-ReLU reference activations (relu1_2, relu2_2,
relu3_3, relu4_3) for a fixture image. Activations are computed in double
precision and stored as float32.
"""

import numpy as np
import torch

from . import stscw

# torchvision vgg16 "features" indices of the conv layers through conv4_3
CONV_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14,
    "conv4_1": 17, "conv4_2": 19, "conv4_3": 21,
}
CONV_ORDER = tuple(CONV_INDEX)
TAPS = {"conv1_2": "relu1_2", "conv2_2": "relu2_2",
        "conv3_3": "relu3_3", "conv4_3": "relu4_3"}
POOL_AFTER = {"conv1_2", "conv2_2", "conv3_3"}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(RuntimeError):
    pass


def load_state_dict(weights_path=None):
    """Pretrained VGG16 feature weights. A local .pth state dict takes
    priority; otherwise torchvision fetches (or reuses its cache)."""
    if weights_path is not None:
        try:
            return torch.load(weights_path, map_location="cpu",
                              weights_only=True)
        except (OSError, RuntimeError) as e:
            raise ExportError(f"cannot load weights from {weights_path}: {e}") from e
    try:
        from torchvision.models import VGG16_Weights, vgg16
        return vgg16(weights=VGG16_Weights.IMAGENET1K_V1).state_dict()
    except Exception as e:
        raise ExportError(
            "pretrained VGG16 checkpoint unavailable (no network and no "
            f"torch hub cache): {e}") from e


def read_ppm(path) -> np.ndarray:
    """Minimal binary P6 reader -> [3,H,W] float64 in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ExportError(f"{path}: not a P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ExportError(f"{path}: maxval must be 255")
    pos += 1
    raw = np.frombuffer(data[pos : pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ExportError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def _conv_arrays(state):
    out = {}
    for name, idx in CONV_INDEX.items():
        wk, bk = f"features.{idx}.weight", f"features.{idx}.bias"
        if wk not in state or bk not in state:
            raise ExportError(f"state dict missing {wk}")
        out[name] = (state[wk].detach().cpu().numpy().astype(np.float32),
                     state[bk].detach().cpu().numpy().astype(np.float32))
    w0 = out["conv1_1"][0]
    if w0.shape != (64, 3, 3, 3):
        raise ExportError(f"conv1_1 weight shape {w0.shape}, expected (64,3,3,3)")
    if out["conv4_3"][0].shape != (512, 512, 3, 3):
        raise ExportError("conv4_3 weight shape mismatch")
    return out


def compute_fixture_activations(convs, img):
    """Double-precision forward through the exported stack; returns the
    four post-ReLU tap activations keyed by fixture entry name."""
    mean = np.asarray(IMAGENET_MEAN).reshape(1, 3, 1, 1)
    std = np.asarray(IMAGENET_STD).reshape(1, 3, 1, 1)
    x = torch.from_numpy((img[None] - mean) / std).double()
    taps = {}
    with torch.no_grad():
        for name in CONV_ORDER:
            w, b = convs[name]
            x = torch.nn.functional.conv2d(
                x, torch.from_numpy(w).double(), torch.from_numpy(b).double(),
                padding=1)
            x = torch.relu(x)
            if name in TAPS:
                taps["fixture." + TAPS[name]] = x.numpy().astype(np.float32)
            if name in POOL_AFTER:
                x = torch.nn.functional.max_pool2d(x, 2)
    return taps


def build_entries(state, fixture_img):
    convs = _conv_arrays(state)
    entries = []
    for name in CONV_ORDER:
        w, b = convs[name]
        entries.append((f"vgg.{name}.weight", w))
        entries.append((f"vgg.{name}.bias", b))
    entries.append(("vgg.norm.mean", np.asarray(IMAGENET_MEAN, dtype=np.float32)))
    entries.append(("vgg.norm.std", np.asarray(IMAGENET_STD, dtype=np.float32)))
    for name, act in compute_fixture_activations(convs, fixture_img).items():
        entries.append((name, act))
    return entries


def export_vgg16(out_path, fixture_image_path, weights_path=None, log=print):
    state = load_state_dict(weights_path)
    img = read_ppm(fixture_image_path)
    entries = build_entries(state, img)
    crc = stscw.write(entries, out_path)
    log(f"wrote {out_path} ({len(entries)} entries, crc32=0x{crc:08x})")
    for name, arr in entries:
        log(f"  {name:<24} {arr.dtype} {tuple(arr.shape)}")
    return crc
