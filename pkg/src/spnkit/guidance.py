"""Gate-producing convolutional network and parameter checkpointing.

The network is a small encoder/decoder over the input image: three 3x3 conv
layers (the last two at stride 2), mirrored by two decoder convs whose inputs
are bilinearly upsampled and summed with the matching encoder activation
before the relu. Decoder output is resized to the propagation resolution and
a final linear conv emits one channel per gate slot. Head weights start small
so propagation begins near the identity.

Everything is plain numpy with hand-written backward passes; the forward
caches exactly what its backward needs. Convolutions gather the nine shifted
views of a zero-padded input and contract them against the kernel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError, FormatError
from .propagation import ConnectionKind
from .tensor import interp_matrix, read_array, resize_array, write_array


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """3x3 convolution, zero padding 1. x: (H, W, Cin), w: (3, 3, Cin, Cout)."""
    if x.ndim != 3 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv shapes disagree: x {x.shape}, w {w.shape}")
    if stride not in (1, 2):
        raise DimensionError("stride must be 1 or 2")
    h, wd, cin = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    padded = np.zeros((h + 2, wd + 2, cin), dtype=x.dtype)
    padded[1:h + 1, 1:wd + 1] = x
    patches = np.empty((ho, wo, 3, 3, cin), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            patches[:, :, dy, dx, :] = padded[
                dy:dy + stride * (ho - 1) + 1:stride,
                dx:dx + stride * (wo - 1) + 1:stride]
    y = np.tensordot(patches, w, axes=([2, 3, 4], [0, 1, 2])) + b
    return y.astype(x.dtype), (patches, w, x.shape, stride)


def conv3x3_backward(grad: np.ndarray, cache):
    """Returns (dx, dw, db) for conv3x3_forward."""
    patches, w, x_shape, stride = cache
    h, wd, cin = x_shape
    ho, wo = grad.shape[:2]
    dw = np.tensordot(patches, grad, axes=([0, 1], [0, 1]))
    db = grad.sum(axis=(0, 1))
    dpatches = np.tensordot(grad, w, axes=(2, 3))  # (ho, wo, 3, 3, cin)
    dpad = np.zeros((h + 2, wd + 2, cin), dtype=grad.dtype)
    for dy in range(3):
        for dx in range(3):
            dpad[dy:dy + stride * (ho - 1) + 1:stride,
                 dx:dx + stride * (wo - 1) + 1:stride] += dpatches[:, :, dy, dx, :]
    return dpad[1:h + 1, 1:wd + 1], dw.astype(grad.dtype), db.astype(grad.dtype)


def relu_forward(z: np.ndarray):
    mask = z > 0
    return np.where(mask, z, z.dtype.type(0)), mask


def relu_backward(grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, grad, grad.dtype.type(0))


def resize_forward(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of (H, W, C), float64 accumulation."""
    return resize_array(x, out_h, out_w)


def resize_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resize_forward: transpose of the interpolation matrices."""
    rh = interp_matrix(in_h, grad.shape[0])
    rw = interp_matrix(in_w, grad.shape[1])
    tmp = np.tensordot(rh, grad.astype(np.float64, copy=False), axes=(0, 0))
    out = np.tensordot(tmp, rw, axes=(1, 0))
    return np.moveaxis(out, 2, 1).astype(grad.dtype)


_KIND_NAMES = {ConnectionKind.ONE_WAY: "one", ConnectionKind.THREE_WAY: "three"}
_NAME_KINDS = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class Architecture:
    """Shape contract shared by the network, the trainer, and checkpoints."""

    image_channels: int = 3
    widths: tuple = (8, 16, 32)
    prop_channels: int = 8
    classes: int = 2
    kind: ConnectionKind = ConnectionKind.THREE_WAY
    scale: int = 2
    units: int = 2

    def __post_init__(self):
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be three positive ints, got {self.widths}")
        if self.scale < 1 or self.units < 1 or self.classes < 2:
            raise ConfigError("scale and units must be >= 1, classes >= 2")

    @property
    def gate_slots(self) -> int:
        return 4 * self.kind.gates_per_direction

    @property
    def head_channels(self) -> int:
        return self.prop_channels * self.gate_slots

    def to_lines(self):
        return [
            f"image_channels={self.image_channels}",
            f"widths={','.join(str(w) for w in self.widths)}",
            f"prop_channels={self.prop_channels}",
            f"classes={self.classes}",
            f"kind={_KIND_NAMES[self.kind]}",
            f"scale={self.scale}",
            f"units={self.units}",
        ]

    @staticmethod
    def from_mapping(kv: dict) -> "Architecture":
        try:
            return Architecture(
                image_channels=int(kv["image_channels"]),
                widths=tuple(int(s) for s in kv["widths"].split(",")),
                prop_channels=int(kv["prop_channels"]),
                classes=int(kv["classes"]),
                kind=_NAME_KINDS[kv["kind"]],
                scale=int(kv["scale"]),
                units=int(kv["units"]),
            )
        except KeyError as e:
            raise CheckpointError(f"architecture field missing: {e}") from e
        except ValueError as e:
            raise CheckpointError(f"bad architecture field: {e}") from e


PARAM_ORDER = ("enc0", "enc1", "enc2", "dec0", "dec1", "head", "pre", "post")


def param_shapes(arch: Architecture) -> dict:
    w0, w1, w2 = arch.widths
    c = arch.prop_channels
    shapes = {
        "enc0": (3, 3, arch.image_channels, w0),
        "enc1": (3, 3, w0, w1),
        "enc2": (3, 3, w1, w2),
        "dec0": (3, 3, w2, w1),
        "dec1": (3, 3, w1, w0),
        "head": (3, 3, w0, arch.head_channels),
        "pre": (3, 3, arch.classes, c),
        "post": (3, 3, c, arch.classes),
    }
    out = {}
    for name in PARAM_ORDER:
        out[name + ".w"] = shapes[name]
        out[name + ".b"] = (shapes[name][3],)
    return out


HEAD_INIT_SCALE = 0.1


def init_params(arch: Architecture, rng: np.random.Generator,
                dtype=np.float32) -> dict:
    """Uniform fan-in initialization, zero biases, damped gate head."""
    params = {}
    for name in PARAM_ORDER:
        shape = param_shapes(arch)[name + ".w"]
        bound = np.sqrt(1.0 / (9.0 * shape[2]))
        w = rng.uniform(-bound, bound, size=shape)
        if name == "head":
            w *= HEAD_INIT_SCALE
        params[name + ".w"] = w.astype(dtype)
        params[name + ".b"] = np.zeros(shape[3], dtype=dtype)
    return params


def guidance_forward(params: dict, arch: Architecture, image: np.ndarray,
                     prop_h: int, prop_w: int):
    """Image (H, W, Cin) to raw gates (prop_h, prop_w, C, 4, K), plus cache.

    Raw gates carry no boundary zeros and no stability bound; callers mask
    and project them before propagation.
    """
    if image.ndim != 3 or image.shape[2] != arch.image_channels:
        raise DimensionError(
            f"image shaped {image.shape}, expected (H, W, {arch.image_channels})")
    z0, c0 = conv3x3_forward(image, params["enc0.w"], params["enc0.b"], 1)
    a0, m0 = relu_forward(z0)
    z1, c1 = conv3x3_forward(a0, params["enc1.w"], params["enc1.b"], 2)
    a1, m1 = relu_forward(z1)
    z2, c2 = conv3x3_forward(a1, params["enc2.w"], params["enc2.b"], 2)
    a2, m2 = relu_forward(z2)

    u1 = resize_forward(a2, a1.shape[0], a1.shape[1])
    zd0, cd0 = conv3x3_forward(u1, params["dec0.w"], params["dec0.b"], 1)
    b1, md0 = relu_forward(zd0 + a1)
    u0 = resize_forward(b1, image.shape[0], image.shape[1])
    zd1, cd1 = conv3x3_forward(u0, params["dec1.w"], params["dec1.b"], 1)
    b0, md1 = relu_forward(zd1 + a0)

    feat = resize_forward(b0, prop_h, prop_w)
    raw, ch = conv3x3_forward(feat, params["head.w"], params["head.b"], 1)
    k = arch.kind.gates_per_direction
    gates = raw.reshape(prop_h, prop_w, arch.prop_channels, 4, k)
    cache = {
        "convs": (c0, c1, c2, cd0, cd1, ch),
        "masks": (m0, m1, m2, md0, md1),
        "sizes": (a2.shape, b1.shape, b0.shape, image.shape),
        "raw_shape": raw.shape,
    }
    return gates, cache


def guidance_backward(grad_gates: np.ndarray, cache: dict):
    """Parameter gradients of guidance_forward. Image gradient is discarded."""
    c0, c1, c2, cd0, cd1, ch = cache["convs"]
    m0, m1, m2, md0, md1 = cache["masks"]
    a2_shape, b1_shape, b0_shape, img_shape = cache["sizes"]
    grads = {}

    graw = grad_gates.reshape(cache["raw_shape"])
    dfeat, grads["head.w"], grads["head.b"] = conv3x3_backward(graw, ch)
    db0 = resize_backward(dfeat, b0_shape[0], b0_shape[1])

    dzd1 = relu_backward(db0, md1)
    da0_skip = dzd1
    du0, grads["dec1.w"], grads["dec1.b"] = conv3x3_backward(dzd1, cd1)
    db1 = resize_backward(du0, b1_shape[0], b1_shape[1])

    dzd0 = relu_backward(db1, md0)
    da1_skip = dzd0
    du1, grads["dec0.w"], grads["dec0.b"] = conv3x3_backward(dzd0, cd0)
    da2 = resize_backward(du1, a2_shape[0], a2_shape[1])

    dz2 = relu_backward(da2, m2)
    da1, grads["enc2.w"], grads["enc2.b"] = conv3x3_backward(dz2, c2)
    dz1 = relu_backward(da1 + da1_skip, m1)
    da0, grads["enc1.w"], grads["enc1.b"] = conv3x3_backward(dz1, c1)
    dz0 = relu_backward(da0 + da0_skip, m0)
    _, grads["enc0.w"], grads["enc0.b"] = conv3x3_backward(dz0, c0)
    return grads


def relu_signature(cache: dict) -> bytes:
    """Branch fingerprint of a forward pass, for finite-difference guards."""
    return b"".join(np.packbits(m.reshape(-1)).tobytes() for m in cache["masks"])


def checkpoint_save(directory, arch: Architecture, params: dict,
                    meta: dict | None = None) -> None:
    """Write parameters (one tensor file each) plus a manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["format=spn-checkpoint-v1"]
    lines += arch.to_lines()
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key}={value}")
    for key in sorted(params):
        fname = key.replace(".", "_") + ".spnt"
        arr = params[key]
        write_array(d / fname, arr if arr.ndim > 0 else arr[None])
        lines.append(f"param.{key}={fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def checkpoint_load(directory):
    """Read a checkpoint. Returns (arch, params, meta)."""
    d = Path(directory)
    mpath = d / "manifest.txt"
    if not mpath.is_file():
        raise CheckpointError(f"no manifest.txt under {d}")
    kv, files, meta = {}, {}, {}
    for ln, line in enumerate(mpath.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"manifest line {ln} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        if key.startswith("param."):
            files[key[6:]] = value
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            kv[key] = value
    if kv.get("format") != "spn-checkpoint-v1":
        raise CheckpointError(f"unsupported checkpoint format {kv.get('format')!r}")
    arch = Architecture.from_mapping(kv)
    expected = param_shapes(arch)
    if set(files) != set(expected):
        missing = sorted(set(expected) - set(files))
        extra = sorted(set(files) - set(expected))
        raise CheckpointError(
            f"parameter set mismatch: missing {missing}, unexpected {extra}")
    params = {}
    for key, fname in files.items():
        try:
            arr = read_array(d / fname)
        except (OSError, FormatError) as e:
            raise CheckpointError(f"cannot read {key} from {fname}: {e}") from e
        if arr.shape != expected[key]:
            raise CheckpointError(
                f"{key} shaped {arr.shape}, architecture needs {expected[key]}")
        params[key] = arr
    return arch, params, meta
