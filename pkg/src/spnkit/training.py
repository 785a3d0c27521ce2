"""Segmentation refinement training on the toy dataset.

The model refines a coarse class-probability map using the image: a guidance
network emits propagation gates at a reduced resolution, the coarse map is
downsampled and embedded by a relu conv, cascaded propagation units mix it
under the gates, and a linear conv maps back to class logits which are
upsampled to full resolution for a softmax cross-entropy loss.

Gates pass through the stability rescaling every step, so scan transfer
matrices keep spectral radius at most one no matter what the network emits;
an epoch-level health check verifies that invariant on real data. A
non-finite loss aborts the run with gate statistics in the error message.

The batch sampler is reseeded identically every epoch: with a zero learning
rate the per-epoch metrics repeat exactly, which pins down accidental hidden
state. Gradients are averaged per pixel within a sample and summed over the
batch.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataset import load_sample, load_split
from .errors import ConfigError, ContractError, TrainingAborted
from .guidance import (
    Architecture,
    checkpoint_save,
    conv3x3_backward,
    conv3x3_forward,
    guidance_backward,
    guidance_forward,
    init_params,
    relu_backward,
    relu_forward,
    resize_backward,
    resize_forward,
)
from .propagation import ConnectionKind, boundary_mask, spn_backward, spn_forward
from .stability import (
    project_gates_backward,
    project_gates_cached,
    verify_stability,
)

_KINDS = {"one": ConnectionKind.ONE_WAY, "three": ConnectionKind.THREE_WAY}


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; serializes to key=value lines."""

    epochs: int = 10
    batch: int = 4
    lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    units: int = 2
    prop_channels: int = 8
    widths: str = "8,16,32"
    scale: int = 2
    kind: str = "three"
    post_gain: float = 3.0
    time_limit: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"kind must be one of {sorted(_KINDS)}, got {self.kind!r}")
        if self.epochs < 1 or self.batch < 1 or self.threads < 1:
            raise ConfigError("epochs, batch, and threads must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0 and momentum in [0, 1)")

    def to_lines(self) -> list:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @staticmethod
    def from_mapping(kv: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(TrainConfig)}
        casts = {"int": int, "float": float, "str": str}
        values = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = casts[types[key]](raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
        return TrainConfig(**values)

    @staticmethod
    def from_file(path) -> "TrainConfig":
        kv = {}
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {ln} is not key=value: {line!r}")
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return TrainConfig.from_mapping(kv)

    def architecture(self, classes: int, image_channels: int = 3) -> Architecture:
        return Architecture(
            image_channels=image_channels,
            widths=tuple(int(s) for s in self.widths.split(",")),
            prop_channels=self.prop_channels,
            classes=classes,
            kind=_KINDS[self.kind],
            scale=self.scale,
            units=self.units,
        )


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross entropy. Returns (loss, dlogits)."""
    z = logits.astype(np.float64)
    z -= z.max(axis=2, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=2, keepdims=True)
    logp = z - np.log(denom)
    n = labels.size
    picked = np.take_along_axis(logp, labels[:, :, None].astype(np.intp), axis=2)
    loss = -picked.sum() / n
    grad = ez / denom
    rows = np.arange(labels.shape[0])[:, None]
    cols = np.arange(labels.shape[1])[None, :]
    grad[rows, cols, labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


def init_pipeline_params(arch: Architecture, rng: np.random.Generator,
                         post_gain: float = 3.0, dtype=np.float32) -> dict:
    """Random init plus identity taps through the embedding convs.

    The pre and post convs get a strong center-tap identity on the first
    min(classes, channels) channels so the untrained model already passes the
    coarse map through; training then has to improve on it rather than first
    rediscover it.
    """
    params = init_params(arch, rng, dtype=dtype)
    taps = min(arch.classes, arch.prop_channels)
    for c in range(taps):
        params["pre.w"][1, 1, c, c] += 1.0
        params["post.w"][1, 1, c, c] += dtype(post_gain)
    return params


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float) -> None:
    for key in params:
        v = velocity[key]
        v *= momentum
        v -= lr * grads[key]
        params[key] += v


def pipeline_forward(params: dict, arch: Architecture, image: np.ndarray,
                     coarse: np.ndarray):
    """Full model: image + coarse probabilities to full-resolution logits."""
    h, w = image.shape[:2]
    hp = max(1, h // arch.scale)
    wp = max(1, w // arch.scale)
    raw, gcache = guidance_forward(params, arch, image, hp, wp)
    valid = ~boundary_mask(hp, wp, arch.kind)[:, :, None, :, :]
    masked = raw * valid
    gates, pcache = project_gates_cached(masked, arch.kind)
    low = resize_forward(coarse, hp, wp)
    zpre, cpre = conv3x3_forward(low, params["pre.w"], params["pre.b"], 1)
    apre, mpre = relu_forward(zpre)
    hidden, scaches = spn_forward(apre, gates.astype(apre.dtype), arch.kind,
                                  arch.units, check=False)
    logits_low, cpost = conv3x3_forward(hidden, params["post.w"],
                                        params["post.b"], 1)
    logits = resize_forward(logits_low, h, w)
    cache = {
        "gcache": gcache, "pcache": pcache, "valid": valid,
        "cpre": cpre, "mpre": mpre, "scaches": scaches, "cpost": cpost,
        "low_shape": logits_low.shape, "gates": gates,
    }
    return logits, cache


def pipeline_backward(grad_logits: np.ndarray, cache: dict) -> dict:
    low_h, low_w, _ = cache["low_shape"]
    g_low = resize_backward(grad_logits, low_h, low_w)
    dhidden, dpw, dpb = conv3x3_backward(g_low, cache["cpost"])
    dapre, dgates = spn_backward(dhidden, cache["scaches"])
    dzpre = relu_backward(dapre, cache["mpre"])
    _, dprew, dpreb = conv3x3_backward(dzpre, cache["cpre"])
    dmasked = project_gates_backward(dgates, cache["pcache"])
    draw = (dmasked * cache["valid"]).astype(grad_logits.dtype)
    grads = guidance_backward(draw, cache["gcache"])
    grads["post.w"] = dpw
    grads["post.b"] = dpb
    grads["pre.w"] = dprew
    grads["pre.b"] = dpreb
    return grads


def pipeline_signature(cache: dict) -> bytes:
    """Branch fingerprint for finite-difference checks of the whole model."""
    from .guidance import relu_signature
    parts = [relu_signature(cache["gcache"]),
             np.packbits(cache["mpre"].reshape(-1)).tobytes(),
             np.packbits(cache["pcache"][3].reshape(-1)).tobytes()]
    parts += [c.winner.tobytes() for c in cache["scaches"]]
    return b"".join(parts)


def refine_sample(params: dict, arch: Architecture, image: np.ndarray,
                  coarse: np.ndarray, allowed=None):
    """Predict labels for one sample. Returns (pred (H, W) int32, logits)."""
    logits, _ = pipeline_forward(params, arch, image, coarse)
    if allowed is not None:
        block = np.full(logits.shape[2], -np.inf, dtype=logits.dtype)
        block[np.asarray(sorted(allowed), dtype=int)] = 0.0
        logits = logits + block
    return logits.argmax(axis=2).astype(np.int32), logits


class IoUAccumulator:
    """Dataset-level intersection-over-union, averaged over seen classes."""

    def __init__(self, classes: int):
        self.inter = np.zeros(classes, dtype=np.int64)
        self.union = np.zeros(classes, dtype=np.int64)

    def update(self, pred: np.ndarray, true: np.ndarray) -> None:
        for c in range(self.inter.size):
            p = pred == c
            t = true == c
            self.inter[c] += int((p & t).sum())
            self.union[c] += int((p | t).sum())

    def mean(self) -> float:
        seen = self.union > 0
        if not seen.any():
            return 0.0
        return float((self.inter[seen] / self.union[seen]).mean())

    def per_class(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.union > 0, self.inter / self.union, np.nan)


def coarse_iou(samples, classes: int) -> float:
    acc = IoUAccumulator(classes)
    for _, labels, coarse in samples:
        acc.update(coarse.argmax(axis=2), labels)
    return acc.mean()


def _gate_abort_message(loss, gates, kind) -> str:
    rep = verify_stability(gates, kind)
    finite = np.isfinite(gates).all()
    return (f"non-finite loss {loss!r}; gate statistics: finite={finite}, "
            f"min={np.nanmin(gates):.4g}, max={np.nanmax(gates):.4g}, {rep}")


@dataclass
class TrainResult:
    best_iou: float
    coarse_iou: float
    epochs_run: int
    out_dir: str
    rows: list


METRIC_FIELDS = ("epoch", "loss", "val_iou", "gate_max_abs_sum", "is_best", "seconds")


def evaluate(params, arch, samples, threads: int = 1, restrict: bool = False) -> float:
    """Mean IoU over samples; thread count never changes the result."""
    def predict(sample):
        image, labels, coarse = sample
        allowed = np.unique(labels) if restrict else None
        pred, _ = refine_sample(params, arch, image, coarse, allowed)
        return pred

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(predict, samples))
    else:
        preds = [predict(s) for s in samples]
    acc = IoUAccumulator(arch.classes)
    for pred, sample in zip(preds, samples):
        acc.update(pred, sample[1])
    return acc.mean()


def train(config: TrainConfig, data_dir, out_dir, progress=None) -> TrainResult:
    """Run the full loop; writes checkpoints, metrics.csv, and config.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, val_idx, meta = load_split(data_dir)
    classes = int(meta["classes"])
    train_samples = [load_sample(data_dir, i) for i in train_idx]
    val_samples = [load_sample(data_dir, i) for i in val_idx]
    arch = config.architecture(classes)
    rng = np.random.default_rng(config.seed)
    params = init_pipeline_params(arch, rng, post_gain=config.post_gain)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    (out / "config.txt").write_text("\n".join(config.to_lines()) + "\n")
    base_iou = coarse_iou(val_samples, classes)

    rows = []
    best = -1.0
    started = time.perf_counter()
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            # identical sampler stream every epoch: zero-lr runs repeat exactly
            order = np.random.default_rng(config.seed + 1).permutation(len(train_samples))
            losses = []
            for start in range(0, len(order), config.batch):
                batch = [train_samples[i] for i in order[start:start + config.batch]]
                grads = None
                batch_loss = 0.0
                for image, labels, coarse in batch:
                    logits, cache = pipeline_forward(params, arch, image, coarse)
                    loss, dlogits = softmax_xent(logits, labels)
                    if not np.isfinite(loss):
                        raise TrainingAborted(_gate_abort_message(
                            loss, cache["gates"], arch.kind))
                    batch_loss += loss
                    g = pipeline_backward(dlogits, cache)
                    if grads is None:
                        grads = g
                    else:
                        for k in grads:
                            grads[k] += g[k]
                sgd_step(params, grads, velocity, config.lr, config.momentum)
                losses.append(batch_loss / len(batch))

            image0 = val_samples[0][0]
            hp = max(1, image0.shape[0] // arch.scale)
            wp = max(1, image0.shape[1] // arch.scale)
            raw, _ = guidance_forward(params, arch, image0, hp, wp)
            valid = ~boundary_mask(hp, wp, arch.kind)[:, :, None, :, :]
            gates, _ = project_gates_cached(raw * valid, arch.kind)
            health = verify_stability(gates, arch.kind)
            if not health.ok:
                raise ContractError(f"gate projection failed to bound gates: {health}")

            val_iou = evaluate(params, arch, val_samples, threads=config.threads)
            is_best = val_iou > best
            if is_best:
                best = val_iou
                checkpoint_save(out / "best", arch, params,
                                meta={"epoch": epoch, "val_iou": repr(val_iou)})
            checkpoint_save(out / "last", arch, params,
                            meta={"epoch": epoch, "val_iou": repr(val_iou)})
            row = {
                "epoch": epoch,
                "loss": repr(float(np.mean(losses))),
                "val_iou": repr(val_iou),
                "gate_max_abs_sum": repr(health.max_abs_sum),
                "is_best": int(is_best),
                "seconds": f"{time.perf_counter() - t0:.3f}",
            }
            writer.writerow([row[k] for k in METRIC_FIELDS])
            fh.flush()
            rows.append(row)
            if progress is not None:
                progress(row)
            if config.time_limit and time.perf_counter() - started > config.time_limit:
                break
    return TrainResult(best_iou=best, coarse_iou=base_iou,
                       epochs_run=len(rows), out_dir=str(out), rows=rows)
