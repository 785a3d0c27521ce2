"""Command line interface.

Exit codes: 0 on success, 1 when a verification or training check fails,
2 for usage, configuration, or file-format problems.

The `verify` and `gradcheck` commands accept deliberate fault injections
(`--inject-fault`, `--perturb-backward`). A faulted run must exit 1; that the
checks catch the planted defect is itself part of the verification story.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import affinity as aff
from . import dataset as ds
from . import training as tr
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    TrainingAborted,
)
from .fdcheck import check_gradient
from .guidance import checkpoint_load
from .propagation import (
    ConnectionKind,
    Direction,
    DIRECTION_NAMES,
    NAME_TO_DIRECTION,
    apply_boundary,
    boundary_mask,
    check_boundary_zeros,
    propagate_direction,
    propagate_direction_backward,
    propagate_direction_cached,
    random_gates,
)
from .stability import (
    STABILITY_TOL,
    gate_abs_sums,
    project_gates,
    project_gates_backward,
    project_gates_cached,
    verify_stability,
)
from .tensor import read_array, read_image_pnm, write_array, write_image_pnm

KINDS = {"one": ConnectionKind.ONE_WAY, "three": ConnectionKind.THREE_WAY}


def _kind(name: str) -> ConnectionKind:
    return KINDS[name]


class CheckLog:
    """Collects named pass/fail lines and remembers the overall verdict."""

    def __init__(self):
        self.ok = True

    def record(self, name: str, passed: bool, detail: str):
        verdict = "PASS" if passed else "FAIL"
        print(f"{name}: {verdict} ({detail})")
        if not passed:
            self.ok = False


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    kind = _kind(args.kind)
    dtype = np.float64 if args.bits == 64 else np.float32
    scan_tol = 1e-10 if args.bits == 64 else 1e-5
    const_tol = 1e-12 if args.bits == 64 else 1e-5
    log = CheckLog()

    worst = {"boundary": True, "rowsum": 0.0, "scan": 0.0, "stability": 0.0,
             "spectra": 0.0, "const": 0.0}
    for trial in range(args.trials):
        h = int(rng.integers(2, args.max_size + 1))
        w = int(rng.integers(2, args.max_size + 1))
        gates = random_gates(h, w, args.channels, kind, rng, low=-1.5, high=1.5)
        gates = project_gates(gates, kind)
        if args.inject_fault == "unprojected":
            gates = random_gates(h, w, args.channels, kind, rng,
                                 low=0.6, high=1.4)
        checked = gates.copy()
        if args.inject_fault == "boundary":
            checked[0, 0, 0, Direction.LEFT_TO_RIGHT, 0] = 0.25
        try:
            check_boundary_zeros(checked, kind)
        except ContractError:
            worst["boundary"] = False

        x = rng.standard_normal((h, w, args.channels))
        for d in Direction:
            gd = gates[:, :, :, d, :]
            dense = aff.build_dense_affinity(gd, d, kind)
            worst["rowsum"] = max(worst["rowsum"],
                                  float(np.abs(dense.row_sums() - 1.0).max()))
            scan = propagate_direction(x.astype(dtype), gd.astype(dtype), d, kind)
            oracle = aff.oracle_propagate(x, gd, d, kind)
            scan_f64 = scan.astype(np.float64)
            if args.inject_fault == "scan-perturb":
                scan_f64 = scan_f64 + 100.0 * scan_tol
            worst["scan"] = max(worst["scan"],
                                float(np.abs(scan_f64 - oracle).max()))
            radii = aff.step_spectra(gd, d, kind)
            if radii.size:
                worst["spectra"] = max(worst["spectra"], float(radii.max()))

        rep = verify_stability(gates, kind)
        worst["stability"] = max(worst["stability"], rep.max_abs_sum)

        const = np.full((h, w, args.channels), 0.75, dtype=dtype)
        for d in Direction:
            out = propagate_direction(const, gates[:, :, :, d, :].astype(dtype),
                                      d, kind)
            worst["const"] = max(worst["const"],
                                 float(np.abs(out - 0.75).max()))

    log.record("boundary-contract", worst["boundary"],
               "all required gate zeros in place" if worst["boundary"]
               else "nonzero gate found on a scan boundary")
    log.record("dense-row-sums", worst["rowsum"] <= 1e-10,
               f"max |row sum - 1| = {worst['rowsum']:.3e}, tol 1e-10")
    log.record("scan-vs-dense-oracle", worst["scan"] <= scan_tol,
               f"max |scan - oracle| = {worst['scan']:.3e}, tol {scan_tol:g}")
    log.record("gate-row-bound", worst["stability"] <= 1.0 + STABILITY_TOL,
               f"max abs gate sum = {worst['stability']:.9f}, "
               f"limit {1.0 + STABILITY_TOL:g}")
    log.record("step-spectral-radius", worst["spectra"] <= 1.0 + STABILITY_TOL,
               f"max eigenvalue magnitude = {worst['spectra']:.9f}")
    log.record("constant-fixed-point", worst["const"] <= const_tol,
               f"max drift = {worst['const']:.3e}, tol {const_tol:g}")
    return 0 if log.ok else 1


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    log = CheckLog()
    budget_each = max(args.coords // 8, 10)

    def fuzz(grad):
        if not args.perturb_backward:
            return grad
        scale = np.abs(grad).max() or 1.0
        return grad + 0.05 * scale * rng.standard_normal(grad.shape)

    total = 0
    for kind_name in ("one", "three"):
        kind = _kind(kind_name)
        d = Direction(int(rng.integers(0, 4)))
        x = rng.standard_normal((5, 6, 2))
        g = random_gates(5, 6, 2, kind, rng, high=0.8 / kind.gates_per_direction)
        gd = g[:, :, :, d, :].copy()
        wts = rng.standard_normal(x.shape)
        _, cache = propagate_direction_cached(x, gd, d, kind)
        dx, dg = propagate_direction_backward(wts, cache)
        res = check_gradient(
            lambda a: float((propagate_direction(a, gd, d, kind) * wts).sum()),
            x, fuzz(dx), rng=rng, num=budget_each, eps=args.eps)
        total += res.checked
        log.record(f"scan-input[{kind_name},{DIRECTION_NAMES[d]}]",
                   res.max_rel_err < 1e-4, str(res))
        mask = np.broadcast_to(
            (~boundary_mask(5, 6, kind)[:, :, d, :])[:, :, None, :],
            gd.shape).copy()
        res = check_gradient(
            lambda a: float((propagate_direction(x, a, d, kind) * wts).sum()),
            gd, fuzz(dg), rng=rng, num=budget_each, eps=args.eps, mask=mask)
        total += res.checked
        log.record(f"scan-gates[{kind_name},{DIRECTION_NAMES[d]}]",
                   res.max_rel_err < 1e-4, str(res))

    g = random_gates(4, 4, 2, ConnectionKind.THREE_WAY, rng, low=-1.3, high=1.3)
    wts = rng.standard_normal(g.shape)
    _, pc = project_gates_cached(g, ConnectionKind.THREE_WAY)
    dg = project_gates_backward(wts, pc)
    res = check_gradient(
        lambda a: float((project_gates(a, ConnectionKind.THREE_WAY) * wts).sum()),
        g, fuzz(dg), rng=rng, num=budget_each, eps=args.eps, mask=g != 0.0,
        signature=lambda a: (gate_abs_sums(a, ConnectionKind.THREE_WAY) > 1.0).tobytes())
    total += res.checked
    log.record("projection", res.max_rel_err < 1e-4, str(res))

    cfg = tr.TrainConfig(prop_channels=3, widths="3,4,5", scale=2, units=2)
    arch = cfg.architecture(2)
    params = tr.init_pipeline_params(arch, rng, dtype=np.float64)
    image = rng.random((12, 12, 3))
    coarse = rng.random((12, 12, 2))
    coarse /= coarse.sum(axis=2, keepdims=True)
    labels = rng.integers(0, 2, size=(12, 12)).astype(np.int32)

    def run(p):
        logits, cache = tr.pipeline_forward(p, arch, image, coarse)
        loss, dlogits = tr.softmax_xent(logits, labels)
        return loss, dlogits, cache

    _, dlogits, cache = run(params)
    grads = tr.pipeline_backward(dlogits, cache)
    for key in ("enc1.w", "head.w", "pre.w", "post.w"):
        def loss_fn(a, key=key):
            trial = dict(params)
            trial[key] = a
            return run(trial)[0]

        def sig_fn(a, key=key):
            trial = dict(params)
            trial[key] = a
            return tr.pipeline_signature(run(trial)[2])

        res = check_gradient(loss_fn, params[key], fuzz(grads[key]), rng=rng,
                             num=budget_each, eps=args.eps, signature=sig_fn)
        total += res.checked
        log.record(f"pipeline[{key}]", res.max_rel_err < 1e-3, str(res))

    print(f"total coordinates checked: {total}")
    if total < args.coords:
        log.record("coverage", False,
                   f"only {total} coordinates checked, wanted {args.coords}")
    return 0 if log.ok else 1


def cmd_affinity(args) -> int:
    rng = np.random.default_rng(args.seed)
    kind = _kind(args.kind)
    d = NAME_TO_DIRECTION[args.direction]
    gates = random_gates(args.height, args.width, args.channels, kind, rng,
                         low=-1.0, high=1.0)
    gates = project_gates(gates, kind)
    gd = gates[:, :, :, d, :]
    dense = aff.build_dense_affinity(gd, d, kind)
    resid = float(np.abs(dense.row_sums() - 1.0).max())
    stats = aff.sparsity_stats(dense)
    radii = aff.step_spectra(gd, d, kind)
    rep = verify_stability(gates, kind)
    print(f"grid {args.height}x{args.width}, {args.channels} channel(s), "
          f"{args.kind}-way, direction {args.direction}")
    print(f"row-sum residual: {resid:.3e}")
    print(f"nonzeros: {stats.nonzeros}/{stats.entries} "
          f"(density {stats.density:.4f}), "
          f"block lower triangular: {stats.block_lower_triangular}")
    print(f"max step spectral radius: {radii.max() if radii.size else 0.0:.9f}")
    print(rep)
    if args.out_csv:
        lines = [rep.to_csv().rstrip("\n"), "metric,value",
                 f"row_sum_residual,{resid:.17g}",
                 f"nonzeros,{stats.nonzeros}",
                 f"density,{stats.density:.17g}",
                 f"block_lower_triangular,{int(stats.block_lower_triangular)}",
                 f"max_step_spectral_radius,{radii.max() if radii.size else 0.0:.17g}"]
        Path(args.out_csv).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out_csv}")
    if args.save:
        write_array(args.save, dense.G)
        print(f"wrote {args.save}")
    return 0 if resid <= 1e-10 and stats.block_lower_triangular else 1


def cmd_impulse(args) -> int:
    kind = _kind(args.kind)
    d = NAME_TO_DIRECTION[args.direction]
    k = kind.gates_per_direction
    gates = apply_boundary(
        np.full((args.height, args.width, 1, 4, k), args.gate_value), kind)
    gd = gates[:, :, :, d, :]
    resp = aff.impulse_response(gd, d, kind, args.row, args.col)
    x = np.zeros((args.height, args.width, 1))
    x[args.row, args.col, 0] = 1.0
    scan = propagate_direction(x, gd, d, kind)[:, :, 0]
    mismatch = float(np.abs(scan - resp).max())
    with np.printoptions(precision=4, suppress=True, linewidth=200):
        print(resp)
    print(f"scan/dense mismatch: {mismatch:.3e}")
    if args.out:
        write_array(args.out, resp[:, :, None])
        print(f"wrote {args.out}")
    return 0 if mismatch <= 1e-10 else 1


def cmd_gen_data(args) -> int:
    if args.check:
        n = ds.verify_dataset(args.out)
        print(f"dataset ok: {n} items verified against manifest hashes")
        return 0
    meta = ds.gen_toy_dataset(args.out, n_train=args.train, n_val=args.val,
                              size=args.size, classes=args.classes,
                              seed=args.seed, coarse_factor=args.coarse_factor,
                              coarse_blur=args.coarse_blur)
    n = ds.verify_dataset(args.out)
    print(f"wrote {n} items to {args.out} "
          f"({meta['train']} train / {meta['val']} val, "
          f"{meta['size']}x{meta['size']}, {meta['classes']} classes)")
    return 0


_CONFIG_FLAGS = ("epochs", "batch", "lr", "momentum", "seed", "units",
                 "prop_channels", "widths", "scale", "kind", "post_gain",
                 "time_limit", "threads")


def _build_config(args) -> tr.TrainConfig:
    cfg = tr.TrainConfig.from_file(args.config) if args.config else tr.TrainConfig()
    overrides = {}
    for name in _CONFIG_FLAGS:
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _build_config(args)

    def progress(row):
        star = " *" if row["is_best"] else ""
        print(f"epoch {row['epoch']}: loss {float(row['loss']):.4f} "
              f"val_iou {float(row['val_iou']):.4f} "
              f"gates {float(row['gate_max_abs_sum']):.6f} "
              f"({row['seconds']}s){star}")

    res = tr.train(cfg, args.data, args.out, progress=progress)
    delta = (res.best_iou - res.coarse_iou) * 100.0
    print(f"coarse IoU {res.coarse_iou:.4f}, best refined IoU "
          f"{res.best_iou:.4f} ({delta:+.2f} points), "
          f"{res.epochs_run} epoch(s), artifacts in {res.out_dir}")
    return 0


def _load_eval_samples(data, split):
    train_idx, val_idx, meta = tr.load_split(data)
    idx = val_idx if split == "val" else train_idx
    return [tr.load_sample(data, i) for i in idx], int(meta["classes"])


def cmd_eval(args) -> int:
    arch, params, _ = checkpoint_load(args.checkpoint)
    samples, classes = _load_eval_samples(args.data, args.split)
    if classes != arch.classes:
        raise DimensionError(
            f"checkpoint has {arch.classes} classes, dataset has {classes}")
    refined = tr.evaluate(params, arch, samples, threads=args.threads,
                          restrict=args.restrict)
    base = tr.coarse_iou(samples, classes)
    print(f"samples: {len(samples)} ({args.split})")
    print(f"coarse IoU:  {base:.4f}")
    print(f"refined IoU: {refined:.4f} ({(refined - base) * 100.0:+.2f} points)")
    return 0


def cmd_refine(args) -> int:
    arch, params, _ = checkpoint_load(args.checkpoint)
    image = read_image_pnm(args.image).data
    coarse = read_array(args.coarse)
    if coarse.ndim != 3 or coarse.shape[2] != arch.classes:
        raise DimensionError(
            f"coarse map shaped {coarse.shape}, checkpoint wants "
            f"{arch.classes} classes")
    allowed = None
    if args.restrict:
        allowed = np.unique(coarse.argmax(axis=2))
    pred, _ = tr.refine_sample(params, arch, image, coarse, allowed)
    ds_counts = np.bincount(pred.reshape(-1), minlength=arch.classes)
    write_image_pnm(args.out, ds.labels_to_map(pred))
    print(f"wrote {args.out}; class pixel counts: {ds_counts.tolist()}")
    if args.truth:
        truth = ds.map_to_labels(read_image_pnm(args.truth))
        acc = tr.IoUAccumulator(arch.classes)
        acc.update(pred, truth)
        base = tr.IoUAccumulator(arch.classes)
        base.update(coarse.argmax(axis=2).astype(np.int32), truth)
        print(f"coarse IoU {base.mean():.4f}, refined IoU {acc.mean():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spn",
        description="Learned-affinity spatial propagation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="cross-check scans against dense algebra")
    v.add_argument("--trials", type=int, default=5)
    v.add_argument("--max-size", type=int, default=10)
    v.add_argument("--channels", type=int, default=2)
    v.add_argument("--kind", choices=sorted(KINDS), default="three")
    v.add_argument("--bits", type=int, choices=(32, 64), default=64)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault",
                   choices=("boundary", "unprojected", "scan-perturb"),
                   default=None, help="plant a defect; the run must then fail")
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--coords", type=int, default=160)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--perturb-backward", action="store_true",
                   help="corrupt analytic gradients; the run must then fail")
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("affinity", help="dense transform diagnostics")
    a.add_argument("--height", type=int, default=8)
    a.add_argument("--width", type=int, default=8)
    a.add_argument("--channels", type=int, default=1)
    a.add_argument("--kind", choices=sorted(KINDS), default="three")
    a.add_argument("--direction", choices=sorted(NAME_TO_DIRECTION), default="ltr")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-csv", default=None)
    a.add_argument("--save", default=None, help="write dense G as a tensor file")
    a.set_defaults(fn=cmd_affinity)

    i = sub.add_parser("impulse", help="unit impulse response of one scan")
    i.add_argument("--height", type=int, default=9)
    i.add_argument("--width", type=int, default=9)
    i.add_argument("--row", type=int, default=4)
    i.add_argument("--col", type=int, default=0)
    i.add_argument("--direction", choices=sorted(NAME_TO_DIRECTION), default="ltr")
    i.add_argument("--kind", choices=sorted(KINDS), default="three")
    i.add_argument("--gate-value", type=float, default=1.0 / 3.0)
    i.add_argument("--out", default=None)
    i.set_defaults(fn=cmd_impulse)

    d = sub.add_parser("gen-data", help="render or verify a toy dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--train", type=int, default=500)
    d.add_argument("--val", type=int, default=50)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--classes", type=int, default=2)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--coarse-factor", type=int, default=8)
    d.add_argument("--coarse-blur", type=int, default=1)
    d.add_argument("--check", action="store_true",
                   help="verify an existing dataset instead of writing one")
    d.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the refinement model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--units", type=int)
    t.add_argument("--prop-channels", type=int, dest="prop_channels")
    t.add_argument("--widths")
    t.add_argument("--scale", type=int)
    t.add_argument("--kind", choices=sorted(KINDS))
    t.add_argument("--post-gain", type=float, dest="post_gain")
    t.add_argument("--time-limit", type=float, dest="time_limit")
    t.add_argument("--threads", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="IoU of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--restrict", action="store_true",
                   help="limit predictions to classes present in the truth")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("refine", help="refine one coarse map")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--coarse", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--truth", default=None)
    r.add_argument("--restrict", action="store_true")
    r.set_defaults(fn=cmd_refine)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, ConfigError, CheckpointError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, TrainingAborted) as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
