import csv

import numpy as np
import pytest

import spnkit.training as training
from spnkit.dataset import gen_toy_dataset, load_sample, load_split
from spnkit.errors import ConfigError, TrainingAborted
from spnkit.fdcheck import check_gradient
from spnkit.guidance import checkpoint_load
from spnkit.training import (
    IoUAccumulator,
    TrainConfig,
    coarse_iou,
    evaluate,
    init_pipeline_params,
    pipeline_backward,
    pipeline_forward,
    pipeline_signature,
    refine_sample,
    sgd_step,
    softmax_xent,
    train,
)


def test_softmax_xent_uniform_logits():
    logits = np.zeros((3, 3, 2))
    labels = np.zeros((3, 3), dtype=np.int32)
    loss, grad = softmax_xent(logits, labels)
    assert loss == pytest.approx(np.log(2.0))
    np.testing.assert_allclose(grad[:, :, 0], -0.5 / 9, atol=1e-12)
    np.testing.assert_allclose(grad[:, :, 1], 0.5 / 9, atol=1e-12)


def test_softmax_xent_overflow_safe():
    logits = np.full((2, 2, 3), 5000.0)
    logits[:, :, 1] += 10.0
    labels = np.ones((2, 2), dtype=np.int32)
    loss, grad = softmax_xent(logits, labels)
    assert np.isfinite(loss) and np.isfinite(grad).all()
    assert loss < 1e-3


def test_softmax_xent_grad_fd():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 5, 3))
    labels = rng.integers(0, 3, size=(4, 5)).astype(np.int32)
    _, grad = softmax_xent(logits, labels)
    res = check_gradient(lambda a: softmax_xent(a, labels)[0], logits, grad,
                         rng=rng, num=40)
    assert res.max_rel_err < 1e-7, str(res)


def test_sgd_step_frozen():
    params = {"a": np.array([1.0, 2.0])}
    grads = {"a": np.array([0.5, -1.0])}
    vel = {"a": np.array([0.1, 0.0])}
    sgd_step(params, grads, vel, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(vel["a"], [0.09 - 0.05, 0.1])
    np.testing.assert_allclose(params["a"], [1.04, 2.1])


def test_init_pipeline_identity_taps():
    cfg = TrainConfig(prop_channels=4)
    arch = cfg.architecture(2)
    params = init_pipeline_params(arch, np.random.default_rng(1), post_gain=3.0)
    assert params["pre.w"][1, 1, 0, 0] > 0.9
    assert params["post.w"][1, 1, 1, 1] > 2.9
    assert abs(params["post.w"][1, 1, 0, 1]) < 0.2


def small_setup(dtype=np.float64, size=12):
    cfg = TrainConfig(prop_channels=3, widths="3,4,5", scale=2, units=2)
    arch = cfg.architecture(2)
    rng = np.random.default_rng(2)
    params = init_pipeline_params(arch, rng, dtype=dtype)
    image = rng.random((size, size, 3)).astype(dtype)
    coarse = rng.random((size, size, 2)).astype(dtype)
    coarse /= coarse.sum(axis=2, keepdims=True)
    labels = rng.integers(0, 2, size=(size, size)).astype(np.int32)
    return arch, params, image, coarse, labels


def test_pipeline_forward_shapes():
    arch, params, image, coarse, _ = small_setup(np.float32)
    logits, cache = pipeline_forward(params, arch, image, coarse)
    assert logits.shape == (12, 12, 2)
    assert logits.dtype == np.float32
    assert cache["gates"].shape == (6, 6, 3, 4, 3)


def test_pipeline_initial_prediction_tracks_coarse():
    # identity taps make the untrained model echo the coarse map
    arch, params, image, coarse, _ = small_setup(np.float32)
    coarse = np.zeros((12, 12, 2), dtype=np.float32)
    coarse[:, :6, 0] = 1.0
    coarse[:, 6:, 1] = 1.0
    pred, _ = refine_sample(params, arch, image, coarse)
    assert (pred == coarse.argmax(axis=2)).mean() > 0.85


def test_pipeline_backward_fd_end_to_end():
    arch, params, image, coarse, labels = small_setup()

    def run(p):
        logits, cache = pipeline_forward(p, arch, image, coarse)
        loss, dlogits = softmax_xent(logits, labels)
        return loss, dlogits, cache

    _, dlogits, cache = run(params)
    grads = pipeline_backward(dlogits, cache)
    assert sorted(grads) == sorted(params)
    rng = np.random.default_rng(3)
    for key in ("head.w", "pre.w", "post.w", "enc0.w"):
        def loss_fn(a, key=key):
            trial = dict(params)
            trial[key] = a
            return run(trial)[0]

        def sig_fn(a, key=key):
            trial = dict(params)
            trial[key] = a
            return pipeline_signature(run(trial)[2])

        res = check_gradient(loss_fn, params[key], grads[key], rng=rng,
                             num=25, signature=sig_fn)
        assert res.checked >= 10, f"{key}: {res}"
        assert res.max_rel_err < 1e-5, f"{key}: {res}"


def test_iou_accumulator_frozen():
    acc = IoUAccumulator(2)
    pred = np.array([[0, 0], [1, 1]])
    true = np.array([[0, 1], [1, 1]])
    acc.update(pred, true)
    np.testing.assert_allclose(acc.per_class(), [1 / 2, 2 / 3])
    assert acc.mean() == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_iou_skips_absent_classes():
    acc = IoUAccumulator(3)
    acc.update(np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int))
    assert acc.mean() == 1.0
    assert np.isnan(acc.per_class()[2])


def test_train_config_roundtrip(tmp_path):
    cfg = TrainConfig(epochs=3, lr=0.01, widths="4,8,12")
    path = tmp_path / "c.txt"
    path.write_text("\n".join(cfg.to_lines()) + "\n")
    assert TrainConfig.from_file(path) == cfg


def test_train_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("epochs=3\nlearning_rate=0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig.from_file(path)


def test_train_config_rejects_bad_value():
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig.from_mapping({"epochs": "many"})


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(kind="diagonal")
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.5)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    gen_toy_dataset(root, n_train=6, n_val=2, size=16, classes=2, seed=5,
                    coarse_factor=4, coarse_blur=1)
    return root


def tiny_config(**kw):
    args = dict(epochs=2, batch=3, lr=1e-4, seed=1, prop_channels=3,
                widths="3,4,5", scale=2, units=1)
    args.update(kw)
    return TrainConfig(**args)


def test_train_smoke_and_artifacts(tiny_dataset, tmp_path):
    out = tmp_path / "run"
    res = train(tiny_config(), tiny_dataset, out)
    assert res.epochs_run == 2
    assert 0.0 <= res.best_iou <= 1.0
    assert 0.0 < res.coarse_iou < 1.0
    assert (out / "config.txt").is_file()
    assert (out / "metrics.csv").is_file()
    arch, params, meta = checkpoint_load(out / "best")
    assert arch.classes == 2
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    assert all(float(r["gate_max_abs_sum"]) <= 1.0 + 1e-6 for r in rows)


def test_train_zero_lr_repeats_metrics(tiny_dataset, tmp_path):
    res = train(tiny_config(lr=0.0, epochs=3), tiny_dataset, tmp_path / "r0")
    losses = {r["loss"] for r in res.rows}
    ious = {r["val_iou"] for r in res.rows}
    assert len(losses) == 1 and len(ious) == 1


def test_train_seeded_rerun_bit_exact(tiny_dataset, tmp_path):
    r1 = train(tiny_config(), tiny_dataset, tmp_path / "a")
    r2 = train(tiny_config(), tiny_dataset, tmp_path / "b")
    for a, b in zip(r1.rows, r2.rows):
        for key in ("epoch", "loss", "val_iou", "gate_max_abs_sum", "is_best"):
            assert a[key] == b[key], key
    _, pa, _ = checkpoint_load(tmp_path / "a" / "best")
    _, pb, _ = checkpoint_load(tmp_path / "b" / "best")
    for k in pa:
        assert pa[k].tobytes() == pb[k].tobytes(), k


def test_train_aborts_on_non_finite(tiny_dataset, tmp_path, monkeypatch):
    real_init = training.init_pipeline_params

    def poisoned(arch, rng, post_gain=3.0, dtype=np.float32):
        params = real_init(arch, rng, post_gain=post_gain, dtype=dtype)
        params["head.w"][0, 0, 0, 0] = np.nan
        return params

    monkeypatch.setattr(training, "init_pipeline_params", poisoned)
    with pytest.raises(TrainingAborted, match="gate statistics"):
        train(tiny_config(), tiny_dataset, tmp_path / "bad")


def test_evaluate_thread_invariance(tiny_dataset):
    cfg = tiny_config()
    train_idx, val_idx, meta = load_split(tiny_dataset)
    samples = [load_sample(tiny_dataset, i) for i in val_idx + train_idx]
    arch = cfg.architecture(int(meta["classes"]))
    params = init_pipeline_params(arch, np.random.default_rng(4))
    a = evaluate(params, arch, samples, threads=1)
    b = evaluate(params, arch, samples, threads=4)
    assert a == b


def test_coarse_iou_positive(tiny_dataset):
    _, val_idx, meta = load_split(tiny_dataset)
    samples = [load_sample(tiny_dataset, i) for i in val_idx]
    v = coarse_iou(samples, int(meta["classes"]))
    assert 0.2 < v < 1.0
