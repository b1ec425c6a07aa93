"""Trainer tests: loss combination, Adam, gating, determinism, checkpoints."""

import dataclasses
import json

import numpy as np
import pytest

from muse import data as D
from muse import harness as H
from muse import tensor as T
from muse.config import RunConfig
from muse.tensor import ConfigError, ShapeError, Tape, Tensor, backward_pass


def micro_config(**changes):
    # hand-made examples only: the 16-token vocab cannot hold generated data
    base = dict(
        task="mner", d=8, num_layers=2, heads=2, mu=1, eta=2, theta=0.25,
        dropout=0.0, head_dropout=0.0, noise_enabled=False,
        vocab_size=16, max_seq_len=12, qlevels=3, seed=5,
    )
    base.update(changes)
    return RunConfig(**base).validate()


def small_config(**changes):
    # generator-compatible: full 64-token vocab, still a small model
    base = dict(
        task="mner", d=8, num_layers=2, heads=2, mu=1, eta=2, theta=0.25,
        dropout=0.0, head_dropout=0.0, noise_enabled=False,
        vocab_size=64, max_seq_len=12, seed=5,
    )
    base.update(changes)
    return RunConfig(**base).validate()


def small_splits(task, train=60, val=20, test=20, seed=3):
    return D.generate_task(
        D.TaskConfig(task=task, train_size=train, val_size=val, test_size=test, seed=seed)
    )


def tiny_example(task):
    image = D.stripe_grid(0)
    image[0, 0] = D.STRIPE_LO
    if task == "mner":
        return D.SynthExample(
            tokens=[4, 8, 13, 12, 15, 14, 9, 13, 12, 14, 15, 13],
            image=image,
            mner_labels=[1, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        )
    return D.SynthExample(
        tokens=[13, 12, 15, 1, 14, 13, 12, 15, 14, 13, 12, 15],
        image=image,
        msa_label=0,
    )


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_hand_values():
    w = H.LossWeights(1.0, 1.0)
    out = H.total_loss(Tensor(2.0), Tensor(0.5), Tensor(0.25), w)
    assert out.item() == 2.75
    out = H.total_loss(Tensor(5.0), Tensor(9.0), Tensor(7.0), H.LossWeights(0.0, 0.0))
    assert out.item() == 5.0
    out = H.total_loss(Tensor(1.0), Tensor(0.4), Tensor(0.3), H.LossWeights(0.5, 2.0))
    assert out.item() == 1.0 + 0.5 * 0.4 + 2.0 * 0.3


def test_total_loss_gradients_are_the_weights():
    l_task = Tensor(2.0, requires_grad=True)
    l_it = Tensor(0.5, requires_grad=True)
    l_ti = Tensor(0.25, requires_grad=True)
    with Tape() as tape:
        out = H.total_loss(l_task, l_it, l_ti, H.LossWeights(0.7, 1.3))
    backward_pass(tape, out)
    assert float(l_task.grad) == 1.0
    assert float(l_it.grad) == 0.7
    assert float(l_ti.grad) == 1.3


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        H.LossWeights(-0.1, 1.0)
    with pytest.raises(ConfigError):
        H.LossWeights(1.0, float("nan"))


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    state = H.AdamState()
    for _ in range(3):
        H.adam_step({"w": p}, state, lr=0.1)
        p.grad = np.zeros(2)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([1.0])
    H.adam_step({"w": p}, H.AdamState(), lr=0.01)
    # bias correction makes m_hat/sqrt(v_hat) exactly 1, up to eps
    np.testing.assert_allclose(p.data, [3.0 - 0.01], atol=1e-9)


def test_adam_trajectories_are_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3) for _ in range(5)]

    def run():
        p = Tensor(np.zeros(3), requires_grad=True)
        state = H.AdamState()
        for g in grads:
            p.grad = g.copy()
            H.adam_step({"w": p}, state, lr=0.05)
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_adam_crf_rate_override():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    a.grad = np.array([1.0])
    b.grad = np.array([1.0])
    H.adam_step({"fuse.weight": a, "crf.transitions": b}, H.AdamState(), lr=0.1, crf_lr=0.5)
    np.testing.assert_allclose(a.data, [0.9], atol=1e-8)
    np.testing.assert_allclose(b.data, [0.5], atol=1e-7)


def test_adam_skips_missing_and_rejects_bad_shapes():
    p = Tensor(np.zeros(2), requires_grad=True)
    H.adam_step({"w": p}, H.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, np.zeros(2))
    p.grad = np.zeros(3)
    with pytest.raises(ShapeError):
        H.adam_step({"w": p}, H.AdamState(), lr=0.1)


# ---------------------------------------------------------------------------
# model construction


def test_build_model_is_deterministic():
    a = H.build_model(micro_config())
    b = H.build_model(micro_config())
    for (name_a, pa), (name_b, pb) in zip(
        a.named_parameters().items(), b.named_parameters().items()
    ):
        assert name_a == name_b
        np.testing.assert_array_equal(pa.data, pb.data)
    c = H.build_model(micro_config(seed=6))
    assert not np.array_equal(
        a.named_parameters()["text.embed"].data, c.named_parameters()["text.embed"].data
    )


def test_task_decides_head_parameters():
    mner = H.build_model(micro_config())
    assert "crf.transitions" in mner.named_parameters()
    assert "head.weight" not in mner.named_parameters()
    np.testing.assert_array_equal(mner.crf.transitions.data, np.zeros((5, 5)))
    msa = H.build_model(micro_config(task="msa"))
    assert "head.weight" in msa.named_parameters()
    assert "crf.transitions" not in msa.named_parameters()


# ---------------------------------------------------------------------------
# forward gating


def test_full_forward_shapes_and_trace():
    model = H.build_model(micro_config())
    example = tiny_example("mner")
    result = H.forward_example(model, example, training=True)
    assert result.emissions.shape == (12, 5)
    assert np.isfinite(result.loss.data)
    assert [layer.layer for layer in result.trace.layers] == [2]
    assert result.l_it.item() > 0 and result.l_ti.item() > 0


def test_eval_forward_is_deterministic_and_skips_aux():
    model = H.build_model(micro_config(dropout=0.3, head_dropout=0.5, noise_enabled=True))
    example = tiny_example("mner")
    a = H.forward_example(model, example, training=False)
    b = H.forward_example(model, example, training=False)
    assert a.l_it.item() == 0.0 and a.l_ti.item() == 0.0
    np.testing.assert_array_equal(a.loss.data, b.loss.data)
    assert a.loss.item() == a.l_task.item()


def gradient_names(model, example):
    with Tape() as tape:
        result = H.forward_example(model, example, training=True)
    backward_pass(tape, result.loss)
    return {
        name for name, param in model.named_parameters().items() if param.grad is not None
    }


def test_task_only_excludes_decoder_gradients():
    model = H.build_model(micro_config(variant="task_only"))
    example = tiny_example("mner")
    result = H.forward_example(model, example, training=True)
    assert result.l_it.item() == 0.0 and result.l_ti.item() == 0.0
    touched = gradient_names(model, example)
    assert not any(
        name.split(".")[0] in ("caption", "imagegen", "noise_text", "noise_image")
        for name in touched
    )
    assert "cross.1.attn.query" in touched


def test_single_loss_ablations():
    example = tiny_example("mner")
    model = H.build_model(micro_config(variant="no_caption_loss"))
    result = H.forward_example(model, example, training=True)
    assert result.l_it.item() == 0.0 and result.l_ti.item() > 0.0
    model = H.build_model(micro_config(variant="no_generation_loss"))
    result = H.forward_example(model, example, training=True)
    assert result.l_it.item() > 0.0 and result.l_ti.item() == 0.0


def test_only_text_never_touches_image_parameters():
    config = small_config(variant="only_text")
    model = H.build_model(config)
    fresh = {name: p.data.copy() for name, p in H.build_model(config).named_parameters().items()}
    splits = small_splits("mner", train=16, val=4, test=4)
    named = model.named_parameters()
    state = H.AdamState()
    for example in splits.train:
        with Tape() as tape:
            result = H.forward_example(model, example, training=True)
        backward_pass(tape, result.loss)
    image_side = [
        name for name in named
        if name.split(".")[0] in ("image", "noise_text", "noise_image", "caption", "imagegen")
        or name == "cls.image"
    ]
    assert image_side
    for name in image_side:
        assert named[name].grad is None or not named[name].grad.any()
    H.adam_step(named, state, config.lr, config.crf_lr)
    for name in image_side:
        np.testing.assert_array_equal(named[name].data, fresh[name])
    assert not np.array_equal(named["text.embed"].data, fresh["text.embed"])


def test_only_image_handles_msa_and_rejects_mner():
    model = H.build_model(micro_config(task="msa", variant="only_image"))
    result = H.forward_example(model, tiny_example("msa"), training=True)
    assert result.logits.shape == (1, 3)
    assert result.l_it.item() == 0.0 and result.l_ti.item() == 0.0
    touched = gradient_names(model, tiny_example("msa"))
    assert "text.embed" not in touched and "cls.text" not in touched
    with pytest.raises(ConfigError):
        micro_config(task="mner", variant="only_image")


def test_no_crosstransformer_skips_the_stack():
    model = H.build_model(micro_config(variant="no_crosstransformer"))
    example = tiny_example("mner")
    result = H.forward_example(model, example, training=True)
    assert result.trace is None
    touched = gradient_names(model, example)
    assert not any(name.startswith("cross.") for name in touched)
    assert "fuse.weight" in touched and "text.embed" in touched


def test_theta_zero_equals_empty_exchange_window(tmp_path):
    splits = small_splits("mner", train=24, val=8, test=8)
    results = []
    for tag, changes in (("a", dict(theta=0.0)), ("b", dict(mu=2, eta=2))):
        cfg = small_config(epochs=2, batch_size=8, **changes)
        cfg = dataclasses.replace(cfg, out_dir=str(tmp_path / tag))
        results.append(H.train(cfg.validate(), splits=splits))
    a, b = results
    for row_a, row_b in zip(a.log_rows, b.log_rows):
        assert row_a.train_loss == row_b.train_loss
        assert row_a.val_metric == row_b.val_metric
    for (name, pa), pb in zip(a.model.named_parameters().items(), b.model.named_parameters().values()):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)


# ---------------------------------------------------------------------------
# training loop


def test_zero_learning_rate_freezes_the_model(tmp_path):
    splits = small_splits("mner", train=12, val=6, test=6)
    cfg = small_config(lr=0.0, crf_lr=0.0, epochs=2, batch_size=4)
    cfg = dataclasses.replace(cfg, out_dir=str(tmp_path))
    result = H.train(cfg, splits=splits)
    fresh = H.build_model(cfg)
    for (name, pa), pb in zip(
        result.model.named_parameters().items(), fresh.named_parameters().values()
    ):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)
    init_metrics = H.evaluate_model(fresh, splits.val)
    assert result.log_rows[0].val_metric == init_metrics["metric"]


def test_train_loss_descends_on_small_mner(tmp_path):
    splits = small_splits("mner", train=96, val=12, test=12, seed=7)
    cfg = RunConfig(task="mner", seed=7, epochs=3, out_dir=str(tmp_path)).validate()
    result = H.train(cfg, splits=splits)
    losses = [row.train_loss for row in result.log_rows]
    assert losses[0] > losses[1] > losses[2]


def test_training_is_deterministic(tmp_path):
    splits = small_splits("msa", train=24, val=8, test=8)
    logs = []
    finals = []
    for run in range(2):
        cfg = small_config(task="msa", epochs=2, batch_size=8, dropout=0.1, noise_enabled=True)
        cfg = dataclasses.replace(cfg, out_dir=str(tmp_path / str(run)))
        result = H.train(cfg.validate(), splits=splits)
        logs.append([dataclasses.astuple(row) for row in result.log_rows])
        finals.append({n: p.data.copy() for n, p in result.model.named_parameters().items()})
    for row_a, row_b in zip(logs[0], logs[1]):
        # identical apart from wall-clock timing
        assert row_a[:6] == row_b[:6]
    for name in finals[0]:
        np.testing.assert_array_equal(finals[0][name], finals[1][name], err_msg=name)


def test_nan_abort_names_the_first_bad_node(tmp_path):
    splits = small_splits("mner", train=8, val=4, test=4)
    cfg = small_config(epochs=1, batch_size=4)
    cfg = dataclasses.replace(cfg, out_dir=str(tmp_path))

    real_build = H.build_model

    def poisoned_build(config):
        model = real_build(config)
        model.fuse_weight.data[0, 0] = np.nan
        return model

    H.build_model = poisoned_build
    try:
        with pytest.raises(H.NonFiniteLossError) as info:
            H.train(cfg, splits=splits)
    finally:
        H.build_model = real_build
    message = str(info.value)
    assert "first bad tape node" in message
    assert "epoch 1" in message
    assert "matmul" in message or "concat" in message


def test_csv_log_format(tmp_path):
    splits = small_splits("msa", train=12, val=6, test=6)
    cfg = small_config(task="msa", epochs=2, batch_size=6)
    cfg = dataclasses.replace(cfg, out_dir=str(tmp_path))
    result = H.train(cfg, splits=splits)
    lines = open(result.log_path).read().splitlines()
    assert lines[0] == "epoch,train_loss,l_task,l_it,l_ti,val_metric,seconds"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "1"
    assert float(first[1]) == result.log_rows[0].train_loss


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_msa_counts_and_macro_f1():
    model = H.build_model(small_config(task="msa"))
    splits = small_splits("msa", train=4, val=30, test=4)
    metrics = H.evaluate_model(model, splits.val)
    assert set(metrics) == {"accuracy", "macro_f1", "metric"}
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert metrics["metric"] == metrics["accuracy"]
    again = H.evaluate_model(model, splits.val)
    assert metrics == again


def test_evaluate_mner_metric_keys():
    model = H.build_model(small_config())
    splits = small_splits("mner", train=4, val=10, test=4)
    metrics = H.evaluate_model(model, splits.val)
    assert set(metrics) == {"precision", "recall", "f1", "trigger_type_accuracy", "metric"}
    assert metrics["metric"] == metrics["f1"]


def test_macro_f1_zero_support_convention():
    confusion = np.array([[5, 0, 0], [3, 0, 0], [2, 0, 0]])
    # only class 0 predicted; classes 1-2 get F1 0
    expected_f0 = 2 * (5 / 10) * 1.0 / (5 / 10 + 1.0)
    np.testing.assert_allclose(H._macro_f1(confusion), expected_f0 / 3)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = H.build_model(micro_config())
    rng = H.stream_rng(5, H.STREAM_NOISE)
    rng.normal(size=7)
    path = str(tmp_path / "model.ckpt")
    H.save_checkpoint(model, path, rng_state=rng.bit_generator.state)
    loaded, manifest = H.load_checkpoint(path)
    for (name, pa), pb in zip(
        model.named_parameters().items(), loaded.named_parameters().values()
    ):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)
    assert manifest["format_version"] == 1
    restored = H.restore_rng(manifest)
    np.testing.assert_array_equal(rng.normal(size=5), restored.normal(size=5))


def test_checkpoint_manifest_layout(tmp_path):
    model = H.build_model(micro_config())
    path = str(tmp_path / "model.ckpt")
    H.save_checkpoint(model, path)
    manifest = json.load(open(path))
    named = model.named_parameters()
    assert [entry["name"] for entry in manifest["tensors"]] == list(named)
    offset = 0
    for entry in manifest["tensors"]:
        assert entry["offset"] == offset
        offset += 8 * int(np.prod(entry["shape"]))
    blob = open(path + ".blob", "rb").read()
    assert len(blob) == offset
    first = manifest["tensors"][0]
    decoded = np.frombuffer(blob, dtype="<f8", count=int(np.prod(first["shape"])))
    np.testing.assert_array_equal(decoded.reshape(first["shape"]), named[first["name"]].data)


def test_checkpoint_guard_refuses_mismatched_config(tmp_path):
    model = H.build_model(micro_config())
    path = str(tmp_path / "model.ckpt")
    H.save_checkpoint(model, path)
    other = micro_config(d=16, heads=2)
    with pytest.warns(UserWarning):
        with pytest.raises(ConfigError):
            H.load_checkpoint(path, config=other)
    with pytest.warns(UserWarning):
        forced, _ = H.load_checkpoint(path, config=other, force=True)
    assert forced.config.d == 8
    same, _ = H.load_checkpoint(path, config=micro_config())
    assert same.config.d == 8


def test_checkpoint_truncated_blob_fails_atomically(tmp_path):
    model = H.build_model(micro_config())
    path = str(tmp_path / "model.ckpt")
    H.save_checkpoint(model, path)
    blob = open(path + ".blob", "rb").read()
    open(path + ".blob", "wb").write(blob[: len(blob) // 2])
    with pytest.raises(ConfigError) as info:
        H.load_checkpoint(path)
    assert "overflows" in str(info.value)


def test_checkpoint_rejects_corrupt_manifest(tmp_path):
    model = H.build_model(micro_config())
    path = str(tmp_path / "model.ckpt")
    H.save_checkpoint(model, path)
    manifest = json.load(open(path))
    manifest["tensors"][3]["name"] = "mystery.tensor"
    json.dump(manifest, open(path, "w"))
    with pytest.raises(ConfigError) as info:
        H.load_checkpoint(path)
    assert "mystery.tensor" in str(info.value) or "text" in str(info.value)

    H.save_checkpoint(model, path)
    manifest = json.load(open(path))
    manifest["format_version"] = 99
    json.dump(manifest, open(path, "w"))
    with pytest.raises(ConfigError):
        H.load_checkpoint(path)


def test_train_saves_best_checkpoint_and_reloads_it(tmp_path):
    splits = small_splits("msa", train=20, val=10, test=10)
    cfg = small_config(task="msa", epochs=2, batch_size=10)
    cfg = dataclasses.replace(cfg, out_dir=str(tmp_path))
    result = H.train(cfg, splits=splits)
    reloaded, manifest = H.load_checkpoint(result.checkpoint_path)
    metrics = H.evaluate_model(reloaded, splits.test)
    assert metrics == result.test_metrics
    assert manifest["config"]["task"] == "msa"
