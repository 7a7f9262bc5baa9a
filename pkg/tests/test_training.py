import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from dpf_nutrition.errors import (
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    ContractError,
    TrainingDivergedError,
)
from dpf_nutrition.model import build_model, parameter_digest, prepare_batch
from dpf_nutrition.training import (
    LOSS_KEYS,
    SubtaskLosses,
    TrainConfig,
    fit,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    subtask_loss,
    total_loss,
)


def test_subtask_loss_examples():
    assert subtask_loss([90], [100]) == 10
    assert subtask_loss([3, 4], [3, 4]) == 0
    assert subtask_loss([2, 4], [1, 2]) == 1.5
    t = subtask_loss(torch.tensor([2.0, 4.0], requires_grad=True), torch.tensor([1.0, 2.0]))
    assert t.requires_grad and t.item() == 1.5


def test_subtask_loss_errors():
    with pytest.raises(ValueError):
        subtask_loss([], [])
    with pytest.raises(ValueError):
        subtask_loss([1.0, math.nan], [1.0, 2.0])
    with pytest.raises(ValueError):
        subtask_loss([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_subtask_loss_translation_invariant(pred, c, seed):
    truth = np.random.default_rng(seed).uniform(-1e3, 1e3, len(pred))
    a = subtask_loss(pred, truth)
    b = subtask_loss(np.asarray(pred) + c, truth + c)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_total_loss_examples():
    assert total_loss([1, 1, 1, 1, 1]) == 1.0
    assert total_loss([32, 1, 1, 1, 1]) == 2.0
    assert total_loss([0, 0, 0, 0, 0], 1e-8) == pytest.approx(1e-8, rel=1e-12)
    assert total_loss(SubtaskLosses(32, 1, 1, 1, 1)) == 2.0
    with pytest.raises(ContractError):
        total_loss([1, 1, -1, 1, 1])


_loss = st.floats(1e-6, 1e6)
_losses = st.lists(_loss, min_size=5, max_size=5)


@settings(max_examples=100, deadline=None)
@given(_losses, st.floats(1e-3, 1e3))
def test_total_loss_scale_property(ls, k):
    # the property holds above the epsilon floor only
    assume(ls[0] * k > 1e-8)
    scaled = [ls[0] * k] + ls[1:]
    assert abs(total_loss(scaled) - k ** 0.2 * total_loss(ls)) <= 1e-9 * total_loss(scaled)


@settings(max_examples=100, deadline=None)
@given(_losses, st.permutations(range(5)))
def test_total_loss_permutation_symmetry(ls, perm):
    assert total_loss([ls[i] for i in perm]) == pytest.approx(total_loss(ls), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(_losses, st.integers(0, 4), st.floats(0, 1e3))
def test_total_loss_monotone(ls, i, delta):
    bigger = list(ls)
    bigger[i] += delta
    assert total_loss(bigger) >= total_loss(ls) * (1 - 1e-15)


@settings(max_examples=50, deadline=None)
@given(_losses)
def test_total_loss_gradient_matches_central_differences(ls):
    t = torch.tensor(ls, dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(total_loss(t), t)
    for k in range(5):
        h = 1e-6 * ls[k]
        up, down = list(ls), list(ls)
        up[k] += h
        down[k] -= h
        fd = (total_loss(up) - total_loss(down)) / (2 * h)
        assert abs(grad[k].item() - fd) <= 1e-6 * abs(fd)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 5e-5
    assert lr_at(1, cfg) == pytest.approx(4.9e-5, rel=1e-12)
    assert lr_at(37, replace(cfg, decay=1.0)) == 5e-5


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch=1)
    with pytest.raises(ConfigError):
        TrainConfig(decay=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd")


# ------------------------------------------------------------------ fitting

FAST = TrainConfig(lr0=1e-3, decay=0.9, epochs=3, batch=4, seed=1)


def test_history_records_every_loss(small_scenes, tmp_path):
    model = build_model(tiny_config(), seed=0)
    seen = []
    log = tmp_path / "log.jsonl"
    result = fit(model, small_scenes, FAST, callbacks=[lambda rec, m: seen.append(rec["epoch"])], log_path=log)
    assert seen == [0, 1, 2]
    assert [h["epoch"] for h in result.history] == [0, 1, 2]
    for h in result.history:
        assert set(LOSS_KEYS) <= set(h) and h["L_total"] > 0
    assert len(log.read_text().splitlines()) == 3
    assert result.history[1]["lr"] == pytest.approx(1e-3 * 0.9)


def test_fixed_seed_runs_are_bit_identical(small_scenes):
    runs = []
    for _ in range(2):
        model = build_model(tiny_config(), seed=0)
        runs.append((fit(model, small_scenes, FAST).history, parameter_digest(model)))
    assert runs[0] == runs[1]


def test_resume_equals_uninterrupted(small_scenes, tmp_path):
    full_model = build_model(tiny_config(), seed=0)
    full = fit(full_model, small_scenes, FAST)

    part_model = build_model(tiny_config(), seed=0)
    ckpt_path = tmp_path / "part.dpfn"
    fit(part_model, small_scenes, replace(FAST, epochs=1), checkpoint_path=ckpt_path)
    ckpt = load_checkpoint(ckpt_path)
    assert ckpt.epoch == 1
    resumed_model = build_model(tiny_config(), seed=123)
    resumed = fit(resumed_model, small_scenes, FAST, resume=ckpt)
    assert resumed.history == full.history
    assert parameter_digest(resumed_model) == parameter_digest(full_model)


def test_max_steps_caps_optimizer_steps(small_scenes):
    model = build_model(tiny_config(), seed=0)
    result = fit(model, small_scenes, replace(FAST, epochs=10, max_steps=5))
    assert sum(h["steps"] for h in result.history) == 5


def test_divergence_names_epoch_and_batch(small_scenes):
    model = build_model(tiny_config(), seed=0)
    with torch.no_grad():
        model.heads[2].weight.fill_(math.inf)
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        fit(model, small_scenes, FAST)


def test_periodic_checkpoints(small_scenes, tmp_path):
    path = tmp_path / "c.dpfn"
    seen = []

    def record(rec, model):
        if path.exists():
            seen.append(load_checkpoint(path).epoch)

    fit(build_model(tiny_config(), seed=0), small_scenes, replace(FAST, checkpoint_every=1),
        callbacks=[record], checkpoint_path=path)
    # callbacks run before the epoch's own checkpoint is written
    assert seen == [1, 2]
    assert load_checkpoint(path).epoch == 3


# -------------------------------------------------------------- checkpoints


@pytest.fixture
def trained(small_scenes, tmp_path):
    model = build_model(tiny_config(), seed=0)
    result = fit(model, small_scenes, replace(FAST, epochs=1))
    path = tmp_path / "model.dpfn"
    save_checkpoint(path, result.checkpoint)
    return model, path


def test_checkpoint_round_trip_predictions(trained, small_scenes):
    model, path = trained
    restored = load_checkpoint(path).build_model()
    rgb, depth, _ = prepare_batch(small_scenes, model.config)
    with torch.no_grad():
        delta = (model.eval()(rgb, depth) - restored(rgb, depth)).abs().max().item()
    assert delta < 1e-6


def test_checkpoint_header_layout(trained):
    _, path = trained
    data = path.read_bytes()
    assert data[:4] == b"DPFN" and int.from_bytes(data[4:6], "little") == 1


def test_hash_mismatch_warns_and_needs_force(trained):
    _, path = trained
    other = tiny_config(head_hidden=16).config_hash()
    with pytest.warns(UserWarning, match="config hash"):
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, expected_hash=other)
    with pytest.warns(UserWarning):
        assert load_checkpoint(path, expected_hash=other, force=True).epoch == 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, expected_hash=tiny_config().config_hash())


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "version", "empty"])
def test_damaged_checkpoints_raise(trained, damage):
    _, path = trained
    data = bytearray(path.read_bytes())
    if damage == "truncate":
        data = data[: len(data) // 2]
    elif damage == "flip":
        data[len(data) // 2] ^= 0xFF
    elif damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "version":
        data[4:6] = (9).to_bytes(2, "little")
    else:
        data = bytearray()
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_failed_load_leaves_model_untouched(trained, small_scenes):
    model, path = trained
    before = parameter_digest(model)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        model.load_state_dict(load_checkpoint(path).model_state)
    assert parameter_digest(model) == before
