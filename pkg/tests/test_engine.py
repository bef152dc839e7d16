"""Optimizer arithmetic, training loop contracts, streaming evaluation."""

import numpy as np
import pytest

import tamer.engine as engine
from tamer.engine import (
    AdamW,
    Checkpoint,
    DataSplit,
    TrainConfig,
    adamw_step,
    evaluate_stream,
    loss_joint,
    train,
)
from tamer.errors import ConfigError, ContractError, ShapeError
from tamer.model import Model, ModelConfig, wire_ablation
from tamer.synth import CohortSpec, dynamic_feature_means, generate_cohort, materialize, stratified_split


def tiny_splits(seed=1, n=240, experts=2, n_subgroups=2):
    spec = CohortSpec(
        n_patients=n, n_visits=5, n_dynamic=5, n_static=2, n_subgroups=n_subgroups, seed=seed
    )
    cohort = generate_cohort(spec)
    tr, va, te = stratified_split(cohort, seed=0)
    defaults = dynamic_feature_means(tr)
    return tuple(DataSplit(*materialize(c, defaults)) for c in (tr, va, te))


def tiny_model_config(**kw):
    base = dict(backbone="gru", hidden=8, experts=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw):
    base = dict(lr_main=1e-2, batch_size=64, max_epochs=3, patience=2, tta_lr=1e-5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# AdamW


def test_adamw_first_step_hand_computed():
    params = {"w": np.array([0.0])}
    grads = {"w": np.array([1.0])}
    slots = {"w": {"m": np.zeros(1), "v": np.zeros(1)}}
    adamw_step(params, grads, slots, lr=1e-3, weight_decay=0.0, step=1)
    # bias-corrected m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    np.testing.assert_allclose(params["w"], [-1e-3], atol=1e-9)


def test_adamw_zero_gradient_keeps_params():
    params = {"w": np.array([0.7, -0.2])}
    slots = {"w": {"m": np.zeros(2), "v": np.zeros(2)}}
    for step in range(1, 4):
        adamw_step(params, {"w": np.zeros(2)}, slots, lr=1e-3, weight_decay=0.0, step=step)
    np.testing.assert_array_equal(params["w"], [0.7, -0.2])


def test_adamw_pure_decay_shrinks_exponentially():
    lr, wd = 1e-2, 0.5
    params = {"w": np.array([2.0])}
    slots = {"w": {"m": np.zeros(1), "v": np.zeros(1)}}
    for step in range(1, 6):
        adamw_step(params, {"w": np.zeros(1)}, slots, lr=lr, weight_decay=wd, step=step)
    np.testing.assert_allclose(params["w"], [2.0 * (1 - lr * wd) ** 5], rtol=1e-12)


def test_adamw_shape_mismatch_raises():
    params = {"w": np.zeros(3)}
    slots = {"w": {"m": np.zeros(3), "v": np.zeros(3)}}
    with pytest.raises(ShapeError):
        adamw_step(params, {"w": np.zeros(4)}, slots, lr=1e-3, weight_decay=0.0, step=1)


# ---------------------------------------------------------------------------
# joint loss


def test_loss_decomposition_is_exact():
    splits = tiny_splits()
    model = Model.build(tiny_model_config(), n_features=7)
    total, outcome, recon = loss_joint(model, splits[0].matrices[:32], splits[0].labels[:32])
    assert abs(total - outcome - recon) < 1e-12


def test_perfect_logits_give_near_zero_outcome_loss():
    splits = tiny_splits()
    config = tiny_model_config(tta_enabled=False, moe_enabled=False)
    model = Model.build(config, n_features=7)
    model.store["moe.head_w"] = np.zeros_like(model.store["moe.head_w"])
    model.store["moe.head_b"] = np.array([20.0])
    matrices = splits[0].matrices[:16]
    labels = np.ones(16, dtype=int)
    total, outcome, recon = loss_joint(model, matrices, labels)
    assert recon == 0.0
    assert total == outcome < 1e-8


def test_zero_logits_give_log_two():
    splits = tiny_splits()
    config = tiny_model_config(tta_enabled=False, moe_enabled=False)
    model = Model.build(config, n_features=7)
    model.store["moe.head_w"] = np.zeros_like(model.store["moe.head_w"])
    model.store["moe.head_b"] = np.zeros(1)
    total, outcome, _ = loss_joint(model, splits[0].matrices[:10], splits[0].labels[:10])
    np.testing.assert_allclose(outcome, np.log(2.0), rtol=1e-12)


# ---------------------------------------------------------------------------
# training loop


def test_train_is_bit_deterministic():
    splits = tiny_splits()
    ckpt1, hist1 = train(splits[0], splits[1], tiny_model_config(), tiny_train_config())
    ckpt2, hist2 = train(splits[0], splits[1], tiny_model_config(), tiny_train_config())
    assert hist1 == hist2
    for group in ("backbone", "tta", "moe"):
        assert ckpt1.store.group_bytes(group) == ckpt2.store.group_bytes(group)
    assert ckpt1.rng_state == ckpt2.rng_state


def test_train_runs_all_epochs_when_improving(monkeypatch):
    values = iter(np.linspace(0.1, 0.9, 50))
    monkeypatch.setattr(engine, "auprc", lambda s, y: float(next(values)))
    splits = tiny_splits(n=120)
    config = tiny_train_config(max_epochs=6, patience=2)
    ckpt, hist = train(splits[0], splits[1], tiny_model_config(), config)
    assert len(hist) == 6
    assert ckpt.epoch == 5
    assert ckpt.best_val_auprc == max(h["val_auprc"] for h in hist)


def test_train_stops_after_patience_without_improvement(monkeypatch):
    values = iter([0.9, 0.5, 0.4, 0.3, 0.2, 0.1])
    monkeypatch.setattr(engine, "auprc", lambda s, y: float(next(values)))
    splits = tiny_splits(n=120)
    config = tiny_train_config(max_epochs=6, patience=2)
    ckpt, hist = train(splits[0], splits[1], tiny_model_config(), config)
    assert len(hist) == 3  # best at epoch 0, two non-improving epochs, stop
    assert ckpt.epoch == 0
    assert ckpt.best_val_auprc == 0.9


def test_best_checkpoint_has_max_val_auprc():
    splits = tiny_splits()
    ckpt, hist = train(splits[0], splits[1], tiny_model_config(), tiny_train_config(max_epochs=5, patience=4))
    assert ckpt.best_val_auprc == max(h["val_auprc"] for h in hist)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patience=100, max_epochs=100).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_main=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(tta_lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr_main": 1e-3, "bogus": 1})


# ---------------------------------------------------------------------------
# streaming evaluation


def trained_checkpoint(splits, **model_kw):
    return train(splits[0], splits[1], tiny_model_config(**model_kw), tiny_train_config())[0]


def test_stream_freeze_contract():
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits)
    model = ckpt.to_model()
    before = {g: model.store.group_bytes(g) for g in ("backbone", "tta", "moe")}
    result = evaluate_stream(splits[2], model, tta_lr=1e-5, batch_size=2)
    assert model.store.group_bytes("backbone") == before["backbone"]
    assert model.store.group_bytes("moe") == before["moe"]
    assert model.store.group_bytes("tta") == before["tta"]  # state owns copies
    changed = any(
        not np.array_equal(result.state.params[k], model.store.arrays("tta")[k])
        for k in result.state.params
    )
    assert changed


def test_stream_without_adaptation_is_order_independent():
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits)
    natural = evaluate_stream(splits[2], ckpt, tta_lr=None, batch_size=16)
    order = np.random.default_rng(5).permutation(len(splits[2]))
    shuffled = evaluate_stream(splits[2], ckpt, tta_lr=None, batch_size=16, order=order)
    assert natural.scores.tobytes() == shuffled.scores.tobytes()


def test_stream_single_patient_batches_match_big_batch():
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits)
    big = evaluate_stream(splits[2], ckpt, tta_lr=None, batch_size=len(splits[2]))
    one = evaluate_stream(splits[2], ckpt, tta_lr=None, batch_size=1)
    np.testing.assert_allclose(one.scores, big.scores, atol=1e-12)


def test_stream_order_matters_with_adaptation():
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits)
    forward = evaluate_stream(splits[2], ckpt, tta_lr=1e-3, batch_size=8)
    reversed_order = np.arange(len(splits[2]))[::-1]
    backward_run = evaluate_stream(splits[2], ckpt, tta_lr=1e-3, batch_size=8, order=reversed_order)
    diff = max(
        np.abs(forward.state.params[k] - backward_run.state.params[k]).max()
        for k in forward.state.params
    )
    assert diff > 0


def test_stream_rejects_non_permutation():
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits)
    with pytest.raises(ContractError):
        evaluate_stream(splits[2], ckpt, tta_lr=None, order=np.zeros(len(splits[2]), dtype=int))


def test_stream_on_model_without_tta_ignores_lr():
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits, tta_enabled=False)
    result = evaluate_stream(splits[2], ckpt, tta_lr=1e-5, batch_size=16)
    assert result.state is None
    assert result.recon_losses == []


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    splits = tiny_splits()
    ckpt = trained_checkpoint(splits)
    ckpt.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck")
    for group in ("backbone", "tta", "moe"):
        assert loaded.store.group_bytes(group) == ckpt.store.group_bytes(group)
    assert loaded.model_config == ckpt.model_config
    assert loaded.epoch == ckpt.epoch
    assert loaded.rng_state == ckpt.rng_state
    assert loaded.optimizer["step_count"] == ckpt.optimizer["step_count"]
    for name, slot in ckpt.optimizer["slots"].items():
        np.testing.assert_array_equal(loaded.optimizer["slots"][name]["m"], slot["m"])
        np.testing.assert_array_equal(loaded.optimizer["slots"][name]["v"], slot["v"])
    loaded.save(tmp_path / "ck2")
    assert (tmp_path / "ck/checkpoint.bin").read_bytes() == (tmp_path / "ck2/checkpoint.bin").read_bytes()
    assert (tmp_path / "ck/checkpoint.json").read_text() == (tmp_path / "ck2/checkpoint.json").read_text()


# ---------------------------------------------------------------------------
# ablation wirings


def test_wiring_names():
    assert wire_ablation(tiny_model_config(tta_enabled=False, moe_enabled=False)) == "backbone_only"
    assert wire_ablation(tiny_model_config(tta_enabled=True, moe_enabled=False)) == "tta_only"
    assert wire_ablation(tiny_model_config(tta_enabled=False, moe_enabled=True)) == "moe_only"
    assert wire_ablation(tiny_model_config()) == "tta_before_moe"
    assert wire_ablation(tiny_model_config(tta_placement="after_moe")) == "tta_after_moe"


def test_tta_after_moe_without_moe_rejected():
    with pytest.raises(ConfigError):
        wire_ablation(tiny_model_config(tta_placement="after_moe", moe_enabled=False))


def test_backbone_only_group_holds_just_the_head():
    model = Model.build(tiny_model_config(tta_enabled=False, moe_enabled=False), n_features=7)
    assert model.store.names("moe") == ("moe.head_w", "moe.head_b")
    assert model.store.names("tta") == ()


def test_moe_only_never_invokes_tta_forward(monkeypatch):
    import tamer.model as model_mod

    calls = {"n": 0}
    original = model_mod.tta_mod.tta_forward

    def counting(*args, **kw):
        calls["n"] += 1
        return original(*args, **kw)

    monkeypatch.setattr(model_mod.tta_mod, "tta_forward", counting)
    splits = tiny_splits(n=120)
    ckpt, _ = train(
        splits[0],
        splits[1],
        tiny_model_config(tta_enabled=False),
        tiny_train_config(max_epochs=1),
    )
    evaluate_stream(splits[2], ckpt, tta_lr=None, batch_size=32)
    assert calls["n"] == 0


@pytest.mark.parametrize(
    "kw",
    [
        dict(tta_enabled=False, moe_enabled=False),
        dict(tta_enabled=True, moe_enabled=False),
        dict(tta_enabled=False, moe_enabled=True),
        dict(tta_enabled=True, moe_enabled=True, tta_placement="before_moe"),
        dict(tta_enabled=True, moe_enabled=True, tta_placement="after_moe"),
    ],
)
def test_all_five_wirings_train_one_epoch(kw):
    splits = tiny_splits(n=120)
    ckpt, hist = train(
        splits[0], splits[1], tiny_model_config(**kw), tiny_train_config(max_epochs=1)
    )
    assert len(hist) == 1
    result = evaluate_stream(splits[2], ckpt, tta_lr=1e-5, batch_size=32)
    assert np.all((result.scores >= 0) & (result.scores <= 1))
