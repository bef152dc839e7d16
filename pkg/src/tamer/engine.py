"""Joint training, frozen-parameter streaming evaluation, and checkpoints.

Training minimizes outcome loss plus reconstruction loss with AdamW over
all three parameter groups; the gradient barriers inside the adaptation
layer ensure its weights see only the reconstruction signal. After every
epoch the validation split is scored with the same online streaming
protocol used at test time, on a cloned adaptation state that is discarded
afterwards, so model selection reflects test-time behavior without leaking
adaptation back into training. Early stopping tracks validation AUPRC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape, backward
from .errors import ConfigError, ContractError, DataError, ShapeError
from .metrics import auprc, auroc
from .model import Model, ModelConfig
from .moe import GateProfile
from .params import GROUPS, ParameterStore
from .rng import substream


@dataclass
class TrainConfig:
    lr_main: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 10
    tta_lr: Optional[float] = 1e-5
    tta_steps: int = 1
    recon_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.lr_main <= 0:
            raise ConfigError(f"lr_main must be positive, got {self.lr_main}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.patience < self.max_epochs:
            raise ConfigError(
                f"patience must be in [1, max_epochs), got {self.patience} vs {self.max_epochs}"
            )
        if self.tta_lr is not None and self.tta_lr <= 0:
            raise ConfigError(f"tta_lr must be positive or None, got {self.tta_lr}")
        if self.tta_steps < 1:
            raise ConfigError(f"tta_steps must be >= 1, got {self.tta_steps}")
        if self.recon_weight < 0:
            raise ConfigError(f"recon_weight must be >= 0, got {self.recon_weight}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class DataSplit:
    """Model-ready split: imputed T x F matrices plus aligned 0/1 labels."""

    matrices: list
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if len(self.matrices) != self.labels.shape[0]:
            raise DataError(
                f"{len(self.matrices)} matrices vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return len(self.matrices)

    def take(self, idx) -> tuple[list, np.ndarray]:
        return [self.matrices[i] for i in idx], self.labels[idx]


# ---------------------------------------------------------------------------
# AdamW


def adamw_step(params, grads, slots, lr, weight_decay, step, beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam update, in place.

    Decay shrinks the weight directly (w -= lr*wd*w) before the adaptive
    step is subtracted. ``step`` is the 1-based update count used for bias
    correction. ``slots`` maps name -> {"m": array, "v": array}.
    """
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} vs weight {w.shape}")
        slot = slots[name]
        if slot["m"].shape != w.shape:
            raise ShapeError(f"{name}: slot shape {slot['m'].shape} vs weight {w.shape}")
        slot["m"] = beta1 * slot["m"] + (1 - beta1) * g
        slot["v"] = beta2 * slot["v"] + (1 - beta2) * (g * g)
        m_hat = slot["m"] / (1 - beta1**step)
        v_hat = slot["v"] / (1 - beta2**step)
        w_new = w * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        params[name] = w_new


class AdamW:
    """Optimizer state over a fixed set of parameter names."""

    def __init__(self, names, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = tuple(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.slots = {}

    def _ensure_slots(self, store: ParameterStore):
        for name in self.names:
            if name not in self.slots:
                w = store[name]
                self.slots[name] = {"m": np.zeros_like(w), "v": np.zeros_like(w)}

    def step(self, store: ParameterStore, grads: dict) -> None:
        self._ensure_slots(store)
        self.step_count += 1
        params = {name: store[name] for name in self.names}
        adamw_step(
            params,
            {name: grads[name] for name in self.names},
            self.slots,
            self.lr,
            self.weight_decay,
            self.step_count,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for name in self.names:
            store[name] = params[name]

    def state_snapshot(self) -> dict:
        return {
            "step_count": self.step_count,
            "slots": {k: {"m": v["m"].copy(), "v": v["v"].copy()} for k, v in self.slots.items()},
        }

    def load_snapshot(self, snap: dict) -> None:
        self.step_count = snap["step_count"]
        self.slots = {k: {"m": v["m"].copy(), "v": v["v"].copy()} for k, v in snap["slots"].items()}


# ---------------------------------------------------------------------------
# joint loss


def _joint_nodes(model: Model, tape: Tape, matrices, labels, recon_weight: float):
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if np.any(~np.isfinite(labels)):
        raise DataError("batch labels contain missing values")
    result = model.forward(tape, matrices, detached=True)
    outcome = tape.apply("bce_with_logits", result.logits, tape.leaf(labels))
    if result.recon_loss is not None:
        recon = result.recon_loss
        weighted = recon if recon_weight == 1.0 else tape.apply("scale", recon, factor=recon_weight)
    else:
        recon = tape.leaf([0.0])
        weighted = recon
    total = tape.apply("add", outcome, weighted)
    return total, outcome, recon, result


def loss_joint(model: Model, matrices, labels, recon_weight: float = 1.0):
    """(total, outcome BCE, reconstruction MSE) for one labeled batch."""
    tape = Tape()
    total, outcome, recon, _ = _joint_nodes(model, tape, matrices, labels, recon_weight)
    return float(total.value[0]), float(outcome.value[0]), float(recon.value[0])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    store: ParameterStore
    n_features: int
    optimizer: dict  # {"step_count": int, "slots": {name: {"m", "v"}}}
    best_val_auprc: float
    epoch: int
    rng_state: dict

    def to_model(self) -> Model:
        return Model(self.model_config, self.store, self.n_features)

    def save(self, directory) -> None:
        """JSON manifest plus one little-endian float64 blob."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        chunks = []
        offset = 0

        def push(kind, group, name, arr):
            nonlocal offset
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append(
                {
                    "kind": kind,
                    "group": group,
                    "name": name,
                    "shape": list(arr.shape),
                    "offset_bytes": offset,
                    "n_values": int(arr.size),
                }
            )
            chunks.append(raw)
            offset += len(raw)

        for group in GROUPS:
            for name in self.store.names(group):
                push("param", group, name, self.store[name])
        for name, slot in self.optimizer["slots"].items():
            group = self.store.group_of(name)
            push("adam_m", group, name, slot["m"])
            push("adam_v", group, name, slot["v"])
        manifest = {
            "model_config": self.model_config.to_dict(),
            "n_features": self.n_features,
            "entries": entries,
            "optimizer_step_count": self.optimizer["step_count"],
            "best_val_auprc": self.best_val_auprc,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "little_endian": True,
        }
        (directory / "checkpoint.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        (directory / "checkpoint.bin").write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / "checkpoint.json").read_text())
        blob = (directory / "checkpoint.bin").read_bytes()
        store = ParameterStore()
        slots: dict = {}
        for entry in manifest["entries"]:
            start = entry["offset_bytes"]
            raw = blob[start : start + 8 * entry["n_values"]]
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
            if entry["kind"] == "param":
                store.add(entry["group"], entry["name"], arr)
            else:
                slot = slots.setdefault(entry["name"], {})
                slot["m" if entry["kind"] == "adam_m" else "v"] = arr
        return cls(
            model_config=ModelConfig.from_dict(manifest["model_config"]),
            store=store,
            n_features=manifest["n_features"],
            optimizer={"step_count": manifest["optimizer_step_count"], "slots": slots},
            best_val_auprc=manifest["best_val_auprc"],
            epoch=manifest["epoch"],
            rng_state=manifest["rng_state"],
        )


# ---------------------------------------------------------------------------
# streaming evaluation (frozen backbone and mixture)


@dataclass
class StreamResult:
    scores: np.ndarray  # aligned to dataset order regardless of stream order
    state: object  # final AdaptationState or None
    gate_profiles: list = field(default_factory=list)
    recon_losses: list = field(default_factory=list)

    @property
    def mean_recon_loss(self) -> float:
        return float(np.mean(self.recon_losses)) if self.recon_losses else float("nan")


def evaluate_stream(
    split: DataSplit,
    source,
    tta_lr,
    batch_size: int = 1024,
    order=None,
    tta_steps: int = 1,
) -> StreamResult:
    """Process a split sequentially with online adaptation of the TTA group.

    ``source`` is a Model or Checkpoint. ``order`` is a permutation of the
    split indices (default: dataset order); adaptation state persists across
    batches, so with a learning rate set the order matters. The backbone and
    mixture groups are never written. Scores come back aligned to dataset
    order.
    """
    model = source.to_model() if isinstance(source, Checkpoint) else source
    n = len(split)
    if n == 0:
        raise DataError("cannot evaluate an empty split")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if order is None:
        order = np.arange(n)
    else:
        order = np.asarray(order)
        if sorted(order.tolist()) != list(range(n)):
            raise ContractError("order must be a permutation of the split indices")
    effective_lr = tta_lr if model.config.tta_enabled else None
    state = model.make_adaptation_state(effective_lr)
    scores = np.empty(n)
    profiles = []
    recons = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        matrices, _ = split.take(idx)
        batch_scores, gates, recon, state = model.stream_step(matrices, state, tta_steps=tta_steps)
        scores[idx] = batch_scores
        if gates is not None:
            profiles.append(GateProfile(rows=gates))
        if recon is not None:
            recons.append(float(recon))
    return StreamResult(scores=scores, state=state, gate_profiles=profiles, recon_losses=recons)


# ---------------------------------------------------------------------------
# training loop


def train(
    train_split: DataSplit,
    valid_split: DataSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
):
    """Joint optimization with per-epoch streamed validation and early stop.

    Returns (checkpoint at the best-AUPRC epoch, per-epoch history). The
    checkpoint snapshot is taken before validation adaptation, which runs on
    a discarded clone.
    """
    train_config.validate()
    model_config.validate()
    if len(train_split) == 0 or len(valid_split) == 0:
        raise DataError("train and validation splits must be non-empty")
    n_features = np.asarray(train_split.matrices[0]).shape[1]
    model = Model.build(model_config, n_features)
    optimizer = AdamW(model.store.names(), train_config.lr_main, train_config.weight_decay)
    optimizer._ensure_slots(model.store)
    shuffle_rng = substream(train_config.seed, "shuffle")

    history = []
    best = None  # (auprc, epoch, store clone, optimizer snapshot, rng state)
    epochs_since_best = 0
    n = len(train_split)

    for epoch in range(train_config.max_epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            matrices, labels = train_split.take(idx)
            tape = Tape()
            total, outcome, recon, result = _joint_nodes(
                model, tape, matrices, labels, train_config.recon_weight
            )
            grad_by_id = backward(tape, total, list(result.bound.values()))
            grads = {name: grad_by_id[node.id] for name, node in result.bound.items()}
            optimizer.step(model.store, grads)
            sums += (float(total.value[0]), float(outcome.value[0]), float(recon.value[0]))
            n_batches += 1
        val = evaluate_stream(
            valid_split,
            model,
            train_config.tta_lr,
            batch_size=train_config.batch_size,
            tta_steps=train_config.tta_steps,
        )
        val_auprc = auprc(val.scores, valid_split.labels)
        val_auroc = auroc(val.scores, valid_split.labels)
        history.append(
            {
                "epoch": epoch,
                "train_total": float(sums[0] / n_batches),
                "train_outcome": float(sums[1] / n_batches),
                "train_recon": float(sums[2] / n_batches),
                "val_auprc": float(val_auprc),
                "val_auroc": float(val_auroc),
            }
        )
        if best is None or val_auprc > best[0]:
            best = (
                float(val_auprc),
                epoch,
                model.store.clone(),
                optimizer.state_snapshot(),
                json.loads(json.dumps(shuffle_rng.bit_generator.state)),
            )
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_config.patience:
                break

    checkpoint = Checkpoint(
        model_config=model_config,
        store=best[2],
        n_features=int(n_features),
        optimizer=best[3],
        best_val_auprc=best[0],
        epoch=best[1],
        rng_state=best[4],
    )
    return checkpoint, history
