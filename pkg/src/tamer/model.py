"""Model assembly: configuration, ablation wirings, and forward passes.

Five mutually exclusive wirings exist, selected by the config flags:
backbone_only, tta_only, moe_only, tta_before_moe, tta_after_moe. In the
"after" wiring the adaptation layer reconstructs the mixture output rather
than the backbone state.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import backbones, moe as moe_mod, tta as tta_mod
from .autodiff import Node, Tape, sigmoid_values
from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .rng import substream

WIRINGS = ("backbone_only", "tta_only", "moe_only", "tta_before_moe", "tta_after_moe")

# Tuning grids used by the sweep commands; not enforced on individual models.
HIDDEN_GRID = (64, 128)
EXPERT_GRID = (2, 4, 8, 16, 32)
MAIN_LR_GRID = (1e-2, 1e-3, 1e-4)
TTA_LR_GRID = (None, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class ModelConfig:
    backbone: str = "gru"  # gru | attention
    hidden: int = 64
    experts: int = 16
    tta_enabled: bool = True
    tta_placement: str = "before_moe"  # before_moe | after_moe
    moe_enabled: bool = True
    bottleneck: Optional[int] = None  # default hidden // 2
    seed: int = 0

    def resolved_bottleneck(self) -> int:
        return self.hidden // 2 if self.bottleneck is None else self.bottleneck

    def validate(self) -> None:
        if self.backbone not in backbones.BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.hidden < 2:
            raise ConfigError(f"hidden width must be >= 2, got {self.hidden}")
        if self.experts < 1:
            raise ConfigError(f"expert count must be >= 1, got {self.experts}")
        if self.tta_placement not in ("before_moe", "after_moe"):
            raise ConfigError(f"unknown tta placement {self.tta_placement!r}")
        b = self.resolved_bottleneck()
        if not 0 < b < self.hidden:
            raise ConfigError(f"bottleneck must be in (0, hidden), got {b} vs {self.hidden}")
        if self.tta_enabled and self.tta_placement == "after_moe" and not self.moe_enabled:
            raise ConfigError("tta placement after_moe requires the expert mixture")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def wire_ablation(config: ModelConfig) -> str:
    """Resolve the config flags to one of the five wirings (validating them)."""
    config.validate()
    if config.tta_enabled and config.moe_enabled:
        return "tta_before_moe" if config.tta_placement == "before_moe" else "tta_after_moe"
    if config.tta_enabled:
        return "tta_only"
    if config.moe_enabled:
        return "moe_only"
    return "backbone_only"


@dataclass
class ForwardResult:
    logits: Node  # N x 1
    recon_loss: Optional[Node]
    gates: Optional[Node]
    hidden: Node
    bound: dict  # parameter name -> leaf node on this tape


class Model:
    """A built model: config, wiring, and the parameter store."""

    def __init__(self, config: ModelConfig, store: ParameterStore, n_features: int):
        self.config = config
        self.store = store
        self.n_features = n_features
        self.wiring = wire_ablation(config)

    @classmethod
    def build(cls, config: ModelConfig, n_features: int) -> "Model":
        config.validate()
        store = ParameterStore()
        store.add_group(
            "backbone",
            backbones.init_backbone_params(
                config.backbone, substream(config.seed, "init", "backbone"), n_features, config.hidden
            ),
        )
        if config.tta_enabled:
            store.add_group(
                "tta",
                tta_mod.init_tta_params(
                    substream(config.seed, "init", "tta"), config.hidden, config.resolved_bottleneck()
                ),
            )
        moe_rng = substream(config.seed, "init", "moe")
        if config.moe_enabled:
            store.add_group("moe", moe_mod.init_moe_params(moe_rng, config.hidden, config.experts))
        else:
            store.add_group("moe", moe_mod.init_head_params(moe_rng, config.hidden))
        return cls(config, store, n_features)

    # -- input binding -----------------------------------------------------

    def bind_inputs(self, tape: Tape, visit_matrices) -> list[Node]:
        """Bind a batch of imputed T x F matrices as tape leaves.

        GRU consumes time-major N x F slices; attention consumes one T x F
        leaf per patient.
        """
        mats = [np.asarray(m, dtype=np.float64) for m in visit_matrices]
        for m in mats:
            if m.ndim != 2 or m.shape[1] != self.n_features:
                raise ShapeError(f"visit matrix shape {m.shape}, expected T x {self.n_features}")
        if self.config.backbone == "gru":
            t_len = mats[0].shape[0]
            if any(m.shape[0] != t_len for m in mats):
                raise ShapeError("gru batches require equal visit counts")
            stacked = np.stack(mats)  # N x T x F
            return [tape.leaf(np.ascontiguousarray(stacked[:, t, :])) for t in range(t_len)]
        return [tape.leaf(m) for m in mats]

    def encode(self, tape: Tape, inputs: list[Node], bound: dict[str, Node]) -> Node:
        if self.config.backbone == "gru":
            return backbones.gru_forward(tape, inputs, bound)
        return backbones.attention_forward(tape, inputs, bound)

    # -- joint forward (training / gradient checks) -------------------------

    def forward(self, tape: Tape, visit_matrices, detached: bool = True) -> ForwardResult:
        """Single joint pass from raw matrices to logits (training flow)."""
        bound = self.store.bind(tape)
        inputs = self.bind_inputs(tape, visit_matrices)
        h = self.encode(tape, inputs, bound)
        recon = None
        gates = None
        if self.wiring == "backbone_only":
            z = h
        elif self.wiring == "tta_only":
            z, recon = tta_mod.tta_forward(tape, h, bound, detached=detached)
        elif self.wiring == "moe_only":
            z, gates = moe_mod.moe_forward(tape, h, bound)
        elif self.wiring == "tta_before_moe":
            adapted, recon = tta_mod.tta_forward(tape, h, bound, detached=detached)
            z, gates = moe_mod.moe_forward(tape, adapted, bound)
        else:  # tta_after_moe
            mixed, gates = moe_mod.moe_forward(tape, h, bound)
            z, recon = tta_mod.tta_forward(tape, mixed, bound, detached=detached)
        logits = moe_mod.head_logits(tape, z, bound)
        return ForwardResult(logits=logits, recon_loss=recon, gates=gates, hidden=h, bound=bound)

    # -- streaming forward (frozen groups, online adaptation) ---------------

    def encode_values(self, visit_matrices) -> np.ndarray:
        tape = Tape()
        bound = self.store.bind(tape, groups=("backbone",))
        inputs = self.bind_inputs(tape, visit_matrices)
        return self.encode(tape, inputs, bound).value.copy()

    def make_adaptation_state(self, tta_lr) -> Optional[tta_mod.AdaptationState]:
        """Clone the stored adaptation weights into a fresh stream state."""
        if not self.config.tta_enabled:
            return None
        return tta_mod.AdaptationState(params=self.store.arrays("tta"), lr=tta_lr)

    def _moe_values(self, h: np.ndarray):
        tape = Tape()
        bound = self.store.bind(tape, groups=("moe",))
        z, gates = moe_mod.moe_forward(tape, tape.leaf(h), bound)
        return z.value.copy(), gates.value.copy()

    def stream_step(self, visit_matrices, state, tta_steps: int = 1):
        """Process one arriving batch: adapt (if configured), then score.

        Returns (scores, gate_rows or None, recon_loss or None, state).
        The backbone and mixture groups are read, never written.
        """
        h = self.encode_values(visit_matrices)
        gates = None
        recon = None
        if self.wiring in ("backbone_only", "moe_only"):
            z = h
            if self.wiring == "moe_only":
                z, gates = self._moe_values(h)
        elif self.wiring == "tta_only":
            z, state = tta_mod.two_pass_apply(h, state, steps=tta_steps)
            recon = state.last_loss
        elif self.wiring == "tta_before_moe":
            adapted, state = tta_mod.two_pass_apply(h, state, steps=tta_steps)
            recon = state.last_loss
            z, gates = self._moe_values(adapted)
        else:  # tta_after_moe
            mixed, gates = self._moe_values(h)
            z, state = tta_mod.two_pass_apply(mixed, state, steps=tta_steps)
            recon = state.last_loss
        logits = moe_mod.predict_logit(z, self.store.arrays("moe"))
        return sigmoid_values(logits), gates, recon, state
