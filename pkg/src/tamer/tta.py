"""Self-supervised reconstruction layer with an online test-time update rule.

The layer is a two-layer MLP (tanh, bottleneck strictly narrower than the
hidden width) that reconstructs the incoming representation. Its mean
squared reconstruction error is the only training signal for this group,
in every phase: gradient barriers detach the reconstruction subgraph from
the rest of the model, so the outcome loss never moves these weights and
the reconstruction loss never moves the backbone.

At test time the update rule is plain gradient descent, one or more steps
per arriving batch, with all other groups frozen. State (weights, step
counter) persists across the batches of one stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape, backward
from .errors import ConfigError, ShapeError

TTA_PARAM_NAMES = ("tta.w_in", "tta.b_in", "tta.w_out", "tta.b_out")


def init_tta_params(rng, hidden: int, bottleneck: int) -> dict[str, np.ndarray]:
    if not 0 < bottleneck < hidden:
        raise ConfigError(f"bottleneck must be in (0, hidden), got {bottleneck} vs {hidden}")

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return {
        "tta.w_in": uniform(hidden, (hidden, bottleneck)),
        "tta.b_in": np.zeros(bottleneck),
        "tta.w_out": uniform(bottleneck, (bottleneck, hidden)),
        "tta.b_out": np.zeros(hidden),
    }


def reconstruct(tape: Tape, h: Node, p: dict[str, Node]) -> Node:
    """MLP reconstruction of h: tanh(h W1 + b1) W2 + b2."""
    mid = tape.apply("tanh", tape.apply("add_bias", tape.apply("matmul", h, p["tta.w_in"]), p["tta.b_in"]))
    return tape.apply("add_bias", tape.apply("matmul", mid, p["tta.w_out"]), p["tta.b_out"])


def tta_forward(tape: Tape, h: Node, p: dict[str, Node], detached: bool = True):
    """Adapted representation and reconstruction loss for a batch.

    Returns (h_adapted, recon_loss) nodes where
    h_adapted = LayerNorm(h + reconstruction) and recon_loss is the MSE
    between the reconstruction and h over all entries. With ``detached``
    (the default, used in training and evaluation) the reconstruction
    subgraph is isolated: recon_loss reaches only this layer's weights and
    the downstream path treats the reconstruction as a constant. Pass
    ``detached=False`` to build the fully differentiable composition for
    gradient verification.
    """
    if h.value.ndim != 2:
        raise ShapeError(f"expected batch of hidden states (N x H), got {h.value.shape}")
    source = tape.apply("stop_gradient", h) if detached else h
    recon = reconstruct(tape, source, p)
    loss = tape.apply("mse", recon, source)
    downstream = tape.apply("stop_gradient", recon) if detached else recon
    adapted = tape.apply("layer_norm_rows", tape.apply("add", h, downstream))
    return adapted, loss


@dataclass
class AdaptationState:
    """Online state of one evaluation stream: live weights plus bookkeeping.

    ``lr=None`` disables updates entirely; the weights then never change.
    Single-owner and strictly sequential; concurrent streams must clone.
    """

    params: dict[str, np.ndarray]
    lr: float | None
    step_count: int = 0
    last_loss: float = field(default=float("nan"))

    def __post_init__(self):
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f"tta lr must be positive or None, got {self.lr}")
        self.params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}

    def clone(self) -> "AdaptationState":
        return AdaptationState(
            params={k: v.copy() for k, v in self.params.items()},
            lr=self.lr,
            step_count=self.step_count,
            last_loss=self.last_loss,
        )


def recon_loss_value(h: np.ndarray, params: dict[str, np.ndarray]) -> float:
    """Reconstruction MSE of a batch under the given weights."""
    tape = Tape()
    bound = {k: tape.leaf(v) for k, v in params.items()}
    _, loss = tta_forward(tape, tape.leaf(h), bound)
    return float(loss.value[0])


def tta_update(h: np.ndarray, state: AdaptationState, steps: int = 1) -> AdaptationState:
    """Apply ``steps`` gradient-descent steps on the reconstruction loss.

    Only this layer's weights change. ``last_loss`` is set to the
    post-update loss on the same batch and ``step_count`` advances by
    ``steps``. Requires a configured learning rate.
    """
    if state.lr is None:
        raise ConfigError("tta_update requires a learning rate; state.lr is None")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    for _ in range(steps):
        tape = Tape()
        bound = {k: tape.leaf(v) for k, v in state.params.items()}
        source = tape.leaf(np.asarray(h, dtype=np.float64))
        recon = reconstruct(tape, source, bound)
        loss = tape.apply("mse", recon, source)
        grads = backward(tape, loss, list(bound.values()))
        for name, node in bound.items():
            state.params[name] = state.params[name] - state.lr * grads[node.id]
    state.step_count += steps
    state.last_loss = recon_loss_value(h, state.params)
    return state


def two_pass_apply(h: np.ndarray, state: AdaptationState, steps: int = 1):
    """Update-then-recompute flow for one arriving batch.

    Pass 1 measures the reconstruction loss and (when a learning rate is
    set) updates the weights; pass 2 recomputes the adapted representation
    under the updated weights. With ``lr=None`` this is a single plain
    forward. Returns (h_adapted values, state).
    """
    if state.lr is not None:
        tta_update(h, state, steps=steps)
    tape = Tape()
    bound = {k: tape.leaf(v) for k, v in state.params.items()}
    adapted, loss = tta_forward(tape, tape.leaf(np.asarray(h, dtype=np.float64)), bound)
    state.last_loss = float(loss.value[0])
    return adapted.value.copy(), state
