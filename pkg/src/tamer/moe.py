"""Softmax-gated mixture of expert MLPs plus the prediction head.

Every expert is evaluated for every sample and the outputs are convexly
combined by per-sample softmax gates (dense soft routing, no top-K), then
added back onto the input as a residual. The scalar-output head lives in
the same parameter group so that freezing the group freezes the head too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, ShapeError


def init_moe_params(rng, hidden: int, n_experts: int) -> dict[str, np.ndarray]:
    if n_experts < 1:
        raise ShapeError(f"need at least one expert, got {n_experts}")

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {"moe.gate": uniform(hidden, (hidden, n_experts))}
    for e in range(n_experts):
        params[f"moe.expert{e}.w_in"] = uniform(hidden, (hidden, hidden))
        params[f"moe.expert{e}.b_in"] = np.zeros(hidden)
        params[f"moe.expert{e}.w_out"] = uniform(hidden, (hidden, hidden))
        params[f"moe.expert{e}.b_out"] = np.zeros(hidden)
    params.update(init_head_params(rng, hidden))
    return params


def init_head_params(rng, hidden: int) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(hidden)
    return {
        "moe.head_w": rng.uniform(-bound, bound, size=(hidden, 1)),
        "moe.head_b": np.zeros(1),
    }


def n_experts_of(params) -> int:
    return int(params["moe.gate"].value.shape[1] if isinstance(params["moe.gate"], Node) else params["moe.gate"].shape[1])


def expert_mlp(tape: Tape, h: Node, p: dict[str, Node], e: int) -> Node:
    mid = tape.apply("relu", tape.apply("add_bias", tape.apply("matmul", h, p[f"moe.expert{e}.w_in"]), p[f"moe.expert{e}.b_in"]))
    return tape.apply("add_bias", tape.apply("matmul", mid, p[f"moe.expert{e}.w_out"]), p[f"moe.expert{e}.b_out"])


def moe_forward(tape: Tape, h: Node, p: dict[str, Node]) -> tuple[Node, Node]:
    """Mix expert outputs by per-sample softmax gates, with a residual.

    Returns (z, gates) where z = h + sum_e gate[:, e] * expert_e(h) and
    gates is the N x E row-stochastic matrix.
    """
    if h.value.ndim != 2:
        raise ShapeError(f"expected batch of hidden states (N x H), got {h.value.shape}")
    if h.value.shape[1] != p["moe.gate"].value.shape[0]:
        raise ShapeError(
            f"hidden width {h.value.shape} does not match gate {p['moe.gate'].value.shape}"
        )
    n_experts = p["moe.gate"].value.shape[1]
    gates = tape.apply("softmax_rows", tape.apply("matmul", h, p["moe.gate"]))
    z = h
    for e in range(n_experts):
        weight = tape.apply("slice_cols", gates, start=e, stop=e + 1)
        z = tape.apply("add", z, tape.apply("scale_rows", expert_mlp(tape, h, p, e), weight))
    return z, gates


def head_logits(tape: Tape, z: Node, p: dict[str, Node]) -> Node:
    """Affine map to one logit per patient (N x 1)."""
    return tape.apply("add_bias", tape.apply("matmul", z, p["moe.head_w"]), p["moe.head_b"])


def predict_logit(z: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Logits for a batch of final representations; probability = sigmoid."""
    tape = Tape()
    bound = {k: tape.leaf(v) for k, v in params.items() if k.startswith("moe.head")}
    out = head_logits(tape, tape.leaf(np.asarray(z, dtype=np.float64)), bound)
    return out.value[:, 0].copy()


@dataclass
class GateProfile:
    """Per-sample gate rows of one batch plus their column means."""

    rows: np.ndarray  # N x E

    @property
    def mean(self) -> np.ndarray:
        return self.rows.mean(axis=0)

    def to_json_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "n_samples": int(self.rows.shape[0]),
        }


def expert_load_report(profiles) -> dict:
    """Aggregate gate statistics over a dataset.

    Accepts an iterable of GateProfile (or raw N x E arrays) and returns
    per-expert mean and standard deviation of gate mass plus the entropy of
    the mean distribution (0 for a collapsed router, ln E for a uniform one).
    """
    rows = []
    for item in profiles:
        arr = item.rows if isinstance(item, GateProfile) else np.asarray(item, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ContractError("each gate block must be a non-empty N x E matrix")
        rows.append(arr)
    if not rows:
        raise ContractError("expert_load_report needs at least one recorded batch")
    stacked = np.concatenate(rows, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    p = mean / mean.sum()
    positive = p[p > 0]
    entropy = float(-(positive * np.log(positive)).sum())
    return {
        "n_experts": int(stacked.shape[1]),
        "n_samples": int(stacked.shape[0]),
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
        "entropy": entropy,
        "max_entropy": float(math.log(stacked.shape[1])),
    }
