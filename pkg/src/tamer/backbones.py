"""Sequence encoders mapping a patient's visit matrix to one hidden state.

Both encoders consume a fully imputed T x F matrix (dynamic features with
the static vector broadcast onto every visit) and emit the H-dimensional
state of the final step. Weight init is uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
biases start at zero.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, Tape
from .errors import DataError, ShapeError

BACKBONE_KINDS = ("gru", "attention")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gru_params(rng, n_features: int, hidden: int) -> dict[str, np.ndarray]:
    """Gate matrices are (F+H) x H: update, reset, candidate, plus biases."""
    fan = n_features + hidden
    params = {}
    for gate in ("update", "reset", "cand"):
        params[f"gru.w_{gate}"] = _uniform(rng, fan, (fan, hidden))
        params[f"gru.b_{gate}"] = np.zeros(hidden)
    return params


def init_attention_params(rng, n_features: int, hidden: int) -> dict[str, np.ndarray]:
    params = {
        "attn.w_query": _uniform(rng, n_features, (n_features, hidden)),
        "attn.w_key": _uniform(rng, n_features, (n_features, hidden)),
        "attn.w_value": _uniform(rng, n_features, (n_features, hidden)),
        "attn.w_out": _uniform(rng, hidden, (hidden, hidden)),
        "attn.b_out": np.zeros(hidden),
        "attn.pos_scale": np.array([1.0]),
    }
    return params


def init_backbone_params(kind, rng, n_features, hidden):
    if kind == "gru":
        return init_gru_params(rng, n_features, hidden)
    if kind == "attention":
        return init_attention_params(rng, n_features, hidden)
    raise ShapeError(f"unknown backbone kind {kind!r}")


def gru_forward(tape: Tape, steps: list[Node], p: dict[str, Node]) -> Node:
    """Batched GRU over time-major inputs (each element of ``steps`` is N x F).

    Returns the last hidden state, N x H. h_0 = 0; sigmoid gates, tanh
    candidate; the update gate interpolates carry-over vs candidate, with
    gate value 1 meaning "take the candidate".
    """
    n = steps[0].value.shape[0]
    hidden = p["gru.w_update"].value.shape[1]
    h = tape.leaf(np.zeros((n, hidden)))
    ones = tape.leaf(np.ones((n, hidden)))
    for x_t in steps:
        xh = tape.apply("concat_rows", x_t, h)
        z = tape.apply("sigmoid", tape.apply("add_bias", tape.apply("matmul", xh, p["gru.w_update"]), p["gru.b_update"]))
        r = tape.apply("sigmoid", tape.apply("add_bias", tape.apply("matmul", xh, p["gru.w_reset"]), p["gru.b_reset"]))
        xrh = tape.apply("concat_rows", x_t, tape.apply("mul", r, h))
        cand = tape.apply("tanh", tape.apply("add_bias", tape.apply("matmul", xrh, p["gru.w_cand"]), p["gru.b_cand"]))
        keep = tape.apply("mul", tape.apply("sub", ones, z), h)
        h = tape.apply("add", keep, tape.apply("mul", z, cand))
    return h


def positional_table(n_visits: int, hidden: int) -> np.ndarray:
    """Fixed sinusoidal position encodings, T x H."""
    pos = np.arange(n_visits)[:, None]
    dim = np.arange(hidden)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / hidden)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float64)


def _attention_mix(tape: Tape, x: Node, p: dict[str, Node]) -> tuple[Node, Node]:
    """Per-row attention weights (T x T) and mixed values (T x H)."""
    n_visits = x.value.shape[0]
    hidden = p["attn.w_query"].value.shape[1]
    q = tape.apply("matmul", x, p["attn.w_query"])
    k = tape.apply("matmul", x, p["attn.w_key"])
    v = tape.apply("matmul", x, p["attn.w_value"])
    pos = tape.apply("mul_scalar", tape.leaf(positional_table(n_visits, hidden)), p["attn.pos_scale"])
    q = tape.apply("add", q, pos)
    k = tape.apply("add", k, pos)
    scores = tape.apply("scale", tape.apply("matmul", q, tape.apply("transpose", k)), factor=1.0 / np.sqrt(hidden))
    weights = tape.apply("softmax_rows", scores)
    return weights, tape.apply("matmul", weights, v)


def attention_single(tape: Tape, x: Node, p: dict[str, Node]) -> Node:
    """Single-patient self-attention over T visits, mean-pooled to 1 x H.

    Positions enter through a learned scalar times a sinusoidal table, added
    to queries and keys only, so identical visits pool to the single-visit
    output regardless of T.
    """
    n_visits = x.value.shape[0]
    _, mixed = _attention_mix(tape, x, p)
    pool = tape.leaf(np.full((1, n_visits), 1.0 / n_visits))
    pooled = tape.apply("matmul", pool, mixed)
    return tape.apply("add_bias", tape.apply("matmul", pooled, p["attn.w_out"]), p["attn.b_out"])


def attention_forward(tape: Tape, per_patient: list[Node], p: dict[str, Node]) -> Node:
    rows = [attention_single(tape, x, p) for x in per_patient]
    if len(rows) == 1:
        return rows[0]
    return tape.apply("stack_rows", *rows)


def _check_visit_matrix(x: np.ndarray, n_features: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"visit matrix must be T x F with T >= 1, got {x.shape}")
    if x.shape[1] != n_features:
        raise ShapeError(f"visit matrix has {x.shape[1]} features, params expect {n_features}")
    if not np.all(np.isfinite(x)):
        raise DataError("visit matrix contains missing markers; impute first")
    return x


def encode_gru(x, params: dict[str, np.ndarray]) -> np.ndarray:
    """Encode one patient (T x F) to the final GRU hidden state (H,)."""
    n_features = params["gru.w_update"].shape[0] - params["gru.w_update"].shape[1]
    x = _check_visit_matrix(x, n_features)
    tape = Tape()
    bound = {name: tape.leaf(arr) for name, arr in params.items()}
    steps = [tape.leaf(x[t : t + 1]) for t in range(x.shape[0])]
    return gru_forward(tape, steps, bound).value[0].copy()


def encode_attention(x, params: dict[str, np.ndarray]) -> np.ndarray:
    """Encode one patient (T x F) with the attention backbone, to (H,)."""
    n_features = params["attn.w_query"].shape[0]
    x = _check_visit_matrix(x, n_features)
    tape = Tape()
    bound = {name: tape.leaf(arr) for name, arr in params.items()}
    return attention_single(tape, tape.leaf(x), bound).value[0].copy()


def attention_weights(x, params: dict[str, np.ndarray]) -> np.ndarray:
    """The T x T attention matrix for one patient (diagnostic)."""
    n_features = params["attn.w_query"].shape[0]
    x = _check_visit_matrix(x, n_features)
    tape = Tape()
    p = {name: tape.leaf(arr) for name, arr in params.items()}
    weights, _ = _attention_mix(tape, tape.leaf(x), p)
    return weights.value.copy()
