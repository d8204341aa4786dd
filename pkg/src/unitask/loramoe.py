"""Mixture-of-experts low-rank adapter layer with numeric verification.

A frozen base linear map W0 is augmented by N low-rank experts (B_i, A_i)
mixed by a softmax gate over the input:

    o = W0 x + (alpha/r) * sum_i w_i B_i A_i x,   w = softmax(Wg x)

Shapes follow the standard column-vector convention: x in R^{d_in},
W0 in R^{d_out x d_in}, A_i in R^{r x d_in}, B_i in R^{d_out x r},
Wg in R^{N x d_in}. All math is double precision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(ValueError):
    pass


class InvalidCheckpoint(ValueError):
    pass


def _as_matrix(name: str, value, rows: "int | None" = None, cols: "int | None" = None) -> np.ndarray:
    m = np.asarray(value, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-d, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeMismatch(f"{name} has {m.shape[0]} rows, expected {rows}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeMismatch(f"{name} has {m.shape[1]} cols, expected {cols}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def _as_vector(name: str, value, size: "int | None" = None) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-d, got shape {v.shape}")
    if size is not None and v.size != size:
        raise ShapeMismatch(f"{name} has size {v.size}, expected {size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True)
class LoraExpert:
    """One low-rank expert: delta = B @ A, never materialized in the forward."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        a = _as_matrix("A", self.A)
        b = _as_matrix("B", self.B, cols=a.shape[0])
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]


@dataclass(frozen=True)
class GateWeights:
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))


@dataclass(frozen=True)
class LoRAMoELayer:
    W0: np.ndarray
    experts: tuple[LoraExpert, ...]
    Wg: np.ndarray
    alpha: float
    r: int

    def __post_init__(self):
        w0 = _as_matrix("W0", self.W0)
        experts = tuple(self.experts)
        if not experts:
            raise ShapeMismatch("layer needs at least one expert")
        if self.r < 1:
            raise ValueError("r must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        d_out, d_in = w0.shape
        for i, e in enumerate(experts):
            if (e.d_in, e.d_out, e.r) != (d_in, d_out, self.r):
                raise ShapeMismatch(
                    f"expert {i} shapes (d_in={e.d_in}, d_out={e.d_out}, r={e.r}) "
                    f"do not match layer (d_in={d_in}, d_out={d_out}, r={self.r})"
                )
        wg = _as_matrix("Wg", self.Wg, rows=len(experts), cols=d_in)
        object.__setattr__(self, "W0", w0)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "Wg", wg)

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def gate(x, Wg) -> GateWeights:
    wg = _as_matrix("Wg", Wg)
    xv = _as_vector("x", x, size=wg.shape[1])
    logits = wg @ xv
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return GateWeights(weights=e / np.sum(e))


def expert_delta(e: LoraExpert, alpha: float, r: int, x) -> np.ndarray:
    xv = _as_vector("x", x, size=e.d_in)
    return (alpha / r) * (e.B @ (e.A @ xv))


def loramoe_forward(layer: LoRAMoELayer, x) -> np.ndarray:
    xv = _as_vector("x", x, size=layer.d_in)
    o = layer.W0 @ xv
    w = gate(xv, layer.Wg).weights
    for i, e in enumerate(layer.experts):
        # all-zero B contributes exactly nothing; skipping keeps o bitwise W0 x
        if not e.B.any():
            continue
        o = o + w[i] * expert_delta(e, layer.alpha, layer.r, xv)
    return o


def dense_equivalent(layer: LoRAMoELayer, x) -> np.ndarray:
    """Oracle: materializes each dense delta W and uses an unshifted softmax."""
    xv = _as_vector("x", x, size=layer.d_in)
    logits = layer.Wg @ xv
    e = np.exp(logits)
    w = e / np.sum(e)
    o = layer.W0 @ xv
    for i, ex in enumerate(layer.experts):
        delta_w = (layer.alpha / layer.r) * (ex.B @ ex.A)
        o = o + w[i] * (delta_w @ xv)
    return o


@dataclass(frozen=True)
class FfnBlock:
    """Residual feed-forward block: f(x) = x + second(act(first(x)))."""

    first: LoRAMoELayer
    second: LoRAMoELayer
    activation: Callable[[np.ndarray], np.ndarray] = field(default=np.tanh)

    def __post_init__(self):
        if self.first.d_out != self.second.d_in:
            raise ShapeMismatch(
                f"inner width mismatch: first d_out={self.first.d_out}, second d_in={self.second.d_in}"
            )
        if self.second.d_out != self.first.d_in:
            raise ShapeMismatch(
                f"residual needs second d_out={self.second.d_out} equal to first d_in={self.first.d_in}"
            )


def ffn_block_forward(block: FfnBlock, x) -> np.ndarray:
    xv = _as_vector("x", x, size=block.first.d_in)
    hidden = block.activation(loramoe_forward(block.first, xv))
    return xv + loramoe_forward(block.second, hidden)


def _loss_and_grad_out(layer: LoRAMoELayer, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Sum-of-squares loss, its gradient w.r.t. the output, and the output."""
    o = loramoe_forward(layer, x)
    return float(np.sum(o * o)), 2.0 * o, o


def analytic_gradients(layer: LoRAMoELayer, x) -> dict[str, np.ndarray]:
    """d(sum(o^2))/d{A_i, B_i, Wg} with the gate's softmax coupling included.

    W0 is frozen and deliberately absent from the result.
    """
    xv = _as_vector("x", x, size=layer.d_in)
    w = gate(xv, layer.Wg).weights
    scale = layer.alpha / layer.r
    _, g, _ = _loss_and_grad_out(layer, xv)

    grads: dict[str, np.ndarray] = {}
    s = np.zeros(layer.n_experts)
    for i, e in enumerate(layer.experts):
        ax = e.A @ xv
        d_i = scale * (e.B @ ax)
        s[i] = g @ d_i
        grads[f"B[{i}]"] = w[i] * scale * np.outer(g, ax)
        grads[f"A[{i}]"] = w[i] * scale * np.outer(e.B.T @ g, xv)
    # softmax backward: dL/dl_j = w_j (s_j - sum_k w_k s_k)
    dl = w * (s - float(w @ s))
    grads["Wg"] = np.outer(dl, xv)
    return grads


_TRAINABLE_ARRAYS = ("A", "B", "Wg")


def _param_arrays(layer: LoRAMoELayer) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, e in enumerate(layer.experts):
        out[f"A[{i}]"] = e.A
        out[f"B[{i}]"] = e.B
    out["Wg"] = layer.Wg
    return out


def _rebuild(layer: LoRAMoELayer, params: dict[str, np.ndarray]) -> LoRAMoELayer:
    experts = tuple(
        LoraExpert(A=params[f"A[{i}]"], B=params[f"B[{i}]"]) for i in range(layer.n_experts)
    )
    return LoRAMoELayer(W0=layer.W0, experts=experts, Wg=params["Wg"], alpha=layer.alpha, r=layer.r)


@dataclass(frozen=True)
class GradReport:
    max_rel_error: float
    per_param: dict[str, float]
    n_entries: int

    @property
    def params(self) -> tuple[str, ...]:
        return tuple(self.per_param)


def grad_check(layer: LoRAMoELayer, x, eps: float = 1e-5) -> GradReport:
    """Central finite differences against the analytic gradients.

    Perturbs every entry of every A_i, B_i, and Wg; W0 stays untouched.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    xv = _as_vector("x", x)
    analytic = analytic_gradients(layer, xv)
    base = {name: arr.copy() for name, arr in _param_arrays(layer).items()}

    per_param: dict[str, float] = {}
    n_entries = 0
    for name, arr in base.items():
        a_grad = analytic[name]
        if not np.all(np.isfinite(a_grad)):
            raise NonFiniteGradient(f"analytic gradient of {name} is not finite")
        worst = 0.0
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            saved = arr[idx]
            perturbed = dict(base)
            bumped = arr.copy()
            bumped[idx] = saved + eps
            perturbed[name] = bumped
            lp, _, _ = _loss_and_grad_out(_rebuild(layer, perturbed), xv)
            bumped = arr.copy()
            bumped[idx] = saved - eps
            perturbed[name] = bumped
            lm, _, _ = _loss_and_grad_out(_rebuild(layer, perturbed), xv)
            numeric = (lp - lm) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteGradient(f"numeric gradient of {name}{idx} is not finite")
            a = float(a_grad[idx])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
            n_entries += 1
            it.iternext()
        per_param[name] = worst
    return GradReport(
        max_rel_error=max(per_param.values()),
        per_param=per_param,
        n_entries=n_entries,
    )


CHECKPOINT_FORMAT = "loramoe-layer"
CHECKPOINT_VERSION = 1


def save_layer(layer: LoRAMoELayer, path: "str | Path") -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d_in": layer.d_in,
        "d_out": layer.d_out,
        "n_experts": layer.n_experts,
        "r": layer.r,
        "alpha": layer.alpha,
        "w0": layer.W0.ravel().tolist(),
        "wg": layer.Wg.ravel().tolist(),
        "experts": [
            {"a": e.A.ravel().tolist(), "b": e.B.ravel().tolist()} for e in layer.experts
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_layer(path: "str | Path") -> LoRAMoELayer:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidCheckpoint(f"unreadable checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidCheckpoint("not a layer checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidCheckpoint(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        d_in, d_out, n, r = int(doc["d_in"]), int(doc["d_out"]), int(doc["n_experts"]), int(doc["r"])
        w0 = _reshape("w0", doc["w0"], d_out, d_in)
        wg = _reshape("wg", doc["wg"], n, d_in)
        raw_experts = doc["experts"]
        if len(raw_experts) != n:
            raise InvalidCheckpoint(f"expected {n} experts, found {len(raw_experts)}")
        experts = tuple(
            LoraExpert(A=_reshape("a", e["a"], r, d_in), B=_reshape("b", e["b"], d_out, r))
            for e in raw_experts
        )
        return LoRAMoELayer(W0=w0, experts=experts, Wg=wg, alpha=float(doc["alpha"]), r=r)
    except InvalidCheckpoint:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidCheckpoint(f"malformed checkpoint: {exc}") from exc


def _reshape(name: str, flat: Sequence[float], rows: int, cols: int) -> np.ndarray:
    arr = np.asarray(flat, dtype=np.float64)
    if arr.size != rows * cols:
        raise InvalidCheckpoint(f"{name} has {arr.size} entries, expected {rows * cols}")
    return arr.reshape(rows, cols)
