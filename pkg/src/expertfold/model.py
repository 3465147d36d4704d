"""SMoE model containers, invariant checks and parameter/FLOPs accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import ValidationError

STORAGE_DTYPE = np.float32
MASKED = -1  # redirect value for a router channel whose expert was pruned away


def _f32(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != STORAGE_DTYPE:
        a = a.astype(STORAGE_DTYPE)
    return a


def _is_placeholder(a: np.ndarray) -> bool:
    return a.size > 0 and 0 in a.strides


def placeholder(shape) -> np.ndarray:
    """Zero-memory read-only stand-in used for shape-only (weightless) manifests."""
    return np.broadcast_to(STORAGE_DTYPE(0), tuple(shape))


@dataclass
class ExpertWeights:
    """Bias-free two-layer FFN: ``x -> w_out @ relu(w_in @ x)``."""

    w_in: np.ndarray  # d_ff x d_model
    w_out: np.ndarray  # d_model x d_ff

    def __post_init__(self):
        self.w_in = _f32(self.w_in)
        self.w_out = _f32(self.w_out)

    @classmethod
    def placeholder(cls, d_model: int, d_ff: int) -> "ExpertWeights":
        return cls(placeholder((d_ff, d_model)), placeholder((d_model, d_ff)))

    @property
    def d_model(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w_in.shape[0]

    @property
    def n_params(self) -> int:
        return self.w_in.size + self.w_out.size

    @property
    def flops_per_token(self) -> int:
        return 2 * self.n_params

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return self.w_in, self.w_out

    def copy(self) -> "ExpertWeights":
        return ExpertWeights(self.w_in.copy(), self.w_out.copy())


@dataclass
class LowRankSparse:
    """One matrix stored as ``u @ v`` plus a column-pruned residual.

    ``s`` holds only the kept columns of the residual; ``kept_cols`` indexes
    them in the full ``d_in`` range.
    """

    u: np.ndarray  # d_out x r
    v: np.ndarray  # r x d_in
    s: np.ndarray  # d_out x len(kept_cols)
    kept_cols: np.ndarray

    def __post_init__(self):
        self.u = _f32(self.u)
        self.v = _f32(self.v)
        self.s = _f32(self.s)
        self.kept_cols = np.asarray(self.kept_cols, dtype=np.int64)

    @property
    def d_out(self) -> int:
        return self.u.shape[0]

    @property
    def d_in(self) -> int:
        return self.v.shape[1]

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in)

    @property
    def n_params(self) -> int:
        return self.rank * (self.d_in + self.d_out) + self.d_out * self.kept_cols.size

    @property
    def flops_per_token(self) -> int:
        return 2 * self.n_params

    def sparse_dense(self) -> np.ndarray:
        """Residual scattered back into a ``d_out x d_in`` matrix (pruned columns zero)."""
        full = np.zeros((self.d_out, self.d_in), dtype=np.float64)
        full[:, self.kept_cols] = self.s
        return full

    def dense(self) -> np.ndarray:
        return np.asarray(self.u, np.float64) @ np.asarray(self.v, np.float64) + self.sparse_dense()

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``W @ x`` for a vector or a ``d_in x b`` block, without forming ``W``."""
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(self.u, np.float64)
        v = np.asarray(self.v, np.float64)
        out = u @ (v @ x)
        if self.kept_cols.size:
            out = out + np.asarray(self.s, np.float64) @ x[self.kept_cols]
        return out

    def copy(self) -> "LowRankSparse":
        return LowRankSparse(self.u.copy(), self.v.copy(), self.s.copy(), self.kept_cols.copy())


@dataclass
class DecomposedExpert:
    w_in: LowRankSparse
    w_out: LowRankSparse

    @property
    def d_model(self) -> int:
        return self.w_in.d_in

    @property
    def d_ff(self) -> int:
        return self.w_in.d_out

    @property
    def n_params(self) -> int:
        return self.w_in.n_params + self.w_out.n_params

    @property
    def flops_per_token(self) -> int:
        return self.w_in.flops_per_token + self.w_out.flops_per_token

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return self.w_in.dense(), self.w_out.dense()

    def copy(self) -> "DecomposedExpert":
        return DecomposedExpert(self.w_in.copy(), self.w_out.copy())


Expert = Union[ExpertWeights, DecomposedExpert]


@dataclass
class SmoeLayer:
    router: np.ndarray  # n_experts x d_model
    experts: list  # storage slots
    redirect: np.ndarray = None  # original expert index -> slot, or MASKED

    def __post_init__(self):
        self.router = _f32(self.router)
        if self.redirect is None:
            self.redirect = np.arange(self.router.shape[0], dtype=np.int64)
        self.redirect = np.asarray(self.redirect, dtype=np.int64)

    @property
    def n_experts(self) -> int:
        return self.router.shape[0]

    @property
    def n_slots(self) -> int:
        return len(self.experts)

    def expert_for(self, i: int) -> Expert:
        slot = int(self.redirect[i])
        if slot == MASKED:
            raise KeyError(f"expert {i} was pruned")
        return self.experts[slot]

    def has_identity_redirect(self) -> bool:
        return self.n_slots == self.n_experts and np.array_equal(
            self.redirect, np.arange(self.n_experts)
        )

    def copy(self) -> "SmoeLayer":
        return SmoeLayer(self.router.copy(), [e.copy() for e in self.experts], self.redirect.copy())


@dataclass
class ModelManifest:
    d_model: int
    d_ff: int
    layers: list
    skip_layers: frozenset = frozenset()
    backbone_params: int = 0
    # when set, every SMoE layer stands in for one dense FFN already counted in backbone_params
    replaces_dense_ffn: bool = False
    head: np.ndarray | None = None  # n_classes x d_model readout for the synthetic task
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.skip_layers = frozenset(int(t) for t in self.skip_layers)
        if self.head is not None:
            self.head = _f32(self.head)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self, **changes) -> "ModelManifest":
        base = replace(
            self,
            layers=[layer.copy() for layer in self.layers],
            head=None if self.head is None else self.head.copy(),
            meta=dict(self.meta),
        )
        return replace(base, **changes) if changes else base


@dataclass
class SizeReport:
    total_params: int
    per_layer_params: list
    router_params: int
    backbone_params: int
    ffn_flops_per_token: int

    def as_dict(self) -> dict:
        return {
            "total_params": int(self.total_params),
            "per_layer_params": [int(p) for p in self.per_layer_params],
            "router_params": int(self.router_params),
            "backbone_params": int(self.backbone_params),
            "ffn_flops_per_token": int(self.ffn_flops_per_token),
        }


def _check_finite(name: str, a: np.ndarray):
    if _is_placeholder(a):
        return
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")


def _check_lrs(name: str, m: LowRankSparse, d_out: int, d_in: int):
    if m.shape != (d_out, d_in):
        raise ValidationError(f"{name}: decomposed shape {m.shape} != {(d_out, d_in)}")
    if m.v.shape[0] != m.rank or m.rank < 1:
        raise ValidationError(f"{name}: inconsistent rank (u {m.u.shape}, v {m.v.shape})")
    kc = m.kept_cols
    if kc.ndim != 1 or m.s.shape != (d_out, kc.size):
        raise ValidationError(f"{name}: sparse block {m.s.shape} does not match {kc.size} kept columns")
    if kc.size and (kc[0] < 0 or kc[-1] >= d_in or np.any(np.diff(kc) <= 0)):
        raise ValidationError(f"{name}: kept_cols must be strictly increasing within 0..{d_in - 1}")
    for part in ("u", "v", "s"):
        _check_finite(f"{name}.{part}", getattr(m, part))


def validate_expert(name: str, e, d_model: int, d_ff: int):
    if isinstance(e, ExpertWeights):
        if e.w_in.shape != (d_ff, d_model) or e.w_out.shape != (d_model, d_ff):
            raise ValidationError(
                f"{name}: shapes w_in {e.w_in.shape}, w_out {e.w_out.shape} "
                f"inconsistent with d_model={d_model}, d_ff={d_ff}"
            )
        _check_finite(f"{name}.w_in", e.w_in)
        _check_finite(f"{name}.w_out", e.w_out)
    elif isinstance(e, DecomposedExpert):
        _check_lrs(f"{name}.w_in", e.w_in, d_ff, d_model)
        _check_lrs(f"{name}.w_out", e.w_out, d_model, d_ff)
    else:
        raise ValidationError(f"{name}: unsupported expert type {type(e).__name__}")


def validate_layer(t: int, layer: SmoeLayer, d_model: int, d_ff: int):
    if layer.router.ndim != 2 or layer.router.shape[1] != d_model:
        raise ValidationError(f"layer {t}: router shape {layer.router.shape} needs {d_model} columns")
    _check_finite(f"layer {t} router", layer.router)
    if layer.redirect.shape != (layer.n_experts,):
        raise ValidationError(
            f"layer {t}: redirect length {layer.redirect.size} != router rows {layer.n_experts}"
        )
    if layer.n_slots < 1:
        raise ValidationError(f"layer {t}: no expert storage slots")
    bad = (layer.redirect != MASKED) & ((layer.redirect < 0) | (layer.redirect >= layer.n_slots))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(
            f"layer {t}: redirect[{i}]={int(layer.redirect[i])} points past {layer.n_slots} slots"
        )
    if np.all(layer.redirect == MASKED):
        raise ValidationError(f"layer {t}: every router channel is masked")
    for s, e in enumerate(layer.experts):
        validate_expert(f"layer {t} slot {s}", e, d_model, d_ff)


def validate_manifest(m: ModelManifest) -> ModelManifest:
    """Check every invariant; returns ``m`` unchanged for chaining."""
    if m.d_model < 1 or m.d_ff < 1:
        raise ValidationError("d_model and d_ff must be positive")
    if m.n_layers < 1:
        raise ValidationError("model has no SMoE layers")
    for t in m.skip_layers:
        if not 0 <= t < m.n_layers:
            raise ValidationError(f"skip layer {t} out of range for {m.n_layers} layers")
    if m.backbone_params < 0:
        raise ValidationError("backbone_params must be non-negative")
    if m.head is not None:
        if m.head.ndim != 2 or m.head.shape[1] != m.d_model:
            raise ValidationError(f"head shape {m.head.shape} needs {m.d_model} columns")
        _check_finite("head", m.head)
    for t, layer in enumerate(m.layers):
        validate_layer(t, layer, m.d_model, m.d_ff)
    return m


def dense_ffn_params(d_model: int, d_ff: int) -> int:
    return 2 * d_model * d_ff


def account(m: ModelManifest) -> SizeReport:
    """Parameter count and per-token FFN FLOPs.

    Only storage slots are counted, so a redirect table never inflates the
    total. Per-token FLOPs assume the costliest slot of each layer is hit.
    """
    backbone = m.backbone_params
    if m.replaces_dense_ffn:
        backbone -= m.n_layers * dense_ffn_params(m.d_model, m.d_ff)
    per_layer = [sum(e.n_params for e in layer.experts) for layer in m.layers]
    routers = sum(layer.router.size for layer in m.layers)
    flops = sum(max(e.flops_per_token for e in layer.experts) for layer in m.layers)
    return SizeReport(
        total_params=backbone + sum(per_layer) + routers,
        per_layer_params=per_layer,
        router_params=routers,
        backbone_params=backbone,
        ffn_flops_per_token=flops,
    )


def placeholder_decomposed(d_model: int, d_ff: int, rank: int, keep_ratio: float) -> DecomposedExpert:
    """Shape-only decomposed expert keeping ``ceil(keep_ratio * d_in)`` residual columns per matrix."""

    def part(d_out, d_in):
        kept = math.ceil(round(keep_ratio * d_in, 9))
        return LowRankSparse(
            placeholder((d_out, rank)),
            placeholder((rank, d_in)),
            placeholder((d_out, kept)),
            np.arange(kept),
        )

    return DecomposedExpert(part(d_ff, d_model), part(d_model, d_ff))
