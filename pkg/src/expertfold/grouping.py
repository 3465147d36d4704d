"""Dominant-expert selection and similarity-based group assignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import ModelManifest
from .numerics import cosine
from .runtime import RoutingStats, expert_matrices

METHODS = (
    "random",
    "expert-weight",
    "expert-weight-feature",
    "expert-gradient",
    "expert-feature",
    "expert-feature.abs",
    "router-weight",
    "router-logits",
)


@dataclass
class GroupingPlan:
    dominant: list  # per layer: sorted list of dominant expert indices
    labels: list  # per layer: int array, labels[t][i] = dominant expert of i's group
    method: str = "router-logits"
    normalized_frequencies: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.dominant)

    def groups(self, t: int) -> dict:
        """``{dominant: [members...]}`` for layer ``t``; members ascending, dominant included."""
        lab = np.asarray(self.labels[t])
        return {int(d): [int(i) for i in np.flatnonzero(lab == d)] for d in self.dominant[t]}

    def validate(self, n_experts=None) -> "GroupingPlan":
        if len(self.labels) != len(self.dominant):
            raise ValidationError("plan has mismatched dominant/label layer counts")
        for t, (dom, lab) in enumerate(zip(self.dominant, self.labels)):
            lab = np.asarray(lab)
            n = lab.size if n_experts is None else n_experts[t]
            if lab.size != n:
                raise ValidationError(f"layer {t}: {lab.size} labels for {n} experts")
            if not dom:
                raise ValidationError(f"layer {t}: no dominant experts")
            dset = set(int(d) for d in dom)
            if len(dset) != len(dom) or any(not 0 <= d < n for d in dset):
                raise ValidationError(f"layer {t}: invalid dominant set {dom}")
            for d in dset:
                if lab[d] != d:
                    raise ValidationError(f"layer {t}: dominant {d} is not its own label")
            if any(int(q) not in dset for q in lab):
                raise ValidationError(f"layer {t}: label outside the dominant set")
        return self


def normalize_frequencies(A) -> list:
    """Divide each layer's frequencies by that layer's maximum (max becomes 1.0)."""
    out = []
    for t, a in enumerate(A):
        a = np.asarray(a, dtype=np.float64)
        top = a.max() if a.size else 0.0
        if not top > 0:
            raise ValueError(f"layer {t} has no activated expert")
        out.append(a / top)
    return out


def select_dominant(A_norm, k_total: int, skip=frozenset()) -> list:
    """Pick ``k_total`` dominant experts across the non-skipped layers.

    Each non-skipped layer first reserves its most frequent expert; the rest
    of the budget goes to the globally highest normalised frequencies, ties
    broken by (layer, expert). Skipped layers keep all experts.
    """
    skip = frozenset(skip)
    active = [t for t in range(len(A_norm)) if t not in skip]
    capacity = sum(len(A_norm[t]) for t in active)
    if k_total < len(active):
        raise ValueError(f"budget {k_total} cannot cover {len(active)} layers with one expert each")
    if k_total > capacity:
        raise ValueError(f"budget {k_total} exceeds the {capacity} mergeable experts")
    chosen = {t: set() for t in active}
    for t in active:
        chosen[t].add(int(np.argmax(A_norm[t])))
    pool = [
        (-float(A_norm[t][i]), t, i)
        for t in active
        for i in range(len(A_norm[t]))
        if i not in chosen[t]
    ]
    pool.sort()
    for _, t, i in pool[: k_total - len(active)]:
        chosen[t].add(i)
    return [
        list(range(len(A_norm[t]))) if t in skip else sorted(chosen[t])
        for t in range(len(A_norm))
    ]


@dataclass
class SimilarityContext:
    """Inputs an expert-similarity method may draw on.

    ``grads`` maps ``(layer, expert) -> (dW_in, dW_out)``; it is only needed
    for ``expert-gradient``.
    """

    model: ModelManifest
    stats: RoutingStats | None = None
    grads: dict | None = None
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)


def _flat_weight(ctx, t, i):
    w_in, w_out = expert_matrices(ctx.model.layers[t].expert_for(i))
    return np.concatenate([w_in.ravel(), w_out.ravel()])


def _routed_inputs(ctx, t, i):
    if ctx.stats is None or not ctx.stats.inputs:
        raise ValueError("feature-based similarity needs routing stats with layer inputs")
    x = ctx.stats.inputs[t]
    mask = ctx.stats.assignments[t] == i
    return x[mask]


def _feature(ctx, t, i):
    x = _routed_inputs(ctx, t, i)
    return x.mean(axis=0) if len(x) else np.zeros(ctx.model.d_model)


def _feature_abs(ctx, t, i):
    x = _routed_inputs(ctx, t, i)
    return np.abs(x).mean(axis=0) if len(x) else np.zeros(ctx.model.d_model)


def _weight_feature(ctx, t, i):
    return _flat_weight(ctx, t, i) * float(np.linalg.norm(_feature(ctx, t, i)))


def _gradient(ctx, t, i):
    if ctx.grads is None:
        raise ValueError("expert-gradient similarity needs expert gradients")
    g = ctx.grads.get((t, i))
    if g is None:
        w_in, w_out = expert_matrices(ctx.model.layers[t].expert_for(i))
        return np.zeros(w_in.size + w_out.size)
    return np.concatenate([np.ravel(g[0]), np.ravel(g[1])])


def _random(ctx, t, i):
    rng = np.random.default_rng([ctx.seed, t, i])
    return rng.normal(size=ctx.model.d_model)


def _router_weight(ctx, t, i):
    return np.asarray(ctx.model.layers[t].router[i], dtype=np.float64)


def _router_logits(ctx, t, i):
    if ctx.stats is None:
        raise ValueError("router-logits similarity needs routing stats")
    return ctx.stats.logits[t][i]


_REPRESENTATIONS = {
    "random": _random,
    "expert-weight": _flat_weight,
    "expert-weight-feature": _weight_feature,
    "expert-gradient": _gradient,
    "expert-feature": _feature,
    "expert-feature.abs": _feature_abs,
    "router-weight": _router_weight,
    "router-logits": _router_logits,
}


def expert_representation(method: str, ctx: SimilarityContext, t: int, i: int) -> np.ndarray:
    if method not in _REPRESENTATIONS:
        raise ValueError(f"unknown similarity method {method!r}; choose from {', '.join(METHODS)}")
    key = (method, t, i)
    if key not in ctx._cache:
        ctx._cache[key] = _REPRESENTATIONS[method](ctx, t, i)
    return ctx._cache[key]


def expert_similarity(method: str, ctx: SimilarityContext, t: int, i: int, j: int) -> float:
    return cosine(expert_representation(method, ctx, t, i), expert_representation(method, ctx, t, j))


def assign_groups(t: int, D_t, sim, n_experts: int) -> np.ndarray:
    """Label every expert of layer ``t`` with its most similar dominant.

    ``sim(i, j)`` scores expert ``i`` against dominant ``j``; ties go to the
    lowest dominant index.
    """
    dominants = sorted(int(d) for d in D_t)
    if not dominants:
        raise ValueError(f"layer {t}: empty dominant set")
    labels = np.empty(n_experts, dtype=np.int64)
    dset = set(dominants)
    for i in range(n_experts):
        if i in dset:
            labels[i] = i
            continue
        best, best_sim = dominants[0], sim(i, dominants[0])
        for d in dominants[1:]:
            s = sim(i, d)
            if s > best_sim:
                best, best_sim = d, s
        labels[i] = best
    return labels


def build_plan(model: ModelManifest, stats: RoutingStats, k_total: int, method: str = "router-logits",
               skip=None, grads=None, seed: int = 0) -> GroupingPlan:
    """Normalise frequencies, pick dominants globally, then label every expert."""
    if method not in METHODS:
        raise ValueError(f"unknown similarity method {method!r}")
    skip = model.skip_layers if skip is None else frozenset(skip)
    a_norm = normalize_frequencies(stats.frequencies)
    dominant = select_dominant(a_norm, k_total, skip)
    ctx = SimilarityContext(model, stats, grads, seed)
    labels = []
    for t, dom in enumerate(dominant):
        n = model.layers[t].n_experts
        if t in skip:
            labels.append(np.arange(n))
            continue
        labels.append(assign_groups(t, dom, lambda i, j: expert_similarity(method, ctx, t, i, j), n))
    return GroupingPlan(dominant, labels, method, a_norm).validate()


def budget_from_average(model: ModelManifest, k_avg: float, skip=None) -> int:
    """Total dominant budget for an average of ``k_avg`` experts per mergeable layer."""
    skip = model.skip_layers if skip is None else frozenset(skip)
    active = [t for t in range(model.n_layers) if t not in skip]
    return int(round(k_avg * len(active)))
