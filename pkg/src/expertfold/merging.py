"""Group merging with router redirection, and the one-shot pruning baseline."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .grouping import GroupingPlan
from .model import MASKED, ExpertWeights, ModelManifest, SmoeLayer, validate_manifest

STRATEGIES = ("frequency", "uniform", "fisher")
FISHER_EPS = 1e-8


def _normalized(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("merge weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ValueError("merge weights are all zero")
    return w / total


def merge_group(experts, weights=None, strategy: str = "frequency", fisher=None) -> ExpertWeights:
    """Weighted average of aligned experts.

    ``frequency`` uses ``weights`` as scalar coefficients, ``uniform`` ignores
    them. ``fisher`` needs per-parameter squared gradients, one
    ``(F_in, F_out)`` pair per expert. A single expert is returned unchanged.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown merge strategy {strategy!r}")
    experts = list(experts)
    if not experts:
        raise ValueError("cannot merge an empty group")
    if len(experts) == 1:
        return experts[0].copy()
    if strategy == "fisher":
        if fisher is None or len(fisher) != len(experts):
            raise ValueError("fisher merging needs one (F_in, F_out) pair per expert")
        merged = []
        for k in range(2):
            num = np.zeros(experts[0].dense()[k].shape)
            den = np.zeros_like(num)
            for e, f in zip(experts, fisher):
                w = np.asarray(f[k], np.float64) + FISHER_EPS
                num += w * np.asarray(e.dense()[k], np.float64)
                den += w
            merged.append(num / den)
        return ExpertWeights(*merged)
    if strategy == "uniform":
        alpha = _normalized(np.ones(len(experts)))
    else:
        if weights is None or len(weights) != len(experts):
            raise ValueError("frequency merging needs one weight per expert")
        alpha = _normalized(weights)
    w_in = sum(a * np.asarray(e.w_in, np.float64) for a, e in zip(alpha, experts))
    w_out = sum(a * np.asarray(e.w_out, np.float64) for a, e in zip(alpha, experts))
    return ExpertWeights(w_in, w_out)


def merge_model(m: ModelManifest, plan: GroupingPlan, stats, strategy: str = "frequency",
                fisher=None) -> ModelManifest:
    """Collapse each group into its dominant's slot and redirect the members.

    Merge coefficients are the raw activation frequencies. A group whose
    members were never activated falls back to a uniform average. The router
    keeps all channels; slots are ordered by dominant index.
    """
    if plan.n_layers != m.n_layers:
        raise ValidationError(f"plan covers {plan.n_layers} layers, model has {m.n_layers}")
    plan.validate([layer.n_experts for layer in m.layers])
    out = m.copy()
    for t, layer in enumerate(m.layers):
        if not layer.has_identity_redirect():
            raise ValidationError(f"layer {t} is already merged or pruned")
        freqs = np.asarray(stats.frequencies[t], dtype=np.float64)
        groups = plan.groups(t)
        experts = []
        redirect = np.empty(layer.n_experts, dtype=np.int64)
        for slot, (d, members) in enumerate(sorted(groups.items())):
            members_w = [layer.experts[i] for i in members]
            layer_fisher = None if fisher is None else [fisher[(t, i)] for i in members]
            weights = freqs[members]
            strat = strategy
            if strategy == "frequency" and len(members) > 1 and not weights.sum() > 0:
                strat = "uniform"
            experts.append(merge_group(members_w, weights, strat, layer_fisher))
            redirect[members] = slot
        out.layers[t] = SmoeLayer(layer.router.copy(), experts, redirect)
    out.meta = dict(m.meta, merged=True, merge_strategy=strategy)
    return validate_manifest(out)


def prune_non_dominant(m: ModelManifest, D) -> ModelManifest:
    """Drop non-dominant experts and mask their router channels."""
    out = m.copy()
    for t, layer in enumerate(m.layers):
        dom = sorted(int(d) for d in D[t])
        if not dom:
            raise ValueError(f"layer {t}: empty dominant set")
        redirect = np.full(layer.n_experts, MASKED, dtype=np.int64)
        experts = []
        for slot, d in enumerate(dom):
            experts.append(layer.expert_for(d).copy())
            redirect[d] = slot
        out.layers[t] = SmoeLayer(layer.router.copy(), experts, redirect)
    out.meta = dict(m.meta, pruned=True)
    return validate_manifest(out)
