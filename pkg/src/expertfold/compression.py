"""Stable-rank diagnostics and low-rank-plus-sparse compression of merged experts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .model import DecomposedExpert, ExpertWeights, LowRankSparse, ModelManifest, validate_manifest
from .numerics import singular_values, svd
from .runtime import (
    DEFAULT_KD_ALPHA,
    DEFAULT_KD_TEMPERATURE,
    TokenBatch,
    expert_loss_grads,
    expert_matrices,
    model_logits,
)

EMA_DECAY = 0.85


def stable_rank(W) -> float:
    """``sum(sigma**2) / max(sigma)**2``: squared Frobenius over squared spectral norm."""
    sigma = singular_values(W)
    top = float(sigma[0]) if sigma.size else 0.0
    if top <= 0.0:
        raise ValueError("stable rank of a zero matrix is undefined")
    return float(np.sum((sigma / top) ** 2))


def _change_ratio(before, after) -> float:
    sb = stable_rank(before)
    return (stable_rank(after) - sb) / sb


def stable_rank_report(before: ModelManifest, after: ModelManifest, plan) -> list:
    """Per layer: mean over dominant experts (and both matrices) of the stable-rank change ratio."""
    if before.n_layers != after.n_layers or plan.n_layers != before.n_layers:
        raise ValidationError("stable-rank report needs matching layer counts")
    report = []
    for t in range(before.n_layers):
        experts = []
        for d in plan.dominant[t]:
            b_in, b_out = expert_matrices(before.layers[t].expert_for(d))
            a_in, a_out = expert_matrices(after.layers[t].expert_for(d))
            r_in, r_out = _change_ratio(b_in, a_in), _change_ratio(b_out, a_out)
            experts.append({"expert": int(d), "w_in": r_in, "w_out": r_out})
        mean = float(np.mean([(e["w_in"] + e["w_out"]) / 2 for e in experts]))
        report.append({"layer": t, "mean_change_ratio": mean, "experts": experts})
    return report


def _decompose_matrix(W, r: int) -> LowRankSparse:
    W = np.asarray(W, dtype=np.float64)
    u, s, v = svd(W)
    U = u[:, :r] * s[:r]
    V = v[:, :r].T
    lowrank = U.astype(np.float32).astype(np.float64) @ V.astype(np.float32).astype(np.float64)
    return LowRankSparse(U, V, W - lowrank, np.arange(W.shape[1]))


def decompose_expert(E: ExpertWeights, r: int) -> DecomposedExpert:
    """Rank-``r`` truncated SVD per matrix (``U`` absorbs the singular values), residual in ``S``."""
    if not isinstance(E, ExpertWeights):
        raise TypeError("only dense experts can be decomposed")
    if not 1 <= r <= min(E.d_model, E.d_ff):
        raise ValueError(f"rank {r} must lie in 1..{min(E.d_model, E.d_ff)}")
    return DecomposedExpert(_decompose_matrix(E.w_in, r), _decompose_matrix(E.w_out, r))


def default_rank(d_model: int, d_ff: int) -> int:
    return max(1, min(d_model, d_ff) // 4)


@dataclass(frozen=True)
class PruneSchedule:
    T_total: int = 200
    T_i: int = 8
    T_f: int = 32
    P_T: float = 0.1
    exponent: float = 3.0

    def validate(self) -> "PruneSchedule":
        if min(self.T_total, self.T_i, self.T_f) < 0 or not self.T_i + self.T_f < self.T_total:
            raise ValueError(f"invalid schedule steps: {self}")
        if not 0 < self.P_T <= 1:
            raise ValueError(f"final keep ratio must lie in (0, 1], got {self.P_T}")
        if not self.exponent > 0:
            raise ValueError("schedule exponent must be positive")
        return self


# full-length run: 10k steps with long warm-up and cool-down
LONG_SCHEDULE = PruneSchedule(T_total=10000, T_i=400, T_f=1600, P_T=0.1)


def cubic_ratio(t, s: PruneSchedule) -> float:
    """Keep ratio at step ``t``: 1 during warm-up, ``P_T`` during cool-down, a cubic in between."""
    s.validate()
    if t < 0:
        raise ValueError("step must be non-negative")
    if t < s.T_i:
        return 1.0
    if t >= s.T_total - s.T_f:
        return float(s.P_T)
    frac = (t - s.T_i) / (s.T_total - s.T_i - s.T_f)
    return float(s.P_T + (1.0 - s.P_T) * (1.0 - frac) ** s.exponent)


def importance_column_scores(S, grad_S) -> np.ndarray:
    """Column sums of ``|S * dL/dS|``."""
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(grad_S, dtype=np.float64)
    if S.shape != G.shape:
        raise ShapeError(f"scores need matching shapes, got {S.shape} and {G.shape}")
    return np.abs(S * G).sum(axis=0)


def keep_count(keep_ratio: float, total: int) -> int:
    # rounding first keeps e.g. 0.1 * 240 from ceiling to 25
    return min(total, math.ceil(round(keep_ratio * total, 9)))


def global_prune(scores: dict, keep_ratio: float, alive: dict | None = None) -> dict:
    """Keep the globally top-scoring columns across every residual matrix.

    ``scores`` maps a sortable key such as ``(layer, slot, matrix)`` to a
    per-column score vector. The keep count is ``ceil(keep_ratio * total)``
    over all columns; ties favour the lower ``(key, column)``. ``alive``
    restricts the candidates to columns not already pruned.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    keys = sorted(scores)
    total = sum(len(scores[k]) for k in keys)
    k = keep_count(keep_ratio, total)
    cands = []
    for ki, key in enumerate(keys):
        cols = np.arange(len(scores[key])) if alive is None else np.asarray(sorted(alive[key]), dtype=np.int64)
        for c in cols:
            cands.append((-float(scores[key][c]), ki, int(c)))
    cands.sort()
    kept = {key: [] for key in keys}
    for _, ki, c in cands[:k]:
        kept[keys[ki]].append(c)
    return {key: sorted(v) for key, v in kept.items()}


def decomposed_forward(D: DecomposedExpert, x) -> np.ndarray:
    """Expert output using the factored form: ``U(Vx) + S_kept x[kept]`` per matrix."""
    x = np.asarray(x, dtype=np.float64)
    h = np.maximum(D.w_in.apply(x.T if x.ndim == 2 else x), 0.0)
    y = D.w_out.apply(h)
    return y.T if x.ndim == 2 else y


@dataclass
class CompressionTrace:
    keep_ratios: list
    kept_counts: list
    losses: list
    total_columns: int


def _restrict(S_full_kept: LowRankSparse, kept) -> LowRankSparse:
    idx = np.searchsorted(S_full_kept.kept_cols, kept)
    return LowRankSparse(S_full_kept.u, S_full_kept.v, S_full_kept.s[:, idx], np.asarray(kept, dtype=np.int64))


def compress_model(m: ModelManifest, data: TokenBatch, sched: PruneSchedule | None = None,
                   r: int | None = None, teacher: ModelManifest | None = None, *,
                   skip_layers=None, batch_size: int = 32, ema: bool = True,
                   alpha: float = DEFAULT_KD_ALPHA, T: float = DEFAULT_KD_TEMPERATURE,
                   return_trace: bool = False):
    """Decompose every stored expert of the mergeable layers and prune residual columns.

    At each step ``t = 0..T_total`` a cyclic sub-batch is pushed through the
    decomposed model, the task + KD loss against ``teacher`` is backpropagated
    to the residuals, column scores are accumulated (EMA by default) and the
    global keep set is cut to ``cubic_ratio(t)``. Pruned columns never return.
    No weights are updated.
    """
    sched = (sched or PruneSchedule()).validate()
    r = default_rank(m.d_model, m.d_ff) if r is None else int(r)
    if not 1 <= r < min(m.d_model, m.d_ff):
        raise ValueError(f"rank {r} must lie in 1..{min(m.d_model, m.d_ff) - 1}")
    if m.head is None:
        raise ValueError("compression needs a readout head for the toy loss")
    skip = m.skip_layers if skip_layers is None else frozenset(skip_layers)
    teacher = teacher or m
    teacher_logits = model_logits(teacher, data)
    if data.labels is None:
        data = TokenBatch(data.embeddings, np.argmax(teacher_logits, axis=1))

    work = m.copy()
    targets = []
    for t, layer in enumerate(work.layers):
        if t in skip:
            continue
        for s, e in enumerate(layer.experts):
            if not isinstance(e, ExpertWeights):
                raise TypeError(f"layer {t} slot {s} is already decomposed")
            layer.experts[s] = decompose_expert(e, r)
            targets.append((t, s))
    full = {key: work.layers[key[0]].experts[key[1]].copy() for key in targets}
    keys = [(t, s, k) for t, s in targets for k in (0, 1)]
    alive = {key: list(range(full[key[:2]].w_in.d_in if key[2] == 0 else full[key[:2]].w_out.d_in))
             for key in keys}
    total_cols = sum(len(v) for v in alive.values())
    scores = {key: np.zeros(len(alive[key])) for key in keys}

    trace = CompressionTrace([], [], [], total_cols)
    b = data.size
    bs = max(1, min(batch_size, b))
    for step in range(sched.T_total + 1):
        start = (step * bs) % b
        idx = np.arange(start, start + bs) % b
        sub = data.subset(idx)
        loss, grads = expert_loss_grads(work, teacher_logits[idx], sub, alpha, T)
        for key in keys:
            t, s, k = key
            g = grads.get((t, s))
            part = (work.layers[t].experts[s].w_in, work.layers[t].experts[s].w_out)[k]
            inst = np.zeros(len(scores[key]))
            if g is not None and part.kept_cols.size:
                inst[part.kept_cols] = importance_column_scores(part.s, g[k][:, part.kept_cols])
            scores[key] = EMA_DECAY * scores[key] + (1 - EMA_DECAY) * inst if ema else inst
        ratio = cubic_ratio(step, sched)
        kept = global_prune(scores, ratio, alive)
        for key in keys:
            alive[key] = kept[key]
            t, s, k = key
            src = full[(t, s)]
            e = work.layers[t].experts[s]
            if k == 0:
                e.w_in = _restrict(src.w_in, kept[key])
            else:
                e.w_out = _restrict(src.w_out, kept[key])
        trace.keep_ratios.append(ratio)
        trace.kept_counts.append(sum(len(v) for v in kept.values()))
        trace.losses.append(loss.total)

    work.meta = dict(m.meta, compressed=True, rank=r, final_keep_ratio=sched.P_T)
    validate_manifest(work)
    return (work, trace) if return_trace else work


def remaining_parameter_ratios(original: ModelManifest, compressed: ModelManifest) -> list:
    """Per layer: stored expert parameters after / before."""
    out = []
    for t, (a, b) in enumerate(zip(original.layers, compressed.layers)):
        before = sum(e.n_params for e in a.experts)
        after = sum(e.n_params for e in b.experts)
        out.append({"layer": t, "params_before": before, "params_after": after, "ratio": after / before})
    return out
