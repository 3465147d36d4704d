"""Permutation alignment of experts via two-matrix weight matching."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .model import ExpertWeights, SmoeLayer
from .numerics import assignment_score, is_permutation, solve_assignment


def matching_scores(E: ExpertWeights, E_ref: ExpertWeights) -> np.ndarray:
    """``score[i, j]``: affinity of reference hidden unit ``i`` with unit ``j`` of ``E``."""
    if E.w_in.shape != E_ref.w_in.shape or E.w_out.shape != E_ref.w_out.shape:
        raise ShapeError(
            f"cannot match expert of shape {E.w_in.shape} against reference {E_ref.w_in.shape}"
        )
    a_in, a_out = np.asarray(E.w_in, np.float64), np.asarray(E.w_out, np.float64)
    r_in, r_out = np.asarray(E_ref.w_in, np.float64), np.asarray(E_ref.w_out, np.float64)
    return r_in @ a_in.T + r_out.T @ a_out


def weight_matching(E: ExpertWeights, E_ref: ExpertWeights) -> np.ndarray:
    """Permutation of ``E``'s hidden units minimising the L2 distance to ``E_ref``.

    Minimising ``||W_ref - W P||`` over both matrices is the same as maximising
    the Frobenius inner products, which is a linear assignment problem.
    """
    return solve_assignment(matching_scores(E, E_ref))


def alignment_score(E: ExpertWeights, E_ref: ExpertWeights, perm) -> float:
    return assignment_score(matching_scores(E, E_ref), perm)


def permute_expert(E: ExpertWeights, P) -> ExpertWeights:
    """Reorder hidden units: rows of ``w_in`` and columns of ``w_out`` by ``P``."""
    P = np.asarray(P, dtype=np.int64)
    if not is_permutation(P, E.d_ff):
        raise ShapeError(f"permutation of length {P.size} does not cover d_ff={E.d_ff}")
    return ExpertWeights(E.w_in[P], E.w_out[:, P])


def align_layer(layer: SmoeLayer, reference: int = 0, return_perms: bool = False):
    """Align every expert of a layer to its reference expert (index 0 by default).

    Operates on storage slots; the layer must hold dense experts.
    """
    if layer.n_slots < 1:
        raise ShapeError("layer has no experts to align")
    if not 0 <= reference < layer.n_slots:
        raise ShapeError(f"reference expert {reference} out of range")
    ref = layer.experts[reference]
    experts = []
    perms = []
    for s, e in enumerate(layer.experts):
        if not isinstance(e, ExpertWeights):
            raise TypeError("alignment requires dense experts")
        if s == reference:
            experts.append(e.copy())
            perms.append(np.arange(e.d_ff))
            continue
        p = weight_matching(e, ref)
        perms.append(p)
        experts.append(permute_expert(e, p))
    out = SmoeLayer(layer.router.copy(), experts, layer.redirect.copy())
    return (out, perms) if return_perms else out


def align_model(m, reference: int = 0, layers=None):
    """Align every layer (or the given subset) of a manifest; returns a new manifest."""
    out = m.copy()
    targets = range(m.n_layers) if layers is None else layers
    for t in targets:
        out.layers[t] = align_layer(m.layers[t], reference)
    return out
