"""Weightless manifests with published model shapes, for size arithmetic only."""

from __future__ import annotations

from .model import (
    ExpertWeights,
    ModelManifest,
    SmoeLayer,
    placeholder,
    placeholder_decomposed,
)

# switch-base-32: 12 SMoE layers of 32 experts, d_model 768, d_ff 3072, 220M dense backbone
SWITCH_BASE_32 = dict(d_model=768, d_ff=3072, n_layers=12, n_experts=32, backbone_params=220_000_000)


def shape_manifest(d_model: int, d_ff: int, n_layers: int, n_experts: int, backbone_params: int = 0,
                   experts_per_layer=None, skip_layers=(0,), rank: int | None = None,
                   keep_ratio: float = 1.0, replaces_dense_ffn: bool = True) -> ModelManifest:
    """Weightless manifest: placeholder tensors carry shapes but no memory.

    ``experts_per_layer`` gives the stored slot count per layer (default: all
    experts). With ``rank`` set, every stored expert outside ``skip_layers``
    becomes a decomposed placeholder keeping ``keep_ratio`` of its residual
    columns.
    """
    counts = experts_per_layer or [n_experts] * n_layers
    skip = frozenset(skip_layers)
    layers = []
    for t, k in enumerate(counts):
        if rank is not None and t not in skip:
            experts = [placeholder_decomposed(d_model, d_ff, rank, keep_ratio) for _ in range(k)]
        else:
            experts = [ExpertWeights.placeholder(d_model, d_ff) for _ in range(k)]
        redirect = [min(i * k // n_experts, k - 1) for i in range(n_experts)]
        layers.append(SmoeLayer(placeholder((n_experts, d_model)), experts, redirect))
    return ModelManifest(
        d_model=d_model,
        d_ff=d_ff,
        layers=layers,
        skip_layers=skip,
        backbone_params=backbone_params,
        replaces_dense_ffn=replaces_dense_ffn,
        meta={"weightless": True},
    )


def switch_base_32(stage: str = "full", k_avg: int = 8, rank: int = 32, keep_ratio: float = 0.1,
                   replaces_dense_ffn: bool = True) -> ModelManifest:
    """``full``: every expert; ``merged``: layer 0 keeps 32, the rest ``k_avg``;
    ``compressed``: merged, then rank/keep-ratio decomposition outside layer 0."""
    cfg = dict(SWITCH_BASE_32)
    n_layers, n_experts = cfg["n_layers"], cfg["n_experts"]
    counts = None
    if stage in ("merged", "compressed"):
        counts = [n_experts] + [k_avg] * (n_layers - 1)
    elif stage != "full":
        raise ValueError(f"unknown stage {stage!r}")
    return shape_manifest(
        **cfg,
        experts_per_layer=counts,
        rank=rank if stage == "compressed" else None,
        keep_ratio=keep_ratio,
        replaces_dense_ffn=replaces_dense_ffn,
    )
