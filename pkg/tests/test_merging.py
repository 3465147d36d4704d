import numpy as np
import pytest

from expertfold.errors import ValidationError
from expertfold.grouping import GroupingPlan, build_plan
from expertfold.merging import merge_group, merge_model, prune_non_dominant
from expertfold.model import STORAGE_DTYPE, ExpertWeights, ModelManifest, SmoeLayer, account
from expertfold.runtime import (
    collect_stats,
    expert_forward,
    expert_loss_grads,
    gen_toy,
    layer_forward,
    model_forward,
    model_logits,
)
from oracles import token_loop_layer


def scalar_expert(v):
    return ExpertWeights(np.full((1, 1), v), np.full((1, 1), v))


def rand_expert(rng, d=4, f=6):
    return ExpertWeights(rng.normal(size=(f, d)), rng.normal(size=(d, f)))


def test_single_expert_unchanged(rng):
    e = rand_expert(rng)
    out = merge_group([e], [0.3])
    assert out.w_in.tobytes() == e.w_in.tobytes() and out.w_out.tobytes() == e.w_out.tobytes()


def test_scalar_weighted_average():
    out = merge_group([scalar_expert(4.0), scalar_expert(8.0)], [3, 1])
    assert out.w_in[0, 0] == 5.0 and out.w_out[0, 0] == 5.0


def test_uniform_equals_equal_weights(rng):
    es = [rand_expert(rng) for _ in range(3)]
    a = merge_group(es, strategy="uniform")
    b = merge_group(es, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.w_in, b.w_in)


@pytest.mark.parametrize("c", [0.125, 2.0, 4096.0, 3.7, 1e-3])
def test_weight_scale_invariance(rng, c):
    es = [rand_expert(rng) for _ in range(3)]
    w = np.array([0.5, 0.25, 0.125]) if c in (0.125, 2.0, 4096.0) else rng.uniform(0.1, 1, 3)
    a, b = merge_group(es, w), merge_group(es, c * w)
    if c in (0.125, 2.0, 4096.0):
        assert a.w_in.tobytes() == b.w_in.tobytes() and a.w_out.tobytes() == b.w_out.tobytes()
    else:
        np.testing.assert_allclose(a.w_in, b.w_in, rtol=1e-6, atol=1e-7)


def test_identical_experts_merge_to_themselves(rng):
    e = rand_expert(rng)
    out = merge_group([e.copy() for _ in range(4)], [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(out.w_in, e.w_in, rtol=1e-6)


def test_merge_rejects_bad_weights(rng):
    es = [rand_expert(rng), rand_expert(rng)]
    with pytest.raises(ValueError):
        merge_group(es, [0.0, 0.0])
    with pytest.raises(ValueError):
        merge_group(es, [-1.0, 2.0])
    with pytest.raises(ValueError):
        merge_group(es, [1.0])
    with pytest.raises(ValueError):
        merge_group(es, [1, 1], strategy="median")
    with pytest.raises(ValueError):
        merge_group([], [])


def test_fisher_weighting_elementwise(rng):
    a, b = rand_expert(rng), rand_expert(rng)
    fa = (np.full(a.w_in.shape, 3.0), np.zeros(a.w_out.shape))
    fb = (np.full(a.w_in.shape, 1.0), np.zeros(a.w_out.shape))
    out = merge_group([a, b], strategy="fisher", fisher=[fa, fb])
    np.testing.assert_allclose(out.w_in, (0.75 * a.w_in + 0.25 * b.w_in).astype(STORAGE_DTYPE), rtol=1e-6)
    np.testing.assert_allclose(out.w_out, ((a.w_out + b.w_out) / 2).astype(STORAGE_DTYPE), rtol=1e-5)
    with pytest.raises(ValueError):
        merge_group([a, b], strategy="fisher")


def _plan(m, stats, k, method="router-logits"):
    return build_plan(m, stats, k, method, skip=m.skip_layers)


def test_all_singleton_groups_is_noop(toy):
    m, batch = toy
    stats = collect_stats(m, batch)
    plan = _plan(m, stats, 8 * (m.n_layers - len(m.skip_layers)))
    merged = merge_model(m, plan, stats)
    h0, _, _ = model_forward(m, batch.embeddings)
    h1, _, _ = model_forward(merged, batch.embeddings)
    np.testing.assert_allclose(h0, h1, rtol=0, atol=1e-12)


def test_routing_consistency(toy):
    m, _ = toy
    big_m, batch = gen_toy(0, __import__("expertfold").ToySpec(n_tokens=512))
    stats = collect_stats(big_m, batch)
    plan = _plan(big_m, stats, 6)
    merged = merge_model(big_m, plan, stats)
    _, trace, _ = model_forward(big_m, batch.embeddings)
    for t in range(big_m.n_layers):
        x_t = trace[t][2]
        layer = merged.layers[t]
        y, _, assign = layer_forward(layer, x_t)
        ref_y, _, ref_assign = token_loop_layer(layer.router, layer.experts, layer.redirect, x_t)
        np.testing.assert_array_equal(assign, trace[t][1])
        np.testing.assert_allclose(y, ref_y, rtol=1e-5, atol=1e-5)
        for e in range(layer.n_experts):
            d = plan.labels[t][e]
            assert layer.redirect[e] == layer.redirect[d]
            assert layer.redirect[e] == sorted(plan.dominant[t]).index(d)


def test_merged_parameter_count(toy):
    m, batch = toy
    stats = collect_stats(m, batch)
    plan = _plan(m, stats, 6)
    merged = merge_model(m, plan, stats)
    expert = 2 * m.d_model * m.d_ff
    n_slots = sum(len(plan.dominant[t]) for t in range(m.n_layers))
    routers = sum(layer.router.size for layer in m.layers)
    assert account(merged).total_params == m.backbone_params + n_slots * expert + routers
    assert [layer.n_slots for layer in merged.layers] == [len(d) for d in plan.dominant]
    for a, b in zip(m.layers, merged.layers):
        assert a.router.tobytes() == b.router.tobytes()


def test_merged_slot_is_frequency_average(toy):
    m, batch = toy
    stats = collect_stats(m, batch)
    plan = _plan(m, stats, 6)
    merged = merge_model(m, plan, stats)
    t = 2
    for slot, (d, members) in enumerate(sorted(plan.groups(t).items())):
        w = stats.frequencies[t][members]
        expect = sum(wi * m.layers[t].experts[i].w_in.astype(np.float64) for wi, i in zip(w, members)) / w.sum()
        np.testing.assert_allclose(merged.layers[t].experts[slot].w_in, expect, rtol=1e-5, atol=1e-6)


def test_zero_frequency_group_falls_back_to_uniform(rng):
    d, f = 3, 4
    experts = [rand_expert(rng, d, f) for _ in range(3)]
    layer = SmoeLayer(rng.normal(size=(3, d)), experts)
    m = ModelManifest(d, f, [layer])

    class Stats:
        frequencies = [np.array([1.0, 0.0, 0.0])]

    plan = GroupingPlan([[0, 1]], [np.array([0, 1, 1])], "random", [np.array([1.0, 0, 0])])
    merged = merge_model(m, plan, Stats())
    expect = (experts[1].w_in.astype(np.float64) + experts[2].w_in) / 2
    np.testing.assert_allclose(merged.layers[0].experts[1].w_in, expect, rtol=1e-6)


def test_fisher_strategy_end_to_end(toy):
    m, batch = toy
    stats = collect_stats(m, batch)
    _, (grads, fisher) = expert_loss_grads(m, model_logits(m, batch), batch, fisher=True)
    plan = _plan(m, stats, 6)
    merged = merge_model(m, plan, stats, "fisher", fisher)
    assert merged.meta["merge_strategy"] == "fisher"
    assert all(np.isfinite(e.w_in).all() for layer in merged.layers for e in layer.experts)


def test_merge_twice_rejected(toy):
    m, batch = toy
    stats = collect_stats(m, batch)
    plan = _plan(m, stats, 6)
    merged = merge_model(m, plan, stats)
    with pytest.raises(ValidationError):
        merge_model(merged, plan, stats)


def test_prune_all_dominant_is_noop(toy):
    m, batch = toy
    pruned = prune_non_dominant(m, [list(range(8))] * m.n_layers)
    h0, _, _ = model_forward(m, batch.embeddings)
    h1, _, _ = model_forward(pruned, batch.embeddings)
    np.testing.assert_allclose(h0, h1, rtol=0, atol=1e-12)


def test_prune_routes_to_surviving_argmax(toy):
    m, batch = toy
    D = [[0, 1, 2, 3, 4, 5, 6, 7], [1, 4], [0, 2, 7], [3]]
    pruned = prune_non_dominant(m, D)
    x = batch.embeddings[:40].astype(np.float64)
    for t, layer in enumerate(pruned.layers):
        y, h, assign = layer_forward(layer, x)
        ref_y, ref_h, ref_assign = token_loop_layer(layer.router, layer.experts, layer.redirect, x)
        np.testing.assert_array_equal(assign, ref_assign)
        assert set(assign.tolist()) <= set(D[t])
        np.testing.assert_allclose(y, ref_y, rtol=1e-5, atol=1e-5)
        for n in range(len(x)):
            assert assign[n] == max(D[t], key=lambda i: (h[i, n], -i))
        x = y
    assert account(pruned).router_params == account(m).router_params


def test_expert_forward_of_merged_slot(rng):
    es = [rand_expert(rng) for _ in range(2)]
    mg = merge_group(es, [1, 1])
    x = rng.normal(size=(5, 4))
    assert np.isfinite(expert_forward(mg, x)).all()
