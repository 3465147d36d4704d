"""Toy top-1 SMoE runtime: forward pass, routing statistics, analytic
gradients, the task + distillation loss, and a synthetic model generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import (
    MASKED,
    DecomposedExpert,
    ExpertWeights,
    ModelManifest,
    SmoeLayer,
    validate_manifest,
)

DEFAULT_KD_ALPHA = 0.2
DEFAULT_KD_TEMPERATURE = 2.0
DEFAULT_STATS_TOKENS = 256


@dataclass
class TokenBatch:
    embeddings: np.ndarray  # b x d_model
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeError(f"token batch must be a non-empty b x d matrix, got {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("token embeddings contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.embeddings.shape[0],):
                raise ShapeError("labels must hold one class index per token")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def subset(self, idx) -> "TokenBatch":
        return TokenBatch(
            self.embeddings[idx], None if self.labels is None else self.labels[idx]
        )


@dataclass
class RoutingStats:
    logits: list  # per layer: n_experts x b
    frequencies: list  # per layer: n_experts
    assignments: list = field(default_factory=list)  # per layer: original expert index per token
    inputs: list = field(default_factory=list)  # per layer: b x d_model hidden states entering it

    @property
    def n_tokens(self) -> int:
        return self.logits[0].shape[1]


@dataclass
class LossBreakdown:
    task: float
    kd: float
    alpha: float

    @property
    def total(self) -> float:
        return self.task + self.alpha * self.kd


@dataclass
class _LayerCache:
    x: np.ndarray
    h: np.ndarray  # b x n (token-major)
    probs: np.ndarray
    assign: np.ndarray
    gate: np.ndarray
    expert_out: np.ndarray  # b x d_model, pre-gating
    pre: dict  # slot -> (token idx, pre-activation b_s x d_ff)


def _mat(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def expert_matrices(e) -> tuple[np.ndarray, np.ndarray]:
    """Effective dense ``(w_in, w_out)`` in float64."""
    if isinstance(e, ExpertWeights):
        return _mat(e.w_in), _mat(e.w_out)
    return e.dense()


def _expert_rows(e, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply an expert to token rows ``x`` (b x d). Returns (output, pre-activation)."""
    if isinstance(e, DecomposedExpert):
        z = e.w_in.apply(x.T).T
        return e.w_out.apply(np.maximum(z, 0.0).T).T, z
    w_in, w_out = _mat(e.w_in), _mat(e.w_out)
    z = x @ w_in.T
    return np.maximum(z, 0.0) @ w_out.T, z


def expert_forward(e, x) -> np.ndarray:
    x = _mat(x)
    if x.ndim == 1:
        return _expert_rows(e, x[None, :])[0][0]
    return _expert_rows(e, x)[0]


def _route(layer: SmoeLayer, x: np.ndarray):
    h = x @ _mat(layer.router).T  # b x n
    masked = layer.redirect == MASKED
    scored = np.where(masked[None, :], -np.inf, h) if masked.any() else h
    assign = np.argmax(scored, axis=1)  # first maximum -> lowest index on ties
    z = scored - scored[np.arange(len(x)), assign][:, None]
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    gate = probs[np.arange(len(x)), assign]
    return h, probs, assign, gate


def _layer_forward(layer: SmoeLayer, x: np.ndarray, keep_cache: bool):
    if x.ndim != 2 or x.shape[1] != layer.router.shape[1]:
        raise ShapeError(f"input {x.shape} does not match router {layer.router.shape}")
    h, probs, assign, gate = _route(layer, x)
    slots = layer.redirect[assign]
    out = np.zeros_like(x)
    pre = {}
    for s in np.unique(slots):
        idx = np.flatnonzero(slots == s)
        o, z = _expert_rows(layer.experts[int(s)], x[idx])
        out[idx] = o
        if keep_cache:
            pre[int(s)] = (idx, z)
    y = x + gate[:, None] * out
    cache = _LayerCache(x, h, probs, assign, gate, out, pre) if keep_cache else None
    return y, h, assign, cache


def layer_forward(layer: SmoeLayer, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-1 routed residual layer.

    Returns ``(Y, H, assignment)`` with ``H`` shaped ``n_experts x b`` (raw
    router logits) and ``assignment`` holding original expert indices.
    """
    x = _mat(X.embeddings if isinstance(X, TokenBatch) else X)
    y, h, assign, _ = _layer_forward(layer, x, keep_cache=False)
    return y, h.T, assign


def model_forward(m: ModelManifest, X, keep_cache: bool = False):
    """Run every layer. Returns ``(hidden, per-layer (H, assignment, input), caches)``."""
    x = _mat(X.embeddings if isinstance(X, TokenBatch) else X)
    if x.shape[1] != m.d_model:
        raise ShapeError(f"tokens have width {x.shape[1]}, model expects {m.d_model}")
    trace = []
    caches = []
    for layer in m.layers:
        y, h, assign, cache = _layer_forward(layer, x, keep_cache)
        trace.append((h.T, assign, x))
        caches.append(cache)
        x = y
    return x, trace, caches


def model_logits(m: ModelManifest, X) -> np.ndarray:
    if m.head is None:
        raise ValueError("model has no readout head")
    hidden, _, _ = model_forward(m, X)
    return hidden @ _mat(m.head).T


def collect_stats(m: ModelManifest, X) -> RoutingStats:
    _, trace, _ = model_forward(m, X)
    logits, freqs, assigns, inputs = [], [], [], []
    for layer, (h, assign, x) in zip(m.layers, trace):
        counts = np.bincount(assign, minlength=layer.n_experts)
        logits.append(h)
        freqs.append(counts / assign.size)
        assigns.append(assign)
        inputs.append(x)
    return RoutingStats(logits, freqs, assigns, inputs)


def ffn_backward(E, x, upstream):
    """Gradients of ``<upstream, W_out relu(W_in x)>`` w.r.t. ``W_in``, ``W_out`` and ``x``.

    ``x``/``upstream`` are a single vector or ``b x d`` rows (gradients summed
    over rows). The weight gradients are w.r.t. the effective dense matrices,
    so a residual block's gradient is their restriction to its kept columns.
    """
    x = _mat(x)
    g = _mat(upstream)
    single = x.ndim == 1
    if single:
        x, g = x[None, :], g[None, :]
    w_in, w_out = expert_matrices(E)
    if x.shape[1] != w_in.shape[1] or g.shape != (x.shape[0], w_out.shape[0]):
        raise ShapeError("ffn_backward shapes inconsistent with expert")
    z = x @ w_in.T
    a = np.maximum(z, 0.0)
    d_w_out = g.T @ a
    dz = (g @ w_out) * (z > 0)
    d_w_in = dz.T @ x
    dx = dz @ w_in
    return d_w_in, d_w_out, dx[0] if single else dx


def model_backward(m: ModelManifest, caches, dhidden, fisher: bool = False):
    """Backpropagate ``dL/dhidden`` through all layers.

    Returns ``{(layer, slot): (dW_in, dW_out)}`` and, when ``fisher`` is set,
    the matching per-token squared-gradient sums. The router matrix gets no
    gradient, but the gate's dependence on its input is propagated.
    """
    grads = {}
    sq = {}
    dy = _mat(dhidden)
    for t in range(m.n_layers - 1, -1, -1):
        layer, c = m.layers[t], caches[t]
        dx = dy.copy()
        dout = c.gate[:, None] * dy
        dgate = np.einsum("bd,bd->b", dy, c.expert_out)
        for s, (idx, z) in c.pre.items():
            w_in, w_out = expert_matrices(layer.experts[s])
            a = np.maximum(z, 0.0)
            g = dout[idx]
            dz = (g @ w_out) * (z > 0)
            grads[(t, s)] = (dz.T @ c.x[idx], g.T @ a)
            if fisher:
                sq[(t, s)] = ((dz * dz).T @ (c.x[idx] ** 2), (g * g).T @ (a * a))
            dx[idx] += dz @ w_in
        onehot = np.zeros_like(c.probs)
        onehot[np.arange(len(c.assign)), c.assign] = 1.0
        dh = (dgate * c.gate)[:, None] * (onehot - c.probs)
        dx += dh @ _mat(layer.router)
        dy = dx
    return (grads, sq) if fisher else grads


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kd_task_loss(student_logits, teacher_logits, labels, alpha: float = DEFAULT_KD_ALPHA,
                 T: float = DEFAULT_KD_TEMPERATURE) -> LossBreakdown:
    """Cross-entropy on hard labels plus ``alpha`` times the temperature-softened KL.

    ``kd = KL(softmax(teacher / T) || softmax(student / T))``, averaged over
    tokens, without a ``T**2`` factor. ``labels=None`` gives a zero task term.
    """
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    s = np.atleast_2d(_mat(student_logits))
    te = np.atleast_2d(_mat(teacher_logits))
    if s.shape != te.shape:
        raise ShapeError(f"student {s.shape} and teacher {te.shape} logits differ in shape")
    b = s.shape[0]
    task = 0.0
    if labels is not None:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        task = float(-_log_softmax(s)[np.arange(b), labels].mean())
    log_p = _log_softmax(te / T)
    log_q = _log_softmax(s / T)
    kd = float(np.sum(np.exp(log_p) * (log_p - log_q)) / b)
    return LossBreakdown(task=task, kd=max(kd, 0.0), alpha=alpha)


def kd_task_loss_grad(student_logits, teacher_logits, labels, alpha: float = DEFAULT_KD_ALPHA,
                      T: float = DEFAULT_KD_TEMPERATURE) -> np.ndarray:
    """``d total / d student_logits`` for :func:`kd_task_loss`."""
    s = np.atleast_2d(_mat(student_logits))
    te = np.atleast_2d(_mat(teacher_logits))
    b = s.shape[0]
    grad = np.zeros_like(s)
    if labels is not None:
        grad += np.exp(_log_softmax(s))
        grad[np.arange(b), np.asarray(labels, dtype=np.int64)] -= 1.0
    p = np.exp(_log_softmax(te / T))
    q = np.exp(_log_softmax(s / T))
    grad += alpha * (q - p) / T
    return grad / b


def expert_loss_grads(student: ModelManifest, teacher_logits, batch: TokenBatch,
                      alpha: float = DEFAULT_KD_ALPHA, T: float = DEFAULT_KD_TEMPERATURE,
                      fisher: bool = False):
    """Loss of ``student`` on ``batch`` and its gradients for every touched expert slot."""
    if student.head is None:
        raise ValueError("model has no readout head; the toy loss is undefined")
    hidden, _, caches = model_forward(student, batch, keep_cache=True)
    head = _mat(student.head)
    logits = hidden @ head.T
    labels = batch.labels
    loss = kd_task_loss(logits, teacher_logits, labels, alpha, T)
    dlogits = kd_task_loss_grad(logits, teacher_logits, labels, alpha, T)
    result = model_backward(student, caches, dlogits @ head, fisher=fisher)
    return loss, result


@dataclass
class ToySpec:
    d_model: int = 16
    d_ff: int = 32
    n_layers: int = 4
    n_experts: int = 8
    n_tokens: int = DEFAULT_STATS_TOKENS
    n_classes: int = 4
    # experts are noisy permuted copies of this many prototypes per layer
    n_prototypes: int = 3
    prototype_noise: float = 0.3
    router_scale: float = 1.0
    skip_layers: tuple = (0,)

    def __post_init__(self):
        for name in ("d_model", "d_ff", "n_layers", "n_experts", "n_tokens", "n_classes", "n_prototypes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")


def gen_toy(seed: int = 0, spec: ToySpec | None = None) -> tuple[ModelManifest, TokenBatch]:
    """Deterministic synthetic SMoE model and token batch.

    Router rows get log-normal scales and tokens share a mean direction, so
    routing is skewed towards a few experts. Labels are the teacher's own
    argmax over a random readout head.
    """
    spec = spec or ToySpec()
    rng = np.random.default_rng(seed)
    d, f = spec.d_model, spec.d_ff
    layers = []
    for _ in range(spec.n_layers):
        protos = [
            (rng.normal(0, 1 / np.sqrt(d), (f, d)), rng.normal(0, 0.5 / np.sqrt(f), (d, f)))
            for _ in range(min(spec.n_prototypes, spec.n_experts))
        ]
        experts = []
        for i in range(spec.n_experts):
            w_in, w_out = protos[i % len(protos)]
            perm = rng.permutation(f)
            noise = spec.prototype_noise
            experts.append(
                ExpertWeights(
                    (w_in + noise * rng.normal(0, 1 / np.sqrt(d), w_in.shape))[perm],
                    (w_out + noise * rng.normal(0, 0.5 / np.sqrt(f), w_out.shape))[:, perm],
                )
            )
        scales = np.exp(rng.normal(0, 0.75, spec.n_experts))
        router = rng.normal(0, 1, (spec.n_experts, d)) * scales[:, None] * spec.router_scale / np.sqrt(d)
        layers.append(SmoeLayer(router, experts))
    head = rng.normal(0, 1 / np.sqrt(d), (spec.n_classes, d))
    mean_dir = rng.normal(0, 1, d)
    mean_dir *= 1.5 / np.linalg.norm(mean_dir)
    x = rng.normal(0, 1, (spec.n_tokens, d)) + mean_dir
    m = ModelManifest(
        d_model=d,
        d_ff=f,
        layers=layers,
        skip_layers=frozenset(t for t in spec.skip_layers if t < spec.n_layers),
        backbone_params=spec.n_classes * d,
        head=head,
        meta={"generator": "toy", "seed": int(seed)},
    )
    validate_manifest(m)
    batch = TokenBatch(x)
    batch.labels = np.argmax(model_logits(m, batch), axis=1)
    return m, batch
