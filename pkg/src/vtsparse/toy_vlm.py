"""Deterministic toy multimodal decoder.

Token layout is ``[pre-text | visual | question]``. The model is untrained:
weights come from seeded xorshift streams scaled to ``±1/sqrt(D)``. Each
layer is pre-norm (parameter-free RMS norm) causal multi-head attention
followed by a GELU FFN, both with residual connections.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import flash_sim
from .errors import ConfigError, ShapeError
from .numerics import OpCounter, matmul, stable_softmax_rows
from .rng import XorShiftStream

PRE_TEXT, VISUAL, QUESTION = 0, 1, 2

# instrumented matmul tags that make up one decoder layer
LAYER_TAGS = ("attn_proj", "attn_scores", "attn_values", "ffn")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 256
    ffn_dim: int = 256
    vocab_size: int = 1024
    seed: int = 0
    max_positions: int = 2048

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "hidden_dim", "ffn_dim", "vocab_size", "max_positions"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"must be an integer >= 1, got {v!r}", f"model.{name}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"must be an integer, got {self.seed!r}", "model.seed")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}",
                "model.hidden_dim",
            )

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads


@dataclass
class TokenSequence:
    pre_text_ids: list
    visual_embeddings: np.ndarray
    post_text_ids: list

    def __post_init__(self):
        self.pre_text_ids = [int(t) for t in self.pre_text_ids]
        self.post_text_ids = [int(t) for t in self.post_text_ids]
        z = np.asarray(self.visual_embeddings, dtype=np.float64)
        if z.ndim != 2:
            raise ShapeError("visual_embeddings must be 2-D", z.shape)
        if z.shape[0] < 1:
            raise ShapeError("need at least one visual token", z.shape)
        if not self.post_text_ids:
            raise ShapeError("need at least one question token")
        if not np.all(np.isfinite(z)):
            raise ValueError("visual_embeddings contain non-finite values")
        self.visual_embeddings = z

    @property
    def visual_len(self):
        return self.visual_embeddings.shape[0]

    @property
    def text_len(self):
        return len(self.post_text_ids)

    @property
    def length(self):
        return len(self.pre_text_ids) + self.visual_len + len(self.post_text_ids)

    @property
    def visual_span(self):
        start = len(self.pre_text_ids)
        return start, start + self.visual_len

    @property
    def question_positions(self):
        start = len(self.pre_text_ids) + self.visual_len
        return np.arange(start, start + self.text_len)

    @property
    def visual_positions(self):
        return np.arange(*self.visual_span)

    def kinds(self):
        return np.concatenate([
            np.full(len(self.pre_text_ids), PRE_TEXT, dtype=np.int8),
            np.full(self.visual_len, VISUAL, dtype=np.int8),
            np.full(self.text_len, QUESTION, dtype=np.int8),
        ])


@dataclass
class LayerAttentionView:
    """Attention seen by one layer.

    ``logits`` is the head-averaged post-softmax attention (dense backend
    only). The blockwise backend leaves it ``None`` and instead exposes the
    per-head queries, keys and row log-sum-exp needed to recover rater rows.
    """

    layer_index: int
    logits: np.ndarray | None
    hidden: np.ndarray | None
    position_ids: np.ndarray
    head_probs: np.ndarray | None = None
    queries: np.ndarray | None = None
    keys: np.ndarray | None = None
    row_lse: np.ndarray | None = None
    block_spec: object = None

    def release(self):
        """Drop bulky per-head buffers once the layer hook has run."""
        self.head_probs = None
        self.queries = None
        self.keys = None
        self.row_lse = None


@dataclass
class DecoderModel:
    config: ModelConfig
    embed: np.ndarray
    pos_embed: np.ndarray
    visual_proj: np.ndarray
    layers: list

    def checksum(self):
        h = hashlib.sha256()
        for arr in (self.embed, self.pos_embed, self.visual_proj):
            h.update(arr.tobytes())
        for layer in self.layers:
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                h.update(layer[name].tobytes())
        return h.hexdigest()


@dataclass
class RunTrace:
    views: list
    plans: list
    hidden: np.ndarray
    position_ids: np.ndarray
    kinds: np.ndarray
    lengths_in: list
    lengths_out: list
    layer_multiply_adds: list
    counter: OpCounter
    raters: object = None
    wall_time: float = 0.0
    initial_visual: int = 0
    question_len: int = 0
    hidden_dim: int = 0

    @property
    def final_visual_count(self):
        return int(np.count_nonzero(self.kinds == VISUAL))


def build_model(config):
    if not isinstance(config, ModelConfig):
        raise ConfigError("expected a ModelConfig")
    d, f = config.hidden_dim, config.ffn_dim
    scale = 1.0 / np.sqrt(d)

    def draw(name, shape):
        return XorShiftStream(config.seed, name).symmetric(shape, scale)

    layers = []
    for i in range(config.num_layers):
        layers.append({
            "wq": draw(f"layer{i}.wq", (d, d)),
            "wk": draw(f"layer{i}.wk", (d, d)),
            "wv": draw(f"layer{i}.wv", (d, d)),
            "wo": draw(f"layer{i}.wo", (d, d)),
            "w1": draw(f"layer{i}.w1", (d, f)),
            "w2": draw(f"layer{i}.w2", (f, d)),
        })
    return DecoderModel(
        config=config,
        embed=draw("embed", (config.vocab_size, d)),
        pos_embed=draw("pos_embed", (config.max_positions, d)),
        visual_proj=draw("visual_proj", (d, d)),
        layers=layers,
    )


def _text_rows(model, ids):
    ids = np.asarray(ids, dtype=np.int64)
    bad = ids[(ids < 0) | (ids >= model.config.vocab_size)]
    if bad.size:
        raise ValueError(f"token id {int(bad[0])} out of range [0, {model.config.vocab_size})")
    return model.embed[ids]


def project_visual(model, z, counter=None):
    """Visual embedding rows ``W z`` for each row ``z`` of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    d = model.config.hidden_dim
    if z.shape[1] != d:
        raise ShapeError(f"visual embedding width must equal hidden_dim {d}", z.shape)
    return matmul(z, model.visual_proj.T, counter, tag="embed")


def embed_sequence(model, seq, counter=None):
    """Token embeddings in sequence order, without positional terms."""
    return np.concatenate([
        _text_rows(model, seq.pre_text_ids).reshape(-1, model.config.hidden_dim),
        project_visual(model, seq.visual_embeddings, counter),
        _text_rows(model, seq.post_text_ids),
    ])


def rms_norm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def causal_mask(positions):
    """True where key ``j`` lies in the future of query ``i``."""
    p = np.asarray(positions)
    return p[None, :] > p[:, None]


def forward_layer(model, layer_index, H, positions, counter=None, backend=None):
    """One decoder layer. ``backend`` is ``None`` for dense attention or a
    :class:`flash_sim.BlockSpec` for blockwise streaming attention."""
    cfg = model.config
    H = np.asarray(H, dtype=np.float64)
    positions = np.asarray(positions)
    if H.ndim != 2 or H.shape[1] != cfg.hidden_dim or H.shape[0] != positions.shape[0]:
        raise ShapeError("hidden states must be L x D matching positions", H.shape, positions.shape)
    w = model.layers[layer_index]
    dh = cfg.head_dim
    L = H.shape[0]

    x = rms_norm(H)
    Q = matmul(x, w["wq"], counter, "attn_proj")
    K = matmul(x, w["wk"], counter, "attn_proj")
    V = matmul(x, w["wv"], counter, "attn_proj")
    heads = []
    view = LayerAttentionView(layer_index, None, None, positions.copy())
    if backend is None:
        mask = causal_mask(positions)
        probs = np.empty((cfg.num_heads, L, L))
        for h in range(cfg.num_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = matmul(Q[:, sl], K[:, sl].T, counter, "attn_scores") / np.sqrt(dh)
            scores[mask] = -np.inf
            probs[h] = stable_softmax_rows(scores, counter)
            heads.append(matmul(probs[h], V[:, sl], counter, "attn_values"))
        view.head_probs = probs
        view.logits = probs.mean(axis=0)
    else:
        qs = np.empty((cfg.num_heads, L, dh))
        ks = np.empty((cfg.num_heads, L, dh))
        lse = np.empty((cfg.num_heads, L))
        for h in range(cfg.num_heads):
            sl = slice(h * dh, (h + 1) * dh)
            qs[h], ks[h] = Q[:, sl], K[:, sl]
            out, stats = flash_sim.blockwise_attention(
                Q[:, sl], K[:, sl], V[:, sl], backend, positions, counter, return_stats=True
            )
            lse[h] = stats.lse
            heads.append(out)
        view.queries, view.keys, view.row_lse, view.block_spec = qs, ks, lse, backend
    attn_out = matmul(np.concatenate(heads, axis=1), w["wo"], counter, "attn_proj")
    H1 = H + attn_out
    hidden = gelu(matmul(rms_norm(H1), w["w1"], counter, "ffn"))
    H2 = H1 + matmul(hidden, w["w2"], counter, "ffn")
    view.hidden = H2
    return H2, view


def layer_multiply_adds(L, D, ffn_dim):
    """Closed-form instrumented multiply-adds of one dense decoder layer."""
    return 4 * L * D * D + 2 * L * L * D + 2 * L * D * ffn_dim


def prefill(model, seq, hook=None, counter=None, backend=None, record_views=True):
    """Run every layer over the full prompt, invoking ``hook`` after each one.

    ``hook`` follows the :class:`vtsparse.sparsify.Sparsifier` protocol:
    ``begin(model, seq, embeddings, counter)`` once, then
    ``after_layer(model, layer_index, H, positions, kinds, view, counter)``
    returning ``(H, positions, kinds, plan)``.
    """
    cfg = model.config
    if seq.length > cfg.max_positions:
        raise ShapeError(f"sequence length {seq.length} exceeds max_positions {cfg.max_positions}")
    counter = counter if counter is not None else OpCounter()
    t0 = time.perf_counter()
    emb = embed_sequence(model, seq, counter)
    positions = np.arange(seq.length)
    H = emb + model.pos_embed[positions]
    kinds = seq.kinds()
    raters = hook.begin(model, seq, emb, counter) if hook is not None else None

    views, plans, lengths_in, lengths_out, per_layer = [], [], [], [], []
    for layer in range(cfg.num_layers):
        before = {t: counter.by_tag.get(t, 0) for t in LAYER_TAGS}
        lengths_in.append(len(positions))
        H_next, view = forward_layer(model, layer, H, positions, counter, backend)
        per_layer.append({t: counter.by_tag.get(t, 0) - before[t] for t in LAYER_TAGS})
        plan = None
        if hook is not None:
            H_next, positions, kinds, plan = hook.after_layer(
                model, layer, H_next, positions, kinds, view, counter
            )
        view.release()
        if not record_views:
            view.logits = None
            view.hidden = None
        H = H_next
        plans.append(plan)
        views.append(view)
        lengths_out.append(len(positions))
    wall = time.perf_counter() - t0
    return RunTrace(
        views=views,
        plans=plans,
        hidden=H,
        position_ids=np.asarray(positions),
        kinds=kinds,
        lengths_in=lengths_in,
        lengths_out=lengths_out,
        layer_multiply_adds=per_layer,
        counter=counter,
        raters=raters,
        wall_time=wall,
        initial_visual=seq.visual_len,
        question_len=seq.text_len,
        hidden_dim=cfg.hidden_dim,
    )
