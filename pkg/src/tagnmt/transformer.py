"""Post-norm transformer encoder-decoder on top of :mod:`tagnmt.autodiff`."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import Vocabulary

NEG_INF = -np.inf


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    dropout: float = 0.3
    embedding_dropout: float = 0.2
    embedding_dropout_kind: str = "word"
    n_control_tokens: int = 4
    label_smoothing: float = 0.1
    tie_embeddings: bool = True
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("dropout", "embedding_dropout", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.embedding_dropout_kind not in ("word", "element"):
            raise ValueError(f"unknown embedding_dropout_kind {self.embedding_dropout_kind!r}")
        if min(self.vocab_size, self.n_layers, self.d_model, self.d_ff, self.max_len) < 1:
            raise ValueError("model sizes must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Padded id arrays for teacher forcing.

    ``tgt_in`` is ``<s> t1 .. tn`` and ``tgt_out`` is ``t1 .. tn </s>``.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != Vocabulary.pad_id).sum())


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pad (src_ids, tgt_ids) pairs; target ids exclude bos/eos."""
    if not pairs:
        raise ValueError("empty batch")
    pad, bos, eos = Vocabulary.pad_id, Vocabulary.bos_id, Vocabulary.eos_id
    b = len(pairs)
    s = max(len(x) for x, _ in pairs)
    t = max(len(y) for _, y in pairs) + 1
    src = np.full((b, s), pad, dtype=np.int64)
    tin = np.full((b, t), pad, dtype=np.int64)
    tout = np.full((b, t), pad, dtype=np.int64)
    for i, (x, y) in enumerate(pairs):
        src[i, : len(x)] = x
        tin[i, 0] = bos
        tin[i, 1 : len(y) + 1] = y
        tout[i, : len(y)] = y
        tout[i, len(y)] = eos
    return Batch(src, tin, tout)


def sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None, weights_out=None, drop=None
):
    """Scaled dot-product attention.

    ``mask`` is a boolean array broadcastable to ``(..., Tq, Tk)`` that is True
    at disallowed key positions.  A query row with every key masked raises.
    ``drop``, if given, is applied to the attention weights (training dropout).
    """
    dk = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dk))
    allowed = None if mask is None else ~np.asarray(mask, dtype=bool)
    w = ad.softmax(scores, axis=-1, allowed=allowed)
    if weights_out is not None:
        weights_out.append(w.data)
    if drop is not None:
        w = drop(w)
    return ad.matmul(w, v)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Parameter names and shapes in manifest (checkpoint) order."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: OrderedDict[str, tuple] = OrderedDict()
    if cfg.tie_embeddings:
        shapes["embed"] = (v, d)
    else:
        shapes["src_embed"] = (v, d)
        shapes["tgt_embed"] = (v, d)
        shapes["out_proj"] = (d, v)
    shapes["out_bias"] = (v,)

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{m}"] = (d, d)
            shapes[f"{prefix}.b{m}"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.n_layers):
        p = f"enc{i}"
        attn(f"{p}.self")
        norm(f"{p}.ln1")
        ffn(f"{p}.ffn")
        norm(f"{p}.ln2")
    for i in range(cfg.n_layers):
        p = f"dec{i}"
        attn(f"{p}.self")
        norm(f"{p}.ln1")
        attn(f"{p}.cross")
        norm(f"{p}.ln2")
        ffn(f"{p}.ffn")
        norm(f"{p}.ln3")
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, Tensor]":
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("embed", "src_embed", "tgt_embed"):
            arr = rng.normal(0.0, cfg.d_model**-0.5, size=shape)
        elif leaf == "gain":
            arr = np.ones(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


class Transformer:
    """Encoder-decoder with fixed sinusoidal positions and post-norm sub-layers.

    ``training`` switches dropout on; dropout masks come from ``self.rng`` so a
    forward pass is reproducible from the generator state.
    """

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        self.dtype = np.dtype(cfg.dtype)
        self.pe = sinusoidal_table(cfg.max_len + 2, cfg.d_model).astype(self.dtype)
        self.training = False
        self.rng = np.random.default_rng(seed)

    # -- helpers ---------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def train(self, flag: bool = True) -> "Transformer":
        self.training = flag
        return self

    def eval(self) -> "Transformer":
        return self.train(False)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _drop(self, x: Tensor, rate: float) -> Tensor:
        return ad.dropout(x, rate, self.rng, self.training)

    def _embed_table(self, side: str) -> Tensor:
        if self.cfg.tie_embeddings:
            return self.p("embed")
        return self.p(f"{side}_embed")

    def _embedding_dropout(self, e: Tensor, ids: np.ndarray) -> Tensor:
        """Drop whole word types per sentence (``word``) or single units (``element``).

        In ``word`` mode every occurrence of a dropped type in a sentence is
        zeroed together, so a feature carried by one repeated token cannot be
        relied on.  The first ``n_control_tokens`` ids (reserved symbols and
        language tags) are never dropped.
        """
        rate = self.cfg.embedding_dropout
        if self.cfg.embedding_dropout_kind == "element" or not self.training or rate <= 0.0:
            return self._drop(e, rate)
        keep = self.rng.random((ids.shape[0], self.cfg.vocab_size), dtype=self.dtype) >= rate
        table = keep.astype(self.dtype) / self.dtype.type(1.0 - rate)
        # protected ids are neither dropped nor rescaled
        table[:, : self.cfg.n_control_tokens] = 1.0
        scale = np.take_along_axis(table, ids, axis=1)
        return ad.mul(e, Tensor(scale[..., None]))

    def _embed(self, ids: np.ndarray, side: str) -> Tensor:
        t = ids.shape[1]
        if t > self.cfg.max_len + 1:
            raise ValueError(f"sequence length {t} exceeds max_len={self.cfg.max_len}")
        e = ad.scale(ad.embedding_lookup(self._embed_table(side), ids), math.sqrt(self.cfg.d_model))
        e = self._embedding_dropout(e, ids)
        x = ad.add(e, Tensor(self.pe[:t]))
        return self._drop(x, self.cfg.dropout)

    def _mha(self, prefix: str, xq: Tensor, xkv: Tensor, mask) -> Tensor:
        h = self.cfg.n_heads

        def proj(x, m):
            return ad.add(ad.matmul(x, self.p(f"{prefix}.w{m}")), self.p(f"{prefix}.b{m}"))

        q = ad.split_heads(proj(xq, "q"), h)
        k = ad.split_heads(proj(xkv, "k"), h)
        v = ad.split_heads(proj(xkv, "v"), h)
        ctx = attention(q, k, v, mask, drop=lambda w: self._drop(w, self.cfg.dropout))
        return proj(ad.merge_heads(ctx), "o")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        hdn = ad.relu(ad.add(ad.matmul(x, self.p(f"{prefix}.w1")), self.p(f"{prefix}.b1")))
        hdn = self._drop(hdn, self.cfg.dropout)
        return ad.add(ad.matmul(hdn, self.p(f"{prefix}.w2")), self.p(f"{prefix}.b2"))

    def _sublayer(self, x: Tensor, y: Tensor, norm: str) -> Tensor:
        y = self._drop(y, self.cfg.dropout)
        return ad.layer_norm(ad.add(x, y), self.p(f"{norm}.gain"), self.p(f"{norm}.bias"), self.cfg.ln_eps)

    # -- public API ------------------------------------------------------

    def encode(self, src_ids) -> tuple[Tensor, np.ndarray]:
        """Context vectors ``(B, S, d)`` and the source padding mask ``(B, S)`` (True = pad)."""
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        if src.shape[1] > self.cfg.max_len:
            raise ValueError(f"source length {src.shape[1]} exceeds max_len={self.cfg.max_len}")
        src_pad = src == Vocabulary.pad_id
        mask = src_pad[:, None, None, :]
        x = self._embed(src, "src")
        for i in range(self.cfg.n_layers):
            p = f"enc{i}"
            x = self._sublayer(x, self._mha(f"{p}.self", x, x, mask), f"{p}.ln1")
            x = self._sublayer(x, self._ffn(f"{p}.ffn", x), f"{p}.ln2")
        return x, src_pad

    def decode(self, tgt_in, context: Tensor, src_pad: np.ndarray) -> Tensor:
        """Logits ``(B, T, V)`` for every target prefix position."""
        tgt = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        t = tgt.shape[1]
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]
        cross_mask = src_pad[:, None, None, :]
        x = self._embed(tgt, "tgt")
        for i in range(self.cfg.n_layers):
            p = f"dec{i}"
            x = self._sublayer(x, self._mha(f"{p}.self", x, x, causal), f"{p}.ln1")
            x = self._sublayer(x, self._mha(f"{p}.cross", x, context, cross_mask), f"{p}.ln2")
            x = self._sublayer(x, self._ffn(f"{p}.ffn", x), f"{p}.ln3")
        return self._logits(x)

    def _logits(self, x: Tensor) -> Tensor:
        if self.cfg.tie_embeddings:
            w = ad.transpose(self.p("embed"))
        else:
            w = self.p("out_proj")
        return ad.add(ad.matmul(x, w), self.p("out_bias"))

    def forward_loss(self, batch: Batch, label_smoothing: Optional[float] = None) -> Tensor:
        eps = self.cfg.label_smoothing if label_smoothing is None else label_smoothing
        context, src_pad = self.encode(batch.src)
        logits = self.decode(batch.tgt_in, context, src_pad)
        return ad.cross_entropy_label_smoothed(logits, batch.tgt_out, eps, Vocabulary.pad_id)

    def decode_step(self, prefix_ids, context: Tensor, src_pad: np.ndarray) -> np.ndarray:
        """Next-token distribution ``(B, V)`` after each prefix (full recomputation)."""
        prefix = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        if prefix.shape[1] == 0:
            raise ValueError("decode_step needs a non-empty prefix starting with <s>")
        logits = self.decode(prefix, context, src_pad).data[:, -1]
        return ad.softmax_np(logits.astype(np.float64), axis=-1)

    def sequence_log_probs(self, batch: Batch) -> np.ndarray:
        """Per-position gold log-probabilities ``(B, T)`` under teacher forcing (0 at pad)."""
        context, src_pad = self.encode(batch.src)
        logits = self.decode(batch.tgt_in, context, src_pad).data.astype(np.float64)
        logp = ad.log_softmax_np(logits, axis=-1)
        gold = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
        return np.where(batch.tgt_out == Vocabulary.pad_id, 0.0, gold)

    def incremental(self, src_ids) -> "IncrementalDecoder":
        return IncrementalDecoder(self, src_ids)

    # -- serialisation helpers -------------------------------------------

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


class IncrementalDecoder:
    """Step-wise decoding with cached keys/values, numerically matching :meth:`Transformer.decode`.

    Rows can be reordered (beam search) or expanded (several samples per
    source) with :meth:`select`.
    """

    def __init__(self, model: Transformer, src_ids):
        if model.training:
            raise RuntimeError("incremental decoding requires eval mode")
        self.model = model
        cfg = model.cfg
        self.h = cfg.n_heads
        self.dk = cfg.d_model // cfg.n_heads
        self.arr = {k: t.data for k, t in model.params.items()}
        ctx, src_pad = model.encode(src_ids)
        self.src_pad = src_pad
        self.cross_k, self.cross_v = [], []
        for i in range(cfg.n_layers):
            p = f"dec{i}.cross"
            self.cross_k.append(self._heads(ctx.data @ self.arr[f"{p}.wk"] + self.arr[f"{p}.bk"]))
            self.cross_v.append(self._heads(ctx.data @ self.arr[f"{p}.wv"] + self.arr[f"{p}.bv"]))
        self.self_k = [None] * cfg.n_layers
        self.self_v = [None] * cfg.n_layers
        self.t = 0
        if cfg.tie_embeddings:
            self.tgt_table = self.arr["embed"]
            self.out_w = self.arr["embed"].T
        else:
            self.tgt_table = self.arr["tgt_embed"]
            self.out_w = self.arr["out_proj"]

    def _heads(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.h, self.dk).transpose(0, 2, 1, 3)

    @property
    def n_rows(self) -> int:
        return self.src_pad.shape[0]

    def select(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        self.src_pad = self.src_pad[rows]
        self.cross_k = [k[rows] for k in self.cross_k]
        self.cross_v = [v[rows] for v in self.cross_v]
        self.self_k = [None if k is None else k[rows] for k in self.self_k]
        self.self_v = [None if v is None else v[rows] for v in self.self_v]

    def _attend(self, q, k, v, mask=None) -> np.ndarray:
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(self.dk)
        if mask is not None:
            scores = np.where(mask, NEG_INF, scores)
        w = ad.softmax_np(scores, axis=-1)
        ctx = w @ v
        b = ctx.shape[0]
        return ctx.transpose(0, 2, 1, 3).reshape(b, 1, self.h * self.dk)

    def step(self, tokens) -> np.ndarray:
        """Feed one token per row; return next-token log-probabilities ``(N, V)`` in float64."""
        model, cfg, a = self.model, self.model.cfg, self.arr
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        if self.t >= cfg.max_len + 1:
            raise ValueError("decoding exceeded max_len")
        x = self.tgt_table[tokens] * model.dtype.type(math.sqrt(cfg.d_model)) + model.pe[self.t]
        eps = cfg.ln_eps
        cross_mask = self.src_pad[:, None, None, :]
        for i in range(cfg.n_layers):
            p = f"dec{i}"
            s = f"{p}.self"
            q = self._heads(x @ a[f"{s}.wq"] + a[f"{s}.bq"])
            k = self._heads(x @ a[f"{s}.wk"] + a[f"{s}.bk"])
            v = self._heads(x @ a[f"{s}.wv"] + a[f"{s}.bv"])
            if self.self_k[i] is not None:
                k = np.concatenate([self.self_k[i], k], axis=2)
                v = np.concatenate([self.self_v[i], v], axis=2)
            self.self_k[i], self.self_v[i] = k, v
            y = self._attend(q, k, v) @ a[f"{s}.wo"] + a[f"{s}.bo"]
            x = ad.layer_norm_np(x + y, a[f"{p}.ln1.gain"], a[f"{p}.ln1.bias"], eps)
            c = f"{p}.cross"
            q = self._heads(x @ a[f"{c}.wq"] + a[f"{c}.bq"])
            y = self._attend(q, self.cross_k[i], self.cross_v[i], cross_mask) @ a[f"{c}.wo"] + a[f"{c}.bo"]
            x = ad.layer_norm_np(x + y, a[f"{p}.ln2.gain"], a[f"{p}.ln2.bias"], eps)
            f = f"{p}.ffn"
            hdn = np.maximum(x @ a[f"{f}.w1"] + a[f"{f}.b1"], 0)
            y = hdn @ a[f"{f}.w2"] + a[f"{f}.b2"]
            x = ad.layer_norm_np(x + y, a[f"{p}.ln3.gain"], a[f"{p}.ln3.bias"], eps)
        self.t += 1
        logits = (x[:, 0] @ self.out_w + a["out_bias"]).astype(np.float64)
        return ad.log_softmax_np(logits, axis=-1)
