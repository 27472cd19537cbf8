"""Inference-time search: greedy, beam search, ancestral sampling, and beam+sample.

All searches run batched over many source sentences with the cached
:class:`~tagnmt.transformer.IncrementalDecoder`.  Sampling draws its uniforms
from a generator seeded by ``(seed, sentence_index)``, so a corpus decodes to
the same output whatever the chunking or worker count.

Hypothesis log-probabilities are always the model's own log-probabilities of
the chosen tokens: token bans and the forced tag restrict the search space
but are never renormalised into the score.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import softmax_np
from .corpus import LangTag
from .tokenizer import Vocabulary, is_tag, join_subwords
from .transformer import Transformer

log = logging.getLogger(__name__)

DECODE_MODES = ("beam", "sample", "greedy", "combined")
TAG_POLICIES = ("force", "free")


@dataclass
class DecodeConfig:
    mode: str = "beam"
    beam_size: int = 10
    sample_size: int = 5
    temperature: float = 1.0
    max_len: int = 64
    length_penalty: float = 1.0
    tag_policy: str = "free"
    seed: int = 0
    keep_all_samples: bool = False
    top_k: int = 0
    batch_sentences: int = 128

    def __post_init__(self):
        if self.mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.tag_policy not in TAG_POLICIES:
            raise ValueError(f"unknown tag policy {self.tag_policy!r}")
        if self.beam_size < 1 or self.sample_size < 1:
            raise ValueError("beam_size and sample_size must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished: bool = False
    truncated: bool = False
    alpha: float = 1.0

    @property
    def length(self) -> int:
        """Generated tokens (everything after ``<s>``, eos included)."""
        return len(self.tokens) - 1

    @property
    def score(self) -> float:
        return normalized_score(self.logprob, self.length, self.alpha)

    @property
    def content(self) -> tuple:
        """Generated ids without ``<s>`` and the final ``</s>``."""
        body = self.tokens[1:]
        if body and body[-1] == Vocabulary.eos_id:
            body = body[:-1]
        return tuple(body)


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: list = field(default_factory=list)


def normalized_score(logprob: float, length: int, alpha: float) -> float:
    if length <= 0 or alpha == 0:
        return logprob
    return logprob / (length**alpha)


# ---------------------------------------------------------------------------
# tag policy


@dataclass
class TagConstraint:
    """Per-step token restrictions for one required target language."""

    first_allowed: np.ndarray
    later_allowed: np.ndarray
    forced_token: Optional[int] = None

    def allowed(self, step: int) -> np.ndarray:
        return self.first_allowed if step == 0 else self.later_allowed


def apply_tag_policy(
    cfg: DecodeConfig, required_lang: Optional[str], vocab: Vocabulary, tagged: bool = True
) -> TagConstraint:
    """Translate the tag policy into allowed-token masks.

    ``force`` restricts the first generated token to the required target tag.
    ``free`` lets the model choose it, which is what tag accuracy measures.
    Tags are banned after the first position, and everywhere for models
    trained without target tags, where the policy changes nothing.
    """
    v = len(vocab)
    base = np.ones(v, dtype=bool)
    base[[vocab.pad_id, vocab.unk_id, vocab.bos_id]] = False
    later = base.copy()
    later[vocab.tag_ids] = False
    if not tagged:
        return TagConstraint(later, later)
    if required_lang is None:
        raise ValueError("tagged decoding needs a required target language")
    tag = LangTag(required_lang).tgt_token
    if tag not in vocab:
        raise ValueError(f"unknown target language {required_lang!r} (no {tag} in vocabulary)")
    tag_id = vocab.stoi[tag]
    if cfg.tag_policy == "force":
        first = np.zeros(v, dtype=bool)
        first[tag_id] = True
        return TagConstraint(first, later, tag_id)
    return TagConstraint(base, later)


def _stack_allowed(constraints: Sequence[TagConstraint], step: int) -> np.ndarray:
    return np.stack([c.allowed(step) for c in constraints])


# ---------------------------------------------------------------------------
# batched search kernels


def _pad_sources(srcs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in srcs)
    out = np.full((len(srcs), width), Vocabulary.pad_id, dtype=np.int64)
    for i, s in enumerate(srcs):
        out[i, : len(s)] = s
    return out


def _max_steps(model: Transformer, cfg: DecodeConfig) -> int:
    return min(cfg.max_len, model.cfg.max_len)


def greedy_batch(model, srcs, constraints, cfg: DecodeConfig) -> list[Hypothesis]:
    n = len(srcs)
    dec = model.incremental(_pad_sources(srcs))
    bos, eos = Vocabulary.bos_id, Vocabulary.eos_id
    tokens = [[bos] for _ in range(n)]
    logprob = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    last = np.full(n, bos)
    for step in range(_max_steps(model, cfg)):
        logp = dec.step(last)
        masked = np.where(_stack_allowed(constraints, step), logp, -np.inf)
        choice = np.argmax(masked, axis=1)
        for i in np.nonzero(~done)[0]:
            tokens[i].append(int(choice[i]))
            logprob[i] += logp[i, choice[i]]
            if choice[i] == eos:
                done[i] = True
        last = np.where(done, eos, choice)
        if done.all():
            break
    return [
        Hypothesis(tuple(t), float(lp), True, not d, cfg.length_penalty)
        for t, lp, d in zip(tokens, logprob, done)
    ]


def beam_batch(model, srcs, constraints, cfg: DecodeConfig) -> list[BeamResult]:
    """Length-normalised beam search over a batch of sources.

    A sentence stops once ``beam_size`` hypotheses have ended in ``</s>``
    (only end-of-sentence candidates ranked inside the top ``beam_size`` count),
    when no live hypothesis remains, or at ``max_len``.
    """
    n, k = len(srcs), cfg.beam_size
    bos, eos = Vocabulary.bos_id, Vocabulary.eos_id
    alpha = cfg.length_penalty
    dec = model.incremental(_pad_sources(srcs))
    dec.select(np.repeat(np.arange(n), k))
    v = len(constraints[0].first_allowed)

    seqs: list[list[list[int]]] = [[[bos] for _ in range(k)] for _ in range(n)]
    scores = np.full((n, k), -np.inf)
    scores[:, 0] = 0.0
    finished: list[list[Hypothesis]] = [[] for _ in range(n)]
    truncated: list[list[Hypothesis]] = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    last = np.full(n * k, bos)
    steps = _max_steps(model, cfg)

    for step in range(steps):
        logp = dec.step(last).reshape(n, k, v)
        allowed = _stack_allowed(constraints, step)[:, None, :]
        cand = np.where(allowed, scores[:, :, None] + logp, -np.inf).reshape(n, k * v)
        width = min(2 * k, k * v)
        new_rows = np.zeros((n, k), dtype=np.int64)
        new_last = np.full((n, k), eos)
        new_scores = np.full((n, k), -np.inf)
        new_seqs: list[list[list[int]]] = []
        final = step == steps - 1
        for i in range(n):
            row_seqs = [[bos] for _ in range(k)]
            if not active[i]:
                new_seqs.append(row_seqs)
                new_rows[i] = i * k
                continue
            top = np.argpartition(-cand[i], width - 1)[:width]
            top = top[np.lexsort((top, -cand[i, top]))]
            n_live = 0
            for rank, idx in enumerate(top):
                s = cand[i, idx]
                if s == -np.inf:
                    break
                beam, tok = divmod(int(idx), v)
                seq = seqs[i][beam] + [tok]
                if tok == eos:
                    if rank < k:
                        finished[i].append(Hypothesis(tuple(seq), float(s), True, False, alpha))
                    continue
                if n_live < k:
                    row_seqs[n_live] = seq
                    new_rows[i, n_live] = i * k + beam
                    new_last[i, n_live] = tok
                    new_scores[i, n_live] = s
                    n_live += 1
                if n_live == k and rank >= k - 1:
                    break
            if final:
                for j in range(n_live):
                    truncated[i].append(
                        Hypothesis(tuple(row_seqs[j]), float(new_scores[i, j]), True, True, alpha)
                    )
            if len(finished[i]) >= k or n_live == 0 or final:
                active[i] = False
                new_scores[i] = -np.inf
            new_seqs.append(row_seqs)
        seqs = new_seqs
        scores = new_scores
        if not active.any():
            break
        dec.select(new_rows.reshape(-1))
        last = new_last.reshape(-1)

    results = []
    for i in range(n):
        pool = sorted(finished[i], key=lambda h: -h.score)
        if not pool:
            pool = sorted(truncated[i], key=lambda h: -h.score)
            if pool:
                log.debug("sentence %d: no hypothesis finished within max_len", i)
        results.append(BeamResult(pool[0], pool[:k]))
    return results


def sample_batch(model, srcs, constraints, cfg: DecodeConfig, indices) -> list[list[Hypothesis]]:
    """Ancestral samples, ``sample_size`` per source, each from the full distribution.

    Returns every sample per source; the caller picks the best-of-k.
    """
    n, s = len(srcs), cfg.sample_size
    bos, eos = Vocabulary.bos_id, Vocabulary.eos_id
    steps = _max_steps(model, cfg)
    uniforms = np.concatenate(
        [np.random.default_rng([cfg.seed, int(idx)]).random((s, steps)) for idx in indices]
    )
    dec = model.incremental(_pad_sources(srcs))
    rows = np.repeat(np.arange(n), s)
    dec.select(rows)
    m = n * s
    tokens = [[bos] for _ in range(m)]
    logprob = np.zeros(m)
    done = np.zeros(m, dtype=bool)
    last = np.full(m, bos)
    row_constraints = [constraints[r] for r in rows]
    for step in range(steps):
        logp = dec.step(last)
        allowed = _stack_allowed(row_constraints, step)
        logits = np.where(allowed, logp / cfg.temperature, -np.inf)
        if cfg.top_k > 0:
            kk = min(cfg.top_k, logits.shape[1])
            kth = -np.partition(-logits, kk - 1, axis=1)[:, kk - 1 : kk]
            logits = np.where(logits >= kth, logits, -np.inf)
        probs = softmax_np(logits, axis=1)
        cdf = np.cumsum(probs, axis=1)
        u = uniforms[:, step : step + 1] * cdf[:, -1:]
        choice = np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)
        # never land on a zero-probability entry through rounding at the cdf edge
        bad = probs[np.arange(m), choice] == 0
        if bad.any():
            choice[bad] = np.argmax(probs[bad], axis=1)
        for i in np.nonzero(~done)[0]:
            tokens[i].append(int(choice[i]))
            logprob[i] += logp[i, choice[i]]
            if choice[i] == eos:
                done[i] = True
        last = np.where(done, eos, choice)
        if done.all():
            break
    hyps = [
        Hypothesis(tuple(t), float(lp), True, not d, cfg.length_penalty)
        for t, lp, d in zip(tokens, logprob, done)
    ]
    return [hyps[i * s : (i + 1) * s] for i in range(n)]


def best_of(samples: Sequence[Hypothesis]) -> Hypothesis:
    """Highest length-normalised score; the earliest sample wins ties."""
    best = samples[0]
    for h in samples[1:]:
        if h.score > best.score:
            best = h
    return best


# ---------------------------------------------------------------------------
# public API


def _constraints(cfg, langs, vocab, tagged, n):
    if vocab is None:
        raise ValueError("a vocabulary is required to build decoding constraints")
    if isinstance(langs, str) or langs is None:
        langs = [langs] * n
    cache: dict = {}
    out = []
    for lang in langs:
        if lang not in cache:
            cache[lang] = apply_tag_policy(cfg, lang, vocab, tagged)
        out.append(cache[lang])
    return out


def _check_frozen(model: Transformer) -> None:
    if model.training:
        raise RuntimeError("decoding requires a frozen model in eval mode")


def translate(
    model: Transformer,
    srcs: Sequence[Sequence[int]],
    cfg: DecodeConfig,
    vocab: Vocabulary,
    required_langs=None,
    tagged: bool = True,
    workers: int = 1,
    index_offset: int = 0,
) -> list[list[Hypothesis]]:
    """Decode every source under ``cfg.mode``.

    Each entry holds one hypothesis (beam, greedy, sample best-of-k), all
    samples when ``cfg.keep_all_samples`` is set, or ``[beam, sample]`` in
    combined mode.
    """
    _check_frozen(model)
    srcs = [list(s) for s in srcs]
    if not srcs:
        return []
    constraints = _constraints(cfg, required_langs, vocab, tagged, len(srcs))
    chunk = max(1, cfg.batch_sentences)
    starts = list(range(0, len(srcs), chunk))

    def run(start: int) -> list[list[Hypothesis]]:
        sl = slice(start, start + chunk)
        part, cons = srcs[sl], constraints[sl]
        idx = range(index_offset + start, index_offset + start + len(part))
        if cfg.mode == "greedy":
            return [[h] for h in greedy_batch(model, part, cons, cfg)]
        if cfg.mode == "beam":
            return [[r.best] for r in beam_batch(model, part, cons, cfg)]
        samples = sample_batch(model, part, cons, cfg, idx)
        if cfg.mode == "sample":
            return [list(ss) if cfg.keep_all_samples else [best_of(ss)] for ss in samples]
        beams = beam_batch(model, part, cons, cfg)
        return [[b.best, best_of(ss)] for b, ss in zip(beams, samples)]

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return [h for part in parts for h in part]


def beam_search(src_ids, model, cfg: DecodeConfig, vocab: Vocabulary, required_lang=None, tagged=True) -> BeamResult:
    _check_frozen(model)
    cons = _constraints(cfg, required_lang, vocab, tagged, 1)
    return beam_batch(model, [list(src_ids)], cons, cfg)[0]


def greedy_decode(src_ids, model, cfg: DecodeConfig, vocab: Vocabulary, required_lang=None, tagged=True) -> Hypothesis:
    _check_frozen(model)
    cons = _constraints(cfg, required_lang, vocab, tagged, 1)
    return greedy_batch(model, [list(src_ids)], cons, cfg)[0]


def sample_decode(
    src_ids, model, cfg: DecodeConfig, vocab: Vocabulary, required_lang=None, tagged=True, index: int = 0
) -> Hypothesis:
    """Best-of-``sample_size`` ancestral sample (reproducible per ``(seed, index)``)."""
    _check_frozen(model)
    cons = _constraints(cfg, required_lang, vocab, tagged, 1)
    return best_of(sample_batch(model, [list(src_ids)], cons, cfg, [index])[0])


def combined_decode(
    src_ids, model, cfg: DecodeConfig, vocab: Vocabulary, required_lang=None, tagged=True, index: int = 0
) -> tuple[Hypothesis, Hypothesis]:
    beam = beam_search(src_ids, model, replace(cfg, mode="beam"), vocab, required_lang, tagged).best
    sample = sample_decode(src_ids, model, replace(cfg, mode="sample"), vocab, required_lang, tagged, index)
    return beam, sample


def hypothesis_words(hyp: Hypothesis, vocab: Vocabulary) -> tuple[Optional[str], list[str]]:
    """Split a hypothesis into its leading target tag (if any) and detokenized words."""
    toks = vocab.decode(hyp.content)
    tag = None
    if toks and is_tag(toks[0]):
        tag, toks = toks[0], toks[1:]
    return tag, join_subwords([t for t in toks if not is_tag(t)])
