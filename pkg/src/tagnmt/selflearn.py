"""Train-infer-train self-learning for a zero-shot language pair.

Each round back-translates the real target-side sentences of both zero-shot
languages into the other one, pairs every synthetic source with its real
target, replaces the previous round's synthetic data with the new pairs, and
trains for a fixed number of epochs.  The round-0 row of the metric table is
the starting model, so improvements are read against a stored baseline.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .corpus import (
    LangTag,
    ParallelCorpus,
    Provenance,
    ToyLanguageSpec,
    extract_monolingual,
    mix_synthetic,
    save_prepared,
    strip_tags,
    tag_pair,
)
from .decoder import DecodeConfig, Hypothesis, hypothesis_words, translate
from .metrics import corpus_bleu, distinct_n, fidelity, write_csv
from .tokenizer import Vocabulary, is_tag, join_subwords
from .trainer import DevSet, TrainConfig, model_from_checkpoint, train_epochs
from .transformer import Transformer

log = logging.getLogger(__name__)

ROUND_COLUMNS = (
    "round",
    "bleu_l1l2",
    "bleu_l2l1",
    "tag_acc",
    "distinct1",
    "distinct2",
    "bleu_smoothed_l1l2",
    "bleu_smoothed_l2l1",
    "lang_id",
    "dev_bleu",
    "n_synthetic",
)


@dataclass
class SelfLearnConfig:
    l1: str
    l2: str
    n_rounds: int = 5
    epochs_per_round: int = 3
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(mode="sample", tag_policy="force"))
    eval_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(mode="greedy", tag_policy="free"))
    seed: int = 0

    def __post_init__(self):
        LangTag(self.l1), LangTag(self.l2)
        if self.l1 == self.l2:
            raise ValueError("the zero-shot pair needs two different languages")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.decode.mode == "greedy":
            raise ValueError("synthesis decodes with beam, sample or combined")
        if self.eval_decode.tag_policy != "free":
            log.warning("evaluating with tag policy %r; tag accuracy is then trivially 1", self.eval_decode.tag_policy)

    @property
    def directions(self) -> list[tuple[str, str]]:
        return [(self.l1, self.l2), (self.l2, self.l1)]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ZeroShotSet:
    """Untagged subword sources and word-level references for one direction."""

    src_lang: str
    tgt_lang: str
    sources: list
    references: list
    toy_spec: Optional[ToyLanguageSpec] = None

    def __post_init__(self):
        if len(self.sources) != len(self.references):
            raise ValueError(f"{len(self.sources)} sources vs {len(self.references)} references")


@dataclass
class RoundOutputs:
    """Decoded zero-shot outputs of one round, keyed by ``l1l2`` / ``l2l1``."""

    tags: dict = field(default_factory=dict)
    words: dict = field(default_factory=dict)


@dataclass
class SelfLearnState:
    round: int
    checkpoint: Checkpoint
    synthetic: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def _key(src: str, tgt: str) -> str:
    return f"{src}{tgt}"


def _round_seed(seed: int, round_index: int, direction: int) -> int:
    return int(np.random.SeedSequence([seed, round_index, direction]).generate_state(1)[0])


def _synthetic_source(hyp: Hypothesis, vocab: Vocabulary) -> tuple:
    return tuple(t for t in vocab.decode(hyp.content) if not is_tag(t))


def synthesize_pairs(
    mono: Sequence[Sequence[str]],
    src_lang: str,
    tgt_lang: str,
    model: Transformer,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    round_index: int = 1,
    mode: str = "tagged",
    workers: int = 1,
) -> ParallelCorpus:
    """Synthetic ``src_lang -> tgt_lang`` pairs for real ``tgt_lang`` sentences.

    Every real sentence is translated into ``src_lang`` under ``cfg``; the
    output becomes the source and the real sentence the target.  Hypotheses
    with no content left after stripping tags, or too long for the encoder
    once tagged, are dropped.
    """
    prov = Provenance("synthetic", round_index, cfg.mode)
    if not mono:
        log.warning("no monolingual %s sentences; synthetic corpus is empty", tgt_lang)
        return ParallelCorpus((), prov)
    srcs = [vocab.encode((LangTag(src_lang).src_token, *y)) for y in mono]
    hyps = translate(model, srcs, cfg, vocab, src_lang, tagged=mode == "tagged", workers=workers)
    examples = []
    dropped = 0
    for y, hs in zip(mono, hyps):
        for h in hs:
            x = _synthetic_source(h, vocab)
            ex = tag_pair(x, tuple(y), tgt_lang, mode, src_lang, origin=prov) if x else None
            if ex is None or len(ex.src_tokens) > model.cfg.max_len:
                dropped += 1
                continue
            examples.append(ex)
    if dropped:
        log.warning("dropped %d empty or over-long synthetic sources for %s-%s", dropped, src_lang, tgt_lang)
    return ParallelCorpus(tuple(examples), prov)


def evaluate_zero_shot(
    model: Transformer,
    sets: Sequence[ZeroShotSet],
    vocab: Vocabulary,
    cfg: DecodeConfig,
    tagged: bool,
    workers: int = 1,
) -> tuple[dict, RoundOutputs]:
    """BLEU per direction plus pooled tag accuracy and language-id rate."""
    metrics: dict = {}
    out = RoundOutputs()
    fid_tokens_ok = fid_tokens = 0
    tag_hits = tag_total = 0
    for zs in sets:
        key = _key(zs.src_lang, zs.tgt_lang)
        srcs = [vocab.encode((LangTag(zs.tgt_lang).src_token, *s)) for s in zs.sources]
        hyps = translate(model, srcs, cfg, vocab, zs.tgt_lang, tagged, workers=workers)
        split = [hypothesis_words(h[0], vocab) for h in hyps]
        tags = [t for t, _ in split]
        words = [w for _, w in split]
        out.tags[key], out.words[key] = tags, words
        metrics[key] = corpus_bleu(words, zs.references).bleu
        metrics[f"smoothed_{key}"] = corpus_bleu(words, zs.references, smooth=True).bleu
        rep = fidelity([([t] if t else []) + w for t, w in split], zs.tgt_lang, zs.toy_spec, tagged)
        if rep.tag_accuracy is not None:
            tag_hits += round(rep.tag_accuracy * rep.n_outputs)
            tag_total += rep.n_outputs
        if rep.lang_id_rate is not None:
            fid_tokens_ok += round(rep.lang_id_rate * rep.n_tokens)
            fid_tokens += rep.n_tokens
    metrics["tag_acc"] = tag_hits / tag_total if tag_total else None
    metrics["lang_id"] = fid_tokens_ok / fid_tokens if fid_tokens else None
    return metrics, out


def _check_disjoint(synthetic: ParallelCorpus, sets: Sequence[ZeroShotSet], dev: Optional[DevSet]) -> None:
    held_out_words = {tuple(r) for zs in sets for r in zs.references}
    held_out_src = {tuple(s) for zs in sets for s in zs.sources}
    if dev is not None:
        held_out_words |= {tuple(r) for r in dev.refs}
    for ex in synthetic:
        _, tgt = strip_tags(ex)
        if tuple(tgt) in held_out_src or tuple(join_subwords(tgt)) in held_out_words:
            raise ValueError("synthetic data overlaps a dev/test sentence")


def round_report(state: SelfLearnState, path=None) -> list[dict]:
    """The per-round metric table (one row per completed round plus round 0)."""
    rows = [dict(r) for r in state.rows]
    if path is not None:
        write_csv(rows, path, ROUND_COLUMNS)
    return rows


def run_self_learning(
    corpus: ParallelCorpus,
    base: Checkpoint,
    vocab: Vocabulary,
    cfg: SelfLearnConfig,
    train_cfg: TrainConfig,
    zero_shot: Sequence[ZeroShotSet],
    dev: Optional[DevSet] = None,
    tagged: bool = True,
    out_dir=None,
    workers: int = 1,
) -> SelfLearnState:
    """Run ``cfg.n_rounds`` rounds starting from the converged ``base`` checkpoint.

    ``corpus`` is the original mixed corpus D.  Optimizer moments and the
    learning-rate step continue from ``base`` across rounds.
    """
    mode = "tagged" if tagged else "source_only"
    out = Path(out_dir) if out_dir is not None else None
    model = model_from_checkpoint(base)
    state = SelfLearnState(0, base)
    mono = {lang: extract_monolingual(corpus, lang) for lang in (cfg.l1, cfg.l2)}

    def record(round_index: int, synthetic: dict, dev_score) -> None:
        metrics, outputs = evaluate_zero_shot(model, zero_shot, vocab, cfg.eval_decode, tagged, workers)
        sources = [strip_tags(ex)[0] for part in synthetic.values() for ex in part]
        row = {
            "round": round_index,
            "bleu_l1l2": metrics.get(_key(cfg.l1, cfg.l2)),
            "bleu_l2l1": metrics.get(_key(cfg.l2, cfg.l1)),
            "tag_acc": metrics["tag_acc"],
            "distinct1": distinct_n(sources, 1) if sources else None,
            "distinct2": distinct_n(sources, 2) if sources else None,
            "bleu_smoothed_l1l2": metrics.get(f"smoothed_{_key(cfg.l1, cfg.l2)}"),
            "bleu_smoothed_l2l1": metrics.get(f"smoothed_{_key(cfg.l2, cfg.l1)}"),
            "lang_id": metrics["lang_id"],
            "dev_bleu": dev_score,
            "n_synthetic": len(sources),
        }
        state.rows.append(row)
        state.outputs.append(outputs)
        log.info("self-learning round %d: %s", round_index, row)
        if out is not None:
            rdir = out / f"round_{round_index}"
            rdir.mkdir(parents=True, exist_ok=True)
            state.checkpoint.save(rdir / "checkpoint")
            for key, part in synthetic.items():
                save_prepared(part, rdir / f"synthetic.{key}")
            for key, words in outputs.words.items():
                tags = outputs.tags[key]
                lines = [" ".join(([t] if t else []) + w) for t, w in zip(tags, words)]
                (rdir / f"zeroshot.{key}.hyp").write_text("\n".join(lines) + "\n", encoding="utf-8")
            round_report(state, rdir / "metrics.csv")

    record(0, {}, None)
    current = corpus
    resume = base
    for r in range(1, cfg.n_rounds + 1):
        synthetic = {}
        model.eval()
        for d, (src, tgt) in enumerate(cfg.directions):
            dcfg = replace(cfg.decode, seed=_round_seed(cfg.seed, r, d))
            try:
                part = synthesize_pairs(mono[tgt], src, tgt, model, vocab, dcfg, r, mode, workers)
            except Exception as exc:
                raise RuntimeError(f"self-learning round {r}, synthesis {src}-{tgt}: {exc}") from exc
            _check_disjoint(part, zero_shot, dev)
            synthetic[_key(src, tgt)] = part
        current = mix_synthetic(current, list(synthetic.values()), r)
        result = train_epochs(model, current, vocab, train_cfg, cfg.epochs_per_round, dev, tagged, resume=resume)
        resume = result.last
        state.round = r
        state.checkpoint = result.last
        state.synthetic = synthetic
        dev_score = result.log[-1]["dev_bleu"] if result.log else None
        record(r, synthetic, dev_score)
    return state
