"""Experiment steps shared by the command line and the acceptance suite.

Data directory layout (as written by :func:`write_toy`)::

    train.<x>-<y>.<x>   train.<x>-<y>.<y>     supervised pairs, one sentence per line
    dev.<x>-<y>.<x>     dev.<x>-<y>.<y>
    test.<x>-<y>.<x>    test.<x>-<y>.<y>      supervised and zero-shot test pairs
    toy.json                                  toy language specs (toy data only)

Prepared directory layout (:func:`save_prepared_dir`)::

    bpe.merges  vocab.tsv  train.tsv(.json)  dev.tsv(.json)  prepared.json
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import Checkpoint
from .corpus import (
    BilingualCorpus,
    LangTag,
    ParallelCorpus,
    ToyLanguageSpec,
    ToyTask,
    build_mixed,
    load_prepared,
    read_bilingual,
    save_prepared,
    write_bilingual,
)
from .selflearn import SelfLearnState, ZeroShotSet, run_self_learning
from .tokenizer import (
    BpeModel,
    Vocabulary,
    bpe_learn,
    load_merges,
    pretokenize,
    save_merges,
    word_frequencies,
)
from .trainer import DevSet, TrainResult, Trainer
from .transformer import Transformer

log = logging.getLogger(__name__)

_FILE_RE = re.compile(r"^(train|dev|test)\.([a-z][a-z0-9_]*)-([a-z][a-z0-9_]*)\.([a-z][a-z0-9_]*)$")


# ---------------------------------------------------------------------------
# raw data


def write_toy(task: ToyTask, directory) -> Path:
    directory = Path(directory)
    for split in ("train", "dev", "test"):
        for bc in getattr(task, split):
            write_bilingual(bc, directory, f"{split}.{bc.lang_a}-{bc.lang_b}")
    for (s, t), bc in sorted(task.zero_shot.items()):
        write_bilingual(bc, directory, f"test.{s}-{t}")
    meta = {
        "pivot": task.pivot,
        "seed": task.seed,
        "latent_vocab": task.latent_vocab,
        "languages": [
            {"name": sp.name, "transform": sp.transform, "shift": sp.shift, "vocab_size": sp.vocab_size}
            for sp in task.languages.values()
        ],
        "zero_shot": [f"{s}-{t}" for s, t in sorted(task.zero_shot)],
    }
    (directory / "toy.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_toy_specs(directory) -> dict:
    path = Path(directory) / "toy.json"
    if not path.exists():
        return {}
    meta = json.loads(path.read_text(encoding="utf-8"))
    return {
        d["name"]: ToyLanguageSpec(d["name"], d.get("vocab_size", 64), d["transform"], d.get("shift", 0))
        for d in meta["languages"]
    }


def discover_pairs(directory, split: str) -> list[tuple[str, str]]:
    """Language pairs ``(x, y)`` that have both ``<split>.x-y.x`` and ``<split>.x-y.y``."""
    found = set()
    for p in Path(directory).iterdir():
        m = _FILE_RE.match(p.name)
        if m and m.group(1) == split:
            found.add((m.group(2), m.group(3)))
    pairs = [
        (a, b)
        for a, b in sorted(found)
        if (Path(directory) / f"{split}.{a}-{b}.{a}").exists() and (Path(directory) / f"{split}.{a}-{b}.{b}").exists()
    ]
    return pairs


def read_split(directory, split: str, pairs: Optional[Sequence[tuple[str, str]]] = None) -> list[BilingualCorpus]:
    if pairs is None:
        pairs = discover_pairs(directory, split)
    return [read_bilingual(directory, f"{split}.{a}-{b}", a, b, split=pretokenize) for a, b in pairs]


# ---------------------------------------------------------------------------
# prepared corpora


@dataclass
class Prepared:
    bpe: BpeModel
    vocab: Vocabulary
    train: ParallelCorpus
    dev: ParallelCorpus
    mode: str
    pairs: list
    languages: list
    meta: dict = field(default_factory=dict)

    @property
    def tagged(self) -> bool:
        return self.mode == "tagged"

    def segment(self, bc: BilingualCorpus) -> BilingualCorpus:
        seg = self.bpe.segment_words
        return BilingualCorpus(bc.lang_a, bc.lang_b, [seg(s) for s in bc.a], [seg(s) for s in bc.b])

    def dev_set(self) -> DevSet:
        return DevSet.from_corpus(self.dev, self.vocab)


def language_tags(languages: Sequence[str]) -> list[str]:
    return [LangTag(x).src_token for x in languages] + [LangTag(x).tgt_token for x in languages]


def prepare(data_dir, merge_count: int, mode: str = "tagged", seed: int = 0) -> Prepared:
    """Pretokenize, learn BPE on training text, segment, tag and mix both directions."""
    pairs = discover_pairs(data_dir, "train")
    if not pairs:
        raise FileNotFoundError(f"no train.<x>-<y>.<x> files under {data_dir}")
    train_raw = read_split(data_dir, "train", pairs)
    dev_pairs = [p for p in discover_pairs(data_dir, "dev") if p in pairs]
    dev_raw = read_split(data_dir, "dev", dev_pairs)
    freqs = word_frequencies(s for bc in train_raw for s in (*bc.a, *bc.b))
    bpe = bpe_learn(freqs, merge_count)
    pb = Prepared(bpe, None, None, None, mode, [list(p) for p in pairs], [])  # type: ignore[arg-type]
    train_seg = [pb.segment(bc) for bc in train_raw]
    dev_seg = [pb.segment(bc) for bc in dev_raw]
    train = build_mixed(train_seg, mode, seed)
    dev = build_mixed(dev_seg, mode, seed) if dev_seg else ParallelCorpus(())
    languages = sorted({x for p in pairs for x in p})
    vocab = Vocabulary.build([ex.src_tokens for ex in train] + [ex.tgt_tokens for ex in train], language_tags(languages))
    pb.vocab, pb.train, pb.dev, pb.languages = vocab, train, dev, languages
    pb.meta = {"merge_count": merge_count, "mode": mode, "seed": seed, "pairs": pb.pairs, "languages": languages}
    return pb


def save_prepared_dir(p: Prepared, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_merges(p.bpe, directory / "bpe.merges")
    p.vocab.save(directory / "vocab.tsv")
    save_prepared(p.train, directory / "train.tsv")
    save_prepared(p.dev, directory / "dev.tsv")
    (directory / "prepared.json").write_text(json.dumps(dict(p.meta, version=__version__), indent=1, sort_keys=True) + "\n", "utf-8")
    return directory


def load_prepared_dir(directory) -> Prepared:
    directory = Path(directory)
    meta = json.loads((directory / "prepared.json").read_text(encoding="utf-8"))
    bpe = load_merges(directory / "bpe.merges")
    vocab = Vocabulary.load(directory / "vocab.tsv")
    train, _ = load_prepared(directory / "train.tsv")
    dev, _ = load_prepared(directory / "dev.tsv")
    return Prepared(bpe, vocab, train, dev, meta["mode"], meta["pairs"], meta["languages"], meta)


# ---------------------------------------------------------------------------
# training and self-learning


def new_model(cfg, vocab: Vocabulary) -> Transformer:
    mc = cfg.model_config(len(vocab), n_control_tokens=vocab.n_control)
    return Transformer(mc, seed=cfg.seed)


def train_model(cfg, prep: Prepared, out_dir=None) -> TrainResult:
    """Train from scratch with early stopping on supervised dev BLEU."""
    model = new_model(cfg, prep.vocab)
    log_path = None if out_dir is None else Path(out_dir) / "train_log.jsonl"
    if log_path is not None and log_path.exists():
        log_path.unlink()
    trainer = Trainer(model, prep.train, prep.vocab, cfg.train_config(), prep.dev_set(), prep.tagged, log_path)
    result = trainer.run()
    if out_dir is not None:
        out = Path(out_dir)
        (result.best or result.last).save(out / "checkpoint")
        result.last.save(out / "last.checkpoint")
    return result


def zero_shot_sets(data_dir, prep: Prepared, l1: str, l2: str) -> list[ZeroShotSet]:
    specs = load_toy_specs(data_dir)
    out = []
    for s, t in ((l1, l2), (l2, l1)):
        bc = read_bilingual(data_dir, f"test.{s}-{t}", s, t, split=pretokenize)
        out.append(
            ZeroShotSet(s, t, [tuple(prep.bpe.segment_words(x)) for x in bc.a], [list(y) for y in bc.b], specs.get(t))
        )
    return out


def self_learn(
    cfg, prep: Prepared, base: Checkpoint, data_dir, out_dir=None
) -> SelfLearnState:
    sl = cfg.selflearn_config()
    sets = zero_shot_sets(data_dir, prep, sl.l1, sl.l2)
    return run_self_learning(
        prep.train, base, prep.vocab, sl, cfg.train_config(), sets, prep.dev_set(), prep.tagged, out_dir, cfg.workers
    )


def write_run_info(out_dir, cfg, command: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    info = {"command": command, "version": __version__, "seed": cfg.seed}
    (out / "run.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
