"""Tagged multilingual corpora and the synthetic toy-language triangle.

Sentences are tuples of subword strings.  A tagged example for target
language ``xx`` looks like::

    src: <2xx> w1 w2 ...
    tgt: <xx> v1 v2 ...        (tagged mode)
    tgt: v1 v2 ...             (source_only mode, the source-tag-only baseline)
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .tokenizer import is_tag

log = logging.getLogger(__name__)

Sentence = tuple  # tuple[str, ...]

MODES = ("tagged", "source_only")
_CODE_RE = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass(frozen=True)
class LangTag:
    code: str

    def __post_init__(self):
        if not _CODE_RE.match(self.code):
            raise ValueError(f"invalid language code {self.code!r}")

    @property
    def src_token(self) -> str:
        return f"<2{self.code}>"

    @property
    def tgt_token(self) -> str:
        return f"<{self.code}>"


@dataclass(frozen=True)
class Provenance:
    kind: str = "original"
    round: Optional[int] = None
    decode_mode: Optional[str] = None

    @property
    def label(self) -> str:
        if self.kind == "synthetic":
            return f"synthetic(round={self.round},mode={self.decode_mode})"
        if self.kind == "mixed":
            return f"mixed(round={self.round})"
        return self.kind

    @property
    def synthetic(self) -> bool:
        return self.kind == "synthetic"

    def to_json(self) -> dict:
        return {"kind": self.kind, "round": self.round, "decode_mode": self.decode_mode}

    @classmethod
    def from_json(cls, d: dict) -> "Provenance":
        return cls(d["kind"], d.get("round"), d.get("decode_mode"))


ORIGINAL = Provenance()


@dataclass(frozen=True)
class TaggedExample:
    src_lang: str
    tgt_lang: str
    src_tokens: Sentence
    tgt_tokens: Sentence
    mode: str = "tagged"
    origin: Provenance = ORIGINAL

    @property
    def direction(self) -> str:
        return f"{self.src_lang}-{self.tgt_lang}"

    def content(self) -> tuple[Sentence, Sentence]:
        return strip_tags(self)


@dataclass(frozen=True)
class ParallelCorpus:
    examples: tuple = ()
    provenance: Provenance = ORIGINAL

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            if not ex.src_tokens or not ex.tgt_tokens:
                raise ValueError(f"empty side in example {ex}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def languages(self) -> list[str]:
        return sorted({ex.src_lang for ex in self} | {ex.tgt_lang for ex in self})

    def provenance_counts(self) -> Counter:
        return Counter(ex.origin.label for ex in self)

    def direction_counts(self) -> Counter:
        return Counter(ex.direction for ex in self)


@dataclass(frozen=True)
class BilingualCorpus:
    """Line-aligned sentences of two languages."""

    lang_a: str
    lang_b: str
    a: tuple
    b: tuple

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(tuple(s) for s in self.a))
        object.__setattr__(self, "b", tuple(tuple(s) for s in self.b))
        if len(self.a) != len(self.b):
            raise ValueError(
                f"line-count mismatch: {len(self.a)} {self.lang_a} vs {len(self.b)} {self.lang_b}"
            )

    def __len__(self) -> int:
        return len(self.a)

    def reversed(self) -> "BilingualCorpus":
        return BilingualCorpus(self.lang_b, self.lang_a, self.b, self.a)


# ---------------------------------------------------------------------------
# tagging


def tag_pair(
    src_sentence: Sequence[str],
    tgt_sentence: Sequence[str],
    tgt_lang: str,
    mode: str = "tagged",
    src_lang: str = "",
    known: Optional[Iterable[str]] = None,
    origin: Provenance = ORIGINAL,
) -> TaggedExample:
    if mode not in MODES:
        raise ValueError(f"unknown tagging mode {mode!r}")
    if known is not None and tgt_lang not in set(known):
        raise ValueError(f"unknown language code {tgt_lang!r}")
    tag = LangTag(tgt_lang)
    for tok in (*src_sentence, *tgt_sentence):
        if is_tag(tok):
            raise ValueError(f"sentence already contains tag token {tok!r}")
    if not tgt_sentence:
        log.warning("empty target sentence tagged for %s", tgt_lang)
    src = (tag.src_token, *src_sentence)
    tgt = (tag.tgt_token, *tgt_sentence) if mode == "tagged" else tuple(tgt_sentence)
    return TaggedExample(src_lang, tgt_lang, src, tgt, mode, origin)


def strip_tags(example: TaggedExample) -> tuple[Sentence, Sentence]:
    src = example.src_tokens[1:]
    tgt = example.tgt_tokens[1:] if example.mode == "tagged" else example.tgt_tokens
    return tuple(src), tuple(tgt)


def mixed_size(pair_counts: Iterable[int]) -> int:
    """Examples produced by :func:`build_mixed` for corpora of these sizes."""
    return 2 * sum(pair_counts)


def build_mixed(
    corpora: Sequence[BilingualCorpus], mode: str = "tagged", seed: int = 0
) -> ParallelCorpus:
    """Both directions of every aligned pair, shuffled with ``seed``."""
    examples = []
    for bc in corpora:
        for x, y in zip(bc.a, bc.b):
            examples.append(tag_pair(x, y, bc.lang_b, mode, bc.lang_a))
            examples.append(tag_pair(y, x, bc.lang_a, mode, bc.lang_b))
    order = np.random.default_rng(seed).permutation(len(examples))
    return ParallelCorpus(tuple(examples[i] for i in order))


def extract_monolingual(corpus: ParallelCorpus, lang: str) -> list[Sentence]:
    """Deduplicated target-side sentences of ``lang`` (first occurrence order)."""
    seen = set()
    out = []
    for ex in corpus:
        if ex.tgt_lang != lang:
            continue
        _, tgt = strip_tags(ex)
        if tgt not in seen:
            seen.add(tgt)
            out.append(tgt)
    if not out:
        log.warning("language %r does not occur on the target side", lang)
    return out


def mix_synthetic(
    corpus: ParallelCorpus, synthetic: Sequence[ParallelCorpus], round: Optional[int] = None
) -> ParallelCorpus:
    """Original examples of ``corpus`` plus this round's synthetic examples.

    Synthetic examples already inside ``corpus`` (an earlier round's mix) are
    dropped, so each round replaces rather than accumulates synthetic data.
    """
    kept = [ex for ex in corpus if not ex.origin.synthetic]
    added = []
    for part in synthetic:
        if not part.provenance.synthetic:
            raise ValueError(f"expected synthetic provenance, got {part.provenance.label}")
        added.extend(part.examples)
    return ParallelCorpus(tuple(kept + added), Provenance("mixed", round))


# ---------------------------------------------------------------------------
# toy languages

TRANSFORMS = ("identity", "reversal", "shift", "pair_swap")
# latent ids are written in base 64 over these letters (Cyrillic A..ya), so a
# surface word is the ASCII language code followed by id letters: "a\u0416".
ID_ALPHABET = "".join(chr(c) for c in range(0x0410, 0x0450))
_ID_INDEX = {ch: i for i, ch in enumerate(ID_ALPHABET)}
_SURFACE_RE = re.compile(r"^([a-z]+)([\u0410-\u044f]+)$")


def encode_id(n: int) -> str:
    base = len(ID_ALPHABET)
    out = ID_ALPHABET[n % base]
    n //= base
    while n:
        out = ID_ALPHABET[n % base] + out
        n //= base
    return out


def decode_id(s: str) -> int:
    n = 0
    for ch in s:
        n = n * len(ID_ALPHABET) + _ID_INDEX[ch]
    return n


@dataclass(frozen=True)
class ToyLanguageSpec:
    """A toy language: a bijection from latent id sequences to surface words.

    A surface word is the language name followed by the (shifted) latent id in
    the letter alphabet, e.g. ``b\u0416``.  Names are distinct, so surface
    vocabularies are disjoint and the language of any word is decidable, while
    the id letters are shared across languages the way cognate subwords are.
    """

    name: str
    vocab_size: int = 64
    transform: str = "identity"
    shift: int = 0

    def __post_init__(self):
        if not self.name.isalpha() or not self.name.islower() or not self.name.isascii():
            raise ValueError(f"toy language name must be lowercase ASCII letters: {self.name!r}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")

    def _permute(self, seq: Sequence[int]) -> list[int]:
        seq = list(seq)
        if self.transform == "reversal":
            return seq[::-1]
        if self.transform == "pair_swap":
            out = seq[:]
            for i in range(0, len(seq) - 1, 2):
                out[i], out[i + 1] = seq[i + 1], seq[i]
            return out
        return seq

    def _shift(self) -> int:
        return self.shift if self.transform == "shift" else 0

    def render(self, latent: Sequence[int]) -> Sentence:
        k = self._shift()
        return tuple(f"{self.name}{encode_id((t + k) % self.vocab_size)}" for t in self._permute(latent))

    def unrender(self, tokens: Sequence[str]) -> list[int]:
        k = self._shift()
        ids = []
        for tok in tokens:
            if not self.owns(tok):
                raise ValueError(f"{tok!r} is not a {self.name} word")
            ids.append((decode_id(_SURFACE_RE.match(tok).group(2)) - k) % self.vocab_size)
        # reversal and pair swap are involutions
        return self._permute(ids)

    def owns(self, token: str) -> bool:
        m = _SURFACE_RE.match(token)
        return m is not None and m.group(1) == self.name and decode_id(m.group(2)) < self.vocab_size


def toy_language_of(token: str) -> Optional[str]:
    m = _SURFACE_RE.match(token)
    return m.group(1) if m else None


def translate_toy(tokens: Sequence[str], src: ToyLanguageSpec, tgt: ToyLanguageSpec) -> Sentence:
    """Exact reference translation by composing the two bijections."""
    return tgt.render(src.unrender(tokens))


@dataclass
class ToyTask:
    languages: dict
    pivot: str
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)
    zero_shot: dict = field(default_factory=dict)
    seed: int = 0
    latent_vocab: int = 64

    def spec(self, name: str) -> ToyLanguageSpec:
        return self.languages[name]


def gen_toy_task(
    specs: Sequence[ToyLanguageSpec],
    pivot: ToyLanguageSpec,
    n_train: int,
    n_dev: int,
    n_test: int,
    seed: int = 0,
    latent_vocab: int = 64,
    min_len: int = 3,
    max_len: int = 12,
) -> ToyTask:
    """Sample a pivot-connected toy task.

    Each non-pivot language gets ``n_train``/``n_dev``/``n_test`` pairs with the
    pivot.  Every ordered pair of non-pivot languages gets an ``n_test``
    zero-shot test set whose references come from transform composition.  All
    latent sentences are distinct across every split, so test references never
    occur in training data.
    """
    if len(specs) < 2:
        raise ValueError("need at least two non-pivot languages")
    every = [*specs, pivot]
    names = [s.name for s in every]
    if len(set(names)) != len(names):
        raise ValueError(f"toy language names must be distinct: {names}")
    for s in every:
        if s.vocab_size < latent_vocab:
            raise ValueError(
                f"vocab size {s.vocab_size} of {s.name} is too small for latent vocab {latent_vocab}"
            )

    rng = np.random.default_rng(seed)
    seen: set = set()

    def draw(n: int) -> list[tuple]:
        out = []
        while len(out) < n:
            length = int(rng.integers(min_len, max_len + 1))
            seq = tuple(int(t) for t in rng.integers(0, latent_vocab, size=length))
            if seq not in seen:
                seen.add(seq)
                out.append(seq)
        return out

    task = ToyTask({s.name: s for s in every}, pivot.name, seed=seed, latent_vocab=latent_vocab)
    for split, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        for s in specs:
            latents = draw(n)
            bc = BilingualCorpus(
                s.name, pivot.name, [s.render(x) for x in latents], [pivot.render(x) for x in latents]
            )
            getattr(task, split).append(bc)
    for s in specs:
        for t in specs:
            if s.name != t.name:
                latents = draw(n_test)
                task.zero_shot[(s.name, t.name)] = BilingualCorpus(
                    s.name, t.name, [s.render(x) for x in latents], [t.render(x) for x in latents]
                )
    return task


# ---------------------------------------------------------------------------
# on-disk formats


def write_bilingual(bc: BilingualCorpus, directory, name: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pa = directory / f"{name}.{bc.lang_a}"
    pb = directory / f"{name}.{bc.lang_b}"
    pa.write_text("".join(" ".join(s) + "\n" for s in bc.a), encoding="utf-8")
    pb.write_text("".join(" ".join(s) + "\n" for s in bc.b), encoding="utf-8")
    return pa, pb


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def read_bilingual(directory, name: str, lang_a: str, lang_b: str, split=str.split) -> BilingualCorpus:
    directory = Path(directory)
    a = [tuple(split(line)) for line in read_lines(directory / f"{name}.{lang_a}")]
    b = [tuple(split(line)) for line in read_lines(directory / f"{name}.{lang_b}")]
    return BilingualCorpus(lang_a, lang_b, a, b)


def save_prepared(corpus: ParallelCorpus, path, meta: Optional[dict] = None) -> None:
    """Write ``src<TAB>tgt`` lines plus a ``.json`` metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(ex.src_tokens) + "\t" + " ".join(ex.tgt_tokens) + "\n" for ex in corpus]
    path.write_text("".join(lines), encoding="utf-8")
    modes = sorted({ex.mode for ex in corpus})
    sidecar = {
        "languages": corpus.languages(),
        "mode": modes[0] if len(modes) == 1 else modes,
        "provenance": corpus.provenance.to_json(),
        "directions": [ex.direction for ex in corpus],
        "origins": [ex.origin.to_json() for ex in corpus],
    }
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True), "utf-8")


def load_prepared(path) -> tuple[ParallelCorpus, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text("utf-8"))
    mode = meta["mode"]
    examples = []
    for i, line in enumerate(read_lines(path)):
        src, tgt = line.split("\t")
        s_lang, t_lang = meta["directions"][i].split("-")
        examples.append(
            TaggedExample(
                s_lang,
                t_lang,
                tuple(src.split()),
                tuple(tgt.split()),
                mode,
                Provenance.from_json(meta["origins"][i]),
            )
        )
    return ParallelCorpus(tuple(examples), Provenance.from_json(meta["provenance"])), meta
