"""Rule-based pre-tokenization, byte-pair encoding, and the shared vocabulary.

Pre-tokenization rules:

* split on whitespace;
* numbers keep internal ``.``/``,``/``:`` separators (``3.14``, ``1,000``);
* every other punctuation character becomes its own token (``a,b`` -> ``a , b``).

Subwords that end a word carry the suffix marker ``</w>``, so
``detokenize(segment(w)) == w`` for every word.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

EOW = "</w>"
PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, BOS, EOS)

_TOKEN_RE = re.compile(r"\d+(?:[.,:]\d+)+|\w+|[^\w\s]")
# no space before these when detokenizing
_ATTACH_LEFT = set(".,!?;:%)]}»")
# no space after these
_ATTACH_RIGHT = set("([{«¿¡")


def pretokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize_words(words: Sequence[str]) -> str:
    """Join words with single spaces, attaching punctuation per the spacing rules."""
    out: list[str] = []
    glue = False
    for w in words:
        if out and not glue and not (len(w) == 1 and w in _ATTACH_LEFT):
            out.append(" ")
        out.append(w)
        glue = len(w) == 1 and w in _ATTACH_RIGHT
    return "".join(out)


def join_subwords(subwords: Sequence[str]) -> list[str]:
    """Reassemble words from marker-suffixed subwords.

    A trailing run without an end marker (e.g. a truncated hypothesis) still
    yields a word.
    """
    words: list[str] = []
    buf: list[str] = []
    for piece in subwords:
        if piece.endswith(EOW):
            buf.append(piece[: -len(EOW)])
            words.append("".join(buf))
            buf = []
        else:
            buf.append(piece)
    if buf:
        words.append("".join(buf))
    return words


def detokenize(subwords: Sequence[str]) -> str:
    return detokenize_words(join_subwords(subwords))


# ---------------------------------------------------------------------------
# BPE


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...]
    merge_count: int
    end_of_word_marker: str = EOW
    ranks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merges in BPE model")
        if len(self.merges) > self.merge_count:
            raise ValueError(f"{len(self.merges)} merges exceed merge_count={self.merge_count}")
        object.__setattr__(self, "ranks", {pair: i for i, pair in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})

    def segment(self, word: str) -> list[str]:
        cache = self._cache  # type: ignore[attr-defined]
        hit = cache.get(word)
        if hit is None:
            hit = bpe_apply(word, self)
            cache[word] = hit
        return list(hit)

    def segment_words(self, words: Iterable[str]) -> list[str]:
        out: list[str] = []
        for w in words:
            out.extend(self.segment(w))
        return out

    def encode(self, text: str) -> list[str]:
        return self.segment_words(pretokenize(text))


def _word_symbols(word: str) -> tuple[str, ...]:
    if not word:
        return ()
    chars = list(word)
    chars[-1] = chars[-1] + EOW
    return tuple(chars)


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    left, right = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _pair_counts(symbols: tuple[str, ...]) -> Counter:
    return Counter(zip(symbols, symbols[1:]))


def bpe_learn(freqs: Mapping[str, int], merge_count: int) -> BpeModel:
    """Greedy BPE: merge the most frequent adjacent pair until ``merge_count``.

    Ties go to the lexicographically smallest pair.  Learning stops early once
    no pair occurs at least twice.
    """
    if merge_count < 0:
        raise ValueError("merge_count must be >= 0")
    words = {w: _word_symbols(w) for w in sorted(freqs) if w and freqs[w] > 0}
    stats: Counter = Counter()
    where: dict[tuple[str, str], set[str]] = defaultdict(set)
    for w, syms in words.items():
        for pair, c in _pair_counts(syms).items():
            stats[pair] += c * freqs[w]
            where[pair].add(w)

    merges: list[tuple[str, str]] = []
    while len(merges) < merge_count and stats:
        best = min(stats.items(), key=lambda kv: (-kv[1], kv[0]))
        pair, count = best
        if count < 2:
            break
        merges.append(pair)
        for w in sorted(where.pop(pair, ())):
            old = words[w]
            new = _merge_symbols(old, pair)
            f = freqs[w]
            for p, c in _pair_counts(old).items():
                stats[p] -= c * f
                if stats[p] <= 0:
                    del stats[p]
                if p in where:
                    where[p].discard(w)
            for p, c in _pair_counts(new).items():
                stats[p] += c * f
                where[p].add(w)
            words[w] = new
        stats.pop(pair, None)
    return BpeModel(tuple(merges), merge_count)


def bpe_apply(word: str, model: BpeModel) -> list[str]:
    """Segment one word by applying merges in priority order."""
    symbols = _word_symbols(word)
    ranks = model.ranks
    while len(symbols) > 1:
        candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_symbols(symbols, pair)
    return list(symbols)


def word_frequencies(sentences: Iterable[Sequence[str]]) -> Counter:
    counts: Counter = Counter()
    for words in sentences:
        counts.update(words)
    return counts


def save_merges(model: BpeModel, path) -> None:
    lines = [f"#bpe-v1 merges={model.merge_count}"]
    lines += [f"{a} {b}" for a, b in model.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_merges(path) -> BpeModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#bpe-v1"):
        raise ValueError(f"{path}: missing '#bpe-v1' header")
    m = re.search(r"merges=(\d+)", lines[0])
    if m is None:
        raise ValueError(f"{path}: header lacks merges=N")
    merges = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'left right'")
        merges.append((parts[0], parts[1]))
    return BpeModel(tuple(merges), int(m.group(1)))


# ---------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Bijective token <-> id map with reserved ids first.

    Order: ``<pad>``=0, ``<unk>``=1, ``<s>``=2, ``</s>``=3, the language tags in
    sorted order, then ordinary tokens.
    """

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        self.itos: list[str] = list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        self.tags = frozenset(t for t in self.itos if is_tag(t))
        if any(not is_tag(t) for t in self.itos[4 : self.n_control]):
            raise ValueError("language tags must directly follow the reserved tokens")

    pad_id, unk_id, bos_id, eos_id = 0, 1, 2, 3

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], tags: Iterable[str] = ()) -> "Vocabulary":
        counts: Counter = Counter()
        for sent in sentences:
            counts.update(sent)
        tag_list = sorted(set(tags) | {t for t in counts if is_tag(t)})
        fixed = set(RESERVED) | set(tag_list)
        rest = sorted((t for t in counts if t not in fixed), key=lambda t: (-counts[t], t))
        return cls(list(RESERVED) + tag_list + rest)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def n_control(self) -> int:
        """Reserved tokens plus tags; these ids form the prefix ``0..n_control-1``."""
        return len(RESERVED) + len(self.tags)

    @property
    def tag_ids(self) -> list[int]:
        return sorted(self.stoi[t] for t in self.tags)

    def save(self, path) -> None:
        text = "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.itos))
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            if not _:
                raise ValueError(f"{path}:{ln}: expected 'token<TAB>id'")
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not contiguous from 0")
        return cls([t for _, t in pairs])


_TAG_RE = re.compile(r"^<2?[a-z][a-z0-9_]*>$")


def is_tag(token: str) -> bool:
    """Language tags look like ``<2xx>`` (source side) or ``<xx>`` (target side)."""
    return token not in RESERVED and bool(_TAG_RE.match(token))
