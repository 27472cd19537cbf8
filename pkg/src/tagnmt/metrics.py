"""Corpus BLEU, target-language fidelity, and distinct-n diversity.

BLEU is computed on word sequences (detokenized, tag-stripped), case
sensitive, single reference.  The unsmoothed score is the default; the
add-one variant is reported separately for tiny corpora where 4-gram matches
are rare.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .tokenizer import is_tag, pretokenize


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list
    totals: list
    smoothed: bool = False

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        tag = " (add-one)" if self.smoothed else ""
        return (
            f"BLEU{tag} = {self.bleu:.2f} {ps} (BP={self.brevity_penalty:.3f}, "
            f"hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hyps: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    max_order: int = 4,
    smooth: bool = False,
) -> BleuReport:
    """Corpus-level BLEU over tokenized sentences (0-100)."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_order + 1):
            h = _ngrams(hyp, n)
            rc = _ngrams(ref, n)
            matches[n - 1] += sum(min(cnt, rc[g]) for g, cnt in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if smooth and n > 1:
            precisions.append((m + 1) / (t + 1))
        else:
            precisions.append(m / t if t else 0.0)
    if c == 0:
        bp = 0.0
    elif c < r:
        bp = math.exp(1 - r / c)
    else:
        bp = 1.0
    if min(precisions) <= 0 or c == 0:
        bleu = 0.0
    else:
        bleu = 100 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuReport(bleu, precisions, bp, c, r, matches, totals, smooth)


def text_bleu(hyp_texts: Sequence[str], ref_texts: Sequence[str], smooth: bool = False) -> BleuReport:
    return corpus_bleu([pretokenize(h) for h in hyp_texts], [pretokenize(r) for r in ref_texts], smooth=smooth)


@dataclass
class FidelityReport:
    tag_accuracy: Optional[float]
    lang_id_rate: Optional[float]
    n_outputs: int
    n_tokens: int


def fidelity(
    outputs: Sequence[Sequence[str]],
    requested_lang: str,
    toy_spec=None,
    tagged: bool = True,
) -> FidelityReport:
    """Target-language fidelity of decoded outputs.

    ``outputs`` are word sequences that may start with the generated target
    tag.  ``tag_accuracy`` is the share of outputs opening with ``<lang>``
    (None for models trained without target tags).  ``lang_id_rate`` is the
    share of non-tag words owned by ``toy_spec`` (None without a toy spec).
    """
    want = f"<{requested_lang}>"
    n = len(outputs)
    tag_acc = None
    if tagged:
        tag_acc = sum(1 for o in outputs if o and o[0] == want) / n if n else 0.0
    words = [w for o in outputs for w in o if not is_tag(w)]
    rate = None
    if toy_spec is not None:
        rate = sum(1 for w in words if toy_spec.owns(w)) / len(words) if words else 0.0
    return FidelityReport(tag_acc, rate, n, len(words))


def distinct_n(sentences: Iterable[Sequence[str]], n: int) -> float:
    """Unique n-grams over total n-grams, pooled over the corpus."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set = set()
    total = 0
    for s in sentences:
        for i in range(len(s) - n + 1):
            seen.add(tuple(s[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


# ---------------------------------------------------------------------------
# reports

REPORT_COLUMNS = (
    "name",
    "bleu",
    "bleu_smoothed",
    "p1",
    "p2",
    "p3",
    "p4",
    "bp",
    "hyp_len",
    "ref_len",
    "tag_accuracy",
    "lang_id_rate",
    "distinct1",
    "distinct2",
)


def report_row(name: str, hyps, refs, fid: Optional[FidelityReport] = None) -> dict:
    b = corpus_bleu(hyps, refs)
    s = corpus_bleu(hyps, refs, smooth=True)
    row = {
        "name": name,
        "bleu": b.bleu,
        "bleu_smoothed": s.bleu,
        "p1": b.precisions[0],
        "p2": b.precisions[1],
        "p3": b.precisions[2],
        "p4": b.precisions[3],
        "bp": b.brevity_penalty,
        "hyp_len": b.hyp_len,
        "ref_len": b.ref_len,
        "tag_accuracy": None if fid is None else fid.tag_accuracy,
        "lang_id_rate": None if fid is None else fid.lang_id_rate,
        "distinct1": distinct_n(hyps, 1),
        "distinct2": distinct_n(hyps, 2),
    }
    return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def write_summary(rows: Sequence[dict], path) -> None:
    lines = []
    for row in rows:
        parts = [f"{row['name']}:", f"BLEU {row['bleu']:.2f}", f"(smoothed {row['bleu_smoothed']:.2f})"]
        if row.get("tag_accuracy") is not None:
            parts.append(f"tag_acc {row['tag_accuracy']:.3f}")
        if row.get("lang_id_rate") is not None:
            parts.append(f"lang_id {row['lang_id_rate']:.3f}")
        parts.append(f"distinct2 {row['distinct2']:.3f}")
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def as_dict(report) -> dict:
    return asdict(report)
