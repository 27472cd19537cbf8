"""Command-line entry point: ``tagnmt <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` / ``--preset NAME``, repeated
``--set key=value`` overrides, ``--seed`` and ``--workers``.  Commands that
create a run directory write the resolved ``config.json`` and a ``run.json``
with the version and seed into it.

Failures exit with status 2 and print one line ``error: <category>: <detail>``
on stderr, where category is one of io, config, data, numeric, internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint
from .config import ConfigError, resolve
from .corpus import LangTag, gen_toy_task, read_lines
from .decoder import hypothesis_words, translate
from .metrics import fidelity, report_row, write_csv, write_summary, REPORT_COLUMNS
from .pipeline import (
    load_prepared_dir,
    load_toy_specs,
    prepare,
    save_prepared_dir,
    self_learn,
    train_model,
    write_run_info,
    write_toy,
)
from .selflearn import ROUND_COLUMNS, round_report
from .tokenizer import (
    bpe_learn,
    detokenize_words,
    is_tag,
    load_merges,
    pretokenize,
    save_merges,
    word_frequencies,
)
from .trainer import model_from_checkpoint

log = logging.getLogger("tagnmt")


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


# ---------------------------------------------------------------------------
# helpers


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.mode is not None:
        overrides.append(f"mode={json.dumps(args.mode)}")
    return resolve(args.config, args.preset, overrides)


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("io", f"{what} not found: {p}")
    return p


def _load_model(path):
    ckpt = Checkpoint.load(_need(path, "checkpoint"))
    return ckpt, model_from_checkpoint(ckpt)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args) -> None:
    cfg = _config(args)
    toy = cfg.tree["toy"]
    specs, pivot = cfg.toy_specs()
    task = gen_toy_task(
        specs, pivot, toy["n_train"], toy["n_dev"], toy["n_test"], cfg.seed,
        toy["latent_vocab"], toy["min_len"], toy["max_len"],
    )
    write_toy(task, args.out)
    write_run_info(args.out, cfg, "gen-toy")
    print(f"wrote toy task to {args.out}")


def cmd_learn_bpe(args) -> None:
    sentences = [pretokenize(line) for f in args.input for line in read_lines(_need(f, "input"))]
    model = bpe_learn(word_frequencies(sentences), args.merges)
    save_merges(model, args.out)
    print(f"learned {len(model.merges)} merges -> {args.out}")


def cmd_apply_bpe(args) -> None:
    model = load_merges(_need(args.merges_file, "merges file"))
    lines = read_lines(_need(args.input, "input"))
    out = [" ".join(model.segment_words(pretokenize(line))) for line in lines]
    Path(args.out).write_text("".join(line + "\n" for line in out), encoding="utf-8")


def cmd_prepare(args) -> None:
    cfg = _config(args)
    _need(args.data, "data directory")
    prep = prepare(args.data, cfg.merge_count, cfg.mode, cfg.seed)
    save_prepared_dir(prep, args.out)
    write_run_info(args.out, cfg, "prepare")
    print(f"prepared {len(prep.train)} training examples, vocab {len(prep.vocab)} -> {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    prep = load_prepared_dir(_need(args.prepared, "prepared directory"))
    if prep.mode != cfg.mode:
        raise CliError("config", f"prepared data is {prep.mode!r} but config mode is {cfg.mode!r}")
    write_run_info(args.out, cfg, "train")
    result = train_model(cfg, prep, args.out)
    best = max((r["dev_bleu"] for r in result.log if r["dev_bleu"] is not None), default=None)
    print(f"trained {result.steps} steps, best dev BLEU {best} -> {args.out}/checkpoint")


def cmd_translate(args) -> None:
    cfg = _config(args)
    prep = load_prepared_dir(_need(args.prepared, "prepared directory"))
    _, model = _load_model(args.checkpoint)
    tagged = prep.tagged
    if LangTag(args.tgt_lang).src_token not in prep.vocab:
        raise CliError("data", f"target language {args.tgt_lang!r} is not in the vocabulary")
    changes = {}
    if args.decode_mode:
        changes["mode"] = args.decode_mode
    if args.tag_policy:
        changes["tag_policy"] = args.tag_policy
    dcfg = cfg.decode_config(**changes)
    lines = read_lines(_need(args.input, "input"))
    srcs = [
        prep.vocab.encode((LangTag(args.tgt_lang).src_token, *prep.bpe.segment_words(pretokenize(line))))
        for line in lines
    ]
    hyps = translate(model, srcs, dcfg, prep.vocab, args.tgt_lang, tagged, workers=cfg.workers)
    out = []
    for hs in hyps:
        parts = []
        for h in hs:
            tag, words = hypothesis_words(h, prep.vocab)
            text = detokenize_words(words)
            parts.append(f"{tag} {text}".strip() if args.keep_tag and tag else text)
        out.append("\t".join(parts))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("".join(line + "\n" for line in out), encoding="utf-8")


def cmd_selflearn(args) -> None:
    cfg = _config(args)
    prep = load_prepared_dir(_need(args.prepared, "prepared directory"))
    _need(args.data, "data directory")
    base = Checkpoint.load(_need(args.checkpoint, "checkpoint"))
    write_run_info(args.out, cfg, "selflearn")
    state = self_learn(cfg, prep, base, args.data, args.out)
    round_report(state, Path(args.out) / "metrics.csv")
    state.checkpoint.save(Path(args.out) / "checkpoint")
    for row in state.rows:
        print(json.dumps(row, sort_keys=True))


def _eval_files(hyp_path, ref_path, lang, specs, tagged_output: bool, name: str) -> dict:
    hyp_lines = read_lines(_need(hyp_path, "hypothesis file"))
    refs = [pretokenize(line) for line in read_lines(_need(ref_path, "reference file"))]
    outputs = [line.split() for line in hyp_lines]
    hyps = [[w for tok in line.split() if not is_tag(tok) for w in pretokenize(tok)] for line in hyp_lines]
    fid = None
    if lang:
        fid = fidelity(outputs, lang, specs.get(lang), tagged_output)
    return report_row(name, hyps, refs, fid)


def cmd_evaluate(args) -> None:
    if len(args.hyp) != len(args.ref):
        raise CliError("config", "--hyp and --ref must be given the same number of times")
    specs = load_toy_specs(args.toy) if args.toy else {}
    langs = args.lang or [None] * len(args.hyp)
    if len(langs) != len(args.hyp):
        raise CliError("config", "--lang must be given once per --hyp")
    rows = []
    for h, r, lang in zip(args.hyp, args.ref, langs):
        rows.append(_eval_files(h, r, lang, specs, args.tagged_output, Path(h).name))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "report.csv", REPORT_COLUMNS)
    write_summary(rows, out / "summary.txt")
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")


def cmd_reproduce_toy(args) -> None:
    """gen-toy -> prepare -> train -> selflearn -> evaluate for each requested mode."""
    cfg = _config(args)
    out = Path(args.out)
    write_run_info(out, cfg, "reproduce-toy")
    toy = cfg.tree["toy"]
    specs, pivot = cfg.toy_specs()
    task = gen_toy_task(
        specs, pivot, toy["n_train"], toy["n_dev"], toy["n_test"], cfg.seed,
        toy["latent_vocab"], toy["min_len"], toy["max_len"],
    )
    data = write_toy(task, out / "data")
    summary = []
    for mode in args.modes:
        mcfg = _with(cfg, mode=mode)
        run = out / mode
        write_run_info(run, mcfg, f"reproduce-toy[{mode}]")
        prep = prepare(data, mcfg.merge_count, mode, mcfg.seed)
        save_prepared_dir(prep, run / "prepared")
        result = train_model(mcfg, prep, run / "train")
        base = result.best or result.last
        state = self_learn(mcfg, prep, base, data, run / "selflearn")
        rows = round_report(state, run / "selflearn" / "metrics.csv")
        # evaluate the final round's zero-shot outputs from the stored files
        sl = mcfg.selflearn_config()
        last = run / "selflearn" / f"round_{state.round}"
        eval_rows = []
        for s, t in ((sl.l1, sl.l2), (sl.l2, sl.l1)):
            eval_rows.append(
                _eval_files(
                    last / f"zeroshot.{s}{t}.hyp", data / f"test.{s}-{t}.{t}", t,
                    load_toy_specs(data), mcfg.tagged, f"{mode}.{s}{t}",
                )
            )
        write_csv(eval_rows, run / "report.csv", REPORT_COLUMNS)
        write_summary(eval_rows, run / "summary.txt")
        summary.append({"mode": mode, "rounds": rows, "final": eval_rows})
        print(f"[{mode}] round 0 -> {state.round}: " + ", ".join(
            f"{k} {rows[0][k]:.2f} -> {rows[-1][k]:.2f}" for k in ("bleu_l1l2", "bleu_l2l1")
        ))
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    check = check_reproduce_outputs(out, args.modes)
    if check:
        raise CliError("data", "; ".join(check))
    print(f"all artifacts and invariant checks OK under {out}")


def _with(cfg, **top):
    from .config import ExperimentConfig

    d = cfg.to_dict()
    d.update(top)
    return ExperimentConfig.from_dict(d)


def check_reproduce_outputs(out, modes) -> list[str]:
    """Invariant checks on a reproduce-toy directory; returns problems found."""
    import csv

    problems = []
    out = Path(out)
    for mode in modes:
        run = out / mode
        for rel in ("config.json", "run.json", "train/checkpoint", "selflearn/metrics.csv", "report.csv"):
            if not (run / rel).exists():
                problems.append(f"missing {mode}/{rel}")
        metrics = run / "selflearn" / "metrics.csv"
        if metrics.exists():
            with open(metrics, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            rounds = [int(r["round"]) for r in rows]
            if rounds != list(range(len(rows))):
                problems.append(f"{mode}: metrics rounds not 0..n")
            if not rows or tuple(rows[0].keys()) != ROUND_COLUMNS:
                problems.append(f"{mode}: unexpected metrics columns")
            for r in rows:
                for k in ("bleu_l1l2", "bleu_l2l1"):
                    if not 0.0 <= float(r[k]) <= 100.0:
                        problems.append(f"{mode}: {k} out of range in round {r['round']}")
                for k in ("tag_acc", "distinct1", "distinct2", "lang_id"):
                    if r.get(k) and not 0.0 <= float(r[k]) <= 1.0:
                        problems.append(f"{mode}: {k} out of range in round {r['round']}")
    return problems


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--preset", choices=("toy", "paper"), help="base preset when no --config is given")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override (repeatable)")
    common.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    common.add_argument("--workers", type=int, help="decoding worker threads")
    common.add_argument("--mode", choices=("tagged", "source_only"), help="tagging mode (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="tagnmt", description="Tagged multilingual NMT with self-learning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", parents=[common], help="generate the toy language triangle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("learn-bpe", parents=[common], help="learn BPE merges from text files")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--merges", type=int, required=True, help="number of merge operations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_learn_bpe)

    p = sub.add_parser("apply-bpe", parents=[common], help="segment a text file with learned merges")
    p.add_argument("--merges-file", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply_bpe)

    p = sub.add_parser("prepare", parents=[common], help="BPE, tag and mix a data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train with early stopping")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="translate a text file")
    p.add_argument("--prepared", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decode-mode", choices=("greedy", "beam", "sample", "combined"))
    p.add_argument("--tag-policy", choices=("free", "force"))
    p.add_argument("--keep-tag", action="store_true", help="prefix each output with its generated tag")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("selflearn", parents=[common], help="run self-learning rounds")
    p.add_argument("--prepared", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="data directory with zero-shot test files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_selflearn)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU, fidelity and diversity reports")
    p.add_argument("--hyp", action="append", required=True)
    p.add_argument("--ref", action="append", required=True)
    p.add_argument("--lang", action="append", help="requested target language per --hyp")
    p.add_argument("--toy", help="toy data directory (enables exact language id)")
    p.add_argument("--tagged-output", action="store_true", help="hypotheses start with the generated tag")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce-toy", parents=[common], help="end-to-end toy experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--modes", nargs="+", default=["tagged"], choices=("tagged", "source_only"))
    p.set_defaults(func=cmd_reproduce_toy)
    return parser


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError)):
        return "io"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    if isinstance(exc, (ValueError, KeyError)):
        return "data"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except Exception as exc:  # one machine-parsable line, then exit non-zero
        detail = str(exc).replace("\n", " ")
        print(f"error: {_category(exc)}: {detail}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
