"""Command line entry point.

Subcommands: decode, simulate, train, make-corpus, fuse, score. Any flag can
also come from ``--config FILE.json`` (keys are the flag names with dashes
replaced by underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mtprover import defaults
from mtprover.decoding import (
    DecodeConfig,
    acceptance_summary,
    autoregressive_run,
    simulate_acceptance,
    verified_decode,
)
from mtprover.formats import (
    FormatError,
    fusion_to_dict,
    format_tokens,
    load_model,
    parse_token_line,
    read_clips,
    read_corpus,
    sample_to_dict,
    save_model,
    write_corpus,
    write_jsonl,
)
from mtprover.metrics import score_corpus
from mtprover.models import (
    LinearMTPModel,
    Stage,
    TrainingDiverged,
    TrainStageConfig,
    cyclic_corpus,
    train_recipe,
)
from mtprover.mtp import MTPConfig
from mtprover.rover import fuse_session, normalize_text

log = logging.getLogger("mtprover")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- subcommands --------------------------------------------------------------


def cmd_decode(args) -> int:
    model = load_model(args.model)
    H = model.num_branches if args.branches is None else args.branches
    cfg = DecodeConfig(MTPConfig(H, args.alpha), args.max_tokens, args.eos)
    if args.force_autoregressive:
        tokens, stats = autoregressive_run(model, args.prompt, cfg)
    else:
        tokens, stats = verified_decode(model, args.prompt, cfg, batched=not args.sequential_verify)
    Path(args.out).write_text(format_tokens(tokens), encoding="utf-8")
    if args.stats:
        _write_json(args.stats, acceptance_summary(stats))
    log.info("decoded %d tokens in %d forward passes", stats.tokens, stats.forward_passes)
    return 0


def cmd_simulate(args) -> int:
    stats = simulate_acceptance(args.rates, args.steps, args.seed)
    _write_json(args.out, acceptance_summary(stats))
    return 0


def cmd_train(args) -> int:
    data = read_corpus(args.corpus)
    vocab = args.vocab_size if args.vocab_size is not None else 1 + max(max(s) for s in data if s)
    mtp = MTPConfig(args.branches, args.alpha)
    model = LinearMTPModel.random(vocab, args.hidden_dim, args.branches, args.seed, args.context_window)
    align = TrainStageConfig(
        Stage.FROZEN_BRANCH_ALIGNMENT, args.align_steps, args.seed, args.align_lr, args.batch_size
    )
    calib = TrainStageConfig(Stage.JOINT_CALIBRATION, args.calib_steps, args.seed, args.calib_lr, args.batch_size)
    try:
        model, results = train_recipe(model, data, mtp, align, calib, init_seed=args.seed + 1)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 3
    save_model(model, args.out)
    if args.log:
        _write_json(
            args.log,
            {name: {"loss": r.losses, "main": r.main_losses, "branch": r.branch_losses} for name, r in results.items()},
        )
    return 0


def cmd_make_corpus(args) -> int:
    write_corpus(args.out, cyclic_corpus(args.vocab_size, args.length, args.sequences))
    return 0


def cmd_fuse(args) -> int:
    clips = read_clips(args.input)
    out = fuse_session(clips, args.threshold, args.max_duration, args.workers)
    write_jsonl(args.results, (fusion_to_dict(r) for r in out.results))
    if args.samples:
        write_jsonl(args.samples, (sample_to_dict(s) for s in out.samples))
    kept = sum(r.kept for r in out.results)
    log.info("%d/%d clips kept, %d samples", kept, len(out.results), len(out.samples))
    return 0


def _read_transcripts(path, with_ids: bool) -> list[tuple[str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if with_ids:
                if not line.strip():
                    continue
                parts = line.split(maxsplit=1)
                rows.append((parts[0], parts[1] if len(parts) > 1 else ""))
            else:
                rows.append((str(n), line))
    return rows


def cmd_score(args) -> int:
    refs = _read_transcripts(args.reference, args.ids)
    hyps = _read_transcripts(args.hypothesis, args.ids)
    if args.ids:
        hyp_map = dict(hyps)
        missing = [u for u, _ in refs if u not in hyp_map]
        if missing:
            raise FormatError(f"hypothesis file lacks utterance {missing[0]!r}", args.hypothesis)
        pairs = [(u, r, hyp_map[u]) for u, r in refs]
    else:
        if len(refs) != len(hyps):
            raise FormatError(
                f"{len(refs)} reference lines but {len(hyps)} hypothesis lines", args.hypothesis, min(len(refs), len(hyps)) + 1
            )
        pairs = [(u, r, h) for (u, r), (_, h) in zip(refs, hyps)]

    def tok(text):
        words = normalize_text(text)
        return [c for w in words for c in w] if args.unit == "char" else words

    report = score_corpus((u, tok(r), tok(h)) for u, r, h in pairs)
    report["unit"] = args.unit
    _write_json(args.out, report)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtprover", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with default values for the subcommand's flags")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decode", help="greedy decoding of a saved model, with or without MTP verification")
    d.add_argument("--model", required=True)
    d.add_argument("--prompt", type=_int_list, required=True, help="token ids, e.g. 0,1,2")
    d.add_argument("--max-tokens", type=int, default=256)
    d.add_argument("--eos", type=int, default=None)
    d.add_argument("--branches", type=int, default=None, help="proposal depth (default: all model branches)")
    d.add_argument("--alpha", type=float, default=defaults.DECAY)
    d.add_argument("--force-autoregressive", action="store_true", help="plain one-token-per-pass reference decode")
    d.add_argument("--sequential-verify", action="store_true")
    d.add_argument("--out", required=True, help="token output file")
    d.add_argument("--stats", help="acceptance report (JSON)")
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("simulate", help="Monte Carlo decode steps for given strict acceptance rates")
    s.add_argument("--rates", type=_float_list, required=True)
    s.add_argument("--steps", type=int, default=1_000_000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_simulate, needs_seed=True)

    t = sub.add_parser("train", help="two-stage toy MTP training on a token corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--vocab-size", type=int, default=None)
    t.add_argument("--hidden-dim", type=int, default=16)
    t.add_argument("--branches", type=int, default=defaults.NUM_BRANCHES)
    t.add_argument("--alpha", type=float, default=defaults.DECAY)
    t.add_argument("--context-window", type=int, default=2)
    t.add_argument("--align-steps", type=int, default=100)
    t.add_argument("--align-lr", type=float, default=defaults.FROZEN_BRANCH_LR)
    t.add_argument("--calib-steps", type=int, default=300)
    t.add_argument("--calib-lr", type=float, default=defaults.JOINT_CALIBRATION_LR)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="loss trajectories (JSON)")
    t.set_defaults(func=cmd_train, needs_seed=True)

    c = sub.add_parser("make-corpus", help="write a cyclic token corpus")
    c.add_argument("--vocab-size", type=int, default=8)
    c.add_argument("--length", type=int, default=24)
    c.add_argument("--sequences", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_make_corpus)

    f = sub.add_parser("fuse", help="ROVER fusion and long-form concatenation of clip hypotheses")
    f.add_argument("input", help="clip JSONL")
    f.add_argument("--results", required=True, help="per-clip fusion JSONL")
    f.add_argument("--samples", help="long-form samples JSONL")
    f.add_argument("--threshold", type=float, default=defaults.DISAGREEMENT_THRESHOLD)
    f.add_argument("--max-duration", type=float, default=defaults.LONGFORM_MAX_SECONDS)
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("score", help="WER/CER between reference and hypothesis transcripts")
    r.add_argument("reference")
    r.add_argument("hypothesis")
    r.add_argument("--unit", choices=("word", "char"), default="word")
    r.add_argument("--ids", action="store_true", help="lines start with an utterance id")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_score)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {known.config} must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in subparsers.choices), None)
    if command is None:
        return
    sp = subparsers.choices[command]
    dests = {a.dest for a in sp._actions}
    unknown = sorted(set(cfg) - dests)
    if unknown:
        raise UsageError(f"config {known.config}: unknown key(s) for {command}: {', '.join(unknown)}")
    for action in sp._actions:
        if action.dest in cfg:
            action.required = False
    sp.set_defaults(**cfg)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mtprover: error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "needs_seed", False) and args.seed is None:
        parser.print_usage(sys.stderr)
        print(f"mtprover {args.command}: error: --seed is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"mtprover {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"mtprover {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
