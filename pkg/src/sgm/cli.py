"""Command-line entry point: ``sgm {synth,train,eval,score,gradcheck}``.

Exit codes: 0 success, 1 usage or validation problem, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .errors import ContractError, CorpusError, DimensionError, TrainingDiverged, ValidationError
from .gradcheck import DEFAULT_TOLERANCE, run_suite
from .graphs import load_corpus, save_corpus, write_matrix
from .model import Mode
from .retrieval import DIRECTIONS, evaluate_scores, format_table
from .synth import SynthSpec, generate_synthetic
from .trainer import LR_FLICKR30K, LR_MSCOCO, Checkpoint, TrainConfig, Trainer

GRAPHS_NAME = "graphs.json"
FEATURES_NAME = "features.bin"
CHECKPOINT_NAME = "checkpoint.sgmc"
LOG_NAME = "train_log.jsonl"
CONFIG_NAME = "config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(min_value: int):
    def parse(text: str) -> int:
        value = int(text)
        if value < min_value:
            raise argparse.ArgumentTypeError(f"must be >= {min_value}, got {value}")
        return value
    return parse


def _threads() -> int:
    raw = os.environ.get("SGM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SGM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SGM_THREADS must be >= 1, got {n}")
    return n


def _echo(command: str, args: argparse.Namespace, out_dir: Path | None = None) -> dict:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                if k != "func"}
    resolved["command"] = command
    resolved["threads"] = _threads()
    if out_dir is not None:
        (out_dir / CONFIG_NAME).write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"event": "config", **resolved}, sort_keys=True), file=sys.stderr)
    return resolved


def _load(data_dir: Path):
    return load_corpus(data_dir / GRAPHS_NAME, data_dir / FEATURES_NAME)


# ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.pairs < 2:
        raise UsageError(f"--pairs must be >= 2, got {args.pairs}")
    spec = SynthSpec(d1=args.d1, objects_per_graph=args.objects, relationships_per_graph=args.relationships,
                     group_size=args.group_size, noise=args.noise, filler_words=args.filler)
    try:
        corpus = generate_synthetic(args.seed, args.pairs, spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    _echo("synth", args, args.out)
    save_corpus(corpus, args.out / GRAPHS_NAME, args.out / FEATURES_NAME)
    print(f"wrote {len(corpus)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    lr = args.lr if args.lr is not None else (LR_MSCOCO if args.flavor == "mscoco" else LR_FLICKR30K)
    cfg = TrainConfig(batch_size=args.batch, lr=lr, margin=args.margin, epochs=args.epochs, seed=args.seed,
                      mode=Mode(args.mode), d1=args.d1, d2=args.d2, dim=args.dim, gcn_layers=args.gcn_layers,
                      clip_norm=None if args.no_clip else args.clip_norm, path_input=args.path_input,
                      normalize=args.normalize)
    corpus = _load(args.data)
    val = _load(args.val_data) if args.val_data else None
    args.out.mkdir(parents=True, exist_ok=True)
    _echo("train", args, args.out)
    with open(args.out / LOG_NAME, "w") as log_fh:
        def log(record):
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()
            print(json.dumps(record, sort_keys=True))

        trainer = Trainer(corpus, cfg, val_corpus=val, log=log)
        if args.label_embeddings:
            trainer.model.load_label_embeddings(args.label_embeddings)
        if args.word_embeddings:
            trainer.model.load_word_embeddings(args.word_embeddings)
        best = trainer.fit()
        if not (cfg.mode.visual_relationships or cfg.mode.text_relationships):
            names = trainer.model.relationship_parameter_names()
            mass = sum(trainer.grad_mass[n] for n in names)
            log({"event": "relationship_grad_check", "mode": cfg.mode.value,
                 "relationship_grad_mass": mass, "passed": mass == 0.0})
    best.save(args.out / CHECKPOINT_NAME)
    print(f"saved checkpoint from epoch {best.epoch} to {args.out / CHECKPOINT_NAME}")
    return 0


def _model_and_corpus(args):
    ck = Checkpoint.load(args.checkpoint)
    corpus = _load(args.data)
    model = ck.model()
    model.check_corpus(corpus)
    return model, corpus


def cmd_eval(args) -> int:
    _echo("eval", args)
    model, corpus = _model_and_corpus(args)
    scores = model.score_matrix(corpus)
    directions = DIRECTIONS if args.direction == "both" else (args.direction,)
    reports = [evaluate_scores(scores, d) for d in directions]
    print(format_table(reports))
    payload = reports[0].to_json() if len(reports) == 1 else [r.to_json() for r in reports]
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=1) + "\n")
    else:
        print(json.dumps(payload))
    if args.dump_scores:
        write_matrix(args.dump_scores, scores)
    return 0


def cmd_score(args) -> int:
    _echo("score", args)
    model, corpus = _model_and_corpus(args)
    for name, idx in (("--image", args.image), ("--caption", args.caption)):
        if not 0 <= idx < len(corpus):
            raise UsageError(f"{name} {idx} outside [0, {len(corpus)})")
    with no_grad():
        breakdown = model.score_graphs(corpus.pairs[args.image][0], corpus.pairs[args.caption][1])
    out = {"image": args.image, "caption": args.caption, "mode": model.mode.value, **breakdown.to_dict()}
    print(json.dumps(out, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    _echo("gradcheck", args)
    results = run_suite(args.cases, args.seed, only=args.only)
    print(f"{'operation':<24} {'cases':>5} {'max_rel_err':>12}  result")
    ok = True
    for r in results:
        passed = r.passed(args.tolerance)
        ok &= passed
        print(f"{r.name:<24} {r.cases:5d} {r.max_error:12.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"tolerance {args.tolerance:g}: {'all passed' if ok else 'FAILURES'}")
    return 0 if ok else 1


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgm", description="Scene graph matching for image-text retrieval.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs", type=int, default=16)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--d1", type=_positive_int(1), default=8)
    s.add_argument("--objects", type=_positive_int(1), default=2, help="objects per graph")
    s.add_argument("--relationships", type=_positive_int(0), default=1, help="relationships per graph")
    s.add_argument("--group-size", type=_positive_int(1), default=1,
                   help="pairs sharing identical objects, told apart only by relationships")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--filler", type=_positive_int(0), default=0, help="number of filler words")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", type=Path, required=True, help=f"directory with {GRAPHS_NAME} and {FEATURES_NAME}")
    t.add_argument("--val-data", type=Path, help="held-out corpus directory (defaults to --data)")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--margin", type=float, default=0.2)
    t.add_argument("--batch", type=_positive_int(2), default=200)
    lr = t.add_mutually_exclusive_group()
    lr.add_argument("--lr", type=float)
    lr.add_argument("--flavor", choices=("flickr30k", "mscoco"), default="flickr30k",
                    help="pick the learning rate used for this dataset")
    t.add_argument("--epochs", type=_positive_int(1), default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.SGM.value)
    t.add_argument("--gcn-layers", type=_positive_int(1), default=1)
    t.add_argument("--d1", type=_positive_int(1), help="region feature size (defaults to the corpus value)")
    t.add_argument("--d2", type=_positive_int(1), default=300)
    t.add_argument("--dim", type=_positive_int(1), default=1024)
    clip = t.add_mutually_exclusive_group()
    clip.add_argument("--clip-norm", type=float, default=10.0)
    clip.add_argument("--no-clip", action="store_true")
    t.add_argument("--path-input", choices=("embeddings", "word_states"), default="embeddings")
    t.add_argument("--normalize", action="store_true", help="L2-normalize features before scoring")
    t.add_argument("--label-embeddings", type=Path)
    t.add_argument("--word-embeddings", type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--direction", choices=DIRECTIONS + ("both",), default="both")
    e.add_argument("--report", type=Path)
    e.add_argument("--dump-scores", type=Path)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("score", help="score one image/caption pair")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--image", type=int, required=True)
    c.add_argument("--caption", type=int, required=True)
    c.set_defaults(func=cmd_score)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--cases", type=_positive_int(1), default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    g.add_argument("--only", action="append", help="restrict to an operation (repeatable)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print("validation failed:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return 1
    except (UsageError, DimensionError, ContractError, CorpusError, TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
