"""Command-line entry point: ``densetrack <subcommand> [flags]``.

Exit status is 0 on success, 2 for configuration problems, 3 for data
problems (unreadable corpora, missing checkpoints, coverage gaps) and 4 for
numeric failures during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, pipeline
from .config import PipelineConfig
from .correspond import format_log, train_pairwise
from .errors import ConfigError, DenseTrackError, LoadError
from .memory import finetune_with_memory
from .metrics import evaluate_corpus
from .synthgen import write_sequence

log = logging.getLogger("densetrack")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON configuration file")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--jobs", type=int, metavar="N", help="worker processes for per-video stages")
    p.add_argument("--k", type=int, metavar="N", help="memory bank size")
    p.add_argument("--window", type=int, metavar="N", help="attention window side (odd)")
    p.add_argument("--adapt", action="store_true", default=None, help="run online adaptation after propagation")
    p.add_argument("--out", metavar="DIR", required=True, help="artifact directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densetrack", description="Self-supervised dense tracking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic corpus")
    _common(p)
    p.add_argument("--kind", choices=("random", "translation", "occlusion"))
    p.add_argument("--count", type=int, metavar="N")

    p = sub.add_parser("train-pairwise", help="pairwise reconstruction pretraining")
    _common(p)
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--iterations", type=int, metavar="N")

    p = sub.add_parser("finetune-memory", help="momentum-memory fine-tuning")
    _common(p)
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="pairwise encoder checkpoint")
    p.add_argument("--iterations", type=int, metavar="N")

    p = sub.add_parser("track", help="propagate first-frame masks through videos")
    _common(p)
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="encoder or momentum-pair checkpoint")
    p.add_argument("--dump-probs", action="store_true", help="also write probability maps (debug)")

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    _common(p)
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--gt", required=True, metavar="DIR")
    p.add_argument("--splits", metavar="PATH", help="JSON map from sequence name to split tag")

    p = sub.add_parser("ablate", help="module ladder and reference-count sweep")
    _common(p)
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="pairwise encoder checkpoint")
    p.add_argument("--memory-checkpoint", metavar="PATH", help="momentum-pair checkpoint (defaults to --checkpoint)")

    p = sub.add_parser("plot", help="line charts from loss logs and adaptation curves")
    _common(p)
    p.add_argument("inputs", nargs="+", metavar="TSV")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "track.k": args.k,
        "track.window": args.window,
        "adapt.enabled": args.adapt,
    }
    if args.command == "simulate":
        overrides.update({"simulate.kind": args.kind, "simulate.count": args.count})
    if args.command == "train-pairwise":
        overrides["pairwise.iterations"] = args.iterations
    if args.command == "finetune-memory":
        overrides["memory.iterations"] = args.iterations
    return PipelineConfig.load(args.config, overrides)


def _require(path: str | None, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise LoadError(f"{what}: {p} does not exist")
    return p


# ------------------------------------------------------------- subcommands


def cmd_simulate(cfg: PipelineConfig, args, out: Path) -> None:
    seqs = pipeline.simulate_corpus(cfg)
    for seq in seqs:
        write_sequence(seq, out, {"kind": cfg.simulate.kind, "seed": cfg.seed, "frame_size": cfg.simulate.frame_size})
    log.info("wrote %d sequences to %s", len(seqs), out)


def cmd_train_pairwise(cfg: PipelineConfig, args, out: Path) -> None:
    corpus = pipeline.discover_corpus(_require(args.corpus, "--corpus"))
    result = train_pairwise(corpus, cfg.train_config())
    checkpoint.save_encoder(out / "encoder.ckpt", result.encoder, {"stage": "pairwise", "seed": cfg.seed})
    (out / "train_log.tsv").write_text(format_log(result.log))


def cmd_finetune_memory(cfg: PipelineConfig, args, out: Path) -> None:
    init = checkpoint.load_encoder(_require(args.checkpoint, "--checkpoint"))
    corpus = pipeline.discover_corpus(_require(args.corpus, "--corpus"))
    result = finetune_with_memory(init, corpus, cfg.memory_config())
    checkpoint.save_pair(out / "pair.ckpt", result.pair, {"stage": "memory", "seed": cfg.seed})
    (out / "memory_log.tsv").write_text(format_log(result.log))


def cmd_track(cfg: PipelineConfig, args, out: Path) -> None:
    pair = checkpoint.load_pair(_require(args.checkpoint, "--checkpoint"), cfg.memory.momentum)
    seqs = pipeline.discover_corpus(_require(args.corpus, "--corpus"), require_masks=True)
    outputs = pipeline.track_corpus(seqs, pair, cfg, adapt=cfg.adapt.enabled)
    pipeline.write_outputs(outputs, out)
    if args.dump_probs:
        for o in outputs:
            checkpoint.save_probabilities(out / "probs" / f"{o.name}.ckpt", [p.probs for p in o.probs])
    if any(pipeline.has_evaluation_targets(s) for s in seqs):
        report = pipeline.score_outputs(outputs, seqs)
        report.write(out)
        print(report.table(), end="")


def cmd_evaluate(cfg: PipelineConfig, args, out: Path) -> None:
    tags = None
    if args.splits:
        try:
            tags = json.loads(_require(args.splits, "--splits").read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--splits: {exc}") from None
    report = evaluate_corpus(_require(args.pred, "--pred"), _require(args.gt, "--gt"), tags)
    report.write(out)
    print(report.table(), end="")


def cmd_ablate(cfg: PipelineConfig, args, out: Path) -> None:
    pairwise = checkpoint.load_pair(_require(args.checkpoint, "--checkpoint"), cfg.memory.momentum)
    memory = pairwise
    if args.memory_checkpoint:
        memory = checkpoint.load_pair(_require(args.memory_checkpoint, "--memory-checkpoint"), cfg.memory.momentum)
    seqs = pipeline.discover_corpus(_require(args.corpus, "--corpus"), require_masks=True)
    if not any(pipeline.has_evaluation_targets(s) for s in seqs):
        raise LoadError("ablation needs ground truth beyond the first frame")
    rows = pipeline.run_ablation(seqs, pairwise, memory, cfg)
    table = pipeline.ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(
        json.dumps([{"group": r.group, "label": r.label, **r.summary} for r in rows], indent=1) + "\n"
    )
    print(table, end="")


def cmd_plot(cfg: PipelineConfig, args, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name in args.inputs:
        path = _require(name, "plot input")
        try:
            data = np.atleast_2d(np.loadtxt(path, delimiter="\t"))
        except ValueError as exc:
            raise LoadError(f"{path}: {exc}") from None
        fig, ax = plt.subplots(figsize=(6, 4))
        if data.shape[1] >= 4:
            ax.plot(data[:, 0], data[:, 2], label="J vs pseudo-masks")
            if not np.all(np.isnan(data[:, 3])):
                ax.plot(data[:, 0], data[:, 3], label="J vs ground truth")
            ax.set_ylabel("J")
            ax.legend()
        else:
            ax.plot(data[:, 0], data[:, 1])
            ax.set_ylabel("loss")
        ax.set_xlabel("iteration")
        ax.set_title(path.stem)
        fig.tight_layout()
        fig.savefig(out / f"{path.stem}.png", dpi=100)
        plt.close(fig)


COMMANDS = {
    "simulate": cmd_simulate,
    "train-pairwise": cmd_train_pairwise,
    "finetune-memory": cmd_finetune_memory,
    "track": cmd_track,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        torch.manual_seed(cfg.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out)
        COMMANDS[args.command](cfg, args, out)
    except DenseTrackError as exc:
        print(f"densetrack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"densetrack {args.command}: {exc}", file=sys.stderr)
        return LoadError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
