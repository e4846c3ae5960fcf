"""Command-line entry point: ``momask-lab <subcommand> [--config F] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 usage or config error, 3 runtime error.
"""

from __future__ import annotations

import os

_threads = os.environ.get("MOMASK_LAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import subprocess  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .. import __version__  # noqa: E402
from ..codec import tokenize, train_rvqvae  # noqa: E402
from ..corpus import build_corpus, load_corpus, manifest_text, oracle_classifier  # noqa: E402
from ..engine import Guidance, InpaintSpec, Models, generate, inpaint  # noqa: E402
from ..mformer import train_mformer  # noqa: E402
from ..motion_io import read_motion, write_motion  # noqa: E402
from ..ndmath import Rng  # noqa: E402
from ..rformer import train_rformer  # noqa: E402
from . import checkpoint as ckpt  # noqa: E402
from . import evaluate, plotting  # noqa: E402
from .config import ConfigError, RunConfig, load_config  # noqa: E402

log = logging.getLogger("momask_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--preset", choices=("desk", "full", "toy"), help="base preset (default desk)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="momask-lab", description="Residual-token motion generation lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpus")
    _common(p)

    p = sub.add_parser("train-rvq", help="train the residual-quantized codec")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)

    for name, helptext in (("train-masked", "train the masked base-token transformer"),
                           ("train-residual", "train the residual-layer transformer")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--corpus", type=Path, required=True)
        p.add_argument("--codec", type=Path, required=True)

    for name, helptext in (("generate", "generate one motion for a label"),
                           ("inpaint", "regenerate token ranges of a reference motion")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--codec", type=Path, required=True)
        p.add_argument("--mformer", type=Path, required=True)
        p.add_argument("--rformer", type=Path, required=True)
        p.add_argument("--label", required=True, help="class name or label id")
        p.add_argument("--iterations", type=int)
        if name == "generate":
            p.add_argument("--frames", type=int, default=64)
        else:
            p.add_argument("--reference", type=Path, required=True)
            p.add_argument("--ranges", required=True, help="token ranges like 4:8,12:14")

    p = sub.add_parser("eval-recon", help="reconstruction error per number of layers")
    _common(p)
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "val"))
    p.add_argument("--layers", default=None, help="range like 1..6 or list 1,3,6")

    p = sub.add_parser("eval-gen", help="oracle-scored generation with guidance and iteration sweeps")
    _common(p)
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--mformer", type=Path, required=True)
    p.add_argument("--rformer", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--oracle", type=Path, help="oracle checkpoint; trained from the corpus if absent")
    p.add_argument("--per-label", type=int, default=25)
    p.add_argument("--sweep-per-label", type=int, default=10)
    p.add_argument("--frames", type=int, default=48)

    p = sub.add_parser("inspect-ckpt", help="describe a checkpoint")
    p.add_argument("path", type=Path)
    p.add_argument("--out", type=Path, default=None, help=argparse.SUPPRESS)
    return parser


def parse_layers(text: str | None, depth: int) -> list[int]:
    if text is None:
        return list(range(1, depth + 1))
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            layers = list(range(int(lo), int(hi) + 1))
        else:
            layers = [int(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad --layers value {text!r}") from None
    if not layers or not all(1 <= k <= depth for k in layers):
        raise ConfigError(f"--layers {text!r} must lie within 1..{depth}")
    return layers


def parse_ranges(text: str) -> list[tuple[int, int]]:
    out = []
    for part in filter(None, (t.strip() for t in text.split(","))):
        try:
            a, b = part.split(":")
            out.append((int(a), int(b)))
        except ValueError:
            raise ConfigError(f"bad range {part!r}; expected start:end") from None
    return out


def resolve_config(args) -> RunConfig:
    text = None
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(text, overrides, args.preset)


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def write_provenance(out: Path, args, cfg: RunConfig, argv) -> None:
    record = {
        "command": args.command,
        "argv": list(argv),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "git": git_describe(),
        "version": __version__,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    (out / "config.cfg").write_text(cfg.to_text())


def _label_id(text: str, names) -> int:
    if text.isdigit():
        lid = int(text)
        if not 0 <= lid < len(names):
            raise ConfigError(f"label id {lid} outside [0, {len(names)})")
        return lid
    if text not in names:
        raise ConfigError(f"unknown label {text!r}; choose from {', '.join(names)}")
    return list(names).index(text)


def _tokenized(corpus, codec, split="train"):
    motions, labels = corpus.subset(split)
    return [tokenize(m, codec).rows for m in motions], labels


def _models(args) -> Models:
    return Models(ckpt.load_params(args.codec, "codec"), ckpt.load_params(args.mformer, "mformer"),
                  ckpt.load_params(args.rformer, "rformer"))


def _log_tsv(tlog, fields) -> str:
    lines = ["\t".join(("step",) + fields)]
    for i, step in enumerate(tlog.steps):
        lines.append("\t".join([str(step)] + [f"{getattr(tlog, f)[i]:.6f}" for f in fields]))
    return "\n".join(lines) + "\n"


def run(args, cfg: RunConfig) -> None:
    out: Path = args.out
    root = Rng(cfg.seed)
    seeds = [cfg.seed]
    text = cfg.to_text()
    if args.command == "gen-corpus":
        corpus = build_corpus(cfg.corpus, out / "corpus")
        sys.stdout.write(manifest_text(cfg.corpus))
        print(f"wrote {len(corpus.motions)} motions to {out / 'corpus'}")
    elif args.command == "train-rvq":
        corpus = load_corpus(args.corpus)
        motions, _ = corpus.subset("train")
        params, tlog = train_rvqvae(motions, cfg, root.stream("codec"))
        ckpt.save_params(out / "codec.mmk", params, text, seeds)
        (out / "codec_log.tsv").write_text(_log_tsv(tlog, ("loss", "recon", "commit", "lr")))
        plotting.plot_training(tlog, out / "codec_loss.png", "codec")
        print(f"saved {out / 'codec.mmk'}; final loss {tlog.loss[-1]:.6f}")
    elif args.command in ("train-masked", "train-residual"):
        corpus = load_corpus(args.corpus)
        codec = ckpt.load_params(args.codec, "codec")
        rows, labels = _tokenized(corpus, codec)
        k, n_labels = codec.rvq.layers[0].size, len(corpus.class_names)
        if args.command == "train-masked":
            params, tlog = train_mformer([r[0] for r in rows], labels, n_labels, k, cfg.mformer, root.stream("mformer"))
            name = "mformer"
        else:
            params, tlog = train_rformer(rows, labels, n_labels, k, codec.rvq.depth - 1, cfg.rformer,
                                         root.stream("rformer"))
            name = "rformer"
        ckpt.save_params(out / f"{name}.mmk", params, text, seeds)
        (out / f"{name}_log.tsv").write_text(_log_tsv(tlog, ("loss", "accuracy", "lr")))
        plotting.plot_training(tlog, out / f"{name}_loss.png", name)
        print(f"saved {out / (name + '.mmk')}; final loss {tlog.loss[-1]:.6f}")
    elif args.command in ("generate", "inpaint"):
        models = _models(args)
        lid = _label_id(args.label, cfg.corpus.classes)
        iters = args.iterations or cfg.engine.iterations
        guidance = Guidance.from_config(cfg.engine)
        rng = root.stream(args.command)
        if args.command == "generate":
            motion, trace = generate(lid, args.frames, models, iters, guidance, rng, cfg.engine.residual_mode)
        else:
            reference, _ = read_motion(args.reference)
            res = inpaint(InpaintSpec(reference, parse_ranges(args.ranges)), lid, models, iters, guidance, rng,
                          cfg.engine.residual_mode)
            motion, trace = res.motion, res.trace
        out.mkdir(parents=True, exist_ok=True)
        write_motion(out / f"{args.command}.motion", motion, fps=cfg.corpus.fps)
        (out / "trace.txt").write_text(trace.to_text())
        print(f"wrote {out / (args.command + '.motion')} ({len(motion)} frames)")
    elif args.command == "eval-recon":
        codec = ckpt.load_params(args.codec, "codec")
        motions, _ = load_corpus(args.corpus).subset(args.split)
        report = evaluate.eval_reconstruction(codec, motions, parse_layers(args.layers, codec.rvq.depth))
        evaluate.write_text(out / "recon.tsv", report.to_tsv())
        evaluate.write_text(out / "usage.tsv", report.usage_tsv())
        plotting.plot_reconstruction(report, out / "recon.png")
        plotting.plot_usage(report, out / "usage.png")
        sys.stdout.write(report.to_tsv())
        print(f"sequence violation rate\t{report.violation_rate():.6f}")
    elif args.command == "eval-gen":
        corpus = load_corpus(args.corpus)
        models = _models(args)
        if args.oracle is not None:
            oracle = ckpt.load_params(args.oracle, "oracle")
        else:
            oracle, acc = oracle_classifier(corpus, root.stream("oracle"), cfg.oracle)
            ckpt.save_params(out / "oracle.mmk", oracle, text, seeds)
            print(f"oracle held-out accuracy\t{acc:.6f}")
        report = evaluate.eval_generation(models, oracle, range(len(corpus.class_names)), args.per_label, args.frames,
                                          cfg.engine.iterations, Guidance.from_config(cfg.engine),
                                          root.stream("eval-gen"), cfg.engine.residual_mode,
                                          sweep_per_label=args.sweep_per_label)
        evaluate.write_text(out / "generation.tsv", report.to_tsv(corpus.class_names))
        evaluate.write_text(out / "sweeps.tsv", report.sweep_tsv())
        evaluate.write_text(out / "traces.txt", "".join(f"# sample {i}\n{t}" for i, t in enumerate(report.traces)))
        plotting.plot_generation(report, out / "generation.png", corpus.class_names)
        plotting.plot_sweeps(report, out / "sweeps.png")
        sys.stdout.write(report.to_tsv(corpus.class_names))
        sys.stdout.write(report.sweep_tsv())


def inspect(path: Path) -> None:
    ck = ckpt.load_checkpoint(path)
    meta = {k: v for k, v in ck.meta.items() if k != "weight_order"}
    print(f"kind\t{meta.pop('kind', '?')}")
    for k in sorted(meta):
        print(f"meta.{k}\t{meta[k]}")
    print(f"seeds\t{','.join(str(s) for s in ck.seeds)}")
    total = 0
    for name, a in ck.arrays.items():
        total += a.size
        print(f"array\t{name}\t{'x'.join(str(d) for d in a.shape)}\t{float(np.abs(a).mean()):.6g}")
    for alias, target in ck.ties.items():
        print(f"tie\t{alias}\t{target}")
    print(f"parameters\t{total}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"momask-lab: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect-ckpt":
            inspect(args.path)
            return 0
        cfg = resolve_config(args)
        write_provenance(args.out, args, cfg, argv)
        run(args, cfg)
    except ConfigError as exc:
        print(f"momask-lab: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"momask-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
