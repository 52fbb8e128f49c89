"""Command-line entry point: ``fuselab <command> [options]``.

Exit codes: 0 success, 1 domain or I/O error, 2 usage error.  Results go to
stdout or files, diagnostics to stderr.  Every run writes a JSON run
manifest (next to its primary output, or wherever ``--run-manifest``
points) recording everything needed to repeat it.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, data_synth, msfnet, training
from .autodiff.gradcheck import run_op_suite
from .errors import FuselabError
from .image_core import load_image, make_scene_sets, read_manifest, save_image, write_manifest
from .mef_ssim import LossConfig, build_target, evaluate_losses
from .msfnet import NetConfig
from .pyramid import mertens_fuse
from .weight_maps import smoothed_weights_for

THREADS_ENV = "FUSELAB_THREADS"


class UsageError(Exception):
    """Bad command-line input detected after parsing (exit code 2)."""


# -- run manifests ---------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__
    timestamp: str = ""

    def write(self, path) -> None:
        if not self.timestamp:
            self.timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checksum_inputs(paths) -> dict:
    """sha256 of every file given, expanding directories recursively."""
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name == "run.json" or f.name.endswith(".run.json"):
                continue
            out[str(f)] = sha256_file(f)
    return out


# -- argument helpers ---------------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with option defaults (flags override it)")
    p.add_argument("--threads", type=_positive_int,
                   help=f"cap on BLAS threads (fallback: ${THREADS_ENV}; default: all cores)")
    p.add_argument("--run-manifest", help="where to write the run manifest JSON")


def _add_net_loss(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=_positive_int, default=NetConfig.levels)
    p.add_argument("--channels", type=_positive_int, default=NetConfig.base_channels)
    p.add_argument("--no-half-branch", action="store_true", help="drop the half-resolution DAB branch")
    p.add_argument("--deep-supervision", action="store_true")
    p.add_argument("--lam", type=float, default=LossConfig.lam, help="weight of the L_W term")


def _add_train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="directory of scene folders holding manifest.txt")
    p.add_argument("--case", type=int, choices=(1, 2), default=1)
    p.add_argument("--epochs", type=_positive_int, default=training.TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=training.TrainConfig.lr0)
    p.add_argument("--batch", type=_positive_int, default=training.TrainConfig.batch)
    p.add_argument("--crop", type=_positive_int, default=training.TrainConfig.crop)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0, help="seed of the 80/10/10 corpus split")
    p.add_argument("--coupled", action="store_true", help="control run: measure only the fused set")
    _add_net_loss(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuselab", description="Multi-exposure fusion toolkit.")
    parser.add_argument("--version", action="version", version=f"fuselab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic bracket corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=_positive_int, default=50)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--times", type=_float_list, default=[1.0, 8.0, 64.0])
    p.add_argument("--kind", choices=data_synth.KINDS, default="composite")
    p.add_argument("--dynamic-range", type=float, default=1000.0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("weights", help="write smoothed weight maps as grayscale PNGs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--measure-idx", type=_int_list, help="0-based indices (default: all)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("fuse", help="fuse a stack with the pyramid baseline or a trained network")
    p.add_argument("--method", choices=("mertens", "net"), default="mertens")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", help="parameter file (method net)")
    p.add_argument("--fuse-idx", type=_int_list, help="0-based indices (default: from --case, else all)")
    p.add_argument("--case", type=int, choices=(1, 2), help="derive the fusion set from the case rule")
    p.add_argument("--levels", type=_positive_int, help="pyramid levels (method mertens)")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train the fusion network on a corpus")
    _add_train_opts(p)
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--report", help="per-epoch CSV report")
    p.add_argument("--timing", action="store_true", help="add wall-clock seconds to the report")
    _add_common(p)

    p = sub.add_parser("eval", help="score fused images or a trained network")
    p.add_argument("--fused", help="fused image (single-image mode)")
    p.add_argument("--manifest", help="stack manifest (single-image mode)")
    p.add_argument("--measure-idx", type=_int_list, help="0-based measurement indices (default: all)")
    p.add_argument("--corpus", help="corpus directory (table mode)")
    p.add_argument("--params", help="parameter file (table mode)")
    p.add_argument("--case", type=int, choices=(1, 2), default=1)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=LossConfig.lam)
    p.add_argument("--csv", help="also write the table as CSV")
    _add_common(p)

    p = sub.add_parser("ablate", help="train and score the multi-scale x L_W grid")
    _add_train_opts(p)
    p.add_argument("--csv", help="also write the grid as CSV")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--network", action="store_true", help="also check the full network and loss")
    p.add_argument("--tol", type=float, default=1e-4, help="per-op tolerance")
    p.add_argument("--network-tol", type=float, default=1e-3)
    _add_common(p)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    sub_parsers = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in sub_parsers), None)
    if known.config and command is not None:
        _apply_config(sub_parsers[command], command, known.config)
    return parser.parse_args(argv)


def _apply_config(sub: argparse.ArgumentParser, command: str, path) -> None:
    """Install ``key = value`` lines from ``path`` as defaults of ``sub``."""
    try:
        values = read_config_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    known = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, text in values.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{path}: unknown option {key!r} for '{command}'")
        if action.nargs == 0:
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(text) if action.type else text
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{path}: bad value for {key}: {exc}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)


def thread_count(args) -> int | None:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"${THREADS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"${THREADS_ENV} must be a positive integer, got {n}")
        return n
    return None


# -- corpus helpers -------------------------------------------------------------

def load_corpus(directory) -> list:
    directory = Path(directory)
    manifests = sorted(directory.glob("*/manifest.txt"))
    if not manifests:
        raise FileNotFoundError(f"{directory}: no scene folders with manifest.txt")
    return [read_manifest(m) for m in manifests]


def _train_config(args) -> training.TrainConfig:
    net = NetConfig(levels=args.levels, base_channels=args.channels,
                    half_branch=not args.no_half_branch, deep_supervision=args.deep_supervision)
    return training.TrainConfig(epochs=args.epochs, lr0=args.lr, batch=args.batch, seed=args.seed,
                                case=args.case, decouple=not args.coupled, crop=args.crop,
                                net=net, loss=LossConfig(lam=args.lam))


def _config_echo(args) -> dict:
    skip = {"command", "run_manifest", "threads"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _manifest_path(args, default) -> Path | None:
    if args.run_manifest:
        return Path(args.run_manifest)
    return None if default is None else Path(default)


# -- commands -------------------------------------------------------------------

def cmd_synth(args, out, err) -> RunManifest:
    corpus = data_synth.make_corpus(args.seed, args.scenes, args.size, tuple(args.times),
                                    args.kind, args.dynamic_range)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    for stack in corpus:
        write_manifest(stack, root / stack.name)
    print(f"wrote {len(corpus)} scenes to {root}", file=out)
    return RunManifest("synth", [], _config_echo(args), {"seed": args.seed}, outputs=[str(root)])


def cmd_weights(args, out, err) -> RunManifest:
    stack = read_manifest(args.manifest)
    idx = args.measure_idx if args.measure_idx is not None else range(len(stack))
    sets = make_scene_sets(stack, idx, idx)
    ws = smoothed_weights_for(sets.measure_images)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for k, w in zip(sets.measure_idx, ws.smoothed):
        path = root / f"weight_{k:02d}.png"
        save_image(w, path)
        written.append(str(path))
    print(f"wrote {len(written)} weight maps to {root}", file=out)
    return RunManifest("weights", [], _config_echo(args), {}, checksum_inputs([Path(args.manifest).parent]),
                       written)


def _fusion_sets(stack, args):
    if args.fuse_idx is not None:
        return make_scene_sets(stack, args.fuse_idx, args.fuse_idx)
    if args.case is not None:
        return training.make_sets(stack, args.case)
    every = range(len(stack))
    return make_scene_sets(stack, every, every)


def cmd_fuse(args, out, err) -> RunManifest:
    stack = read_manifest(args.manifest)
    sets = _fusion_sets(stack, args)
    inputs = [Path(args.manifest).parent]
    if args.method == "mertens":
        fused = mertens_fuse(sets, args.levels)
    else:
        if not args.params:
            raise UsageError("--method net requires --params")
        params = msfnet.load_params(args.params)
        if params.cfg.n_inputs != len(sets.fuse_idx):
            raise FuselabError(f"network expects {params.cfg.n_inputs} inputs, fusion set has "
                               f"{len(sets.fuse_idx)}")
        fused = msfnet.fuse(sets.fuse_images, params)
        inputs.append(Path(args.params))
    save_image(fused, args.out)
    print(f"fused {list(sets.fuse_idx)} -> {args.out}", file=out)
    return RunManifest("fuse", [], _config_echo(args), {}, checksum_inputs(inputs), [args.out])


def cmd_train(args, out, err) -> RunManifest:
    cfg = _train_config(args)
    corpus = load_corpus(args.corpus)
    train_set, val_set, _ = training.split_corpus(corpus, args.split_seed)
    if not train_set:
        train_set = corpus

    def progress(rec):
        val = "" if rec.val_score is None else f" val {rec.val_score:.4f}"
        print(f"epoch {rec.epoch}/{cfg.epochs} lr {rec.lr:.3g} total {rec.total:.5f} "
              f"L_S {rec.loss_s:.5f} L_W {rec.loss_w:.5f}{val} ({rec.seconds:.1f}s)", file=err)

    params, report = training.train(train_set, cfg, val=val_set, progress=progress)
    msfnet.save_params(params, args.out)
    outputs = [args.out]
    if args.report:
        Path(args.report).write_text(report.to_csv(with_timing=args.timing), newline="")
        outputs.append(args.report)
    first, last = report.records[0].total, report.records[-1].total
    print(f"trained {len(train_set)} scenes for {cfg.epochs} epochs: total loss {first:.5f} -> {last:.5f}",
          file=out)
    return RunManifest("train", [], _config_echo(args), {"seed": args.seed, "split_seed": args.split_seed},
                       checksum_inputs([args.corpus]), outputs)


def _loss_table(rep) -> tuple:
    rows = [("loss_S", rep.loss_s), ("loss_W", rep.loss_w), ("total", rep.total), ("mef_ssim", rep.score)]
    text = "".join(f"{name:<9} {value:.6f}\n" for name, value in rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    writer.writerows((name, repr(value)) for name, value in rows)
    return text, buf.getvalue()


def cmd_eval(args, out, err) -> RunManifest:
    loss = LossConfig(lam=args.lam)
    if args.fused or args.manifest:
        if not (args.fused and args.manifest):
            raise UsageError("single-image mode needs both --fused and --manifest")
        if args.corpus or args.params:
            raise UsageError("use either --fused/--manifest or --corpus/--params")
        stack = read_manifest(args.manifest)
        idx = args.measure_idx if args.measure_idx is not None else range(len(stack))
        sets = make_scene_sets(stack, idx, idx)
        rep = evaluate_losses(build_target(sets.measure_images, loss), load_image(args.fused))
        text, table_csv = _loss_table(rep)
        inputs = checksum_inputs([Path(args.manifest).parent, args.fused])
    elif args.corpus and args.params:
        params = msfnet.load_params(args.params)
        corpus = load_corpus(args.corpus)
        if args.split != "all":
            parts = dict(zip(("train", "val", "test"), training.split_corpus(corpus, args.split_seed)))
            corpus = parts[args.split]
            if not corpus:
                raise FuselabError(f"the {args.split} split is empty")
        cfg = training.TrainConfig(case=args.case, loss=loss)
        table = training.evaluate(corpus, params, cfg)
        text, table_csv = table.to_text(), table.to_csv()
        inputs = checksum_inputs([args.corpus, args.params])
    else:
        raise UsageError("eval needs --fused and --manifest, or --corpus and --params")
    out.write(text)
    outputs = []
    if args.csv:
        Path(args.csv).write_text(table_csv, newline="")
        outputs.append(args.csv)
    return RunManifest("eval", [], _config_echo(args), {}, inputs, outputs)


def cmd_ablate(args, out, err) -> RunManifest:
    cfg = _train_config(args)
    corpus = load_corpus(args.corpus)
    train_set, val_set, _ = training.split_corpus(corpus, args.split_seed)
    if not val_set:
        raise FuselabError("validation split is empty; use a larger corpus")

    def progress(rec):
        print(f"epoch {rec.epoch}/{cfg.epochs} total {rec.total:.5f}", file=err)

    cells = training.run_ablation(train_set, val_set, cfg, progress=progress)
    out.write(training.ablation_text(cells))
    outputs = []
    if args.csv:
        Path(args.csv).write_text(training.ablation_csv(cells), newline="")
        outputs.append(args.csv)
    return RunManifest("ablate", [], _config_echo(args), {"seed": args.seed, "split_seed": args.split_seed},
                       checksum_inputs([args.corpus]), outputs)


def cmd_gradcheck(args, out, err) -> RunManifest:
    results = run_op_suite(args.seed)
    failed = False
    for name, e in results.items():
        flag = "ok" if e < args.tol else "FAIL"
        failed |= e >= args.tol
        print(f"{name:<28} {e:.3e}  {flag}", file=out)
    print(f"max op error {max(results.values()):.3e}", file=out)
    if args.network:
        errors = training.network_grad_check(args.seed)
        worst = max(errors.values())
        failed |= worst >= args.network_tol
        print(f"network max error {worst:.3e}  {'ok' if worst < args.network_tol else 'FAIL'}", file=out)
    if failed:
        raise FuselabError("gradient check exceeded tolerance")
    return RunManifest("gradcheck", [], _config_echo(args), {"seed": args.seed})


COMMANDS = {
    "synth": (cmd_synth, lambda a: Path(a.out) / "run.json"),
    "weights": (cmd_weights, lambda a: Path(a.out) / "run.json"),
    "fuse": (cmd_fuse, lambda a: a.out + ".run.json"),
    "train": (cmd_train, lambda a: a.out + ".run.json"),
    "eval": (cmd_eval, lambda a: a.csv + ".run.json" if a.csv else None),
    "ablate": (cmd_ablate, lambda a: a.csv + ".run.json" if a.csv else None),
    "gradcheck": (cmd_gradcheck, lambda a: None),
}


def _rerun(path, out, err) -> int:
    try:
        data = json.loads(Path(path).read_text())
        argv = list(data["argv"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"fuselab: cannot read run manifest {path}: {exc}", file=err)
        return 1
    return main(argv, out, err)


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fuselab: error: {exc}", file=err)
        return 2
    if args.command == "rerun":
        return _rerun(args.manifest, out, err)
    handler, default_manifest = COMMANDS[args.command]
    try:
        with threadpool_limits(limits=thread_count(args)):
            manifest = handler(args, out, err)
        manifest.argv = argv
        path = _manifest_path(args, default_manifest(args))
        if path is None:
            print(json.dumps({"run_manifest": asdict(manifest)}, sort_keys=True, default=str), file=err)
        else:
            manifest.write(path)
    except UsageError as exc:
        print(f"fuselab: error: {exc}", file=err)
        return 2
    except (FuselabError, OSError, ValueError) as exc:
        print(f"fuselab: error: {exc}", file=err)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
