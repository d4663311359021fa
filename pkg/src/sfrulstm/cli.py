"""Command-line entry point.

Exit codes: 0 success, 1 invalid usage or options, 2 failure while running.
Options may also come from ``--config FILE`` (``key = value`` lines, ``#``
comments); command-line flags take precedence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("sfrulstm")

SPLITS = ("train", "val", "test", "all")


class UsageError(Exception):
    """Invalid option values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- option types

def _positive_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}")
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {s}")
    return v


def _nonneg_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0: {s}")
    return v


def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {s}")
    return v


def _unit_interval(s: str) -> float:
    v = _positive_float(s)
    if v > 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1]: {s}")
    return v


def _float_list(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {s!r}")


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {s!r}")


def _str_list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value option file; flags override it (default: none)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads for evaluation (default: $SFRU_THREADS or 1)")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging level (default: %(default)s)")


def _add_data(p, split_default="test"):
    p.add_argument("--data", required=True, help="dataset directory written by `synth`")
    p.add_argument("--split", choices=SPLITS, default=split_default,
                   help="which split to use (default: %(default)s)")
    p.add_argument("--split-seed", type=int, default=0,
                   help="seed of the 70/10/20 train/val/test partition (default: %(default)s)")


def _add_hyper(p, epochs=10, lr=0.01):
    p.add_argument("--lr", type=_nonneg_float, default=lr, help="learning rate (default: %(default)s)")
    p.add_argument("--momentum", type=_nonneg_float, default=0.9, help="momentum (default: %(default)s)")
    p.add_argument("--epochs", type=_positive_int, default=epochs, help="epochs (default: %(default)s)")
    p.add_argument("--batch", type=_positive_int, default=32, help="batch size (default: %(default)s)")


def _add_model_shape(p):
    p.add_argument("--hidden", type=_positive_int, default=32, help="LSTM width d (default: %(default)s)")
    p.add_argument("--keep", type=_unit_interval, default=0.2,
                   help="dropout keep probability on classifier input (default: %(default)s)")
    p.add_argument("--tau-e", type=_positive_float, default=1.5,
                   help="encoding length in seconds (default: %(default)s)")
    p.add_argument("--tau-span", type=_positive_float, default=2.0,
                   help="anticipation span in seconds (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfrulstm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-speed dataset")
    _add_common(p)
    p.add_argument("--classes", type=_positive_int, default=8, help="class count, even (default: %(default)s)")
    p.add_argument("--per-class", type=_positive_int, default=200, help="samples per class (default: %(default)s)")
    p.add_argument("--dim", type=_positive_int, default=16, help="feature width D (default: %(default)s)")
    p.add_argument("--rate", type=_positive_float, default=30.0, help="feature frames per second (default: %(default)s)")
    p.add_argument("--sigma", type=_nonneg_float, default=0.1, help="noise std (default: %(default)s)")
    p.add_argument("--slow-freqs", type=_float_list, default=[0.25, 0.5], help="slow-pair frequencies in Hz (default: 0.25,0.5)")
    p.add_argument("--fast-freqs", type=_float_list, default=[2.5, 3.5], help="fast-pair frequencies in Hz (default: 2.5,3.5)")
    p.add_argument("--alpha-s", type=_positive_float, default=0.5, help="slow step the fast pair aliases under (default: %(default)s)")
    p.add_argument("--modalities", type=_str_list, default=["rgb"], help="comma-separated modality names (default: rgb)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-branch", help="train one single-scale branch")
    _add_common(p)
    _add_data(p, "train")
    _add_model_shape(p)
    _add_hyper(p)
    p.add_argument("--alpha", type=_positive_float, required=True, help="time step in seconds")
    p.add_argument("--modality", default=None, help="modality to train on (default: first)")
    p.add_argument("--losses", default=None, help="per-epoch loss CSV (default: not written)")
    p.add_argument("--out", required=True, help="output model file (.sfru)")

    p = sub.add_parser("finetune", help="fuse pre-trained branches and fine-tune the fusion")
    _add_common(p)
    _add_data(p, "train")
    _add_hyper(p, epochs=5)
    p.add_argument("--branches", type=_str_list, required=True,
                   help="comma-separated pre-trained branch model files")
    p.add_argument("--scheme", choices=["attention", "ensemble", "concat"], default="attention",
                   help="scale fusion scheme (default: %(default)s)")
    p.add_argument("--order", choices=["modsf", "sfmod", "concat-all"], default="modsf",
                   help="modality fusion order when several modalities (default: %(default)s)")
    p.add_argument("--matt-input", choices=["weighted", "raw"], default="weighted",
                   help="SF-Mod modality-attention input (default: %(default)s)")
    p.add_argument("--head-hidden", type=_positive_int, default=128, help="attention MLP width (default: %(default)s)")
    p.add_argument("--ft-lr-mult", type=_nonneg_float, default=0.1,
                   help="branch learning-rate multiplier (default: %(default)s)")
    p.add_argument("--freeze-branches", action="store_true", help="keep branch parameters fixed")
    p.add_argument("--freeze-heads", action="store_true", help="keep fusion heads fixed")
    p.add_argument("--matt", choices=["auto", "frozen", "trainable"], default="auto",
                   help="modality attention during fine-tuning; auto freezes it for modsf (default: %(default)s)")
    p.add_argument("--matt-epochs", type=int, default=0,
                   help="epochs of modality-attention pre-training before fine-tuning (default: %(default)s)")
    p.add_argument("--aux-weight", type=_nonneg_float, default=0.0,
                   help="weight of per-branch auxiliary losses (default: %(default)s)")
    p.add_argument("--literal-unroll", action="store_true",
                   help="unroll every decoder on the finest grid")
    p.add_argument("--out", required=True, help="output model file (.sfru)")

    p = sub.add_parser("eval", help="top-k accuracy at anticipation times")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=True, help="model file (.sfru)")
    p.add_argument("--taus", type=_float_list, default=None, help="anticipation times (default: all emitted)")
    p.add_argument("--ks", type=_int_list, default=[1, 5], help="k values (default: 1,5)")
    p.add_argument("--name", default=None, help="model column label (default: scheme)")
    p.add_argument("--out", default=None, help="metrics CSV (default: standard output)")

    p = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    _add_common(p)
    _add_data(p)
    _add_hyper(p, epochs=10)
    p.add_argument("--alphas", type=_float_list, default=[0.1, 0.125, 0.2, 0.25, 0.5, 1.0],
                   help="single-branch time steps (default: 0.1,0.125,0.2,0.25,0.5,1.0)")
    p.add_argument("--tau-es", type=_float_list, default=[1.5, 3.0], help="encoding lengths (default: 1.5,3.0)")
    p.add_argument("--tau-span", type=_positive_float, default=2.0, help="anticipation span (default: %(default)s)")
    p.add_argument("--schemes", type=_str_list, default=["concat", "ensemble", "attention", "attention-3-branch"],
                   help="fusion schemes (default: concat,ensemble,attention,attention-3-branch)")
    p.add_argument("--orders", type=_str_list, default=[], help="modality fusion orders (default: none)")
    p.add_argument("--ks", type=_int_list, default=[1, 5], help="k values (default: 1,5)")
    p.add_argument("--hidden", type=_positive_int, default=32, help="LSTM width (default: %(default)s)")
    p.add_argument("--head-hidden", type=_positive_int, default=32, help="attention MLP width (default: %(default)s)")
    p.add_argument("--keep", type=_unit_interval, default=0.2, help="dropout keep probability (default: %(default)s)")
    p.add_argument("--ft-epochs", type=_positive_int, default=None, help="fine-tuning epochs (default: --epochs)")
    p.add_argument("--out", required=True, help="metrics CSV")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _add_common(p)
    p.add_argument("--eps", type=_positive_float, default=1e-5, help="difference step (default: %(default)s)")

    p = sub.add_parser("trace", help="slow/fast attention weights per fused step")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=True, help="model file (.sfru)")
    p.add_argument("--samples", type=_positive_int, default=None, help="first N samples (default: all)")
    p.add_argument("--out", default=None, help="trace CSV (default: standard output)")

    for sp in sub.choices.values():
        for a in sp._actions:
            if a.option_strings and a.help and "default" not in a.help and not a.required \
                    and not isinstance(a, (argparse._HelpAction, argparse._StoreTrueAction)):
                a.help += " (default: %(default)s)"
    return parser


# ---------------------------------------------------------------- config file

def read_config_file(path) -> list[tuple[str, str]]:
    pairs = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs.append((k.replace("_", "-"), v))
    return pairs


def _config_argv(subparser: argparse.ArgumentParser, pairs) -> list[str]:
    actions = {a.option_strings[0][2:]: a for a in subparser._actions if a.option_strings
               and a.option_strings[0].startswith("--")}
    argv = []
    for k, v in pairs:
        a = actions.get(k)
        if a is None or k in ("config", "help"):
            raise UsageError(f"--config: unknown key {k!r}")
        if isinstance(a, argparse._StoreTrueAction):
            if v.lower() in ("1", "true", "yes", "on"):
                argv.append("--" + k)
            elif v.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"--config: {k} expects true/false, got {v!r}")
        else:
            argv += ["--" + k, v]
    return argv


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    if not argv or argv[0] in ("-h", "--help"):
        parser.print_help(sys.stderr if not argv else sys.stdout)
        if not argv:
            raise UsageError("missing subcommand")
        raise SystemExit(0)
    cmd = argv[0]
    subparsers = parser._subparsers._group_actions[0].choices
    if cmd not in subparsers:
        raise UsageError(f"unknown subcommand {cmd!r}; choose from {', '.join(subparsers)}")
    rest = argv[1:]
    known = {o for a in subparsers[cmd]._actions for o in a.option_strings}
    for a in rest:
        if a.startswith("--") and a.split("=", 1)[0] not in known:
            raise UsageError(f"unknown flag {a.split('=', 1)[0]} for {cmd}")
    cfg_path = None
    for i, a in enumerate(rest):
        if a == "--config" and i + 1 < len(rest):
            cfg_path = rest[i + 1]
        elif a.startswith("--config="):
            cfg_path = a.split("=", 1)[1]
    if cfg_path is not None:
        rest = _config_argv(subparsers[cmd], read_config_file(cfg_path)) + rest
    return parser.parse_args([cmd] + rest)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SFRU_THREADS")
    if env:
        try:
            v = int(env)
            if v >= 1:
                return v
        except ValueError:
            pass
        raise UsageError(f"SFRU_THREADS must be a positive integer, got {env!r}")
    return 1


# ---------------------------------------------------------------- commands
# Each command validates everything first and returns a callable doing the
# work, so nothing is written when validation fails.

def _load_data(args):
    from .dataio import Dataset

    root = Path(args.data)
    if not (root / "annotations.csv").is_file():
        raise UsageError(f"--data: no annotations.csv in {root}")
    try:
        data = Dataset.load(root)
    except (OSError, ValueError) as exc:
        raise UsageError(f"--data: cannot load {root}: {exc}")
    if args.split == "all":
        return data, data
    parts = dict(zip(("train", "val", "test"), data.split(seed=args.split_seed)))
    return parts[args.split], parts


def _check_out(path, flag="--out", directory=False):
    p = Path(path)
    parent = p if directory else p.parent
    if directory and p.exists() and not p.is_dir():
        raise UsageError(f"{flag}: {p} exists and is not a directory")
    if not directory and not parent.exists() and str(parent) not in ("", "."):
        raise UsageError(f"{flag}: directory {parent} does not exist")


def _load_model(path, flag="--model"):
    from .dataio import FormatError, load_model

    try:
        return load_model(path)
    except OSError as exc:
        raise UsageError(f"{flag}: cannot read {path}: {exc.strerror}")
    except (FormatError, ValueError, KeyError) as exc:
        raise UsageError(f"{flag}: {path}: {exc}")


def cmd_synth(args):
    from .dataio import SyntheticSpec, synth_generate

    if len(args.slow_freqs) != 2 or len(args.fast_freqs) != 2:
        raise UsageError("--slow-freqs/--fast-freqs: exactly two frequencies each")
    spec = SyntheticSpec(args.classes, args.per_class, args.dim, args.rate, args.sigma,
                         tuple(args.slow_freqs), tuple(args.fast_freqs), args.alpha_s,
                         args.seed, tuple(args.modalities))
    try:
        spec.validate()
    except ValueError as exc:
        flag = "--fast-freqs" if "fast" in str(exc) else "--slow-freqs" if "slow" in str(exc) \
            else "--classes/--dim"
        raise UsageError(f"{flag}: {exc}")
    _check_out(args.out, directory=True)

    def run():
        data = synth_generate(spec)
        data.save(args.out)
        print(f"wrote {len(data)} samples, {len(data.classes)} classes to {args.out}")
    return run


def _hyper(args, **kw):
    from .train import Hyper

    return Hyper(lr=args.lr, momentum=args.momentum, epochs=args.epochs,
                 batch_size=args.batch, seed=args.seed, **kw)


def cmd_train_branch(args):
    from .model import Model, ModelConfig
    from .slowfast import ClockError, single_clock

    if args.momentum >= 1:
        raise UsageError("--momentum: must be < 1")
    data, parts = _load_data(args)
    modality = args.modality or data.modalities[0]
    if modality not in data.modalities:
        raise UsageError(f"--modality: {modality!r} not in {data.modalities}")
    try:
        clock = single_clock(args.alpha, args.tau_e, args.tau_span)
    except ClockError as exc:
        raise UsageError(f"--alpha/--tau-e/--tau-span: {exc}")
    _check_out(args.out)
    if args.losses:
        _check_out(args.losses, "--losses")
    short = data.short_videos(clock.alpha_f * clock.T)
    if short:
        raise UsageError(f"--data: {len(short)} videos shorter than the window: {', '.join(short[:10])}")
    cfg = ModelConfig((modality,), (data.dim(modality),), args.hidden, len(data.classes), clock,
                      scheme="single", keep=args.keep, seed=args.seed)
    hyper = _hyper(args)
    val = parts["val"] if isinstance(parts, dict) else None

    def run():
        from .dataio import _atomic_write, save_model
        from .train import train_branch

        model = Model(cfg)
        res = train_branch(data, model, hyper, val)
        save_model(args.out, model)
        if args.losses:
            _atomic_write(args.losses, "epoch,loss\n" + "".join(
                f"{i},{l:.9f}\n" for i, l in enumerate(res.losses)))
        print(f"trained {modality}@{args.alpha:g}: final loss {res.losses[-1]:.4f}")
    return run


def cmd_finetune(args):
    from .train import assemble_fusion

    if args.momentum >= 1:
        raise UsageError("--momentum: must be < 1")
    data, parts = _load_data(args)
    branches = [_load_model(p, "--branches") for p in args.branches]
    if any(b.config.scheme != "single" for b in branches):
        raise UsageError("--branches: every file must hold a single-branch model")
    _check_out(args.out)
    try:
        model = assemble_fusion(branches, args.scheme, args.order, head_hidden=args.head_hidden,
                                seed=args.seed, matt_input=args.matt_input,
                                literal_unroll=args.literal_unroll)
    except ValueError as exc:
        raise UsageError(f"--branches: {exc}")
    if model.config.multimodal and args.scheme != "attention":
        raise UsageError("--scheme: several modalities require attention")
    freeze_matt = {"auto": None, "frozen": True, "trainable": False}[args.matt]
    hyper = _hyper(args, finetune_lr_mult=args.ft_lr_mult, freeze_branches=args.freeze_branches,
                   freeze_heads=args.freeze_heads, freeze_matt=freeze_matt,
                   aux_weight=args.aux_weight)
    val = parts["val"] if isinstance(parts, dict) else None

    def run():
        from dataclasses import replace

        from .dataio import save_model
        from .train import finetune_fusion, pretrain_matt

        if args.matt_epochs > 0 and model.matt_names():
            pretrain_matt(model, data, replace(hyper, epochs=args.matt_epochs), val)
        res = finetune_fusion(model, data, hyper, val)
        save_model(args.out, model)
        print(f"fine-tuned {model.config.tag}: final loss {res.losses[-1]:.4f}")
    return run


def cmd_eval(args):
    from .train import check_taus

    data, _ = _load_data(args)
    model = _load_model(args.model)
    taus = args.taus if args.taus is not None else list(model.clock.fused_taus)
    try:
        check_taus(model, taus)
    except ValueError as exc:
        raise UsageError(f"--taus: {exc}")
    bad = [k for k in args.ks if not 1 <= k <= model.config.classes]
    if bad:
        raise UsageError(f"--ks: {bad} outside [1, {model.config.classes}]")
    missing = [m for m in model.config.modalities if m not in data.modalities]
    if missing:
        raise UsageError(f"--data: missing modalities {missing}")
    if args.out:
        _check_out(args.out)
    threads = _threads(args)

    def run():
        from .train import evaluate

        table = evaluate(model, data, taus, args.ks, name=args.name, threads=threads)
        text = table.to_csv(args.out)
        if not args.out:
            sys.stdout.write(text)
    return run


def cmd_ablate(args):
    from .ablation import FUSION_SCHEMES, AblationGrid
    from .multimodal import ORDERS

    if args.momentum >= 1:
        raise UsageError("--momentum: must be < 1")
    bad = [s for s in args.schemes if s not in FUSION_SCHEMES]
    if bad:
        raise UsageError(f"--schemes: unknown {bad}; choose from {', '.join(FUSION_SCHEMES)}")
    bad = [o for o in args.orders if o not in ORDERS]
    if bad:
        raise UsageError(f"--orders: unknown {bad}; choose from {', '.join(ORDERS)}")
    if any(a <= 0 for a in args.alphas) or any(t <= 0 for t in args.tau_es):
        raise UsageError("--alphas/--tau-es: values must be positive")
    args.split = "all"
    data, _ = _load_data(args)
    if args.orders and len(data.modalities) < 2:
        raise UsageError("--orders: the dataset has a single modality")
    train, val, test = data.split(seed=args.split_seed)
    _check_out(args.out)
    grid = AblationGrid(alphas=args.alphas, tau_es=args.tau_es, schemes=args.schemes,
                        orders=args.orders, tau_span=args.tau_span, ks=args.ks,
                        hidden=args.hidden, head_hidden=args.head_hidden, keep=args.keep)
    bad = [k for k in args.ks if not 1 <= k <= len(data.classes)]
    if bad:
        raise UsageError(f"--ks: {bad} outside [1, {len(data.classes)}]")
    hyper = _hyper(args)
    from dataclasses import replace

    ft = replace(hyper, epochs=args.ft_epochs or args.epochs)

    def run():
        from .ablation import ablate

        table = ablate(train, test, grid, hyper, ft, val)
        table.to_csv(args.out)
        failed = sum(1 for r in table.rows if r.error)
        print(f"wrote {len(table.rows)} rows ({failed} failed cells) to {args.out}")
    return run


def cmd_gradcheck(args):
    def run():
        from .gradcheck import TOLERANCE, run as run_checks

        results = run_checks(args.seed, eps=args.eps)
        worst = max(err for _, err, _ in results)
        print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
        return 0 if worst <= TOLERANCE else 2
    return run


def cmd_trace(args):
    data, _ = _load_data(args)
    model = _load_model(args.model)
    if model.config.scheme != "attention":
        raise UsageError(f"--model: trace needs an attention model, got {model.config.tag}")
    if args.samples is not None:
        data = data.subset(range(min(args.samples, len(data))))
    if args.out:
        _check_out(args.out)

    def run():
        from .train import attention_trace

        text = attention_trace(model, data).to_csv(args.out)
        if not args.out:
            sys.stdout.write(text)
    return run


COMMANDS = {
    "synth": cmd_synth,
    "train-branch": cmd_train_branch,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "trace": cmd_trace,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level),
                            format="%(levelname)s %(name)s: %(message)s")
        job = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if str(exc).startswith("unknown subcommand") or "missing subcommand" in str(exc):
            build_parser().print_usage(sys.stderr)
        return 1
    try:
        rc = job()
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
