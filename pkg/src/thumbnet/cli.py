"""Command-line entry point.

Heavy modules are imported after argument parsing so that ``--threads`` can
pin the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

log = logging.getLogger("thumbnet")

HYPERPARAM_KEYS = ("alpha", "beta", "theta", "tau", "lambda_mm", "base_lr", "momentum", "finetune_lr_factor")


@dataclass
class RunConfig:
    command: str = ""
    dataset_format: str = "cifar10"
    dataset: str | None = None
    split: str = "test"
    classes: list | None = None
    template: str = "resnet-mini"
    num_classes: int = 10
    input_size: int = 32
    factor: int = 2
    hidden_channels: int = 16
    method: str = "f"
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    epochs: int = 30
    stage_a_epochs: int | None = None
    batch_size: int = 128
    steps_per_epoch: int | None = None
    augment: bool = True
    teacher: str | None = None
    checkpoint: str | None = None
    out: str = "thumbnet-run"
    format: str = "text"
    batch: int = 32
    include_downscaler: bool = False
    include_decoder: bool = False
    extended: bool = False
    multiply_add: bool = False
    layers: bool = False
    limit: int | None = None
    precision: str = "f32"
    debug: bool = False

    @classmethod
    def from_dict(cls, data, source="config"):
        from .errors import UsageError

        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"{source}: unknown keys {unknown}")
        hp = data.get("hyperparams", {})
        if not isinstance(hp, dict) or set(hp) - set(HYPERPARAM_KEYS):
            raise UsageError(f"{source}: unknown hyperparams {sorted(set(hp) - set(HYPERPARAM_KEYS))}")
        return cls(**data)

    def merged(self, overrides):
        data = asdict(self)
        hp = dict(data["hyperparams"])
        for key, value in overrides.items():
            if key in HYPERPARAM_KEYS:
                hp[key] = value
            else:
                data[key] = value
        data["hyperparams"] = hp
        return RunConfig.from_dict(data, "flags")


def load_config(path, overrides):
    """Defaults, then the JSON file, then command-line flags."""
    from .errors import UsageError

    config = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{p}: top level must be an object")
        config = RunConfig.from_dict({**asdict(config), **data}, str(p))
    return config.merged(overrides)


# -- argument parsing ----------------------------------------------------------------
def _shared():
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="intra-op threads (default 1)")
    p.add_argument("--out", help="output directory for all run artifacts")
    p.add_argument("--format", choices=("text", "csv"))
    p.add_argument("--method", choices=tuple("abcdef"))
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--debug", action="store_true", help="full NaN/Inf scans on every operation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _data_flags(p):
    p.add_argument("--dataset", help="dataset directory (CIFAR-10 binary or IDX files)")
    p.add_argument("--dataset-format", dest="dataset_format", choices=("cifar10", "idx"))
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--classes", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated class subset")


def _model_flags(p):
    p.add_argument("--template", help="backbone template")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--factor", type=int, help="linear downscale factor f")
    p.add_argument("--hidden-channels", dest="hidden_channels", type=int)


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage-a-epochs", dest="stage_a_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_false")
    for key in HYPERPARAM_KEYS:
        flag = "--lr" if key == "base_lr" else "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, type=float)


def build_parser():
    shared = _shared()
    parser = argparse.ArgumentParser(prog="thumbnet", description="Train and analyze thumbnail-input networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        return sub.add_parser(name, parents=[shared], argument_default=argparse.SUPPRESS, help=help)

    p = command("train-teacher", "train the network on full-size images")
    _data_flags(p)
    _model_flags(p)
    _train_flags(p)

    p = command("train-thumbnet", "two-stage training of downscaler and student")
    _data_flags(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--teacher", help="teacher checkpoint (needed for methods d, e, f)")

    p = command("eval", "top-1/top-5 error of a checkpoint")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = command("analyze", "FLOPs, memory, parameter, and storage comparison")
    _model_flags(p)
    p.add_argument("--batch", type=int)
    p.add_argument("--include-downscaler", dest="include_downscaler", action="store_true")
    p.add_argument("--include-decoder", dest="include_decoder", action="store_true")
    p.add_argument("--extended", action="store_true", help="count BN/ReLU/pool as elementwise ops")
    p.add_argument("--multiply-add", dest="multiply_add", action="store_true", help="two FLOPs per MAC")
    p.add_argument("--layers", action="store_true", help="also print per-layer rows")

    p = command("downscale", "export thumbnails produced by a trained downscaler")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--limit", type=int)
    return parser


# -- helpers -----------------------------------------------------------------------------
def _emit(rows, fmt, stream=None):
    """rows: list of (key, value) pairs."""
    stream = stream or sys.stdout
    if fmt == "csv":
        stream.write("key,value\n")
        for k, v in rows:
            stream.write(f"{k},{v}\n")
    else:
        width = max(len(k) for k, _ in rows)
        for k, v in rows:
            stream.write(f"{k:<{width}}  {v}\n")


def _load_split(cfg, split):
    from .dataio import load_dataset
    from .errors import UsageError

    if not cfg.dataset:
        raise UsageError("no dataset given; pass --dataset <dir>")
    ds = load_dataset(cfg.dataset_format, cfg.dataset, split)
    if cfg.classes:
        ds = ds.class_subset(cfg.classes)
    return ds


def _hyperparams(cfg):
    from .losses import Hyperparams

    return Hyperparams(**cfg.hyperparams)


def _budget(cfg):
    from .trainer import Budget

    return Budget(cfg.epochs, cfg.stage_a_epochs, cfg.batch_size, cfg.steps_per_epoch, augment=cfg.augment)


def _finish_training_report(cfg, out, history_rows, extra):
    from .plotting import plot_training_curves
    from .trainer import read_metrics

    rows = read_metrics(out / "metrics.csv")
    if rows:
        plot_training_curves(rows, out / "training_curves.png")
    _emit(extra + history_rows, cfg.format)


def _history_rows(history):
    if not history:
        return [("val_top1_error", "n/a"), ("val_top5_error", "n/a")]
    last = history[-1]
    return [("val_top1_error", f"{last['top1']:.4f}"), ("val_top5_error", f"{last['top5']:.4f}")]


# -- commands ------------------------------------------------------------------------------
def cmd_train_teacher(cfg):
    from .model import build_backbone
    from .trainer import train_teacher

    train = _load_split(cfg, "train")
    val = _load_split(cfg, cfg.split)
    out = Path(cfg.out)
    num_classes = train.num_classes
    graph = build_backbone(cfg.template, num_classes, cfg.input_size, seed=cfg.seed)
    history = train_teacher(graph, train, val, _hyperparams(cfg), _budget(cfg), cfg.seed, out)
    _finish_training_report(cfg, out, _history_rows(history),
                            [("checkpoint", str(out / "teacher.ckpt")), ("metrics", str(out / "metrics.csv"))])
    return 0


def cmd_train_thumbnet(cfg):
    from .errors import UsageError
    from .model import build_backbone, build_bundle
    from .trainer import METHODS, evaluate, load_teacher, save_state, train_thumbnet

    if cfg.method == "a":
        return cmd_train_teacher(cfg)
    ablation = METHODS[cfg.method]
    if ablation.needs_teacher and not cfg.teacher:
        raise UsageError(f"method {cfg.method} distills from a trained teacher; pass --teacher <checkpoint>")
    train = _load_split(cfg, "train")
    val = _load_split(cfg, cfg.split)
    if cfg.teacher:
        teacher = load_teacher(cfg.teacher)
    else:
        teacher = build_backbone(cfg.template, train.num_classes, cfg.input_size, seed=cfg.seed)
    kind = "learned" if ablation.use_supervised_downscaler else "bicubic"
    bundle = build_bundle(teacher, cfg.factor, kind, cfg.hidden_channels, seed=cfg.seed,
                          with_decoder=ablation.use_feature_mapping)
    out = Path(cfg.out)
    state = train_thumbnet(bundle, train, val, ablation, _hyperparams(cfg), _budget(cfg), cfg.seed, out)
    final = evaluate(bundle, val)
    save_state(state, out / "thumbnet.ckpt", {"method": cfg.method})
    _finish_training_report(cfg, out, _history_rows([final]),
                            [("method", cfg.method), ("checkpoint", str(out / "thumbnet.ckpt")),
                             ("metrics", str(out / "metrics.csv"))])
    return 0


def cmd_eval(cfg):
    from .dataio import load_checkpoint
    from .errors import ShapeError
    from .model import is_trainable
    from .trainer import evaluate, load_downscaler, restore_graph

    ckpt = load_checkpoint(cfg.checkpoint)
    kind = ckpt.meta.get("kind")
    if kind == "teacher":
        graph, down = restore_graph(ckpt, "teacher"), None
    elif kind == "thumbnet":
        graph, down = restore_graph(ckpt, "student"), load_downscaler(ckpt)
    elif kind == "classifier":
        key = next(k for k in ckpt.meta["graphs"] if k != "downscaler")
        graph, down = restore_graph(ckpt, key), load_downscaler(ckpt)
    else:
        raise ShapeError(f"{cfg.checkpoint}: unrecognized checkpoint kind {kind!r}")
    ds = _load_split(cfg, cfg.split)
    shape = tuple(ds.image_shape)
    if down is not None:
        if is_trainable(down):
            if shape != down.input_shape:
                raise ShapeError(f"dataset images {shape} do not match the downscaler input {down.input_shape}")
            shape = down.output_shape()
        else:
            shape = (shape[0], shape[1] // down.f, shape[2] // down.f)
    if shape != graph.input_shape:
        raise ShapeError(f"network input {graph.input_shape} does not match the evaluated images {shape}")
    res = evaluate(graph, ds, downscaler=down)
    _emit([("checkpoint", cfg.checkpoint), ("samples", res["count"]), ("top1_error", f"{res['top1']:.4f}"),
           ("top5_error", f"{res['top5']:.4f}")], cfg.format)
    return 0


def cmd_analyze(cfg):
    from .complexity import format_layers, format_table, speedup_report
    from .model import build_backbone, build_decoder, build_downscaler, build_student_from_teacher, shapes_only
    from .plotting import plot_cost_comparison

    with shapes_only():
        ref = build_backbone(cfg.template, cfg.num_classes, cfg.input_size, seed=cfg.seed)
        thumb = build_student_from_teacher(ref, cfg.factor)
        down = build_downscaler(cfg.factor, cfg.hidden_channels, cfg.input_size) if cfg.include_downscaler else None
        dec = None
        if cfg.include_decoder and ref.split_index is not None:
            dec = build_decoder(thumb.tap_shape(), ref.tap_shape())
    comp = speedup_report(ref, ref.input_shape, thumb, thumb.input_shape, cfg.batch, downscaler=down,
                          decoder=dec, extended=cfg.extended, multiply_add=cfg.multiply_add)
    text = format_table(comp, cfg.format)
    if cfg.layers:
        text += "\n" + format_layers(comp.reference, cfg.format) + "\n" + format_layers(comp.thumb, cfg.format)
    sys.stdout.write(text)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"analyze.{'csv' if cfg.format == 'csv' else 'txt'}").write_text(text)
    plot_cost_comparison(comp, out / "analyze.png")
    return 0


def cmd_downscale(cfg):
    import numpy as np

    from .dataio import export_thumbnails, load_checkpoint, to_uint8
    from .model import is_trainable
    from .plotting import plot_thumbnail_grid
    from .tensor import Tensor, no_grad
    from .trainer import load_downscaler

    ckpt = load_checkpoint(cfg.checkpoint)
    down = load_downscaler(ckpt)
    ds = _load_split(cfg, cfg.split)
    if is_trainable(down) and tuple(ds.image_shape) != down.input_shape:
        down = down.with_input_shape(ds.image_shape)
    out = Path(cfg.out)
    paths, stats = export_thumbnails(down, ds, out / "thumbnails", limit=cfg.limit)
    n = min(8, len(ds))
    with no_grad():
        y = down.forward(Tensor(ds.normalize(ds.images[:n])), mode="eval")
    plot_thumbnail_grid(ds.images[:n], to_uint8(ds.denormalize(y.data)), out / "thumbnails.png")
    _emit([("written", len(paths)), ("directory", str(out / "thumbnails")),
           ("channel_mean", " ".join(f"{v:.2f}" for v in stats["mean"])),
           ("channel_std", " ".join(f"{v:.2f}" for v in np.asarray(stats["std"])))], cfg.format)
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-thumbnet": cmd_train_thumbnet,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "downscale": cmd_downscale,
}


def _pin_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if "threads" in args and args["threads"] < 1:
        parser.error("--threads must be >= 1")
    if "numpy" not in sys.modules:
        _pin_threads(args.get("threads", 1))

    from .errors import ThumbNetError
    from .tensor import set_debug, set_default_dtype

    try:
        cfg = load_config(config_path, {"command": command, **args})
        set_default_dtype(cfg.precision)
        set_debug(cfg.debug)
        return COMMANDS[command](cfg)
    except ThumbNetError as exc:
        print(f"thumbnet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"thumbnet: error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
