"""Command line entry points.

Subcommands compose into the usual experiment flow:

    sparsetrain init   --arch toy --out model.ckpt
    sparsetrain prune  --model model.ckpt --keep-ratio 0.75 --sparsity 0.6 --out pruned.ckpt
    sparsetrain plan   --model pruned.ckpt --budget-bytes 262144 --out plan.csv
    sparsetrain train  --model pruned.ckpt --data synth-b --mode dynamic --metrics run.csv
    sparsetrain report run.csv other.csv --out-dir report/

Every option can also come from a `key: value` config file via --config;
explicit flags win over the file, the file wins over defaults.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from . import models
from .checkpoint import load_model, save_model
from .data import load_cifar10_binary, nearest_resize, synth_task_pair
from .errors import ConfigError, SparseTrainError
from .kvfile import read_kv
from .planner import footprint_report, plan_selection, save_plan
from .pruning import assign_layer_sparsity, channel_prune, pattern_prune, sparsity_report
from .reporting import report as run_report
from .seeding import substream
from .training import MODES, BlockPruneConfig, TrainConfig, fine_tune

__all__ = ["main"]


@dataclass(frozen=True)
class _Opt:
    dest: str
    coerce: type
    default: object
    help: str
    choices: tuple | None = None
    required: bool = False


def _add_opts(sub: argparse.ArgumentParser, opts: list[_Opt]) -> None:
    sub.add_argument("--config", default=None, help="'key: value' file supplying defaults for these flags")
    for o in opts:
        sub.add_argument(
            "--" + o.dest.replace("_", "-"),
            dest=o.dest,
            type=o.coerce,
            default=None,
            choices=o.choices,
            help=f"{o.help} (default: {o.default})",
        )


def _resolve(args: argparse.Namespace, opts: list[_Opt]) -> dict:
    file_vals = read_kv(args.config) if args.config else {}
    known = {o.dest for o in opts}
    for raw_key in file_vals:
        if raw_key.replace("-", "_") not in known:
            raise ConfigError(f"unknown config key {raw_key!r}")
    merged = {}
    for o in opts:
        value = getattr(args, o.dest)
        if value is None:
            raw = file_vals.get(o.dest, file_vals.get(o.dest.replace("_", "-")))
            if raw is not None:
                try:
                    value = o.coerce(raw)
                except ValueError as exc:
                    raise ConfigError(f"config key {o.dest!r}: {exc}") from exc
                if o.choices is not None and value not in o.choices:
                    raise ConfigError(f"config key {o.dest!r}: {value!r} not in {o.choices}")
            else:
                value = o.default
        if value is None and o.required:
            raise ConfigError(f"--{o.dest.replace('_', '-')} is required")
        merged[o.dest] = value
    return merged


# --------------------------------------------------------------------------
# init

_INIT_OPTS = [
    _Opt("arch", str, "toy", "model architecture", choices=("toy", "mbv2")),
    _Opt("classes", int, None, "output classes (default: the architecture's)"),
    _Opt("input_hw", int, None, "input height/width (default: the architecture's)"),
    _Opt("width_mult", float, 1.0, "mbv2 width multiplier"),
    _Opt("seed", int, 0, "initialization seed"),
    _Opt("out", str, None, "checkpoint to write", required=True),
]


def _cmd_init(args: argparse.Namespace) -> int:
    v = _resolve(args, _INIT_OPTS)
    if v["arch"] == "toy":
        model = models.toy_cnn(v["classes"] or 4, v["input_hw"] or 16, seed=v["seed"])
    else:
        model = models.mobilenet_v2(v["classes"] or 10, v["input_hw"] or 224, v["width_mult"], seed=v["seed"])
    save_model(model, v["out"])
    print(f"wrote {v['out']}: {v['arch']}, {len(model.nodes)} nodes, {model.param_count()} parameters")
    return 0


# --------------------------------------------------------------------------
# prune

_PRUNE_OPTS = [
    _Opt("model", str, None, "input checkpoint", required=True),
    _Opt("keep_ratio", float, 1.0, "channel keep ratio; 1.0 skips channel pruning"),
    _Opt("sparsity", float, None, "global weight sparsity target; omit to skip weight pruning"),
    _Opt("report", str, None, "sparsity report CSV to write"),
    _Opt("out", str, None, "pruned checkpoint to write", required=True),
]


def _cmd_prune(args: argparse.Namespace) -> int:
    v = _resolve(args, _PRUNE_OPTS)
    model = load_model(v["model"])
    if v["keep_ratio"] < 1.0:
        model = channel_prune(model, v["keep_ratio"])
    if v["sparsity"] is not None:
        profile = assign_layer_sparsity(model, v["sparsity"])
        model = pattern_prune(model, profile)
    rep = sparsity_report(model)
    if v["report"]:
        Path(v["report"]).write_text("\n".join(rep.csv_lines()) + "\n", encoding="utf-8")
    save_model(model, v["out"])
    print(
        f"wrote {v['out']}: {rep.total_params} weights, {rep.total_zeros} zero "
        f"({rep.global_sparsity:.4f}), flops {rep.total_flops_dense} -> {rep.total_flops_masked}"
    )
    return 0


# --------------------------------------------------------------------------
# plan

_PLAN_OPTS = [
    _Opt("model", str, None, "input checkpoint", required=True),
    _Opt("budget_bytes", int, None, "training memory budget in bytes", required=True),
    _Opt("ratio", float, 0.2, "channel update ratio for trainable convs"),
    _Opt("seed", int, 0, "recorded in the plan file for schedule reproduction"),
    _Opt("out", str, None, "budget report CSV to write"),
    _Opt("plan_out", str, None, "plan file to write"),
]


def _cmd_plan(args: argparse.Namespace) -> int:
    v = _resolve(args, _PLAN_OPTS)
    model = load_model(v["model"])
    plan = plan_selection(model, v["budget_bytes"], v["ratio"])
    rep = footprint_report(model, plan)
    if v["out"]:
        Path(v["out"]).write_text("\n".join(rep.csv_lines()) + "\n", encoding="utf-8")
    if v["plan_out"]:
        save_plan(plan, v["plan_out"], budget_bytes=v["budget_bytes"], seed=v["seed"])
    n_conv = len(plan.trainable_conv_ids())
    print(f"plan: classifier + {n_conv} conv layers trainable at ratio {v['ratio']}")
    print(f"footprint: {rep.total_bytes} bytes of budget {v['budget_bytes']}")
    print(f"dense baseline: {rep.dense_total_bytes} bytes; reduction {rep.reduction_fraction:.4f}")
    print(f"activation reduction: {rep.feature_reduction_fraction:.4f}")
    print(
        f"updated weights: {rep.updated_conv_weight_fraction:.4f} of conv weights, "
        f"{rep.updated_param_fraction:.4f} of all parameters"
    )
    print(f"transient workspace (uncharged): {rep.transient_workspace_bytes} bytes")
    return 0


# --------------------------------------------------------------------------
# train

_TRAIN_OPTS = [
    _Opt("model", str, None, "input checkpoint", required=True),
    _Opt("data", str, "synth-b", "dataset", choices=("synth-a", "synth-b", "cifar10")),
    _Opt("data_dir", str, None, "directory with CIFAR-10 binary batches"),
    _Opt("n_train", int, 256, "synthetic training samples"),
    _Opt("n_val", int, 128, "synthetic validation samples"),
    _Opt("noise", float, 0.08, "synthetic pixel noise"),
    _Opt("shift", float, 0.35, "synthetic task-B signature shift"),
    _Opt("max_train", int, None, "cap on CIFAR-10 training samples"),
    _Opt("max_val", int, None, "cap on CIFAR-10 validation samples"),
    _Opt("mode", str, "dynamic", "update mode", choices=MODES),
    _Opt("epochs", int, 50, "training epochs"),
    _Opt("lr_max", float, 0.1, "peak learning rate"),
    _Opt("warmup_epochs", int, 5, "linear warmup epochs"),
    _Opt("momentum", float, 0.0, "SGD momentum"),
    _Opt("batch_size", int, 8, "samples per optimizer step"),
    _Opt("budget_bytes", int, 262144, "training memory budget (fixed/dynamic modes)"),
    _Opt("ratio", float, 0.2, "channel update ratio (fixed/dynamic modes)"),
    _Opt("stage_epochs", str, None, "dynamic mode: 'j,k,l' fixed/dynamic/fixed epoch split"),
    _Opt("reselect_every_steps", int, None, "redraw every N optimizer steps instead of per epoch"),
    _Opt("realloc_every_epochs", int, 0, "gradient-sum reallocation period; 0 disables"),
    _Opt("seed", int, 0, "run seed (batching, redraws, synthetic data)"),
    _Opt("block", int, 2, "activation pruning block size"),
    _Opt("theta", float, 0.15, "activation pruning threshold"),
    _Opt("metrics", str, None, "metrics CSV to write"),
    _Opt("checkpoint_every", int, 0, "save intermediate checkpoints every N epochs"),
    _Opt("out", str, None, "trained checkpoint to write"),
]


def _parse_stages(spec: str | None) -> tuple[int | None, int | None, int | None]:
    if spec is None:
        return None, None, None
    parts = spec.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--stage-epochs wants 'j,k,l', got {spec!r}")
    try:
        j, k, l = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"--stage-epochs wants three integers, got {spec!r}") from exc
    return j, k, l


def _load_data(v: dict, model) -> tuple:
    h, w, c = model.input_shape
    if c != 3:
        raise ConfigError(f"model expects {c} input channels; datasets here are RGB")
    if v["data"].startswith("synth"):
        pair = synth_task_pair(
            num_classes=model.num_classes,
            image_hw=h,
            n_train=v["n_train"],
            n_val=v["n_val"],
            noise=v["noise"],
            shift=v["shift"],
            seed=v["seed"],
        )
        key = "a" if v["data"] == "synth-a" else "b"
        return pair[f"{key}_train"], pair[f"{key}_val"]
    if v["data_dir"] is None:
        raise ConfigError("--data-dir is required for cifar10")
    if model.num_classes != 10:
        raise ConfigError(f"cifar10 has 10 classes; model has {model.num_classes}")
    root = Path(v["data_dir"])
    train = load_cifar10_binary([root / f"data_batch_{i}.bin" for i in range(1, 6)])
    val = load_cifar10_binary(root / "test_batch.bin")
    rng = substream(v["seed"], "data-subsample")
    if v["max_train"] is not None and v["max_train"] < len(train):
        train = train.take(rng.permutation(len(train))[: v["max_train"]])
    if v["max_val"] is not None and v["max_val"] < len(val):
        val = val.take(rng.permutation(len(val))[: v["max_val"]])
    if (h, w) != (32, 32):
        train.images = nearest_resize(train.images, h)
        val.images = nearest_resize(val.images, h)
    return train, val


def _cmd_train(args: argparse.Namespace) -> int:
    v = _resolve(args, _TRAIN_OPTS)
    model = load_model(v["model"])
    train, val = _load_data(v, model)
    head, dyn, tail = _parse_stages(v["stage_epochs"])
    cfg = TrainConfig(
        epochs=v["epochs"],
        lr_max=v["lr_max"],
        warmup_epochs=v["warmup_epochs"],
        momentum=v["momentum"],
        batch_size=v["batch_size"],
        mode=v["mode"],
        budget_bytes=v["budget_bytes"],
        ratio=v["ratio"],
        fixed_head_epochs=head,
        dynamic_epochs=dyn,
        fixed_tail_epochs=tail,
        reselect_every_steps=v["reselect_every_steps"],
        realloc_every_epochs=v["realloc_every_epochs"],
        seed=v["seed"],
        act_prune=BlockPruneConfig(v["block"], v["theta"]),
    )
    result = fine_tune(
        model,
        train.images,
        train.labels,
        cfg,
        val.images,
        val.labels,
        metrics_path=v["metrics"],
        checkpoint_every=v["checkpoint_every"],
        checkpoint_path=v["out"] if v["checkpoint_every"] else None,
    )
    if v["out"]:
        save_model(result.model, v["out"])
        print(f"wrote {v['out']}")
    train_rows = [r for r in result.rows if r.split == "train"]
    if train_rows:
        print(f"final train: loss {train_rows[-1].loss:.4f}, accuracy {train_rows[-1].accuracy:.4f}")
    val_rows = [r for r in result.rows if r.split == "val"]
    if val_rows:
        print(f"final val: loss {val_rows[-1].loss:.4f}, accuracy {val_rows[-1].accuracy:.4f}")
    print(f"charged footprint: {result.footprint_bytes} bytes; tracked peak: {result.peak_tracked_bytes} bytes")
    if v["metrics"]:
        print(f"metrics: {v['metrics']}")
    return 0


# --------------------------------------------------------------------------
# report


def _cmd_report(args: argparse.Namespace) -> int:
    summary, figures = run_report(args.metrics, args.out_dir)
    print(f"wrote {summary}")
    for p in figures:
        print(f"wrote {p}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsetrain", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("init", help="build and save a freshly initialized model")
    _add_opts(p, _INIT_OPTS)
    p.set_defaults(func=_cmd_init)

    p = subs.add_parser("prune", help="channel-prune and weight-sparsify a model")
    _add_opts(p, _PRUNE_OPTS)
    p.set_defaults(func=_cmd_prune)

    p = subs.add_parser("plan", help="select a budgeted update plan and report its footprint")
    _add_opts(p, _PLAN_OPTS)
    p.set_defaults(func=_cmd_plan)

    p = subs.add_parser("train", help="fine-tune under an update mode")
    _add_opts(p, _TRAIN_OPTS)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("report", help="summarize metrics CSVs into tables and figures")
    p.add_argument("metrics", nargs="+", help="metrics CSV files from training runs")
    p.add_argument("--out-dir", default="report", help="output directory (default: report)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SparseTrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
