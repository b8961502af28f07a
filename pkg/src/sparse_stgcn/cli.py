"""Command-line interface: synth, train, eval, assemble, report.

Every command resolves its configuration from built-in defaults, an
optional YAML config file, and command-line flags (flags win), then
writes the fully resolved configuration beside its outputs so a run
directory is self-describing.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
error, 3 invariant violation during training.
"""

from __future__ import annotations

import argparse
import copy
import os
import sys

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    MODALITIES,
    ParseError,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .ensemble import (
    EnsembleSpecError,
    assemble_predict,
    confidence_report,
    load_members,
    load_spec,
    member_probabilities,
    param_fraction,
)
from .graph import GraphError, build_graph, human17_parents
from .masks import MaskSet, sparsity_report
from .network import NetConfig, STGCNNetwork
from .seeding import stream_rng
from .training import MODES, SCORE_INITS, InvariantError, TrainConfig, train

__all__ = ["main", "ConfigError", "DEFAULTS"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3


class ConfigError(ValueError):
    """A configuration file or flag combination is invalid."""


DEFAULTS = {
    "net": {
        "channels": [32, 32, 64, 64],
        "temporal_half_window": 3,
        "residual": True,
        "adjacency": "normalized",
        "parents": None,  # parent joint per joint; None picks a default tree
    },
    "train": {
        "mode": "dense",
        "epochs": 100,
        "warmup_epochs": None,
        "lr0": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "batch_size": 32,
        "lam": 1.0,
        "sparsity": 0.0,
        "seed": 0,
        "score_init": "magnitude",
        "window": 64,
    },
    "data": {
        "train_path": None,
        "test_path": None,
        "num_classes": 8,
        "samples_per_class": 100,
        "test_samples_per_class": None,
        "num_joints": 17,
        "window": 64,
        "noise_sigma": 0.1,
        "coords": 3,
        "seed": 0,
    },
}


# ---------------------------------------------------------------------------
# configuration plumbing


def load_config(path=None) -> dict:
    """Defaults overlaid with a YAML file; unknown sections or keys fail."""
    config = copy.deepcopy(DEFAULTS)
    if path is None:
        return config
    with open(path, "r", encoding="utf-8") as fh:
        loaded = yaml.safe_load(fh)
    if loaded is None:
        return config
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    for section, values in loaded.items():
        if section not in config:
            raise ConfigError(
                f"{path}: unknown section {section!r} "
                f"(expected one of {sorted(config)})"
            )
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in config[section]:
                raise ConfigError(
                    f"{path}: unknown key {section}.{key} "
                    f"(expected one of {sorted(config[section])})"
                )
            config[section][key] = value
    return config


def _apply_flag_overrides(config: dict, args, flag_map) -> None:
    """Copy explicitly given flags (non-None) into the config dict."""
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            config[section][key] = value


def _write_resolved(out_dir, command: str, config: dict, run: dict) -> None:
    resolved = copy.deepcopy(config)
    resolved["run"] = {"command": command, **run}
    path = os.path.join(out_dir, "config.yaml")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)


def _default_parents(num_joints: int) -> dict[int, int]:
    """The 17-joint human tree when it fits, else a simple chain."""
    if num_joints == 17:
        return human17_parents()
    return {i: max(i - 1, 0) for i in range(num_joints)}


def _build_graph(num_joints: int, parents_cfg):
    if parents_cfg is None:
        return build_graph(_default_parents(num_joints))
    parents = {i: int(p) for i, p in enumerate(parents_cfg)}
    if len(parents) != num_joints:
        raise ConfigError(
            f"net.parents lists {len(parents)} joints, data has {num_joints}"
        )
    return build_graph(parents)


def _net_config(config: dict, num_classes: int, num_joints: int, coords: int):
    net_cfg = config["net"]
    return NetConfig(
        num_classes=num_classes,
        num_joints=num_joints,
        in_channels=coords,
        channels=tuple(int(c) for c in net_cfg["channels"]),
        temporal_half_window=int(net_cfg["temporal_half_window"]),
        residual=bool(net_cfg["residual"]),
        adjacency=str(net_cfg["adjacency"]),
    )


def _load_split(path, split: str):
    if path is None:
        raise ConfigError(f"no {split} dataset given (flag or data.{split}_path)")
    return load_dataset(path, split)


def _shape_of(dataset):
    """(num_joints, coords) from the first sequence."""
    seq = dataset.sequences[0]
    return seq.features.shape[0], seq.features.shape[2]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    config = load_config(args.config)
    _apply_flag_overrides(
        config,
        args,
        {
            "num_classes": ("data", "num_classes"),
            "samples_per_class": ("data", "samples_per_class"),
            "test_samples_per_class": ("data", "test_samples_per_class"),
            "num_joints": ("data", "num_joints"),
            "window": ("data", "window"),
            "noise_sigma": ("data", "noise_sigma"),
            "coords": ("data", "coords"),
            "seed": ("data", "seed"),
        },
    )
    d = config["data"]
    train_set, test_set = synth_dataset(
        num_classes=int(d["num_classes"]),
        samples_per_class=int(d["samples_per_class"]),
        num_joints=int(d["num_joints"]),
        window_T=int(d["window"]),
        noise_sigma=float(d["noise_sigma"]),
        seed=int(d["seed"]),
        coords=int(d["coords"]),
        test_samples_per_class=(
            None
            if d["test_samples_per_class"] is None
            else int(d["test_samples_per_class"])
        ),
    )
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.skel")
    test_path = os.path.join(args.out, "test.skel")
    save_dataset(train_path, train_set)
    save_dataset(test_path, test_set)
    manifest = os.path.join(args.out, "manifest.txt")
    with open(manifest, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"seed {int(d['seed'])}\n")
        fh.write(f"num_classes {int(d['num_classes'])}\n")
        fh.write(f"train_samples {len(train_set.sequences)}\n")
        fh.write(f"test_samples {len(test_set.sequences)}\n")
        fh.write(f"num_joints {int(d['num_joints'])}\n")
        fh.write(f"window {int(d['window'])}\n")
        fh.write(f"noise_sigma {format(float(d['noise_sigma']), '.17g')}\n")
        fh.write(f"coords {int(d['coords'])}\n")
        fh.write("train_file train.skel\n")
        fh.write("test_file test.skel\n")
    _write_resolved(args.out, "synth", config, {"out": os.path.abspath(args.out)})
    print(f"wrote {train_path} ({len(train_set.sequences)} sequences)")
    print(f"wrote {test_path} ({len(test_set.sequences)} sequences)")
    return EXIT_OK


_TRAIN_FLAG_MAP = {
    "mode": ("train", "mode"),
    "sparsity": ("train", "sparsity"),
    "lam": ("train", "lam"),
    "warmup_epochs": ("train", "warmup_epochs"),
    "seed": ("train", "seed"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr0": ("train", "lr0"),
    "momentum": ("train", "momentum"),
    "weight_decay": ("train", "weight_decay"),
    "score_init": ("train", "score_init"),
    "window": ("train", "window"),
    "data": ("data", "train_path"),
    "test_data": ("data", "test_path"),
}

# flags that contradict a mode: dense has no sparsity machinery at all,
# mask learning has no warm-up stage or group penalty
_MODE_CONFLICTS = {
    "dense": ("sparsity", "lam", "warmup_epochs"),
    "lth": ("lam", "warmup_epochs"),
    "generator": (),
}

_FLAG_NAMES = {"sparsity": "--sparsity", "lam": "--lambda", "warmup_epochs": "--warmup-epochs"}


def _check_mode_conflicts(mode: str, args) -> None:
    for attr in _MODE_CONFLICTS.get(mode, ()):
        if getattr(args, attr, None) is not None:
            raise ConfigError(
                f"--mode {mode} conflicts with {_FLAG_NAMES[attr]}"
            )


def cmd_train(args) -> int:
    config = load_config(args.config)
    mode = args.mode if args.mode is not None else config["train"]["mode"]
    _check_mode_conflicts(mode, args)
    _apply_flag_overrides(config, args, _TRAIN_FLAG_MAP)
    t = config["train"]
    window = int(t.pop("window"))
    train_config = TrainConfig(
        epochs=int(t["epochs"]),
        warmup_epochs=(
            None if t["warmup_epochs"] is None else int(t["warmup_epochs"])
        ),
        lr0=float(t["lr0"]),
        momentum=float(t["momentum"]),
        weight_decay=float(t["weight_decay"]),
        batch_size=int(t["batch_size"]),
        lam=float(t["lam"]),
        sparsity=float(t["sparsity"]),
        seed=int(t["seed"]),
        mode=str(t["mode"]),
        score_init=str(t["score_init"]),
    )
    t["window"] = window  # restore for provenance
    train_set = _load_split(config["data"]["train_path"], "train")
    test_set = _load_split(config["data"]["test_path"], "test")
    num_joints, coords = _shape_of(train_set)
    graph = _build_graph(num_joints, config["net"]["parents"])
    net_config = _net_config(config, train_set.num_classes, num_joints, coords)
    net = STGCNNetwork(net_config, graph, stream_rng(train_config.seed, "init"))
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(
        args.out,
        "train",
        config,
        {"out": os.path.abspath(args.out)},
    )
    net, mask, log = train(
        train_set, test_set, net, train_config, window=window, out_dir=args.out
    )
    print(f"mode {train_config.mode}")
    if mask is not None:
        report = sparsity_report(mask, net.registry())
        print(report.lines()[-1])
    print(f"final_test_acc {format(log.final_test_acc, '.17g')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    dataset = _load_split(args.data, "test")
    num_joints, coords = _shape_of(dataset)
    graph = _build_graph(num_joints, config["net"]["parents"])
    net_config = _net_config(config, dataset.num_classes, num_joints, coords)
    net = STGCNNetwork(net_config, graph, stream_rng(0, "init"))
    mask = load_checkpoint(args.checkpoint, net)
    if args.ignore_mask:
        mask = None
    probs = member_probabilities(
        net, mask, dataset, graph, args.modality,
        window=args.window, batch_size=args.batch_size,
    )
    labels = np.array([s.label for s in dataset.sequences])
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    os.makedirs(args.out, exist_ok=True)
    confidence_report(probs).save(os.path.join(args.out, "confidence.csv"))
    _write_resolved(
        args.out,
        "eval",
        config,
        {
            "checkpoint": os.path.abspath(args.checkpoint),
            "data": os.path.abspath(args.data),
            "ignore_mask": bool(args.ignore_mask),
            "modality": args.modality,
            "window": args.window,
            "batch_size": args.batch_size,
            "out": os.path.abspath(args.out),
        },
    )
    print(f"top1 {format(accuracy, '.17g')}")
    return EXIT_OK


def cmd_assemble(args) -> int:
    config = load_config(args.config)
    spec = load_spec(args.spec)
    dataset = _load_split(args.data, "test")
    num_joints, coords = _shape_of(dataset)
    graph = _build_graph(num_joints, config["net"]["parents"])
    net_config = _net_config(config, dataset.num_classes, num_joints, coords)
    members = load_members(spec, net_config, graph)
    labels = np.array([s.label for s in dataset.sequences])
    for i, lm in enumerate(members):
        probs = member_probabilities(
            lm.net, lm.mask, dataset, graph, lm.member.modality,
            window=args.window, batch_size=args.batch_size,
        )
        acc = float(np.mean(probs.argmax(axis=1) == labels))
        print(
            f"member {i} top1 {format(acc, '.17g')} "
            f"sparsity {format(lm.member.sparsity, '.17g')} "
            f"modality {lm.member.modality}"
        )
    probs = assemble_predict(
        members, dataset, graph, window=args.window, batch_size=args.batch_size
    )
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    fraction = param_fraction(members)
    os.makedirs(args.out, exist_ok=True)
    confidence_report(probs).save(os.path.join(args.out, "report.csv"))
    _write_resolved(
        args.out,
        "assemble",
        config,
        {
            "spec": os.path.abspath(args.spec),
            "data": os.path.abspath(args.data),
            "window": args.window,
            "batch_size": args.batch_size,
            "out": os.path.abspath(args.out),
        },
    )
    print(f"ensemble top1 {format(accuracy, '.17g')}")
    print(f"param_fraction {format(fraction, '.17g')}")
    return EXIT_OK


def cmd_report(args) -> int:
    config = load_config(args.config)
    num_joints = int(args.num_joints)
    coords = int(args.coords)
    num_classes = int(args.num_classes)
    graph = _build_graph(num_joints, config["net"]["parents"])
    net_config = _net_config(config, num_classes, num_joints, coords)
    net = STGCNNetwork(net_config, graph, stream_rng(0, "init"))
    mask = load_checkpoint(args.checkpoint, net)
    if mask is None:
        mask = MaskSet.from_entries(
            [
                (e.name, np.ones(e.tensor.shape, dtype=bool))
                for e in net.registry().maskable()
            ],
            0.0,
        )
        print("no mask section: dense checkpoint, all parameters kept")
    for line in sparsity_report(mask, net.registry()).lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sparse-stgcn",
        description=(
            "Sparse spatial-temporal graph convolution networks for "
            "skeleton action recognition."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic skeleton dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument(
        "--test-samples-per-class", type=int, dest="test_samples_per_class"
    )
    p.add_argument("--num-joints", type=int, dest="num_joints")
    p.add_argument("--window", type=int, help="frames per sequence")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--coords", type=int, help="coordinates per joint")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", help="training dataset (.skel)")
    p.add_argument("--test-data", dest="test_data", help="test dataset (.skel)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--lambda", type=float, dest="lam", help="group penalty weight")
    p.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr0", type=float, help="initial learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--score-init", choices=SCORE_INITS, dest="score_init")
    p.add_argument("--window", type=int, help="training crop window")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation dataset (.skel)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML config file")
    p.add_argument(
        "--ignore-mask", action="store_true", dest="ignore_mask",
        help="evaluate the dense weights, ignoring any stored mask",
    )
    p.add_argument("--modality", choices=MODALITIES, default="j")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("assemble", help="evaluate a multi-member assembly")
    p.add_argument("--spec", required=True, help="assembly description file")
    p.add_argument("--data", required=True, help="evaluation dataset (.skel)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=256)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("report", help="print kept-parameter counts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--num-classes", type=int, dest="num_classes", required=True)
    p.add_argument("--num-joints", type=int, dest="num_joints", default=17)
    p.add_argument("--coords", type=int, default=3)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ParseError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, EnsembleSpecError, GraphError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
