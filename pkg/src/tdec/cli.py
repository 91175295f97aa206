"""Command-line driver: config parsing, run orchestration, checkpoint
persistence, and CSV report emission.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import struct
import sys
from pathlib import Path

import numpy as np

from .data import Dataset, BlobSpec, circle_means, load_csv, load_idx, \
    make_blobs, resize_dataset
from .diffcore import AdamState, Tensor
from .metrics import accuracy, nmi
from .model import Network, PatchGrid
from .trainer import (RunConfig, TrainingDiverged, TrainReport,
                      apply_ablation, build_network, embed_dataset, pretrain,
                      train)
from . import cluster_head

CHECKPOINT_MAGIC = b"TDECCKPT"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "iter,loss_total,loss_rec,loss_dim,loss_clu,label_change,acc,nmi"


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 1."""


def fmt(x) -> str:
    """17 significant digits: floats survive a parse round trip."""
    if x is None:
        return ""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# configuration files


CONFIG_DEFAULTS = {
    "alpha": 0.1,
    "beta": 0.001,
    "k": 50,
    "neighbor_fraction": 0.02,
    "epsilon": 0.001,
    "lr": 0.01,
    "batch": 256,
    "pretrain_epochs": 200,
    "max_iter": 500,
    "seed": 0,
    "perplexity": "auto",
    "use_transformer": True,
    "use_clustering_head": True,
    "use_dim_reduction": True,
}

DATASET_KEYS = {
    "dataset", "idx_images", "idx_labels", "csv_path", "csv_channels",
    "csv_height", "csv_width", "blob_per_cluster", "blob_clusters",
    "blob_sigma", "blob_dim", "blob_separation", "blob_seed",
    "resize_height", "resize_width", "n_clusters",
}


def parse_config_file(path) -> dict:
    """One ``key = value`` per line; ``#`` starts a comment; unknown keys fail."""
    raw = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_DEFAULTS and key not in DATASET_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key '{key}'")
        if key in raw:
            raise UsageError(f"{path}:{lineno}: duplicate key '{key}'")
        raw[key] = value
    return raw


def _parse_bool(key, value):
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"key '{key}': expected true/false, got '{value}'")


def build_run_config(raw: dict, seed_override=None) -> RunConfig:
    if "n_clusters" not in raw and raw.get("dataset") != "blobs":
        raise UsageError("config is missing required key 'n_clusters'")
    values = {}
    for key, default in CONFIG_DEFAULTS.items():
        if key not in raw:
            values[key] = default
            continue
        text = raw[key]
        if isinstance(default, bool):
            values[key] = _parse_bool(key, text)
        elif key == "perplexity":
            values[key] = text
        elif isinstance(default, int):
            try:
                values[key] = int(text)
            except ValueError:
                raise UsageError(f"key '{key}': expected integer, got '{text}'")
        else:
            try:
                values[key] = float(text)
            except ValueError:
                raise UsageError(f"key '{key}': expected number, got '{text}'")
    perplexity = values.pop("perplexity")
    if isinstance(perplexity, str) and perplexity.lower() == "auto":
        perplexity_value = None
    else:
        try:
            perplexity_value = float(perplexity)
        except ValueError:
            raise UsageError(
                f"key 'perplexity': expected number or 'auto', got '{perplexity}'")
    n_clusters = int(raw.get("n_clusters", raw.get("blob_clusters", 0)))
    if seed_override is not None:
        values["seed"] = seed_override
    try:
        config = RunConfig(n_clusters=n_clusters, perplexity=perplexity_value,
                           **values)
        config.validate()
    except ValueError as err:
        raise UsageError(str(err))
    return config


def load_dataset(raw: dict) -> Dataset:
    kind = raw.get("dataset")
    if kind is None:
        raise UsageError("config is missing required key 'dataset'")
    if kind == "idx":
        if "idx_images" not in raw:
            raise UsageError("config is missing required key 'idx_images'")
        dataset = load_idx(raw["idx_images"], raw.get("idx_labels"))
    elif kind == "csv":
        for key in ("csv_path", "csv_channels", "csv_height", "csv_width"):
            if key not in raw:
                raise UsageError(f"config is missing required key '{key}'")
        dataset = load_csv(raw["csv_path"], int(raw["csv_channels"]),
                           int(raw["csv_height"]), int(raw["csv_width"]))
    elif kind == "blobs":
        for key in ("blob_per_cluster", "blob_clusters"):
            if key not in raw:
                raise UsageError(f"config is missing required key '{key}'")
        clusters = int(raw["blob_clusters"])
        spec = BlobSpec(
            per_cluster=int(raw["blob_per_cluster"]),
            clusters=clusters,
            means=circle_means(clusters, float(raw.get("blob_separation", 2.0))),
            sigma=float(raw.get("blob_sigma", 0.1)),
            lift_dim=int(raw.get("blob_dim", 256)),
            seed=int(raw.get("blob_seed", raw.get("seed", 0))),
        )
        dataset = make_blobs(spec)
    else:
        raise UsageError(f"key 'dataset': unknown kind '{kind}'")
    if "resize_height" in raw or "resize_width" in raw:
        for key in ("resize_height", "resize_width"):
            if key not in raw:
                raise UsageError(f"config is missing required key '{key}'")
        dataset = resize_dataset(dataset, int(raw["resize_height"]),
                                 int(raw["resize_width"]))
    return dataset


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state_to_json(rng) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def save_checkpoint(path, net: Network, config: RunConfig, rng,
                    train_state: TrainReport | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, little-endian f64 data."""
    tensors = [(name, net.params[name].values) for name in sorted(net.params)]
    extras = {}
    if train_state is not None and train_state.adam is not None:
        adam = train_state.adam
        for name in sorted(adam.first_moment):
            tensors.append((f"adam.m.{name}", adam.first_moment[name]))
            tensors.append((f"adam.v.{name}", adam.second_moment[name]))
        extras["adam_step_count"] = adam.step_count
        extras["iteration"] = train_state.iteration
        if train_state.prev_labels is not None:
            tensors.append(("state.prev_labels",
                            train_state.prev_labels.astype(np.float64)))
        if train_state.prev_centers is not None:
            tensors.append(("state.prev_centers", train_state.prev_centers))
    header = {
        "config": dataclasses.asdict(config),
        "arch": {
            "channels": net.grid.channels,
            "height": net.grid.height,
            "width": net.grid.width,
            "embed_dim": net.embed_dim,
            "enc_blocks": net.enc_blocks,
            "dec_blocks": net.dec_blocks,
        },
        "rng_state": _rng_state_to_json(rng),
        "tensors": [{"name": name, "shape": list(np.shape(arr))}
                    for name, arr in tensors],
        "extras": extras,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class Checkpoint:
    def __init__(self, header, arrays):
        self.header = header
        self.arrays = arrays

    @property
    def config(self) -> RunConfig:
        cfg = dict(self.header["config"])
        return RunConfig(**cfg)

    def network(self) -> Network:
        arch = self.header["arch"]
        grid = PatchGrid(arch["channels"], arch["height"], arch["width"])
        params = {name: Tensor(arr) for name, arr in self.arrays.items()
                  if not name.startswith(("adam.", "state."))}
        return Network(grid, embed_dim=arch["embed_dim"],
                       enc_blocks=arch["enc_blocks"],
                       dec_blocks=arch["dec_blocks"], params=params)

    def rng(self):
        rng = np.random.default_rng(0)
        rng.bit_generator.state = self.header["rng_state"]
        return rng

    def train_state(self) -> TrainReport | None:
        extras = self.header.get("extras") or {}
        if "adam_step_count" not in extras:
            return None
        first, second = {}, {}
        for name, arr in self.arrays.items():
            if name.startswith("adam.m."):
                first[name[len("adam.m."):]] = arr
            elif name.startswith("adam.v."):
                second[name[len("adam.v."):]] = arr
        state = TrainReport()
        state.adam = AdamState(first, second, extras["adam_step_count"])
        state.iteration = extras["iteration"]
        if "state.prev_labels" in self.arrays:
            state.prev_labels = self.arrays["state.prev_labels"].astype(np.int64)
        if "state.prev_centers" in self.arrays:
            state.prev_centers = self.arrays["state.prev_centers"]
        return state


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise UsageError(f"cannot read checkpoint {path}: {err}")
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or \
            not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<IQ", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {version}, "
            f"expected {CHECKPOINT_VERSION}")
    offset += 12
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ValueError(f"{path}: corrupt checkpoint header: {err}")
    offset += header_len
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated checkpoint data")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(header, arrays)


# ---------------------------------------------------------------------------
# output files


def _prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    if out.exists():
        if not out.is_dir():
            raise UsageError(f"--out {out} is not a directory")
        if any(out.iterdir()) and not force:
            raise UsageError(
                f"--out {out} is not empty; pass --force to reuse it")
    else:
        out.mkdir(parents=True)
    return out


def write_metrics_csv(path, records) -> None:
    lines = [METRICS_HEADER]
    for r in records:
        lines.append(",".join([
            str(r.iteration), fmt(r.loss_total), fmt(r.loss_rec),
            fmt(r.loss_dim), fmt(r.loss_clu), fmt(r.label_change),
            fmt(r.acc), fmt(r.nmi),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_labels_csv(path, labels) -> None:
    lines = ["index,label"]
    lines += [f"{i},{int(label)}" for i, label in enumerate(labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_embeddings_csv(path, z_v, labels=None) -> None:
    lines = ["index,z1,z2,label"]
    for i, row in enumerate(z_v):
        label = "" if labels is None else str(int(labels[i]))
        lines.append(f"{i},{fmt(row[0])},{fmt(row[1])},{label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def _load_run_inputs(args):
    raw = parse_config_file(args.config)
    config = build_run_config(raw, seed_override=args.seed)
    dataset = load_dataset(raw)
    if config.n_clusters > len(dataset):
        raise UsageError(
            f"n_clusters={config.n_clusters} exceeds dataset size {len(dataset)}")
    return raw, config, dataset


def _grid_for(dataset) -> PatchGrid:
    c, h, w = dataset.shape
    return PatchGrid(c, h, w)


def cmd_pretrain(args) -> int:
    _, config, dataset = _load_run_inputs(args)
    out = _prepare_out_dir(args.out, args.force)
    rng = np.random.default_rng(config.seed)
    net = build_network(config, _grid_for(dataset), rng)
    pretrain(net, dataset, config, rng)
    save_checkpoint(out / "checkpoint.tdec", net, config, rng)
    print(f"pretrained {config.pretrain_epochs} epochs -> "
          f"{out / 'checkpoint.tdec'}")
    return 0


def cmd_train(args) -> int:
    _, config, dataset = _load_run_inputs(args)
    out = _prepare_out_dir(args.out, args.force)
    resume = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        net = ckpt.network()
        rng = ckpt.rng()
        resume = ckpt.train_state()
    else:
        rng = np.random.default_rng(config.seed)
        net = build_network(config, _grid_for(dataset), rng)
        pretrain(net, dataset, config, rng)
    report = train(net, dataset, config, rng, truth=dataset.labels,
                   resume=resume)
    write_metrics_csv(out / "metrics.csv", report.records)
    write_labels_csv(out / "labels.csv", report.labels)
    save_checkpoint(out / "checkpoint.tdec", net, config, rng,
                    train_state=report)
    last = report.records[-1] if report.records else None
    if last is not None and last.acc is not None:
        print(f"trained {len(report.records)} iteration(s), "
              f"acc={last.acc:.4f} nmi={last.nmi:.4f}")
    else:
        print(f"trained {len(report.records)} iteration(s)")
    return 0


def _embed_from_checkpoint(args, need_labels: bool):
    raw = parse_config_file(args.config)
    dataset = load_dataset(raw)
    if need_labels and dataset.labels is None:
        raise UsageError("this command needs a dataset with truth labels")
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.network()
    config = ckpt.config
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return dataset, net, config


def cmd_eval(args) -> int:
    dataset, net, config = _embed_from_checkpoint(args, need_labels=True)
    labels = _head_labels(net, dataset, config, config.k)
    print(f"acc={accuracy(labels, dataset.labels):.6f} "
          f"nmi={nmi(labels, dataset.labels):.6f}")
    return 0


def _head_labels(net, dataset, config, k):
    variant = apply_ablation(config)
    rng = np.random.default_rng(config.seed)
    from .trainer import _assignment_pass  # internal reuse
    cfg = dataclasses.replace(config, k=k)
    _, _, _, _, _, labels = _assignment_pass(
        net, dataset, cfg, variant, rng, None, None)
    return labels


def cmd_embed(args) -> int:
    dataset, net, config = _embed_from_checkpoint(args, need_labels=False)
    out = _prepare_out_dir(args.out, args.force)
    _, z_v = embed_dataset(net, dataset.images, config.batch)
    write_embeddings_csv(out / "embeddings.csv", z_v, dataset.labels)
    print(f"wrote {len(dataset)} embeddings -> {out / 'embeddings.csv'}")
    return 0


def cmd_sweep_k(args) -> int:
    dataset, net, config = _embed_from_checkpoint(args, need_labels=False)
    out = _prepare_out_dir(args.out, args.force)
    try:
        k_values = [int(tok) for tok in args.list.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"--list: expected comma-separated integers, got "
                         f"'{args.list}'")
    if not k_values:
        raise UsageError("--list: no k values given")
    lines = ["k,acc,nmi"]
    for k in k_values:
        if k < 0:
            raise UsageError(f"--list: k must be >= 0, got {k}")
        labels = _head_labels(net, dataset, config, k)
        if dataset.labels is not None:
            lines.append(f"{k},{fmt(accuracy(labels, dataset.labels))},"
                         f"{fmt(nmi(labels, dataset.labels))}")
        else:
            lines.append(f"{k},,")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"swept {len(k_values)} k value(s) -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tdec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, checkpoint=False, need_config=True):
        p.add_argument("--config", required=need_config,
                       help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="allow a nonempty output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint file to load")

    p = sub.add_parser("pretrain", help="structure-loss pretraining")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="pretrain (or resume) plus joint training")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="start from this checkpoint instead of pretraining")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print ACC/NMI for a checkpoint")
    common(p, out=False, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="write clustering-space embeddings CSV")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("sweep-k", help="evaluate a trained model over several k")
    common(p, checkpoint=True)
    p.add_argument("--list", required=True,
                   help="comma-separated neighbor counts, e.g. 0,10,50")
    p.set_defaults(func=cmd_sweep_k)
    return parser


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingDiverged, ValueError, OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2
