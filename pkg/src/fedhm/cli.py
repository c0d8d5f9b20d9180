"""Command-line runner: ``fedhm run <config>`` and ``fedhm describe <config>``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import accounting
from . import data as datamod
from . import fedproto as fp
from . import modelspec as ms
from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .kernels import BACKEND
from .metrics import emit

log = logging.getLogger("fedhm")


# ---------------------------------------------------------------------------
# wiring


def _input_shape(cfg: ExperimentConfig, loaded: tuple | None = None) -> tuple:
    if cfg.model.input_shape is not None:
        return tuple(cfg.model.input_shape)
    if loaded is not None:
        return tuple(loaded)
    if cfg.dataset.kind == "synthetic":
        return tuple(cfg.dataset.shape)
    if cfg.model.name in ("resnet18", "resnet34"):
        return (3, 32, 32)
    raise ConfigError("model.input_shape", "required when it cannot be taken from the dataset")


def build_spec(cfg: ExperimentConfig, loaded_shape: tuple | None = None) -> ms.ModelSpec:
    m = cfg.model
    if m.spec_file:
        with open(m.spec_file) as fh:
            return ms.ModelSpec.from_dict(json.load(fh))
    shape = _input_shape(cfg, loaded_shape)
    classes = cfg.dataset.classes
    if m.name == "mlp":
        return ms.build_mlp(int(np.prod(shape)), m.hidden, classes)
    if len(shape) != 3 or shape[1] != shape[2]:
        raise ConfigError("model.input_shape", f"{m.name} needs a square (C, H, W) input, got {shape}")
    if m.name == "tiny_cnn":
        return ms.build_tiny_cnn(shape[0], classes, shape[1], tuple(m.widths))
    builder = ms.build_resnet18_cifar if m.name == "resnet18" else ms.build_resnet34_cifar
    return builder(classes, shape[0], shape[1])


def resolve_rho(cfg: ExperimentConfig, spec: ms.ModelSpec) -> int:
    h = cfg.hetero
    if h.rho is not None:
        if h.rho > spec.num_factorizable:
            raise ConfigError("hetero.rho", f"must be <= {spec.num_factorizable} for {spec.name}")
        return h.rho
    if h.factorize_stages:
        return ms.rho_for_stage(spec, min(h.factorize_stages))
    return 0


def training_spec(cfg: ExperimentConfig, spec: ms.ModelSpec) -> ms.ModelSpec:
    """The global model's architecture: slimmed for widthslim-fedavg, full otherwise."""
    if cfg.method == "widthslim-fedavg":
        return ms.width_slim(spec, cfg.hetero.slim_ratio)
    return spec


def fed_config(cfg: ExperimentConfig, spec: ms.ModelSpec) -> fp.FedConfig:
    f, o, h = cfg.federation, cfg.optim, cfg.hetero
    method = "fedavg" if cfg.method == "widthslim-fedavg" else cfg.method
    return fp.FedConfig(
        method=method,
        rounds=f.rounds,
        fraction=f.fraction,
        local_epochs=f.local_epochs,
        batch_size=f.batch_size,
        lr=o.lr,
        momentum=o.momentum,
        weight_decay=o.weight_decay,
        frobenius_decay=o.frobenius_decay,
        rank_ratios=h.rank_ratios,
        width_ratios=h.width_ratios,
        rho=resolve_rho(cfg, spec),
        factorize_stem=h.factorize_stem,
        factorize_classifier=h.factorize_classifier,
        tau=h.tau,
        schedule=h.schedule if method != "fedavg" else "fixed",
        assignment=tuple(h.assignment) if (h.assignment and method != "fedavg") else None,
        seed_sample=cfg.seeds.sample,
        seed_data=cfg.seeds.data,
        threads=int(os.environ.get("FEDHM_THREADS", "0") or 0),
        timing=cfg.timing,
    )


def load_data(cfg: ExperimentConfig) -> tuple[datamod.Dataset, datamod.Dataset]:
    d = cfg.dataset
    if d.kind == "synthetic":
        train = datamod.synth_blobs(d.classes, d.per_class, d.shape, d.noise, cfg.seeds.data, "train")
        test = datamod.synth_blobs(d.classes, d.test_per_class, d.shape, d.noise, cfg.seeds.data, "test")
    elif d.kind == "idx":
        train = datamod.load_idx(d.train_images, d.train_labels, d.classes, "train")
        test = datamod.load_idx(d.test_images, d.test_labels, d.classes, "test")
    else:
        shape = tuple(cfg.model.input_shape) if cfg.model.input_shape else None
        train = datamod.load_csv(d.train_csv, d.classes, shape, "train")
        test = datamod.load_csv(d.test_csv, d.classes, shape, "test")
    if d.normalize:
        train, test = datamod.normalize(train, test)
    return train.astype(cfg.dtype), test.astype(cfg.dtype)


def make_partition(cfg: ExperimentConfig, train: datamod.Dataset) -> datamod.Partition:
    p, P = cfg.partition, cfg.federation.clients
    if p.scheme == "iid":
        return datamod.partition_iid(len(train), P, cfg.seeds.data)
    return datamod.partition_dirichlet(train.labels, P, p.alpha, cfg.seeds.data)


@dataclass
class RunOutput:
    result: fp.RunResult
    out_dir: Path
    metrics_path: Path


def run_experiment(cfg: ExperimentConfig) -> RunOutput:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")

    train, test = load_data(cfg)
    spec = training_spec(cfg, build_spec(cfg, train.sample_shape))
    partition = make_partition(cfg, train)
    clients = [fp.Client(i, train.subset(idx)) for i, idx in enumerate(partition.indices)]
    model = ms.materialize(spec, cfg.seeds.init, dtype=np.dtype(cfg.dtype))
    fcfg = fed_config(cfg, spec)
    result = fp.server_execute(model, clients, fcfg, test)

    metrics_path = out / ("metrics.csv" if cfg.output.format == "csv" else "metrics.jsonl")
    emit(result.records, metrics_path, cfg.output.format)
    ms.save_weights(result.model, out / "final_model.bin")
    with open(out / "final_spec.json", "w") as fh:
        json.dump(result.model.spec.to_dict(), fh, indent=1)
    meta = {
        "partition": {"scheme": partition.scheme, "alpha": partition.alpha, "seed": partition.seed,
                      "sizes": partition.sizes(), **partition.meta},
        "kernel_backend": BACKEND,
    }
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    return RunOutput(result, out, metrics_path)


def describe_config(cfg: ExperimentConfig) -> dict:
    """Accounting report for every capability level; no data is loaded and nothing is trained."""
    spec = build_spec(cfg)
    shape = spec.input_shape
    full_params = accounting.count_params(spec)
    levels = []

    def entry(label, ratio, s):
        levels.append({
            "level": label,
            "ratio": ratio,
            "params": accounting.count_params(s),
            "macs": accounting.count_macs(s, shape),
            "bytes_per_transfer": accounting.comm_bytes(s),
            "compression": accounting.count_params(s) / full_params,
        })

    entry("full", 1.0, spec)
    if cfg.method == "fedhm":
        rho = resolve_rho(cfg, spec)
        for r in cfg.hetero.rank_ratios:
            hybrid = spec if r == 1.0 else ms.make_hybrid(
                spec, ms.HybridPlan(rho, r, cfg.hetero.factorize_stem, cfg.hetero.factorize_classifier))
            entry(f"rank {r:g}", r, hybrid)
    elif cfg.method == "heterofl-channel":
        for w in cfg.hetero.width_ratios:
            entry(f"width {w:g}", w, ms.width_slim(spec, w))
    elif cfg.method == "widthslim-fedavg":
        entry(f"width {cfg.hetero.slim_ratio:g}", cfg.hetero.slim_ratio, ms.width_slim(spec, cfg.hetero.slim_ratio))
    return {"model": spec.name, "input_shape": list(shape), "full_params": full_params, "levels": levels}


def format_report(report: dict) -> str:
    lines = [f"model {report['model']}  input {tuple(report['input_shape'])}  "
             f"full params {report['full_params']:,} ({report['full_params'] / 1e6:.2f}M)"]
    lines.append(f"{'level':<14}{'params':>14}{'MACs':>16}{'bytes/transfer':>16}{'ratio':>9}")
    for lv in report["levels"]:
        lines.append(f"{lv['level']:<14}{lv['params']:>14,}{lv['macs']:>16,}{lv['bytes_per_transfer']:>16,}"
                     f"{lv['compression']:>9.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedhm", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "train and write metrics"), ("describe", "print parameter/MAC/communication accounting")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed-init", type=int)
        p.add_argument("--seed-sample", type=int)
        p.add_argument("--seed-data", type=int)
        p.add_argument("--format", choices=("csv", "jsonl"))
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.out:
        cfg.output.dir = args.out
    if args.seed_init is not None:
        cfg.seeds.init = args.seed_init
    if args.seed_sample is not None:
        cfg.seeds.sample = args.seed_sample
    if args.seed_data is not None:
        cfg.seeds.data = args.seed_data
    if args.format:
        cfg.output.format = args.format
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(parse_config(args.config), args)
        if args.command == "describe":
            print(format_report(describe_config(cfg)))
            return 0
        out = run_experiment(cfg)
        final = [r for r in out.result.records if r.level == 0]
        if final:
            print(f"final global top-1 {final[-1].acc_top1:.4f}; metrics in {out.metrics_path}")
        else:
            print(f"no rounds run; outputs in {out.out_dir}")
        return 0
    except (ConfigError, ms.SpecError, datamod.FormatError, fp.RoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
