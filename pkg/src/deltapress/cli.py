"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
Settings resolve as flags > ``--config`` JSON file > defaults, and the
effective settings are echoed into every report.
"""

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .artifact import (
    ArtifactError,
    CompressConfig,
    compress_checkpoint,
    decode_deltas,
    default_threads,
    load_manifest,
    reconstruct_checkpoint,
)
from .bench import BenchSpec, report_csv, run_bench
from .merge import MergeConfig, PreSparsify, deltas_from_checkpoints, merge_with_presparsify
from .quant import HessianError, QuantConfig, UnreachableRatioError
from .svd import RankUnderflowError, SvdError
from .tensor_store import (
    ContainerError,
    ShapeMismatchError,
    TensorContainer,
    compute_delta,
    passthrough_names,
    read_container,
    write_container,
)

log = logging.getLogger("deltapress")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "method": "impart",
    "alpha": None,
    "cr": None,
    "cr_qt": None,
    "beta": 0.6,
    "C": 1.0,
    "group_bits": "2:8,32:3,rest:2",
    "blocksize": 128,
    "damp": 0.01,
    "seed_salt": "",
    "include": None,
    "strategy": "ta",
    "lam": 1.0,
    "retain": 1.0,
    "pre_sparsify": "none",
}


class ConfigError(ValueError):
    pass


def parse_group_bits(text: str) -> tuple:
    groups = []
    for part in text.split(","):
        count, _, bits = part.partition(":")
        if not bits:
            raise ConfigError(f"bad group spec {part!r}; expected count:bits")
        groups.append((None if count == "rest" else int(count), int(bits)))
    return tuple(groups)


def effective_config(args, keys) -> dict:
    cfg = {k: DEFAULTS.get(k) for k in keys}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k in cfg})
    for k in keys:
        value = getattr(args, k, None)
        if value is not None:
            cfg[k] = value
    return cfg


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _threads(args) -> int:
    return args.threads or default_threads()


# -- commands -------------------------------------------------------------------


def cmd_delta(args) -> int:
    base, ft = read_container(args.base), read_container(args.finetuned)
    deltas = compute_delta(base, ft, args.include)
    tensors = {d.name: d.data for d in deltas}
    dtypes = {d.name: "f32" for d in deltas}
    for name in passthrough_names(ft, args.include):
        tensors[name] = ft.get(name)
        dtypes[name] = ft.dtype(name)
    digest = write_container(args.out, tensors, dtypes)
    log.info("wrote %d deltas to %s (sha256 %s)", len(deltas), args.out, digest[:12])
    return EXIT_OK


def build_compress_config(cfg: dict) -> CompressConfig:
    try:
        quant = QuantConfig(parse_group_bits(cfg["group_bits"]), int(cfg["blocksize"]), float(cfg["damp"]))
        return CompressConfig(
            method=cfg["method"],
            alpha=cfg["alpha"],
            cr=cfg["cr"],
            cr_qt=cfg["cr_qt"],
            beta=float(cfg["beta"]),
            C=float(cfg["C"]),
            quant=quant,
            seed_salt=cfg["seed_salt"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_compress(args) -> int:
    keys = ("method", "alpha", "cr", "cr_qt", "beta", "C", "group_bits", "blocksize", "damp", "seed_salt", "include")
    cfg = effective_config(args, keys)
    ccfg = build_compress_config(cfg)
    if args.delta:
        base, ft = None, read_container(args.delta)
    elif args.base and args.finetuned:
        base, ft = read_container(args.base), read_container(args.finetuned)
    else:
        raise ConfigError("compress needs --delta or both --base and --finetuned")
    calibration = None
    if args.calibration:
        calibration = read_container(args.calibration).tensors()
    data, report = compress_checkpoint(base, ft, ccfg, cfg["include"], calibration, _threads(args))
    Path(args.out).write_bytes(data)
    report["effective_config"] = cfg
    _write_json(args.report, report)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    artifact, base = read_container(args.artifact), read_container(args.base)
    if load_manifest(artifact)["base_digest"] is None:
        log.warning("artifact was built from a bare delta; no base digest to check")
    tensors, dtypes = reconstruct_checkpoint(artifact, base, force=args.force)
    write_container(args.out, tensors, dtypes)
    return EXIT_OK


def _load_model_delta(path, base: TensorContainer) -> dict:
    container = read_container(path)
    if "manifest" in container.metadata:
        return decode_deltas(container)
    return deltas_from_checkpoints(base.tensors(), [container.tensors()])[0]


def cmd_merge(args) -> int:
    cfg = effective_config(args, ("strategy", "lam", "retain", "pre_sparsify", "seed_salt"))
    try:
        mcfg = MergeConfig(cfg["strategy"], float(cfg["lam"]), float(cfg["retain"]),
                           PreSparsify.parse(cfg["pre_sparsify"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    base = read_container(args.base)
    deltas = [_load_model_delta(p, base) for p in args.models]
    merged = merge_with_presparsify(base.tensors(), deltas, mcfg, salt=cfg["seed_salt"] or "merge")
    write_container(args.out, merged, base.dtypes())
    if args.report:
        _write_json(args.report, {"schema_version": 1, "effective_config": cfg, "models": list(args.models)})
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        spec = BenchSpec.from_dict(json.loads(Path(args.spec).read_text()) if args.spec else {})
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad bench spec: {exc}") from exc
    report = run_bench(spec)
    _write_json(args.out, report)
    if args.csv:
        Path(args.csv).write_text(report_csv(report))
    return EXIT_OK


def cmd_stats(args) -> int:
    container = read_container(args.path)
    tensors = [{"name": n, "dtype": container.dtype(n), "shape": list(container.shape(n)),
                "bytes": len(container.raw(n))} for n in container.names]
    out = {"path": str(args.path), "tensors": tensors, "payload_bytes": len(container.payload)}
    manifest = container.metadata.get("manifest")
    if manifest:
        original = stored = 0
        for name, record in manifest["tensors"].items():
            if record["method"] == "raw":
                continue
            m, n = record["shape"]
            original += 2 * m * n
            stored += record["payload_bytes"]
        out.update(format_version=manifest["format_version"], config=manifest["config"],
                   achieved_cr=(original / stored) if stored else None,
                   methods=sorted({r["method"] for r in manifest["tensors"].values()}))
    _write_json(args.report, out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _add_target_flags(p) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--alpha", type=float, help="target sparsity ratio in [0, 1)")
    group.add_argument("--cr", type=float, help="target compression ratio, alpha = 1 - 1/CR")
    group.add_argument("--cr-qt", dest="cr_qt", type=float, help="combined ratio with quantization (impart-qt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltapress", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"deltapress {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("delta", help="write W_ft - W_base for every 2-D tensor")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include", action="append", help="glob of tensor names to treat as deltas (repeatable)")
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("compress", help="compress a delta into an artifact")
    p.add_argument("--base")
    p.add_argument("--finetuned")
    p.add_argument("--delta", help="delta container instead of a base/fine-tuned pair")
    p.add_argument("--method", choices=("impart", "dare", "lowrank", "impart-qt"))
    _add_target_flags(p)
    p.add_argument("--beta", type=float)
    p.add_argument("--C", dest="C", type=float)
    p.add_argument("--group-bits", dest="group_bits", help="e.g. 2:8,32:3,rest:2")
    p.add_argument("--blocksize", type=int)
    p.add_argument("--damp", type=float)
    p.add_argument("--calibration", help="container of calibration inputs, one (n x samples) matrix per tensor")
    p.add_argument("--seed-salt", dest="seed_salt")
    p.add_argument("--include", action="append")
    p.add_argument("--config", help="JSON file of defaults")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("reconstruct", help="rebuild a checkpoint from base + artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="skip the base digest check")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("merge", help="merge several fine-tuned models or artifacts")
    p.add_argument("--base", required=True)
    p.add_argument("models", nargs="+", help="artifacts or fine-tuned checkpoints")
    p.add_argument("--strategy", choices=("ta", "ties"))
    p.add_argument("--lam", type=float)
    p.add_argument("--retain", type=float)
    p.add_argument("--pre-sparsify", dest="pre_sparsify", help="none | dare:p | impart:alpha[:beta:C]")
    p.add_argument("--seed-salt", dest="seed_salt")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("bench", help="synthetic method x ratio benchmark")
    p.add_argument("--spec", help="JSON bench spec")
    p.add_argument("--out", default="-")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="summarize a container or artifact")
    p.add_argument("path")
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if hasattr(args, "threads") and args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (SvdError, HessianError, RankUnderflowError, UnreachableRatioError, np.linalg.LinAlgError) as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERIC
    except (ContainerError, ShapeMismatchError, ArtifactError, KeyError, OSError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
