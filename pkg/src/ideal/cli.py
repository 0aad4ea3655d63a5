"""``ideal`` command-line front end.

Sub-commands: ``gen``, ``run``, ``features``, ``rank`` and ``sweep``.
Exit codes: 0 success, 2 configuration error, 3 runtime abort. Every
command writes into a scratch directory under ``--out`` and moves the
results into place only when it succeeds.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import features as F
from .alloop import (ALConfig, ConfigError, batch_size_sweep, run_active_learning,
                     summarize, write_curve_csv)
from .metrics import compare_rankings, overlap_fraction
from .saliency import import_map
from .segharness import SegALConfig, run_segmentation_al
from .strategies import StrategyConfigError, StrategyId, read_score_csv
from .synthdata import DatasetSpec, ParameterError, export_dataset, generate_dataset, split

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
FAMILY_ALIASES = {"first_order": "first_order", "glcm": "glcm", "shape": "shape2d",
                  "shape2d": "shape2d"}
SWEEP_KEYS = {
    "batch": {"base", "sizes"},
    "noise": {"base", "sigmas", "strategies"},
    "switch": {"base", "dataset_b", "switch_fraction"},
    "saliency": {"base", "methods", "strategies"},
}


class CliConfigError(Exception):
    pass


def code_version():
    """Content hash of the package sources (stands in for a VCS revision)."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def config_hash(command, config):
    blob = json.dumps({"command": command, "config": config, "code": code_version()},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _load_json(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise CliConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CliConfigError(f"{path}: top level must be a JSON object")
    return data


def _unwrap_manifest(data, command):
    """A run manifest can stand in for the config it embeds."""
    if "manifest_version" in data:
        if data.get("command") != command:
            raise CliConfigError(f"manifest was written by '{data.get('command')}', "
                                 f"not '{command}'")
        return data["config"]
    return data


class Outputs:
    """Scratch directory under ``out`` whose files are moved into ``out`` on commit."""

    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))

    def path(self, name):
        p = self.tmp / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def commit(self):
        for p in sorted(self.tmp.rglob("*")):
            if p.is_file():
                dest = self.out / p.relative_to(self.tmp)
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(p), dest)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _manifest(command, config, seeds, started, decisions, outputs):
    return {
        "manifest_version": 1,
        "command": command,
        "config": config,
        "config_hash": config_hash(command, config),
        "code_version": code_version(),
        "package_version": __version__,
        "seeds": list(seeds),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "decisions": decisions,
        "outputs": sorted(outputs),
    }


def _header(command, config):
    return f"# manifest: {config_hash(command, config)}\n"


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _al_config(d):
    d = dict(d)
    try:
        spec = DatasetSpec.from_dict(d.get("dataset", ALConfig().dataset))
        cls = SegALConfig if spec.task == "gland_seg" else ALConfig
        return cls.from_dict(d)
    except (ConfigError, ParameterError, StrategyConfigError, TypeError) as exc:
        raise CliConfigError(str(exc)) from None


def _run_curves(cfg, strategies):
    runner = run_segmentation_al if isinstance(cfg, SegALConfig) else run_active_learning
    return [runner(replace(cfg, strategy=s)) for s in strategies]


def _decisions(cfg, curves):
    dirs = {}
    for c in curves:
        for r in c.ok_runs:
            if "directions" in r.context_log:
                dirs.setdefault(c.strategy, {})[str(r.seed)] = r.context_log["directions"]
    return {"saliency": cfg.saliency, "borda_directions": dirs, "K": cfg.K,
            "batch_size": cfg.batch_size}


def _emit_curves(outs, command, config, cfg, curves, prefix=""):
    name = "dice_curve.csv" if isinstance(cfg, SegALConfig) else "curve.csv"
    write_curve_csv(outs.path(prefix + name), curves, header=_header(command, config))
    summary = summarize(curves)
    summary["manifest"] = config_hash(command, config)
    for c in curves:
        if c.switch_fraction is not None:
            summary["strategies"][c.strategy]["switch_iterations"] = {
                str(r.seed): r.switch_iteration for r in c.ok_runs}
    _write_json(outs.path(prefix + "summary.json"), summary)
    return [prefix + name, prefix + "summary.json"]


# commands ---------------------------------------------------------------------------

def cmd_gen(args):
    config = _unwrap_manifest(_load_json(args.spec), "gen")
    try:
        spec = DatasetSpec.from_dict(config.get("dataset", config))
        spec.validate()
    except (ParameterError, TypeError) as exc:
        raise CliConfigError(str(exc)) from None
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    outs = Outputs(args.out)
    try:
        ds = generate_dataset(spec)
        pool = split(ds, seed=spec.seed)
        export_dataset(ds, outs.tmp / "dataset", pool, redact_labels=not args.with_labels)
        _write_json(outs.path("manifest.json"),
                    _manifest("gen", config, [spec.seed], started,
                              {"split_seed": spec.seed}, ["dataset/"]))
    except BaseException:
        outs.abort()
        raise
    outs.commit()
    return EXIT_OK


def cmd_run(args):
    config = _unwrap_manifest(_load_json(args.config), "run")
    body = dict(config)
    strategies = body.pop("strategies", None)
    cfg = _al_config(body)
    strategies = strategies or [cfg.strategy]
    try:
        for s in strategies:
            StrategyId.parse(s)
    except StrategyConfigError as exc:
        raise CliConfigError(str(exc)) from None
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    outs = Outputs(args.out)
    try:
        curves = _run_curves(cfg, strategies)
        if all(not c.ok_runs for c in curves):
            raise RuntimeError("every seed aborted: " + "; ".join(
                r.aborted for c in curves for r in c.runs))
        files = _emit_curves(outs, "run", config, cfg, curves)
        _write_json(outs.path("manifest.json"),
                    _manifest("run", config, cfg.seeds, started, _decisions(cfg, curves),
                              files))
    except BaseException:
        outs.abort()
        raise
    outs.commit()
    return EXIT_OK


def _read_map(path):
    return import_map(path).values


def cmd_features(args):
    family = FAMILY_ALIASES.get(args.family)
    if family is None:
        raise CliConfigError(f"unknown feature family {args.family!r}")
    maps_dir = Path(args.maps)
    if not maps_dir.is_dir():
        raise CliConfigError(f"maps directory not found: {maps_dir}")
    files = sorted(p for p in maps_dir.glob("*.pgm") if not p.name.endswith(".mask.pgm"))
    if not files:
        raise CliConfigError(f"no .pgm maps in {maps_dir}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outs = Outputs(out.parent)
    try:
        vectors = [F.FAMILY_FUNCS[family](_read_map(p)) for p in files]
        target = outs.path(out.name)
        F.write_features_csv(target, [p.stem for p in files], vectors)
        if family != "first_order":
            F.write_directions(outs.path("directions.json"),
                               {family: [1] * len(F.FAMILIES[family])})
    except BaseException:
        outs.abort()
        raise
    outs.commit()
    return EXIT_OK


def cmd_rank(args):
    if len(args.scores) != 2:
        raise CliConfigError("rank needs exactly two score files: reference candidate")
    for p in args.scores:
        if not Path(p).is_file():
            raise CliConfigError(f"score file not found: {p}")
    ref, cand = (read_score_csv(p) for p in args.scores)
    if set(ref.ids) != set(cand.ids):
        raise CliConfigError("score files rank different id sets")
    p = min(args.ndcg_p, len(ref.ids))
    comp = compare_rankings(cand.ranking(), ref.ranking(), p)
    report = {
        "reference": str(args.scores[0]),
        "candidate": str(args.scores[1]),
        "p": p,
        "dcg": comp.dcg,
        "idcg": comp.idcg,
        "ndcg": comp.ndcg,
        "top_p_overlap": overlap_fraction([ref.ranking()[:p], cand.ranking()[:p]], p),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        outs = Outputs(Path(args.out).parent)
        try:
            outs.path(Path(args.out).name).write_text(text + "\n")
        except BaseException:
            outs.abort()
            raise
        outs.commit()
    print(text)
    return EXIT_OK


def cmd_sweep(args):
    config = _unwrap_manifest(_load_json(args.config), "sweep")
    kind = args.kind
    unknown = set(config) - SWEEP_KEYS[kind] - {"kind"}
    if unknown:
        raise CliConfigError(f"unknown sweep key(s) for '{kind}': {', '.join(sorted(unknown))}")
    if config.get("kind", kind) != kind:
        raise CliConfigError(f"config is for a '{config['kind']}' sweep, not '{kind}'")
    if "base" not in config:
        raise CliConfigError("sweep config needs a 'base' run config")
    config = dict(config, kind=kind)
    cfg = _al_config(config["base"])
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    outs = Outputs(args.out)
    header = _header("sweep", config)
    files = []
    try:
        if kind == "batch":
            sizes = config.get("sizes")
            if not sizes or not all(isinstance(s, int) and s >= 1 for s in sizes):
                raise CliConfigError("'sizes' must be a non-empty list of positive integers")
            table = batch_size_sweep(cfg, sizes)
            path = outs.path("batch_sweep.csv")
            with open(path, "w") as fh:
                fh.write(header)
                fh.write("batch_size,crossing_fraction,iterations_to_cross\n")
                for row in table:
                    fh.write(f"{row['batch_size']},{row['crossing_fraction']:.6f},"
                             f"{row['iterations_to_cross']:.6f}\n")
            files.append("batch_sweep.csv")
            curves = [replace(row["curve"], strategy=f"{row['curve'].strategy}@b{row['batch_size']}")
                      for row in table]
            files += _emit_curves(outs, "sweep", config, cfg, curves)
        elif kind == "noise":
            sigmas = config.get("sigmas", [0.005, 0.01, 0.05, 0.1])
            if any((not isinstance(s, (int, float))) or s < 0 for s in sigmas):
                raise CliConfigError("'sigmas' must be non-negative numbers")
            curves = []
            for s in config.get("strategies", [cfg.strategy]):
                for sg in sigmas:
                    c = _run_curves(replace(cfg, noise_sigma=float(sg)), [s])[0]
                    curves.append(replace(c, strategy=f"{c.strategy}@sigma{sg}"))
            files += _emit_curves(outs, "sweep", config, cfg, curves)
        elif kind == "switch":
            if "dataset_b" not in config:
                raise CliConfigError("switch sweep needs 'dataset_b'")
            sw = _al_config(dict(config["base"], dataset_b=config["dataset_b"],
                                 switch_fraction=config.get("switch_fraction", 0.5)))
            curves = _run_curves(sw, [sw.strategy])
            files += _emit_curves(outs, "sweep", config, sw, curves)
        else:
            methods = config.get("methods", ["deep_taylor", "grad_cam"])
            curves = []
            for m in methods:
                try:
                    mc = replace(cfg, saliency=m).validate()
                except ConfigError as exc:
                    raise CliConfigError(str(exc)) from None
                for s in config.get("strategies", [cfg.strategy]):
                    c = _run_curves(mc, [s])[0]
                    curves.append(replace(c, strategy=f"{c.strategy}@{m}"))
            files += _emit_curves(outs, "sweep", config, cfg, curves)
        _write_json(outs.path("manifest.json"),
                    _manifest("sweep", config, cfg.seeds, started,
                              {"saliency": cfg.saliency, "K": cfg.K,
                               "batch_size": cfg.batch_size, "kind": kind}, files))
    except BaseException:
        outs.abort()
        raise
    outs.commit()
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="ideal", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset as PGM files")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-labels", action="store_true",
                   help="write hidden labels and masks too (default: redacted)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run active learning and write curves + manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("features", help="feature table for a directory of saliency PGMs")
    p.add_argument("--maps", required=True)
    p.add_argument("--family", required=True, choices=sorted(FAMILY_ALIASES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("rank", help="compare two score files by nDCG")
    p.add_argument("--scores", nargs="+", required=True, metavar="CSV")
    p.add_argument("--ndcg-p", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("sweep", help="batch / noise / switch / saliency sweeps")
    p.add_argument("--kind", required=True, choices=sorted(SWEEP_KEYS))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliConfigError as exc:
        print(f"ideal: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("ideal: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any failure is a runtime abort
        print(f"ideal: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
