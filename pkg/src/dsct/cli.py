"""Command-line entry points: phantom, project, recon, dataset, eval.

Every command accepts ``--config FILE`` with a JSON object whose keys are
the flag destination names; explicit flags win over the config file,
which wins over built-in defaults.  Unknown config keys are rejected.

Exit codes: 0 success, 2 invalid arguments/inputs, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .dataset import (DatasetSpec, atomic_write_text, build_dataset,
                      read_manifest, read_tensor, write_tensor)
from .forward import SinogramPair, add_poisson_noise, forward_project
from .geometry import (fov_radius, geometry_doc, geometry_from_doc,
                       geometry_key, load_or_build)
from .metrics import average_reports, evaluate_pair, table_csv
from .opmt import OpmtConfig, residuals_csv, run, run_eart
from .phantom import ImagePair, generate_pair
from .spectra import (bundled_path, load_materials, load_spectrum, normalize,
                      table_sha256)

PHANTOM_META = "phantoms.json"
PROJECT_META = "projections.json"
RECON_META = "recon.json"

GEOMETRY_DEFAULTS = {
    "n_s": 60, "n_d": 256, "l_d": 0.2, "d1": 490.0, "d2": 390.0, "n_r": 256,
}
GEOM_FLAG_DEFAULTS = {k: None for k in GEOMETRY_DEFAULTS}
OPMT_FLAG_DEFAULTS = {
    "sweeps": None, "lambda1": None, "lambda2": None, "relaxation": None,
    "nonneg": None, "skip_eps": None, "method": "opmt",
}
SPECTRA_DEFAULTS = {
    "spectrum_low": None, "spectrum_high": None, "materials": None,
}
COMMON_DEFAULTS = {"config": None, "matrix_cache": None, "threads": 1}


class CliError(ValueError):
    """Bad arguments or inputs; maps to exit code 2."""


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--matrix-cache", dest="matrix_cache", metavar="DIR",
                   help="directory for cached system matrices")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")


def _add_geometry(p: argparse.ArgumentParser, with_grid: bool = True) -> None:
    p.add_argument("--geometry", help="JSON geometry document "
                                      "(keys n_s, n_d, l_d, d1, d2, n_r)")
    p.add_argument("--n-s", dest="n_s", type=int, help="rotation angles (default 60)")
    p.add_argument("--n-d", dest="n_d", type=int, help="detector elements (default 256)")
    p.add_argument("--l-d", dest="l_d", type=float, help="element length (default 0.2)")
    p.add_argument("--d1", type=float, help="source-axis distance (default 490)")
    p.add_argument("--d2", type=float, help="axis-detector distance (default 390)")
    if with_grid:
        p.add_argument("--n-r", dest="n_r", type=int,
                       help="image grid size (default 256)")


def _add_spectra(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spectrum-low", dest="spectrum_low",
                   help="low-kV spectrum CSV (default: bundled 80 kV)")
    p.add_argument("--spectrum-high", dest="spectrum_high",
                   help="high-kV spectrum CSV (default: bundled 140 kV)")
    p.add_argument("--materials", help="material CSV (default: bundled bone/water)")


def _add_opmt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("opmt", "eart"),
                   help="reconstruction method (default opmt)")
    p.add_argument("--sweeps", type=int, help="full sweeps (default 10)")
    p.add_argument("--lambda1", type=float, help="weight of the target normal (default 1)")
    p.add_argument("--lambda2", type=float, help="weight of the oblique part (default 1)")
    p.add_argument("--relaxation", type=float, help="step relaxation (default 1)")
    p.add_argument("--nonneg", action=argparse.BooleanOptionalAction,
                   help="clamp negative pixels after each ray (default off)")
    p.add_argument("--skip-eps", dest="skip_eps", type=float,
                   help="denominator guard (default 1e-12)")
    p.add_argument("--opmt-config", dest="opmt_config",
                   help="JSON file with keys n_sweeps, lambda1, lambda2, "
                        "relaxation, nonneg, skip_eps")


def _merge_options(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; rejects unknown config keys."""
    given = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    merged = dict(defaults)
    cfg_path = given.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise CliError(f"config {cfg_path} must hold a JSON object")
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        merged.update(cfg)
    merged.update(given)
    merged["config"] = cfg_path
    return merged


def _resolve_geometry(opt: dict, with_grid: bool = True):
    doc = dict(GEOMETRY_DEFAULTS)
    if opt.get("geometry"):
        try:
            with open(opt["geometry"], "r", encoding="utf-8") as fh:
                file_doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read geometry {opt['geometry']}: {exc}") from None
        unknown = set(file_doc) - set(GEOMETRY_DEFAULTS) - {"pixel_size", "angles"}
        if unknown:
            raise CliError(f"unknown geometry keys: {sorted(unknown)}")
        doc.update(file_doc)
    for k in GEOMETRY_DEFAULTS:
        if opt.get(k) is not None:
            doc[k] = opt[k]
    try:
        geom, grid = geometry_from_doc(doc)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return (geom, grid) if with_grid else geom


def _load_tables(opt: dict):
    paths = {
        "low": opt.get("spectrum_low") or bundled_path("low"),
        "high": opt.get("spectrum_high") or bundled_path("high"),
        "materials": opt.get("materials") or bundled_path("materials"),
    }
    try:
        s_low = normalize(load_spectrum(paths["low"]))
        s_high = normalize(load_spectrum(paths["high"]))
        mats = load_materials(paths["materials"])
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    return s_low, s_high, mats, paths


def _opmt_config(opt: dict) -> OpmtConfig:
    base = OpmtConfig()
    if opt.get("opmt_config"):
        try:
            with open(opt["opmt_config"], "r", encoding="utf-8") as fh:
                base = OpmtConfig.from_json(fh.read())
        except (OSError, ValueError) as exc:
            raise CliError(f"bad OPMT config: {exc}") from None
    updates = {}
    for flag, name in (("sweeps", "n_sweeps"), ("lambda1", "lambda1"),
                       ("lambda2", "lambda2"), ("relaxation", "relaxation"),
                       ("nonneg", "nonneg"), ("skip_eps", "skip_eps")):
        if opt.get(flag) is not None:
            updates[name] = opt[flag]
    try:
        return replace(base, **updates) if updates else base
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _require(opt: dict, *names: str) -> None:
    for n in names:
        if opt.get(n) is None:
            raise CliError(f"--{n.replace('_', '-')} is required")


def _sample_dirs(root: str) -> list[str]:
    return sorted(d for d in os.listdir(root)
                  if os.path.isdir(os.path.join(root, d)))


def _read_meta(root: str, name: str) -> dict:
    path = os.path.join(root, name)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"{root}: missing {name} ({exc})") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: bad JSON: {exc}") from None


# --- commands -------------------------------------------------------------


def cmd_phantom(args: argparse.Namespace) -> int:
    opt = _merge_options(args, {**COMMON_DEFAULTS, **GEOM_FLAG_DEFAULTS,
                                "geometry": None, "count": 1, "seed": 0,
                                "size": None, "out": None})
    _require(opt, "out")
    if opt["size"] is not None:
        opt["n_r"] = opt["size"]
    geom, grid = _resolve_geometry(opt)
    fov = fov_radius(geom)
    ids = []
    for i in range(int(opt["count"])):
        sid = f"{i:05d}"
        pair = generate_pair(grid, fov, [int(opt["seed"]), i, 0])
        d = os.path.join(opt["out"], sid)
        os.makedirs(d, exist_ok=True)
        write_tensor(os.path.join(d, "f_gt.tsr"), pair.f)
        write_tensor(os.path.join(d, "g_gt.tsr"), pair.g)
        ids.append(sid)
    meta = {
        "command": "phantom", "count": int(opt["count"]), "seed": int(opt["seed"]),
        "geometry": geometry_doc(geom, grid), "geometry_key": geometry_key(geom, grid),
        "fov_radius": fov, "ids": ids,
    }
    atomic_write_text(os.path.join(opt["out"], PHANTOM_META),
                      json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(ids)} phantom pair(s) to {opt['out']}")
    return 0


def cmd_project(args: argparse.Namespace) -> int:
    opt = _merge_options(args, {**COMMON_DEFAULTS, **SPECTRA_DEFAULTS,
                                "in_dir": None, "out": None, "i0": 1e5,
                                "noise": True, "seed": 0})
    _require(opt, "in_dir", "out")
    meta = _read_meta(opt["in_dir"], PHANTOM_META)
    geom, grid = geometry_from_doc(meta["geometry"])
    s_low, s_high, mats, paths = _load_tables(opt)
    matrix = load_or_build(geom, grid, opt["matrix_cache"])
    ids = meta["ids"]
    for sid in ids:
        f = read_tensor(os.path.join(opt["in_dir"], sid, "f_gt.tsr")).astype(np.float64)
        g = read_tensor(os.path.join(opt["in_dir"], sid, "g_gt.tsr")).astype(np.float64)
        sino = forward_project(ImagePair(f=f, g=g), matrix, s_low, s_high, mats)
        if opt["noise"]:
            sino = add_poisson_noise(sino, float(opt["i0"]), [int(opt["seed"]), int(sid), 1])
        d = os.path.join(opt["out"], sid)
        os.makedirs(d, exist_ok=True)
        write_tensor(os.path.join(d, "p1.tsr"), sino.p1)
        write_tensor(os.path.join(d, "p2.tsr"), sino.p2)
    sidecar = {
        "command": "project",
        "geometry": geometry_doc(geom, grid),
        "geometry_key": matrix.key,
        "spectra": {
            "low": {"path": str(paths["low"]), "sha256": table_sha256(s_low)},
            "high": {"path": str(paths["high"]), "sha256": table_sha256(s_high)},
            "materials": {"path": str(paths["materials"]), "sha256": table_sha256(mats)},
        },
        "i0": float(opt["i0"]), "noise": bool(opt["noise"]), "seed": int(opt["seed"]),
        "ids": ids,
    }
    atomic_write_text(os.path.join(opt["out"], PROJECT_META),
                      json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"projected {len(ids)} pair(s) to {opt['out']}")
    return 0


def cmd_recon(args: argparse.Namespace) -> int:
    opt = _merge_options(args, {**COMMON_DEFAULTS, **SPECTRA_DEFAULTS,
                                **OPMT_FLAG_DEFAULTS, "opmt_config": None,
                                "in_dir": None, "out": None})
    _require(opt, "in_dir", "out")
    meta = _read_meta(opt["in_dir"], PROJECT_META)
    geom, grid = geometry_from_doc(meta["geometry"])
    s_low, s_high, mats, paths = _load_tables(opt)
    for which, table in (("low", s_low), ("high", s_high), ("materials", mats)):
        want = meta["spectra"][which]["sha256"]
        have = table_sha256(table)
        if want != have:
            raise CliError(
                f"{which} table does not match the one used for projection "
                f"({have[:12]} != {want[:12]})"
            )
    cfg = _opmt_config(opt)
    solver = run_eart if opt["method"] == "eart" else run
    matrix = load_or_build(geom, grid, opt["matrix_cache"])
    if matrix.key != meta["geometry_key"]:
        raise CliError("projection sidecar geometry does not hash to the "
                       "matrix geometry; refusing to reconstruct")
    for sid in meta["ids"]:
        p1 = read_tensor(os.path.join(opt["in_dir"], sid, "p1.tsr")).astype(np.float64)
        p2 = read_tensor(os.path.join(opt["in_dir"], sid, "p2.tsr")).astype(np.float64)
        sino = SinogramPair(p1=p1, p2=p2, geometry_key=matrix.key)
        state = solver(sino, matrix, (s_low, s_high), mats, cfg)
        d = os.path.join(opt["out"], sid)
        os.makedirs(d, exist_ok=True)
        write_tensor(os.path.join(d, "f_opmt.tsr"), state.f)
        write_tensor(os.path.join(d, "g_opmt.tsr"), state.g)
        atomic_write_text(os.path.join(d, "residuals.csv"), residuals_csv(state))
    sidecar = {
        "command": "recon", "method": opt["method"],
        "geometry": geometry_doc(geom, grid), "geometry_key": matrix.key,
        "opmt": json.loads(cfg.to_json()), "ids": meta["ids"],
    }
    atomic_write_text(os.path.join(opt["out"], RECON_META),
                      json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"reconstructed {len(meta['ids'])} pair(s) to {opt['out']}")
    return 0


def cmd_dataset(args: argparse.Namespace) -> int:
    opt = _merge_options(args, {**COMMON_DEFAULTS, **GEOM_FLAG_DEFAULTS,
                                **SPECTRA_DEFAULTS, **OPMT_FLAG_DEFAULTS,
                                "geometry": None, "opmt_config": None,
                                "count": None, "split": "8:1:1", "seed": 0,
                                "i0": 1e5, "noise": True, "out": None})
    _require(opt, "count", "out")
    geom, grid = _resolve_geometry(opt)
    s_low, s_high, mats, _ = _load_tables(opt)
    try:
        ratios = tuple(float(x) for x in str(opt["split"]).split(":"))
        if len(ratios) != 3:
            raise ValueError
    except ValueError:
        raise CliError(f"--split must be A:B:C, got {opt['split']!r}") from None
    spec = DatasetSpec(
        count=int(opt["count"]), geom=geom, grid=grid,
        spec_low=s_low, spec_high=s_high, materials=mats,
        i0=float(opt["i0"]), noise=bool(opt["noise"]),
        opmt_config=_opmt_config(opt), split=ratios,
        master_seed=int(opt["seed"]),
    )
    manifest = build_dataset(opt["out"], spec, cache_dir=opt["matrix_cache"],
                             threads=int(opt["threads"]))
    print(f"built dataset of {manifest['count']} samples at {opt['out']} "
          f"(train/val/test = {manifest['splits']['train']}/"
          f"{manifest['splits']['val']}/{manifest['splits']['test']})")
    return 0


def _gather_truth(opt: dict) -> dict[str, tuple[str, str]]:
    """id -> (f_gt path, g_gt path) from a dataset root or a phantom dir."""
    root = opt["truth"]
    if os.path.isfile(os.path.join(root, "manifest.json")):
        doc = read_manifest(root)
        wanted = opt["split"]
        out = {}
        for entry in doc["samples"]:
            if entry["status"] != "ok":
                continue
            if wanted and entry["split"] != wanted:
                continue
            out[entry["id"]] = (os.path.join(root, entry["files"]["f_gt"]),
                                os.path.join(root, entry["files"]["g_gt"]))
        if not out:
            raise CliError(f"no usable samples in {root} for split {wanted!r}")
        return out
    out = {}
    for sid in _sample_dirs(root):
        fp = os.path.join(root, sid, "f_gt.tsr")
        gp = os.path.join(root, sid, "g_gt.tsr")
        if os.path.isfile(fp) and os.path.isfile(gp):
            out[sid] = (fp, gp)
    if not out:
        raise CliError(f"{root} holds neither a manifest nor sample directories")
    return out


PRED_NAME_CANDIDATES = (("f_refined", "g_refined"), ("f_opmt", "g_opmt"),
                        ("f_gt", "g_gt"))


def _find_pred(pred_dir: str, sid: str, names: tuple[str, str] | None,
               split_hint: str | None):
    bases = [os.path.join(pred_dir, sid)]
    if split_hint:
        bases.append(os.path.join(pred_dir, split_hint, sid))
    candidates = (names,) if names else PRED_NAME_CANDIDATES
    for base in bases:
        for fn, gn in candidates:
            fp = os.path.join(base, f"{fn}.tsr")
            gp = os.path.join(base, f"{gn}.tsr")
            if os.path.isfile(fp) and os.path.isfile(gp):
                return fp, gp
    return None


def cmd_eval(args: argparse.Namespace) -> int:
    opt = _merge_options(args, {**COMMON_DEFAULTS, "truth": None, "pred": [],
                                "split": None, "pred_names": None,
                                "with_opmt": False, "out": None})
    _require(opt, "truth", "out")
    if not opt["pred"] and not opt["with_opmt"]:
        raise CliError("nothing to evaluate: give --pred LABEL=DIR or --with-opmt")
    names = None
    if opt["pred_names"]:
        parts = tuple(str(opt["pred_names"]).split(","))
        if len(parts) != 2:
            raise CliError("--pred-names must be F_NAME,G_NAME")
        names = parts
    truth = _gather_truth(opt)
    columns: dict[str, dict] = {}

    if opt["with_opmt"]:
        root = opt["truth"]
        if not os.path.isfile(os.path.join(root, "manifest.json")):
            raise CliError("--with-opmt needs a dataset root as --truth")
        doc = read_manifest(root)
        reports = []
        for entry in doc["samples"]:
            if entry["id"] not in truth:
                continue
            reports.append(evaluate_pair(
                read_tensor(os.path.join(root, entry["files"]["f_opmt"])),
                read_tensor(os.path.join(root, entry["files"]["g_opmt"])),
                read_tensor(os.path.join(root, entry["files"]["f_gt"])),
                read_tensor(os.path.join(root, entry["files"]["g_gt"])),
            ))
        columns["opmt"] = average_reports(reports)

    for spec in opt["pred"]:
        if "=" not in spec:
            raise CliError(f"--pred must be LABEL=DIR, got {spec!r}")
        label, pred_dir = spec.split("=", 1)
        reports = []
        missing = []
        for sid, (fp, gp) in truth.items():
            found = _find_pred(pred_dir, sid, names, opt["split"])
            if found is None:
                missing.append(sid)
                continue
            reports.append(evaluate_pair(
                read_tensor(found[0]), read_tensor(found[1]),
                read_tensor(fp), read_tensor(gp),
            ))
        if not reports:
            raise CliError(f"no predictions for any truth sample under {pred_dir}")
        if missing:
            print(f"warning: {label}: no prediction for {len(missing)} sample(s)",
                  file=sys.stderr)
        columns[label] = average_reports(reports)

    doc = {"labels": list(columns), "split": opt["split"], "models": columns}
    atomic_write_text(f"{opt['out']}.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")
    atomic_write_text(f"{opt['out']}.csv", table_csv(columns))
    print(table_csv(columns), end="")
    return 0


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dsct",
        description="Dual-spectral fan-beam CT simulation and reconstruction.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate random material phantoms",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--count", type=int, help="number of phantom pairs (default 1)")
    p.add_argument("--size", type=int, help="image size n_r (overrides --n-r)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", help="output directory")
    _add_geometry(p)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="simulate dual-spectral sinograms",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--in", dest="in_dir", help="phantom directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--i0", type=float, help="incident photons per ray (default 1e5)")
    p.add_argument("--noise", action=argparse.BooleanOptionalAction,
                   help="apply counting noise (default on)")
    p.add_argument("--seed", type=int, help="noise seed (default 0)")
    _add_spectra(p)
    _add_common(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("recon", help="reconstruct material images",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--in", dest="in_dir", help="projection directory")
    p.add_argument("--out", help="output directory")
    _add_spectra(p)
    _add_opmt(p)
    _add_common(p)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("dataset", help="build a train/val/test dataset",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--count", type=int, help="total number of samples")
    p.add_argument("--split", help="train:val:test ratios (default 8:1:1)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", help="dataset root directory")
    p.add_argument("--i0", type=float, help="incident photons per ray (default 1e5)")
    p.add_argument("--noise", action=argparse.BooleanOptionalAction,
                   help="apply counting noise (default on)")
    _add_geometry(p)
    _add_spectra(p)
    _add_opmt(p)
    _add_common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("eval", help="score predictions against ground truth",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--truth", help="dataset root (with manifest) or phantom dir")
    p.add_argument("--pred", action="append", metavar="LABEL=DIR",
                   help="prediction directory; repeatable")
    p.add_argument("--split", help="restrict to one split of a dataset root")
    p.add_argument("--pred-names", dest="pred_names", metavar="F,G",
                   help="tensor basenames in prediction dirs")
    p.add_argument("--with-opmt", dest="with_opmt", action="store_true",
                   help="also score the dataset's own OPMT reconstructions")
    p.add_argument("--out", help="output prefix (writes PREFIX.json and PREFIX.csv)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
