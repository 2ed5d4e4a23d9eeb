"""Command-line front end: segment, baseline, evaluate, compare, phantom.

Exit codes: 0 success, 2 validation error (bad flags, schema, geometry),
1 I/O or file-format error. stdout carries only the path of the written
report; warnings go to stderr. Flag values override the optional key=value
config file, which overrides built-in defaults. Every command writes a JSON
run manifest whose only run-varying field is ``created_at``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from . import __version__
from .errors import NiftiFormatError, ValidationError
from .grids import LabelSchema, with_z_axis
from .maskops import crop_to_z, extract_role, mask_union
from .metrics import MetricConfig, compute_report
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate_phantom, phantom_schema
from .pipeline import (
    BOUNDS_FULL,
    BOUNDS_VERTEBRAL,
    PipelineConfig,
    kevs_segment,
    lumbar_bounds,
    organ_free_cavity,
    resample_to_canonical,
    threshold_segment,
)
from .stats import wilcoxon_one_sided

_BOUNDS_BY_FLAG = {"full": BOUNDS_FULL, "lumbar": BOUNDS_VERTEBRAL}


def _load_config(path) -> dict[str, str]:
    config: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        config[key.strip()] = value.strip().strip("\"'")
    return config


def _as_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def _resolve(cli_value, config: dict, key: str, default, cast):
    if cli_value is not None:
        return cli_value
    if key in config:
        raw = config[key]
        try:
            return cast(raw) if cast is not bool else _as_bool(raw)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config key {key}={raw!r}: {exc}") from exc
    return default


def _resolve_threads(cli_value, config: dict) -> int:
    value = _resolve(cli_value, config, "threads", None, int)
    if value is None:
        env = os.environ.get("KEVS_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError as exc:
                raise ValidationError(f"KEVS_THREADS={env!r} is not an integer") from exc
    value = 1 if value is None else value
    if value < 1:
        raise ValidationError(f"thread count must be >= 1, got {value}")
    return value


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(path, inputs: dict, config: dict, timings: dict,
                    warnings: list[str], outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "tool": "kevs",
        "version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in inputs.items()},
        "config": config,
        "timings_s": {k: round(v, 6) for k, v in timings.items()},
        "warnings": warnings,
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    _write_json(path, manifest)


def _parse_hu_range(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise ValidationError(f"range must look like 'lo:hi', got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ValidationError(f"range must contain two numbers, got {text!r}") from exc
    return lo, hi


def _pipeline_config(args, config: dict) -> PipelineConfig:
    bounds_flag = _resolve(getattr(args, "bounds", None), config, "bounds", "full", str)
    if bounds_flag not in _BOUNDS_BY_FLAG:
        raise ValidationError(f"bounds must be 'full' or 'lumbar', got {bounds_flag!r}")
    return PipelineConfig(
        reject_fraction=_resolve(getattr(args, "reject_fraction", None), config,
                                 "reject_fraction", 0.15, float),
        erosion_fraction=_resolve(getattr(args, "erosion_fraction", None), config,
                                  "erosion_fraction", 0.20, float),
        kde_grid_size=_resolve(getattr(args, "kde_grid_size", None), config,
                               "kde_grid_size", 1000, int),
        bounds_mode=_BOUNDS_BY_FLAG[bounds_flag],
        erosion_connectivity=_resolve(getattr(args, "erosion_connectivity", None),
                                      config, "erosion_connectivity", 1, int),
        bandwidth_mode=_resolve(getattr(args, "bandwidth_mode", None), config,
                                "bandwidth_mode", "scott", str),
        threads=_resolve_threads(getattr(args, "threads", None), config),
    )


def _config_dict(cfg: PipelineConfig) -> dict:
    return {
        "reject_fraction": cfg.reject_fraction,
        "erosion_fraction": cfg.erosion_fraction,
        "kde_grid_size": cfg.kde_grid_size,
        "canonical_spacing": list(cfg.canonical_spacing),
        "bounds_mode": cfg.bounds_mode,
        "erosion_connectivity": cfg.erosion_connectivity,
        "bandwidth_mode": cfg.bandwidth_mode,
        "threads": cfg.threads,
    }


def _cmd_segment(args) -> int:
    config = _load_config(args.config) if args.config else {}
    cfg = _pipeline_config(args, config)
    schema = LabelSchema.from_json(args.schema)
    ct = with_z_axis(read_nifti(args.ct, "scalar"), args.z_axis)
    labels = with_z_axis(read_nifti(args.labels, "label", schema), args.z_axis)

    t0 = time.perf_counter()
    v, l = resample_to_canonical(ct, labels, cfg)
    resample_s = time.perf_counter() - t0

    result = kevs_segment(v, l, cfg)
    write_nifti(result.vat_mask, args.out)
    outputs = [args.out]

    if args.dump_kde:
        _write_json(args.dump_kde, result.kde.to_dict())
        outputs.append(args.dump_kde)

    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)

    manifest_path = args.manifest or f"{args.out}.manifest.json"
    timings = {"resample": resample_s, **result.timings_s}
    _write_manifest(
        manifest_path,
        {"ct": args.ct, "labels": args.labels, "schema": args.schema},
        _config_dict(cfg), timings, list(result.warnings), outputs,
        extra={"kde": {"n": result.kde.n, "h": result.kde.h,
                       "i_min": result.kde.i_min, "i_max": result.kde.i_max},
               "candidate_count": result.candidate_count,
               "removed_count": result.removed_count,
               "degenerate_erosion": result.degenerate_erosion},
    )
    print(manifest_path)
    return 0


def _cmd_baseline(args) -> int:
    config = _load_config(args.config) if args.config else {}
    cfg = _pipeline_config(args, config)
    hu_range = _parse_hu_range(args.range)
    schema = LabelSchema.from_json(args.schema)
    ct = with_z_axis(read_nifti(args.ct, "scalar"), args.z_axis)
    labels = with_z_axis(read_nifti(args.labels, "label", schema), args.z_axis)

    t0 = time.perf_counter()
    v, l = resample_to_canonical(ct, labels, cfg)
    resample_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    region = organ_free_cavity(l, cfg) if args.organ_free else extract_role(l, "abdominal_cavity")
    mask = threshold_segment(v, region, hu_range)
    if cfg.bounds_mode == BOUNDS_VERTEBRAL:
        z_lo, z_hi = lumbar_bounds(l)
        mask = crop_to_z(mask, z_lo, z_hi)
    threshold_s = time.perf_counter() - t0

    write_nifti(mask, args.out)
    manifest_path = args.manifest or f"{args.out}.manifest.json"
    _write_manifest(
        manifest_path,
        {"ct": args.ct, "labels": args.labels, "schema": args.schema},
        {**_config_dict(cfg), "hu_range": list(hu_range), "organ_free": bool(args.organ_free)},
        {"resample": resample_s, "threshold": threshold_s},
        [], [args.out],
        extra={"predicted_voxels": mask.count},
    )
    print(manifest_path)
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args.config) if args.config else {}
    if (args.labels is None) != (args.schema is None):
        raise ValidationError("--labels and --schema must be given together")
    bounds_flag = _resolve(args.bounds, config, "bounds", "full", str)
    if bounds_flag not in _BOUNDS_BY_FLAG:
        raise ValidationError(f"bounds must be 'full' or 'lumbar', got {bounds_flag!r}")
    metric_cfg = MetricConfig(
        nsd_tolerance_mm=_resolve(args.nsd_tolerance, config, "nsd_tolerance_mm", 2.0, float),
        tau_in_voxels=bool(_resolve(args.nsd_tau_voxels or None, config,
                                    "nsd_tau_voxels", False, bool)),
    )

    pred = read_nifti(args.pred, "mask")
    gt = read_nifti(args.gt, "mask")
    inputs = {"pred": args.pred, "gt": args.gt}

    labels = organ_union = None
    if args.labels:
        schema = LabelSchema.from_json(args.schema)
        labels = read_nifti(args.labels, "label", schema)
        if labels.geometry != pred.geometry:
            raise ValidationError("label map geometry differs from the prediction")
        organ_roles = labels.schema.organ_roles
        if organ_roles:
            organ_union = mask_union([extract_role(labels, r) for r in organ_roles])
        inputs.update({"labels": args.labels, "schema": args.schema})

    region = "full_cavity"
    if bounds_flag == "lumbar":
        if labels is None:
            raise ValidationError("--bounds lumbar requires --labels and --schema")
        z_lo, z_hi = lumbar_bounds(labels)
        pred = crop_to_z(pred, z_lo, z_hi)
        gt = crop_to_z(gt, z_lo, z_hi)
        if organ_union is not None:
            organ_union = crop_to_z(organ_union, z_lo, z_hi)
        region = "vertebral_bounds"

    t0 = time.perf_counter()
    report = compute_report(pred, gt, metric_cfg, region=region,
                            organ_union=organ_union, per_slice=bool(args.per_slice))
    metrics_s = time.perf_counter() - t0

    # the ground truth is the anchor shared by every method's evaluation of
    # one scan, so its stem is the default pairing key for `compare`
    scan_id = args.scan_id or Path(args.gt).name.split(".")[0]
    outputs = [args.out]
    if args.per_slice:
        rows = [{"scan_id": scan_id, "z": s.z, "method": args.method,
                 "dice": s.dice, "nsd": s.nsd,
                 "precision": s.precision, "recall": s.recall}
                for s in (report.per_slice or ())]
        frame = pd.DataFrame(rows, columns=["scan_id", "z", "method", "dice",
                                            "nsd", "precision", "recall"])
        frame.to_csv(args.per_slice, index=False)
        outputs.append(args.per_slice)

    payload = {"scan_id": scan_id, "method": args.method, **report.to_dict()}
    _write_json(args.out, payload)
    manifest_path = args.manifest or f"{args.out}.manifest.json"
    _write_manifest(manifest_path, inputs,
                    {"bounds": bounds_flag,
                     "nsd_tolerance_mm": metric_cfg.nsd_tolerance_mm,
                     "nsd_tau_voxels": metric_cfg.tau_in_voxels},
                    {"metrics": metrics_s}, [], outputs)
    print(args.out)
    return 0


def _read_slice_csv(path, metric: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"cannot read slice CSV {path}: {exc}") from exc
    needed = {"scan_id", "z", metric}
    missing = needed - set(frame.columns)
    if missing:
        raise ValidationError(f"{path} lacks columns {sorted(missing)}")
    return frame[["scan_id", "z", metric]]


def _cmd_compare(args) -> int:
    a = _read_slice_csv(args.a, args.metric)
    b = _read_slice_csv(args.b, args.metric)
    merged = a.merge(b, on=["scan_id", "z"], suffixes=("_a", "_b"))
    if merged.empty:
        raise ValidationError("no (scan_id, z) pairs shared between the two CSVs")
    merged = merged.dropna()
    x = merged[f"{args.metric}_a"].to_numpy(dtype=float)
    y = merged[f"{args.metric}_b"].to_numpy(dtype=float)
    if args.alternative == "b-greater":
        x, y = y, x

    result = wilcoxon_one_sided(x, y, method=args.method)
    payload = {
        "metric": args.metric,
        "alternative": args.alternative,
        "pairs_total": int(len(merged)),
        "n": result.n,
        "statistic": result.statistic,
        "p_value": result.p_value,
        "method": result.method,
        "significant_at_0.05": bool(result.p_value < 0.05),
    }
    _write_json(args.out, payload)
    print(args.out)
    return 0


_SLICE_METRICS = ("dice", "nsd", "precision", "recall")


def _cmd_summary(args) -> int:
    frames = []
    for path in args.slices:
        try:
            frames.append(pd.read_csv(path))
        except (OSError, pd.errors.ParserError) as exc:
            raise ValidationError(f"cannot read slice CSV {path}: {exc}") from exc
    table = pd.concat(frames, ignore_index=True)
    needed = {"scan_id", "z", "method", *_SLICE_METRICS}
    missing = needed - set(table.columns)
    if missing:
        raise ValidationError(f"slice CSVs lack columns {sorted(missing)}")

    methods = {}
    for method, group in table.groupby("method"):
        entry: dict = {"n_slices": int(len(group)),
                       "n_scans": int(group["scan_id"].nunique())}
        for metric in _SLICE_METRICS:
            values = group[metric].dropna().to_numpy(dtype=float)
            if values.size == 0:
                entry[metric] = None
                continue
            sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
            entry[metric] = {"mean": float(values.mean()), "sd": sd,
                             "n": int(values.size)}
        methods[str(method)] = entry

    _write_json(args.out, {"methods": methods})
    print(args.out)
    return 0


def _cmd_phantom(args) -> int:
    spec = PhantomSpec(
        seed=args.seed,
        noise_scale=args.noise,
        **({"dims": tuple(args.dims)} if args.dims else {}),
        **({"vat_count": args.vat_blobs} if args.vat_blobs is not None else {}),
        **({"organ_count": args.organs} if args.organs is not None else {}),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ct, labels, gt = generate_phantom(spec)

    paths = {
        "ct": out_dir / "phantom_ct.nii.gz",
        "labels": out_dir / "phantom_labels.nii.gz",
        "gt_vat": out_dir / "phantom_gt_vat.nii.gz",
        "schema": out_dir / "schema.json",
    }
    write_nifti(ct, paths["ct"])
    write_nifti(labels, paths["labels"])
    write_nifti(gt, paths["gt_vat"])
    phantom_schema(spec.organ_count).to_json(paths["schema"])

    manifest_path = out_dir / "manifest.json"
    _write_manifest(
        manifest_path, {},
        {"seed": spec.seed, "noise_scale": spec.noise_scale,
         "dims": list(spec.dims), "spacing": list(spec.spacing),
         "organ_count": spec.organ_count, "vat_count": spec.vat_count},
        {}, [], [str(p) for p in paths.values()],
        extra={"gt_vat_voxels": gt.count},
    )
    print(manifest_path)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kevs",
        description="Kernel-density VAT segmentation, baselines, metrics, and phantoms",
    )
    parser.add_argument("--version", action="version", version=f"kevs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file (flags take precedence)")
        p.add_argument("--threads", type=int, help="worker thread cap (or KEVS_THREADS)")

    p = sub.add_parser("segment", help="run the KDE-based VAT segmentation")
    p.add_argument("--ct", required=True, help="CT volume (.nii/.nii.gz)")
    p.add_argument("--labels", required=True, help="multi-label body segmentation")
    p.add_argument("--schema", required=True, help="role -> label JSON sidecar")
    p.add_argument("--out", required=True, help="output VAT mask (.nii/.nii.gz)")
    p.add_argument("--z-axis", dest="z_axis", choices=["x", "y", "z"], default="z",
                   help="which input axis is axial (for nonconforming files)")
    p.add_argument("--reject-fraction", type=float, dest="reject_fraction")
    p.add_argument("--erosion-fraction", type=float, dest="erosion_fraction")
    p.add_argument("--kde-grid-size", type=int, dest="kde_grid_size")
    p.add_argument("--erosion-connectivity", type=int, dest="erosion_connectivity")
    p.add_argument("--bandwidth-mode", choices=["scott", "scott-sigma"], dest="bandwidth_mode")
    p.add_argument("--bounds", choices=["full", "lumbar"])
    p.add_argument("--dump-kde", dest="dump_kde", help="write the fitted KDE as JSON")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    add_common(p)
    p.set_defaults(handler=_cmd_segment)

    p = sub.add_parser("baseline", help="HU-threshold baseline segmentation")
    p.add_argument("--ct", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--range", required=True, help="HU window 'lo:hi', e.g. -190:-30")
    p.add_argument("--z-axis", dest="z_axis", choices=["x", "y", "z"], default="z")
    p.add_argument("--organ-free", action="store_true", dest="organ_free",
                   help="threshold the organ-free cavity instead of the full cavity")
    p.add_argument("--bounds", choices=["full", "lumbar"])
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    add_common(p)
    p.set_defaults(handler=_cmd_baseline)

    p = sub.add_parser("evaluate", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--labels", help="label map enabling organ metrics / lumbar bounds")
    p.add_argument("--schema")
    p.add_argument("--bounds", choices=["full", "lumbar"])
    p.add_argument("--nsd-tolerance", type=float, dest="nsd_tolerance")
    p.add_argument("--nsd-tau-voxels", action="store_true", dest="nsd_tau_voxels",
                   help="interpret the NSD tolerance in voxels instead of mm")
    p.add_argument("--per-slice", dest="per_slice", help="write per-slice metrics CSV")
    p.add_argument("--scan-id", dest="scan_id")
    p.add_argument("--method", default="pred", help="method name recorded in outputs")
    p.add_argument("--out", required=True, help="metrics report JSON")
    p.add_argument("--manifest")
    add_common(p)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("compare", help="paired one-sided rank test on slice CSVs")
    p.add_argument("--a", required=True, help="per-slice CSV of method A")
    p.add_argument("--b", required=True, help="per-slice CSV of method B")
    p.add_argument("--metric", default="dice",
                   choices=["dice", "nsd", "precision", "recall"])
    p.add_argument("--alternative", default="a-greater",
                   choices=["a-greater", "b-greater"])
    p.add_argument("--method", default="auto", choices=["auto", "exact", "approx"])
    p.add_argument("--out", required=True, help="test result JSON")
    p.set_defaults(handler=_cmd_compare)

    p = sub.add_parser("summary", help="mean +/- sd per method from slice CSVs")
    p.add_argument("--slices", required=True, nargs="+",
                   help="one or more per-slice metric CSVs")
    p.add_argument("--out", required=True, help="summary JSON")
    p.set_defaults(handler=_cmd_summary)

    p = sub.add_parser("phantom", help="generate a synthetic phantom case")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--noise", type=float, default=1.0, help="noise scale (low dose >= 2)")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--vat-blobs", type=int, dest="vat_blobs")
    p.add_argument("--organs", type=int)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(handler=_cmd_phantom)

    return parser


def _preprocess_argv(argv: list[str]) -> list[str]:
    # join '--range -190:-30' into '--range=-190:-30' so argparse does not
    # mistake the leading-dash value for an option
    out: list[str] = []
    i = 0
    while i < len(argv):
        if argv[i] == "--range" and i + 1 < len(argv):
            out.append(f"--range={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(_preprocess_argv(argv))
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NiftiFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
