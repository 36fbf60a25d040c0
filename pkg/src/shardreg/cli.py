"""``shardreg`` command line: register, metrics, synth and info.

Registration settings come from built-in defaults, then an optional
``key = value`` config file, then command-line flags; later sources win.
Exit codes: 1 for configuration errors, 2 for I/O errors, 3 for numerical aborts.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from .core.types import AffineMap, LabelVolume, Volume3
from .io import NiftiFormatError, read_nifti, read_raw, synth_pair, write_nifti, write_raw
from .metrics import dice, hd90_cumulative, inv_dice
from .register import (BACKENDS, LOSSES, NumericalAbort, RegistrationResult, ScaleSchedule, affine_stage,
                       check_sharding, deformable_stage, warp_image, warp_labels)

EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_ABORT = 3


class ConfigError(ValueError):
    pass


class InputError(OSError):
    pass


# ---------------------------------------------------------------------------
# value parsers


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _scales(text) -> list:
    """``"4:100,2:100,1:50"`` to ``[(4.0, 100), (2.0, 100), (1.0, 50)]``."""
    if isinstance(text, list):
        return text
    out = []
    for item in str(text).split(","):
        factor, _, iters = item.strip().partition(":")
        if not iters:
            raise ValueError(f"scale entry {item!r} is not factor:iterations")
        out.append((float(factor), int(iters)))
    if not out:
        raise ValueError("empty scale list")
    return out


def _choice(options):
    def parse(text):
        text = str(text).strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _int_choice(options):
    def parse(text):
        value = int(text)
        if value not in options:
            raise ValueError(f"expected one of {options}, got {value}")
        return value
    return parse


def _path(text):
    return None if text in (None, "") else str(text)


def _triple(text):
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).replace("x", ",").split(",")]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValueError(f"expected 1 or 3 comma-separated numbers, got {text!r}")
    return vals


# key -> (parser, default, help)
OPTIONS = {
    "fixed": (_path, None, "fixed image (.nii)"),
    "moving": (_path, None, "moving image (.nii)"),
    "out": (_path, None, "output prefix"),
    "fixed_labels": (_path, None, "fixed label map, enables Dice in the summary"),
    "moving_labels": (_path, None, "moving label map, warped alongside the image"),
    "loss": (_choice(LOSSES), "lncc", "deformable loss"),
    "window": (int, 7, "LNCC window width (odd)"),
    "eps": (float, 1e-5, "LNCC denominator stabilizer"),
    "bins": (int, 32, "MI histogram bins"),
    "kernel": (_choice(("gaussian", "bspline", "delta")), "gaussian", "MI Parzen kernel"),
    "scales": (_scales, "4:100,2:100,1:50", "deformable schedule as factor:iterations,..."),
    "lr": (float, 0.5, "deformable step size (voxels)"),
    "sigma_grad": (float, 1.0, "gradient smoothing sigma (voxels)"),
    "sigma_warp": (float, 0.5, "warp smoothing sigma (voxels)"),
    "lr_decay": (_choice(("none", "cosine")), "none", "deformable step decay within a scale"),
    "affine": (_bool, True, "run the affine stage"),
    "affine_loss": (_choice(LOSSES), "mi", "affine loss"),
    "affine_scales": (_scales, "2:50,1:50", "affine schedule as factor:iterations,..."),
    "affine_lr": (float, 0.01, "affine Adam learning rate"),
    "shards": (int, 1, "number of workers H"),
    "seed": (int, 0, "seed recorded with the run"),
    "float_width": (_int_choice((32, 64)), 64, "stored width of the moved image"),
    "ants_approx": (_bool, True, "skip the second LNCC convolution in the backward pass"),
    "mi_approx": (_bool, True, "hard-binned MI forward in the deformable stage"),
    "gp_sync": (_bool, True, "exchange halos before sharded convolutions"),
    "backend": (_choice(BACKENDS), "fused", "fused kernels or the materialized reference path"),
    "record_timing": (_bool, False, "add wall time to the summary (breaks byte equality)"),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def resolved(self) -> dict:
        out = {}
        for key in OPTIONS:
            v = self.values[key]
            if key in ("scales", "affine_scales"):
                v = [[float(f), int(n)] for f, n in v]
            out[key] = v
        return out

    def deformable_schedule(self) -> ScaleSchedule:
        return ScaleSchedule(
            scales=self.scales, lr=self.lr, sigma_grad=self.sigma_grad, sigma_warp=self.sigma_warp,
            loss=self.loss, window=self.window, eps=self.eps, bins=self.bins, kernel=self.kernel,
            ants_approx=self.ants_approx, mi_approx=self.mi_approx, gp_sync=self.gp_sync,
            lr_decay=self.lr_decay, backend=self.backend,
        )

    def affine_schedule(self) -> ScaleSchedule:
        return ScaleSchedule(
            scales=self.affine_scales, lr=self.affine_lr, loss=self.affine_loss, window=self.window,
            eps=self.eps, bins=self.bins, kernel=self.kernel, mi_approx=False, lr_decay="cosine",
            backend=self.backend,
        )


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, quotes around values are dropped."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    raw = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve_config(flags: dict, config_path=None) -> RunConfig:
    """Merge defaults, the config file and flags, parse every value and validate."""
    raw = {k: spec[1] for k, spec in OPTIONS.items()}
    if config_path:
        raw.update(read_config_file(config_path))
    for k, v in flags.items():
        if k not in OPTIONS:
            raise ConfigError(f"unknown option {k!r}")
        if v is not None:
            raw[k] = v
    values = {}
    for k, (parse, _, _) in OPTIONS.items():
        v = raw[k]
        try:
            values[k] = None if v is None else parse(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{k}: {exc}") from None
    cfg = RunConfig(values)
    for k in ("fixed", "moving", "out"):
        if not values[k]:
            raise ConfigError(f"{k} is required")
    if values["shards"] < 1:
        raise ConfigError(f"shards must be >= 1, got {values['shards']}")
    try:
        cfg.deformable_schedule()
        cfg.affine_schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# file helpers


def _load(path, kind: str):
    try:
        vol, _ = read_nifti(path)
    except NiftiFormatError as exc:
        raise InputError(f"{path}: {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read {kind} {path}: {exc.strerror or exc}") from None
    return vol


def _load_image(path, kind):
    vol = _load(path, kind)
    return vol.to_volume() if isinstance(vol, LabelVolume) else vol


def _load_labels(path, kind):
    vol = _load(path, kind)
    if isinstance(vol, LabelVolume):
        return vol
    data = vol.data
    if not np.all(data == np.round(data)):
        raise InputError(f"{path}: {kind} must hold integer labels")
    return LabelVolume(data.astype(np.int32), vol.spacing, vol.origin)


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale_index", "iteration", "loss"])
        for s, losses in enumerate(trace):
            for i, loss in enumerate(losses):
                w.writerow([s, i, repr(float(loss))])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _label_scores(L_a, L_b, spacing) -> dict:
    per, mean = dice(L_a, L_b)
    try:
        hd = hd90_cumulative(L_a, L_b, spacing)
    except ValueError:
        hd = None
    return {
        "dice": mean,
        "dice_per_label": {str(k): v for k, v in per.items()},
        "inv_dice": inv_dice(L_a, L_b),
        "hd90": hd,
    }


def _scale_summary(trace) -> list:
    return [{"scale_index": s, "iterations": len(l), "initial_loss": l[0] if l else None,
             "final_loss": l[-1] if l else None} for s, l in enumerate(trace)]


# ---------------------------------------------------------------------------
# commands


def cmd_register(cfg: RunConfig) -> int:
    F = _load_image(cfg.fixed, "fixed image")
    M = _load_image(cfg.moving, "moving image")
    L_F = _load_labels(cfg.fixed_labels, "fixed labels") if cfg.fixed_labels else None
    L_M = _load_labels(cfg.moving_labels, "moving labels") if cfg.moving_labels else None
    if L_F is not None and L_F.dims != F.dims:
        raise InputError(f"fixed labels {L_F.dims} do not match the fixed image {F.dims}")
    if L_M is not None and L_M.dims != M.dims:
        raise InputError(f"moving labels {L_M.dims} do not match the moving image {M.dims}")
    try:
        check_sharding(F.dims, cfg.deformable_schedule(), cfg.shards)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    prefix = cfg.out
    files = {
        "warp": prefix + "_warp.raw",
        "moved": prefix + "_moved.nii",
        "trace": prefix + "_trace.csv",
        "affine_trace": prefix + "_affine_trace.csv",
        "summary": prefix + "_summary.json",
    }
    if L_M is not None:
        files["moved_labels"] = prefix + "_moved_labels.nii"

    start = time.perf_counter()
    aff_trace: list = []
    def_trace: list = []
    stats: dict = {}
    stage = "affine"
    try:
        if cfg.affine:
            amap = affine_stage(F, M, cfg.affine_schedule(), aff_trace)
            A, t = amap.matrix, amap.translation
        else:
            A, t = np.eye(3), np.zeros(3)
        stage = "deformable"
        warp = deformable_stage(F, M, A, t, cfg.deformable_schedule(), cfg.shards, def_trace, stats)
    except NumericalAbort as exc:
        # the affine stage already holds its partial list; the deformable one reports it here
        if stage == "deformable":
            def_trace.append(exc.trace)
        _write_trace(files["affine_trace"], aff_trace)
        _write_trace(files["trace"], def_trace)
        print(f"error: numerical abort in the {stage} stage: {exc}", file=sys.stderr)
        return EXIT_ABORT
    wall = time.perf_counter() - start

    result = RegistrationResult(AffineMap(A, t), warp, {"affine": aff_trace, "deformable": def_trace},
                                wall, stats.get("peak_alloc_bytes", 0))
    moved = warp_image(M, result, F.dims)
    dtype = np.float32 if cfg.float_width == 32 else np.float64
    write_raw(files["warp"], warp.data, F.spacing, F.origin)
    write_nifti(Volume3(moved, F.spacing, F.origin), files["moved"], dtype)
    _write_trace(files["trace"], def_trace)
    _write_trace(files["affine_trace"], aff_trace)

    summary = {
        "config": cfg.resolved(),
        "affine": {"matrix": A.tolist(), "translation": list(map(float, t))},
        "losses": {"affine": _scale_summary(aff_trace), "deformable": _scale_summary(def_trace)},
        "final_loss": def_trace[-1][-1] if def_trace and def_trace[-1] else None,
        "peak_alloc_bytes": int(result.peak_alloc_bytes),
        "outputs": dict(files),
    }
    if L_M is not None:
        moved_labels = warp_labels(L_M, result)
        write_nifti(LabelVolume(moved_labels, F.spacing, F.origin), files["moved_labels"])
        if L_F is not None:
            summary["metrics"] = _label_scores(L_F.data, moved_labels, F.spacing)
            if L_M.dims == L_F.dims:
                summary["baseline_metrics"] = _label_scores(L_F.data, L_M.data, F.spacing)
    if cfg.record_timing:
        summary["wall_time_s"] = wall
    _write_json(files["summary"], summary)
    return 0


def cmd_metrics(args) -> int:
    L_a = _load_labels(args.labels_a, "first label map")
    L_b = _load_labels(args.labels_b, "second label map")
    if L_a.dims != L_b.dims:
        raise InputError(f"label maps differ in shape: {L_a.dims} vs {L_b.dims}")
    try:
        spacing = _triple(args.spacing) if args.spacing else list(L_a.spacing)
    except ValueError as exc:
        raise ConfigError(f"spacing: {exc}") from None
    try:
        scores = _label_scores(L_a.data, L_b.data, spacing)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = json.dumps(scores, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    try:
        dims = tuple(int(d) for d in _triple(args.dims))
        pair = synth_pair(args.seed, dims=dims, K=args.labels, max_disp=args.max_disp,
                          smoothness=args.smoothness)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    p = args.out
    write_nifti(pair.F, p + "_fixed.nii")
    write_nifti(pair.M, p + "_moving.nii")
    write_nifti(pair.L_F, p + "_fixed_labels.nii")
    write_nifti(pair.L_M, p + "_moving_labels.nii")
    write_raw(p + "_u_true.raw", pair.u_true.data)
    return 0


def cmd_info(args) -> int:
    path = args.path
    if path.endswith(".raw"):
        try:
            arr, meta = read_raw(path)
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise InputError(str(exc)) from None
        print("format: raw")
        print(f"dims: {' '.join(str(d) for d in meta['dims'])}")
        print(f"channels: {meta.get('channels', 1)}")
        print(f"spacing: {' '.join(repr(float(s)) for s in meta.get('spacing', (1, 1, 1)))}")
        print(f"origin: {' '.join(repr(float(o)) for o in meta.get('origin', (0, 0, 0)))}")
        print(f"datatype: {meta.get('dtype', 'float64')}")
        print(f"byte_order: {meta.get('byte_order', 'little')}")
        return 0
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        _, hdr = read_nifti(buf)
    except NiftiFormatError as exc:
        raise InputError(f"{path}: {exc}") from None
    print("format: nifti-1")
    print(f"dims: {' '.join(str(d) for d in hdr.dims)}")
    print(f"spacing: {' '.join(repr(s) for s in hdr.spacing)}")
    print(f"origin: {' '.join(repr(o) for o in hdr.origin)}")
    print(f"datatype: {hdr.dtype.name} (code {hdr.datatype})")
    print(f"byte_order: {'little' if hdr.endian == '<' else 'big'}")
    print(f"scl_slope: {hdr.scl_slope!r}")
    print(f"scl_inter: {hdr.scl_inter!r}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # a typo must not silently resolve to some other option
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shardreg", description="Sharded deformable image registration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    reg = sub.add_parser("register", help="affine then deformable registration")
    reg.add_argument("--config", help="key = value file; flags override it")
    for key, (_, default, text) in OPTIONS.items():
        flag = "--" + key.replace("_", "-")
        shown = default if not isinstance(default, bool) else ("on" if default else "off")
        reg.add_argument(flag, dest=key, default=None, metavar="VALUE", help=f"{text} [{shown}]")

    met = sub.add_parser("metrics", help="Dice, inverse-weighted Dice and HD90 between label maps")
    met.add_argument("labels_a")
    met.add_argument("labels_b")
    met.add_argument("--spacing", help="voxel spacing x,y,z (defaults to the first file's header)")
    met.add_argument("--out", help="write the JSON here instead of stdout")

    syn = sub.add_parser("synth", help="write a synthetic labeled pair with a known warp")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--dims", default="48,48,48")
    syn.add_argument("--labels", type=int, default=8, help="number of ellipsoid labels K")
    syn.add_argument("--max-disp", type=float, default=0.15)
    syn.add_argument("--smoothness", type=float, default=None)
    syn.add_argument("--out", required=True, help="output prefix")

    info = sub.add_parser("info", help="print a volume header")
    info.add_argument("path")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "register":
            flags = {k: getattr(args, k) for k in OPTIONS}
            return cmd_register(resolve_config(flags, args.config))
        if args.command == "metrics":
            return cmd_metrics(args)
        if args.command == "synth":
            return cmd_synth(args)
        return cmd_info(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc.filename or ''} {exc.strerror or exc}".strip(), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
