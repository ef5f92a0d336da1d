"""Command-line entry point: simulate, fit, segment, identify, report, replay."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, InvalidArgument, KinfitError
from .identifiability import check_coprimality, local_identifiability, multistart_uniqueness, tubule_ratio
from .inversion import FitConfig, fit_image, model_map_from_roi
from .kinetics import InputFunction, ModelSpec, TimeGrid
from .preprocess import DynamicImage, gaussian_kernel, segment_roi, smooth_frames, time_average
from .simulate import (
    NoiseConfig,
    Phantom,
    SinogramGeometry,
    default_frame_schedule,
    default_input_function,
    default_phantom,
    simulate_acquisition,
    synthesize_dynamic,
)
from .stackio import StackFile, atomic_write, read_json, read_stack, sha256_file, write_json, write_pgm, write_stack

log = logging.getLogger("kinfit")


class UsageError(KinfitError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- shared loaders ------------------------------------------------------

def _load_phantom(path: str | None) -> Phantom:
    if path is None:
        return default_phantom()
    return Phantom.from_json(Path(path).read_text())


def _load_input_function(args, near: Path | None = None) -> InputFunction:
    if getattr(args, "gamma", None):
        return InputFunction.from_gamma(*args.gamma)
    path = getattr(args, "input_function", None)
    if path is None and near is not None and (near.parent / "input_function.json").exists():
        path = near.parent / "input_function.json"
    if path is None:
        return default_input_function()
    d = read_json(path)
    try:
        return InputFunction.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed input function: {exc}") from exc


def _load_schedule(path: str | None) -> TimeGrid:
    if path is None:
        return default_frame_schedule()
    d = read_json(path)
    try:
        if isinstance(d, list):
            return TimeGrid.from_durations(d)
        if "durations_s" in d:
            return TimeGrid.from_durations(d["durations_s"])
        return TimeGrid.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed schedule: {exc}") from exc


def _versions() -> dict:
    import scipy
    import skimage

    return {"kinfit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-image": skimage.__version__}


class _Run:
    """Collects what a command read and wrote for its manifest."""

    def __init__(self, command: str, argv: list[str], out: Path):
        self.command, self.argv, self.out = command, list(argv), out
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.config: dict = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def read(self, path):
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = sha256_file(path)

    def wrote(self, path):
        self.outputs[str(Path(path).relative_to(self.out))] = sha256_file(path)

    def lap(self, name: str):
        now = time.perf_counter()
        self.timings[name] = round(now - self._t0, 6)

    def finish(self, seed=None):
        self.lap("total")
        write_json(self.out / "manifest.json", {
            "command": self.command,
            "argv": self.argv,
            "seed": seed,
            "config": self.config,
            "versions": _versions(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_s": self.timings,
        })


def _save_stack(run: _Run, name: str, stack: StackFile):
    path = run.out / name
    write_stack(path, stack)
    run.wrote(path)


# --- commands ------------------------------------------------------------

def cmd_simulate(args, argv) -> int:
    out = Path(args.out)
    run = _Run("simulate", argv, out)
    for p in (args.phantom, args.input_function, args.schedule):
        run.read(p)
    phantom = _load_phantom(args.phantom)
    IF = _load_input_function(args)
    grid = _load_schedule(args.schedule)
    geom = SinogramGeometry(n_angles=args.n_angles)
    noise = NoiseConfig(count_scale=args.count_scale, gaussian_snr_db=args.snr_db, seed=args.seed,
                        enabled=not args.no_noise)
    run.config = {"geometry": geom.to_dict(), "noise": noise.to_dict(), "n": args.n}

    write_json(out / "phantom.json", phantom.to_dict())
    run.wrote(out / "phantom.json")
    write_json(out / "input_function.json", IF.to_dict())
    run.wrote(out / "input_function.json")

    clean = synthesize_dynamic(phantom, IF, grid)
    run.lap("forward")
    if args.write_clean or args.no_noise or args.n == 0:
        _save_stack(run, "clean.kstk", StackFile(clean.voxels, grid, meta={"kind": "noise-free"}))
    if args.n > 0:
        stacks, meta = simulate_acquisition(phantom, IF, grid, geom, None if args.no_noise else noise,
                                            args.n, clean=clean)
        run.config["count_scale"] = meta.get("count_scale")
        if args.no_noise:
            _save_stack(run, "roundtrip.kstk", StackFile(stacks[0].voxels, grid, meta={"kind": "roundtrip"}))
        else:
            for r, st in enumerate(stacks):
                _save_stack(run, f"realization_{r:03d}.kstk",
                            StackFile(st.voxels, grid, meta={"kind": "noisy", "realization": r, "seed": args.seed}))
        run.lap("acquisition")
    run.finish(args.seed)
    return 0


def _fit_config(args) -> FitConfig:
    base = FitConfig.noiseless() if args.noiseless else FitConfig()
    eps = base.stop_tolerance if args.eps is None else args.eps
    extra = {}
    if args.literal:
        extra = {"feasible_gcv": False, "monotone": False, "max_step": None}
    return FitConfig(activity_threshold=args.tau, stop_tolerance=eps, max_iterations=args.max_iter,
                     seed=args.seed, **extra)


def _prepare(stack: StackFile, args, need_grid: bool = True) -> DynamicImage:
    if need_grid and stack.grid is None:
        raise FormatError("stack has no frame schedule")
    dyn = DynamicImage(stack.voxels.astype(float), stack.grid)
    if not args.no_smooth:
        dyn = smooth_frames(dyn, gaussian_kernel(args.sigma, args.L))
    return dyn


def cmd_fit(args, argv) -> int:
    out = Path(args.out)
    run = _Run("fit", argv, out)
    run.read(args.stack)
    run.read(args.input_function)
    run.read(args.phantom)
    stack = read_stack(args.stack)
    IF = _load_input_function(args, near=Path(args.stack))
    dyn = _prepare(stack, args)
    I, J, _ = dyn.shape
    config = _fit_config(args)
    run.config = {"fit": config.to_dict(), "smooth": not args.no_smooth, "sigma": args.sigma, "L": args.L,
                  "segment": args.segment, "gamma_window": args.gamma_window}

    V_b = np.full((I, J), args.vb)
    if args.phantom:
        ph = _load_phantom(args.phantom)
        if ph.shape != (I, J):
            raise InvalidArgument(f"phantom shape {ph.shape} does not match stack {(I, J)}")
        for label, region in ph.regions.items():
            V_b[ph.labels == label] = region.V_b
    models: ModelSpec | np.ndarray = ModelSpec.from_name(args.model)
    if args.segment:
        roi = segment_roi(time_average(dyn), args.gamma_window)
        models = model_map_from_roi(roi.mask)
        _save_stack(run, "roi.kstk", StackFile(roi.mask.astype(np.float32), units="1", meta={
            "kind": "roi", "threshold": roi.threshold, "seed": list(roi.seed)}))
    run.lap("preprocess")

    res = fit_image(dyn, IF, stack.grid, V_b, models, config)
    run.lap("fit")
    for name, m in res.maps.items():
        _save_stack(run, f"K_{name}.kstk", StackFile(m.astype(np.float32), units="1/min",
                                                    meta={"kind": "parameter", "parameter": name}))
    _save_stack(run, "status.kstk", StackFile(res.status.astype(np.float32), units="1",
                                              meta={"kind": "status", "codes": {"0": "Converged", "1": "MaxIterations",
                                                                                 "2": "BelowActivityThreshold"}}))
    _save_stack(run, "residual.kstk", StackFile(np.nan_to_num(res.residual, nan=0.0).astype(np.float32),
                                                units="1", meta={"kind": "residual"}))
    run.finish(args.seed)
    return 0


def cmd_segment(args, argv) -> int:
    out = Path(args.out)
    run = _Run("segment", argv, out)
    run.read(args.stack)
    dyn = _prepare(read_stack(args.stack), args, need_grid=False)
    roi = segment_roi(time_average(dyn), args.gamma_window)
    _save_stack(run, "roi.kstk", StackFile(roi.mask.astype(np.float32), units="1", meta={"kind": "roi"}))
    write_pgm(out / "roi.pgm", roi.mask.astype(float))
    run.wrote(out / "roi.pgm")
    summary = {"threshold": roi.threshold, "seed": list(roi.seed), "sigma": roi.sigma,
               "separation_column": roi.separation_column, "tied_maximum": roi.tied_maximum,
               "n_pixels": int(roi.mask.sum())}
    write_json(out / "segment.json", summary)
    run.wrote(out / "segment.json")
    run.finish()
    return 0


def _parse_k(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise InvalidArgument(f"cannot parse rate constants {text!r}") from exc


def cmd_identify(args, argv) -> int:
    out = Path(args.out)
    run = _Run("identify", argv, out)
    model = ModelSpec.from_name(args.model)
    k = _parse_k(args.k)
    IF = _load_input_function(args)
    grid = _load_schedule(args.schedule)
    report: dict = {"model": model.key, "k": k}
    if model is ModelSpec.THREE_RENAL:
        report["coprimality"] = check_coprimality(k).to_dict()
    report["local"] = local_identifiability(model, k, IF, grid, args.vb).to_dict()
    if args.starts > 0:
        config = FitConfig.noiseless(stop_tolerance=args.eps) if args.eps else FitConfig.noiseless()
        fixed = args.fix.split(",") if args.fix else None
        ms = multistart_uniqueness(model, k, IF, grid, args.vb, args.starts, args.tol, config, args.seed, fixed)
        report["multistart"] = ms.to_dict()
    if args.maps:
        maps = {n: read_stack(Path(args.maps) / f"K_{n}.kstk").voxels[:, :, 0].astype(float)
                for n in ("k_tm", "k_ut")}
        report["tubule"] = tubule_ratio(maps, args.floor, args.gamma_expected).to_dict()
    run.config = {"starts": args.starts, "tol": args.tol, "vb": args.vb}
    write_json(out / "identify.json", report)
    run.wrote(out / "identify.json")
    run.finish(args.seed)
    return 0


def _load_maps(directory: Path) -> dict[str, np.ndarray]:
    maps = {}
    for path in sorted(directory.glob("K_*.kstk")):
        maps[path.stem[2:]] = read_stack(path).voxels[:, :, 0].astype(float)
    if not maps:
        raise FormatError(f"{directory}: no parameter maps (K_*.kstk)")
    return maps


def cmd_report(args, argv) -> int:
    out = Path(args.out)
    run = _Run("report", argv, out)
    dirs = [Path(d) for d in args.maps]
    all_maps = [_load_maps(d) for d in dirs]
    names = list(all_maps[0])
    shape = all_maps[0][names[0]].shape
    if args.phantom:
        run.read(args.phantom)
        ph = _load_phantom(args.phantom)
        if ph.shape != shape:
            raise InvalidArgument(f"phantom shape {ph.shape} does not match maps {shape}")
        regions = {str(label): ph.labels == label for label in ph.region_labels()}
    else:
        regions = {"all": np.ones(shape, dtype=bool)}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["region", "parameter", "mean", "std", "n_pixels"]
    if args.phantom:
        header.append("truth")
    w.writerow(header)
    for region, mask in regions.items():
        for name in names:
            vals = np.concatenate([m[name][mask] for m in all_maps])
            row = [region, name, f"{vals.mean():.6g}", f"{vals.std():.6g}", vals.size]
            if args.phantom:
                k = ph.regions[int(region)].k
                row.append(f"{k.as_dict()[name]:.6g}" if name in k.model.param_names else "")
            w.writerow(row)
    atomic_write(out / "summary.csv", buf.getvalue().encode())
    run.wrote(out / "summary.csv")
    for name in names:
        write_pgm(out / f"K_{name}.pgm", all_maps[0][name])
        run.wrote(out / f"K_{name}.pgm")

    if args.stack and args.pixels:
        stack = read_stack(args.stack)
        run.read(args.stack)
        pixels = []
        for text in args.pixels:
            i, j = (int(x) for x in text.split(","))
            pixels.append((i, j))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "t_mid_min"] + [f"pixel_{i}_{j}" for i, j in pixels])
        mids = stack.grid.midpoints if stack.grid is not None else np.arange(stack.voxels.shape[2])
        for t, tm in enumerate(mids):
            w.writerow([t, f"{tm:.6g}"] + [f"{stack.voxels[i, j, t]:.6g}" for i, j in pixels])
        atomic_write(out / "tac.csv", buf.getvalue().encode())
        run.wrote(out / "tac.csv")
    run.finish()
    return 0


def cmd_replay(args, argv) -> int:
    manifest = read_json(args.manifest)
    try:
        replay_argv = list(manifest["argv"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{args.manifest}: manifest has no argv") from exc
    return main(replay_argv)


# --- parser --------------------------------------------------------------

def _add_if(p):
    p.add_argument("--if", dest="input_function", help="input function JSON")
    p.add_argument("--gamma", nargs=4, type=float, metavar=("A", "T0", "ALPHA", "BETA"),
                   help="gamma-variate input function (kBq/ml, min, -, min)")


def _add_smoothing(p):
    p.add_argument("--no-smooth", action="store_true", help="skip Gaussian frame smoothing")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--L", type=int, default=3, help="smoothing window size (odd)")
    p.add_argument("--gamma-window", type=int, default=10, help="segmentation neighbourhood (pixels)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kinfit", description="Compartmental parametric imaging for dynamic PET.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="synthesize dynamic acquisitions")
    p.add_argument("--out", required=True)
    p.add_argument("--phantom", help="phantom JSON (default: built-in four-region phantom)")
    _add_if(p)
    p.add_argument("--schedule", help="frame schedule JSON")
    p.add_argument("--n", type=int, default=1, help="number of noisy realizations")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--write-clean", action="store_true", help="also write the noise-free stack")
    p.add_argument("--count-scale", type=float, default=None)
    p.add_argument("--snr-db", type=float, default=20.0)
    p.add_argument("--n-angles", type=int, default=180)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="pixel-wise kinetic fit of a stack")
    p.add_argument("stack")
    p.add_argument("--out", required=True)
    _add_if(p)
    p.add_argument("--model", default="two_catenary")
    p.add_argument("--vb", type=float, default=0.2, help="blood volume fraction")
    p.add_argument("--phantom", help="take V_b per region from this phantom")
    _add_smoothing(p)
    p.add_argument("--segment", action="store_true", help="renal model inside the ROI, 2C outside")
    p.add_argument("--eps", type=float, default=None, help="stopping tolerance")
    p.add_argument("--noiseless", action="store_true", help="noise-free stopping default")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--tau", type=float, default=1e2, help="activity threshold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--literal", action="store_true", help="plain GCV step without safeguards")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("segment", help="automatic ROI from the time-averaged stack")
    p.add_argument("stack")
    p.add_argument("--out", required=True)
    _add_smoothing(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("identify", help="identifiability checks for a parameter vector")
    p.add_argument("--model", required=True)
    p.add_argument("--k", required=True, help="comma-separated rate constants")
    p.add_argument("--out", required=True)
    _add_if(p)
    p.add_argument("--schedule")
    p.add_argument("--vb", type=float, default=0.2)
    p.add_argument("--starts", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fix", help="comma-separated parameters held at their true value")
    p.add_argument("--maps", help="fit output directory for the tubule ratio")
    p.add_argument("--floor", type=float, default=1e-6)
    p.add_argument("--gamma-expected", type=float, default=1e2)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("report", help="CSV summaries and PGM renderings of parameter maps")
    p.add_argument("maps", nargs="+", help="fit output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--phantom")
    p.add_argument("--stack", help="stack for TAC export")
    p.add_argument("--pixels", nargs="*", help="i,j pixels for TAC export")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (KinfitError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1 if not isinstance(exc, UsageError) else 2


if __name__ == "__main__":
    sys.exit(main())
