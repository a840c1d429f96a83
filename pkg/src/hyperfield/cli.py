"""Single command-line entrypoint for the full pipeline.

Subcommands: synth, calibrate, sweep-wr, train, ablate, render,
eval-spectral, eval-spatial, extract, composite. Exit codes: 0 on success,
1 on domain errors, 2 on usage errors. Every command validates its inputs
before creating any output and writes exactly one JSON run manifest
alongside its outputs (manifests are the only outputs allowed to differ
between identical runs, and only in their timing field).

Configuration precedence is CLI flags > ``--config`` JSON file > built-in
defaults. ``--threads`` caps the BLAS thread pools and must take effect
before numpy loads, which is why all heavy imports live inside the
handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_threads(argv) -> None:
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv):
            for var in _THREAD_VARS:
                os.environ[var] = argv[idx + 1]


def _require_files(*paths) -> list[str]:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        from .errors import ValidationError

        raise ValidationError(f"missing input file(s): {', '.join(missing)}")
    return [str(p) for p in paths]


def _write_manifest(out_base, command, args_ns, inputs, outputs, started) -> None:
    out_base = Path(out_base)
    if out_base.is_dir():
        path = out_base / "manifest.json"
    else:
        path = out_base.parent / (out_base.name + ".manifest.json")
    config = {
        k: v for k, v in sorted(vars(args_ns).items()) if k not in ("handler", "config")
    }
    manifest = {
        "command": command,
        "config": config,
        "seed": getattr(args_ns, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# Handlers
# --------------------------------------------------------------------------


def _cmd_synth(args):
    import numpy as np

    from .camera import CameraModel
    from .scene import TurntableConfig, default_scene, default_wavelengths, emit_dataset

    out = Path(args.out)
    size = args.size
    cam = CameraModel(
        fx=args.focal or 1.25 * size,
        fy=args.focal or 1.25 * size,
        cx=(size - 1) / 2.0,
        cy=(size - 1) / 2.0,
        width=size,
        height=size,
    )
    cfg = TurntableConfig(
        n_views=args.views,
        radius=args.radius,
        elevation=args.elevation,
        look_at=np.zeros(3),
        intrinsics=cam,
    )
    emit_dataset(
        default_scene(),
        cfg,
        out,
        wavelengths=default_wavelengths(args.bands),
        seed=args.seed,
        noise_std=args.noise_std,
        train_frac=args.train_frac,
    )
    print(f"dataset written to {out} ({args.views} views, {args.bands} bands)")
    return [], [out]


def _cmd_calibrate(args):
    from .calibration import build_calibration, calibrate
    from .cube import cube_paths, read_cube, write_cube
    from .images import mask_from_png

    inputs = _require_files(
        *cube_paths(args.wr), args.roi, *cube_paths(getattr(args, "in_cube"))
    )
    wr_cube = read_cube(args.wr)
    roi = mask_from_png(args.roi)
    raw = read_cube(getattr(args, "in_cube"))
    calib = build_calibration(wr_cube, roi, percentile=args.percentile, window=args.window)
    write_cube(calibrate(raw, calib), args.out)
    print(
        f"calibrated cube written to {args.out} "
        f"(WR mask {calib.pixel_count} px at p={args.percentile:g})"
    )
    return inputs, [Path(args.out).with_suffix(".hdr"), Path(args.out).with_suffix(".bil")]


def _cmd_sweep_wr(args):
    from .calibration import percentile_sweep
    from .cube import cube_paths, read_cube
    from .images import mask_from_png

    inputs = _require_files(*cube_paths(args.wr), args.roi)
    ps = [float(p) for p in args.percentiles.split(",")]
    out = Path(args.out)
    rows = percentile_sweep(read_cube(args.wr), mask_from_png(args.roi), ps, out_dir=out)
    for row in rows:
        print(
            f"p={row.percentile:g}: {row.pixel_count} px, "
            f"median D={row.median_dev:.5f}, p95={row.p95_dev:.5f}, max={row.max_dev:.5f}"
        )
    return inputs, [out]


def _field_config_from_args(args, dataset):
    from .field import FieldConfig

    return FieldConfig(
        n_channels=dataset.n_bands,
        aabb=tuple(map(tuple, dataset.aabb.tolist())),
        pos_frequencies=args.pos_freq,
        dir_frequencies=args.dir_freq,
        trunk_layers=args.trunk_layers,
        trunk_width=args.trunk_width,
        radiance_layers=args.radiance_layers,
        radiance_width=args.radiance_width,
        predict_normals=args.predict_normals,
        density_scale=args.density_scale,
        density_bias=args.density_bias,
    )


def _train_config_from_args(args):
    from .losses import LossWeights
    from .train import TrainConfig

    weights = LossWeights(hsi=args.lambda_hsi, ang=args.lambda_ang)
    return TrainConfig(
        pretrain_iters=args.pretrain_iters,
        finetune_iters=args.finetune_iters,
        rays_per_batch=args.rays,
        lr_init=args.lr,
        lr_final=args.lr_final,
        coarse_samples=args.coarse_samples,
        fine_samples=args.fine_samples,
        weights=weights,
        seed=args.seed,
        eval_interval=args.eval_interval,
    )


def _ckpt_meta(dataset):
    return {
        "wavelengths_nm": [float(w) for w in dataset.wavelengths],
        "background_spectrum": [float(v) for v in dataset.background],
    }


def _cmd_train(args):
    from pathlib import Path

    from .dataset import load_dataset
    from .field import save_checkpoint
    from .train import save_state, two_stage, write_loss_csv

    _require_files(Path(args.dataset) / "dataset.json")
    dataset = load_dataset(args.dataset)
    field_config = _field_config_from_args(args, dataset)
    train_config = _train_config_from_args(args)

    result = two_stage(train_config, field_config, dataset)
    out = Path(args.out)
    meta = _ckpt_meta(dataset)
    save_state(out, result.state, meta=meta)
    pre_path = out.parent / (out.stem + "_pretrain" + out.suffix)
    save_checkpoint(pre_path, result.pretrain_params, step=train_config.pretrain_iters, meta=meta)
    outputs = [out, pre_path]
    if args.loss_csv:
        write_loss_csv(result.log_rows, args.loss_csv)
        outputs.append(args.loss_csv)
    print(f"checkpoint written to {out} after {result.state.step} steps")
    return [args.dataset], outputs


def _cmd_ablate(args):
    from .dataset import load_dataset
    from .train import DEFAULT_ABLATION_GRID, ablation_grid, write_ablation_csv

    _require_files(Path(args.dataset) / "dataset.json")
    dataset = load_dataset(args.dataset)
    field_config = _field_config_from_args(args, dataset)
    train_config = _train_config_from_args(args)
    if args.grid == "default":
        grid = DEFAULT_ABLATION_GRID
    else:
        grid = tuple(
            tuple(float(v) for v in pair.split(":")) for pair in args.grid.split(",")
        )
    rows = ablation_grid(train_config, field_config, dataset, grid)
    write_ablation_csv(rows, args.out)
    for row in rows:
        print(
            f"{row.label:>20} {row.stage:>9}: SAM {row.sam_mean:.5f}+/-{row.sam_sd:.5f} "
            f"PSNR {row.psnr_mean:.2f}+/-{row.psnr_sd:.2f}"
        )
    return [args.dataset], [args.out]


def _cmd_render(args):
    import numpy as np

    from .cube import write_cube
    from .dataset import load_dataset
    from .field import load_checkpoint
    from .images import float_to_png
    from .render import render_view

    inputs = _require_files(args.ckpt, Path(args.dataset) / "dataset.json")
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    if not 0 <= args.view < dataset.n_views:
        from .errors import ValidationError

        raise ValidationError(f"view {args.view} out of range (dataset has {dataset.n_views})")
    view = render_view(
        ckpt.params,
        dataset.cam,
        dataset.poses[args.view],
        dataset.wavelengths,
        background=dataset.background,
        coarse_samples=args.coarse_samples,
        fine_samples=args.fine_samples,
    )
    write_cube(view.cube, args.out)
    outputs = [Path(args.out).with_suffix(".hdr"), Path(args.out).with_suffix(".bil")]
    if args.depth_png:
        float_to_png(np.where(np.isfinite(view.depth), view.depth, 0.0), args.depth_png, normalize=True)
        outputs.append(args.depth_png)
    if args.acc_png:
        float_to_png(view.accumulation, args.acc_png)
        outputs.append(args.acc_png)
    print(f"rendered view {args.view} to {args.out}")
    return inputs, outputs


def _cmd_eval_spectral(args):
    from .dataset import load_dataset
    from .field import load_checkpoint
    from .spectral_metrics import evaluate_heldout

    inputs = _require_files(args.ckpt, Path(args.dataset) / "dataset.json")
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    metrics = evaluate_heldout(
        ckpt.params,
        dataset,
        mask_policy=args.mask_policy,
        out_dir=out,
        coarse_samples=args.coarse_samples,
        fine_samples=args.fine_samples,
        dataset_name=Path(args.dataset).name,
    )
    print(
        f"SAM {metrics.sam_mean:.5f}+/-{metrics.sam_sd:.5f} rad | "
        f"RMSE {metrics.rmse_mean:.5f}+/-{metrics.rmse_sd:.5f} | "
        f"SSIM {metrics.ssim_mean:.5f}+/-{metrics.ssim_sd:.5f} | "
        f"PSNR {metrics.psnr_mean:.3f}+/-{metrics.psnr_sd:.3f} dB "
        f"({metrics.n_views} views, {metrics.rays_per_view} rays/view)"
    )
    return inputs, [out]


def _cmd_eval_spatial(args):
    from .pointcloud import read_ply
    from .spatial_metrics import pr_sweep

    inputs = _require_files(args.pred, args.gt)
    try:
        start, stop, step = (float(v) for v in args.eps_grid.split(":"))
    except ValueError:
        from .errors import ValidationError

        raise ValidationError("--eps-grid must be start:stop:step")
    import numpy as np

    grid = np.arange(start, stop + step / 2, step)
    out = Path(args.out)
    curve = pr_sweep(
        read_ply(args.pred), read_ply(args.gt), grid,
        align=not args.no_align, out_dir=out, seed=args.seed,
    )
    print(
        f"best F-score {curve.best_f_percent:.2f} (0-100) at epsilon={curve.best_eps:g} m"
    )
    return inputs, [out]


def _cmd_extract(args):
    from .cube import BandTriplet
    from .extract import ExtractConfig, color_by_triplet, extract_pointcloud, refine_pointcloud
    from .field import load_checkpoint
    from .pointcloud import write_ply

    inputs = _require_files(args.ckpt)
    ckpt = load_checkpoint(args.ckpt)
    wavelengths = ckpt.meta.get("wavelengths_nm")
    cfg = ExtractConfig(
        resolution=args.resolution, sigma_min=args.sigma_min,
        surface_only=args.surface_only,
    )
    pc = extract_pointcloud(ckpt.params, cfg, wavelengths=wavelengths)
    if args.refine:
        pc = refine_pointcloud(pc, k=args.k, std_ratio=args.std_ratio)
    if args.colors:
        r, g, b = (float(v) for v in args.colors.split(","))
        color_by_triplet(pc, BandTriplet(r, g, b), wavelengths, path=args.out)
    else:
        write_ply(pc, args.out)
    print(f"{len(pc)} points written to {args.out}")
    return inputs, [args.out]


def _cmd_composite(args):
    from .cube import (
        BandTriplet,
        composite,
        cube_paths,
        read_cube,
        roi_mean_spectrum,
        write_spectrum_csv,
    )
    from .images import mask_from_png, write_png

    inputs = _require_files(*cube_paths(args.cube))
    if args.roi:
        inputs += _require_files(args.roi)
    cube = read_cube(args.cube)
    img = composite(cube, BandTriplet(args.r, args.g, args.b))
    write_png((img * 255.0).round().astype("uint8"), args.out)
    outputs = [args.out]
    if args.roi:
        if not args.spectrum_csv:
            from .errors import ValidationError

            raise ValidationError("--roi requires --spectrum-csv")
        spectrum = roi_mean_spectrum(cube, mask_from_png(args.roi))
        write_spectrum_csv(cube.wavelengths, spectrum, args.spectrum_csv)
        outputs.append(args.spectrum_csv)
    print(f"composite ({args.r:g}, {args.g:g}, {args.b:g}) nm written to {args.out}")
    return inputs, outputs


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--pretrain-iters", type=int, default=3000)
    p.add_argument("--finetune-iters", type=int, default=3000)
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--lambda-ang", type=float, default=0.25)
    p.add_argument("--lambda-hsi", type=float, default=0.75)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-final", type=float, default=5e-5)
    p.add_argument("--eval-interval", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--predict-normals", action="store_true")
    p.add_argument("--pos-freq", type=int, default=6)
    p.add_argument("--dir-freq", type=int, default=4)
    p.add_argument("--trunk-layers", type=int, default=4)
    p.add_argument("--trunk-width", type=int, default=64)
    p.add_argument("--radiance-layers", type=int, default=2)
    p.add_argument("--radiance-width", type=int, default=64)
    p.add_argument("--density-scale", type=float, default=2000.0)
    p.add_argument("--density-bias", type=float, default=-8.0)
    _add_sample_flags(p)


def _add_sample_flags(p):
    p.add_argument("--coarse-samples", type=int, default=64)
    p.add_argument("--fine-samples", type=int, default=64)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="hyperfield",
        description="Hyperspectral 3D reconstruction lab",
    )
    parser.add_argument("--threads", type=int, help="cap BLAS worker threads")
    parser.add_argument("--config", help="JSON file with default option values")
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}
    # HYPERFIELD_DATA_DIR provides the default dataset directory.
    data_dir = os.environ.get("HYPERFIELD_DATA_DIR")

    def add_parser(name, **kwargs):
        registry[name] = sub.add_parser(name, **kwargs)
        return registry[name]

    def add_dataset_flag(p):
        p.add_argument("--dataset", default=data_dir, required=data_dir is None)


    p = add_parser("synth", help="emit a synthetic turntable dataset")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--train-frac", type=float, default=0.9)
    p.add_argument("--radius", type=float, default=0.22)
    p.add_argument("--elevation", type=float, default=0.35)
    p.add_argument("--focal", type=float, default=None)
    p.set_defaults(handler=_cmd_synth, out_base="out")

    p = add_parser("calibrate", help="white-reference calibration of a cube")
    p.add_argument("--wr", required=True, help="white-reference cube stem")
    p.add_argument("--roi", required=True, help="coarse WR ROI mask PNG")
    p.add_argument("--percentile", type=float, default=70.0)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--in", dest="in_cube", required=True, help="raw cube stem")
    p.add_argument("--out", required=True, help="calibrated cube stem")
    p.set_defaults(handler=_cmd_calibrate, out_base="out")

    p = add_parser("sweep-wr", help="percentile threshold sweep report")
    p.add_argument("--wr", required=True)
    p.add_argument("--roi", required=True)
    p.add_argument("--percentiles", default="65,70,75")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_sweep_wr, out_base="out")

    p = add_parser("train", help="two-stage training run")
    add_dataset_flag(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", default=None)
    _add_train_flags(p)
    p.set_defaults(handler=_cmd_train, out_base="out")

    p = add_parser("ablate", help="loss-weight ablation grid")
    add_dataset_flag(p)
    p.add_argument("--grid", default="default", help='"default" or "a:h,a:h,..."')
    p.add_argument("--out", required=True, help="CSV path")
    _add_train_flags(p)
    p.set_defaults(handler=_cmd_ablate, out_base="out")

    p = add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    add_dataset_flag(p)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True, help="output cube stem")
    p.add_argument("--depth-png", default=None)
    p.add_argument("--acc-png", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_sample_flags(p)
    p.set_defaults(handler=_cmd_render, out_base="out")

    p = add_parser("eval-spectral", help="held-out spectral metrics")
    p.add_argument("--ckpt", required=True)
    add_dataset_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-policy", choices=("full", "foreground"), default="full")
    p.add_argument("--seed", type=int, default=0)
    _add_sample_flags(p)
    p.set_defaults(handler=_cmd_eval_spectral, out_base="out")

    p = add_parser("eval-spatial", help="point-cloud precision/recall sweep")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--eps-grid", required=True, help="start:stop:step in meters")
    p.add_argument("--out", required=True)
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_eval_spatial, out_base="out")

    p = add_parser("extract", help="extract a spectral point cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="PLY path")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--sigma-min", type=float, default=5.0)
    p.add_argument("--surface-only", action="store_true")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--std-ratio", type=float, default=2.0)
    p.add_argument("--colors", default=None, help="r,g,b wavelengths for a colored PLY")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_extract, out_base="out")

    p = add_parser("composite", help="band-triplet composite and ROI spectra")
    p.add_argument("--cube", required=True)
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--g", type=float, required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--out", required=True, help="PNG path")
    p.add_argument("--roi", default=None)
    p.add_argument("--spectrum-csv", default=None)
    p.set_defaults(handler=_cmd_composite, out_base="out")

    return parser, registry


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            # Config-file values become the chosen subcommand's defaults;
            # explicit flags still win on the re-parse.
            defaults = json.loads(Path(args.config).read_text())
            registry[args.command].set_defaults(**defaults)
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    from .errors import HyperfieldError

    started = time.time()
    try:
        inputs, outputs = args.handler(args)
    except HyperfieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_base = getattr(args, getattr(args, "out_base", "out"))
    _write_manifest(out_base, args.command, args, inputs, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
