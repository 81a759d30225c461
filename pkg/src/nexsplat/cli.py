"""Command-line surface: toy studies, rendering, checks, and fitting.

Every command is deterministic given --seed; omitting it derives one from
system entropy and prints it.  Exit codes: 0 success, 1 check failure,
2 usage or parse error.
"""
from __future__ import annotations

import csv
import json
import secrets
import sys
from pathlib import Path

import click
import numpy as np

from .adjoint import gradient_check
from .compositor import composite_forward, russian_roulette_estimate
from .images import read_png, write_pfm, write_png, write_sidecar
from .optimizer import TrainConfig, train
from .primitives import gather_sorted, load_camera, load_scene, save_scene
from .render import render
from .studies import (
    STUDY_MODELS,
    blend_study_camera,
    blend_study_scene,
    transmit_study_camera,
    transmit_study_scene,
)
from .transmittance import TransmittanceModel, eval_T, model_from_config, model_to_config

GRADCHECK_TOLERANCE = 1e-4


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = secrets.randbits(32)
        click.echo(f"seed: {seed} (derived from entropy)")
    return int(seed)


def _parse_model(tag: str, params: tuple[str, ...]) -> TransmittanceModel:
    """Parse 'linear', 'quadratic:c=0.5', or tag plus --param k=v pairs."""
    cfg: dict = {}
    if ":" in tag:
        tag, _, inline = tag.partition(":")
        params = tuple(inline.split(",")) + tuple(params)
    cfg["model"] = tag
    for kv in params:
        if "=" not in kv:
            raise click.UsageError(f"--param expects k=v, got {kv!r}")
        key, _, value = kv.partition("=")
        try:
            cfg[key.strip()] = float(value)
        except ValueError as exc:
            raise click.UsageError(f"--param {kv!r}: {exc}") from exc
    try:
        return model_from_config(cfg)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _model_name(model: TransmittanceModel) -> str:
    return model.describe().replace("(", "_").replace(")", "").replace("=", "")


def _study_models(model_args: tuple[str, ...]) -> list[TransmittanceModel]:
    if not model_args:
        return list(STUDY_MODELS)
    return [_parse_model(m, ()) for m in model_args]


def _write_image(out_dir: Path, base: str, data: np.ndarray, config: dict) -> None:
    write_png(out_dir / f"{base}.png", data)
    write_pfm(out_dir / f"{base}.pfm", data)
    write_sidecar(out_dir / f"{base}.json", config)


@click.group()
def main() -> None:
    """Generalized-transmittance splatting toolkit."""


@main.command("transmit-study")
@click.option("--seed", type=int, default=None, help="Scene generator seed.")
@click.option("--model", "models", multiple=True,
              help="Model spec like quadratic:c=0.5 (repeatable; default: all nine).")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
def cmd_transmit_study(seed, models, out, size, threads):
    """Stack 100 low-opacity splats; emit transmittance and overdraw maps.

    Per model: the 1 - residual-transmittance image, the overdraw image, and
    a CSV of (tau_bar, discrete_T, mother_T) along the center ray.
    """
    seed = _resolve_seed(seed)
    out.mkdir(parents=True, exist_ok=True)
    scene = transmit_study_scene(seed)
    camera = transmit_study_camera(size)
    center_ray = camera.ray_for_pixel(size // 2, size // 2)
    samples = gather_sorted(scene, center_ray)
    for model in _study_models(models):
        name = _model_name(model)
        cfg = {"study": "transmit", "seed": seed, "size": size,
               "model": model_to_config(model)}
        result = render(scene, camera, model, np.zeros(3), threads=threads)
        _write_image(out, f"transmit_{name}_inv_transmittance",
                     1.0 - result.residual, cfg)
        od = result.overdraw.astype(np.float64)
        _write_image(out, f"transmit_{name}_overdraw",
                     od / max(1.0, od.max()), cfg | {"max_overdraw": int(od.max())})
        fwd = composite_forward(model, samples, np.zeros(3))
        tau = np.concatenate([[0.0], np.cumsum([s.alpha for s in samples])])
        discrete_T = np.concatenate([[1.0], 1.0 - np.cumsum(fwd.weights)])
        with open(out / f"transmit_{name}_center_ray.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "tau_bar", "discrete_T", "mother_T"])
            for i in range(len(tau)):
                writer.writerow([i, f"{tau[i]:.12g}", f"{discrete_T[i]:.12g}",
                                 f"{eval_T(model, tau[i]):.12g}"])
        click.echo(f"transmit-study: {model.describe()} "
                   f"total_overdraw={int(result.overdraw.sum())}")


@main.command("blend-study")
@click.option("--variant", type=click.Choice(["concentric", "cyclic"]), required=True)
@click.option("--model", "models", multiple=True)
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
def cmd_blend_study(variant, models, out, size, threads):
    """Blend three opaque colored splats; emit RGB, scan line, and coverage."""
    out.mkdir(parents=True, exist_ok=True)
    scene = blend_study_scene(variant)
    camera = blend_study_camera(size)
    for model in _study_models(models):
        name = _model_name(model)
        cfg = {"study": f"blend-{variant}", "size": size,
               "model": model_to_config(model)}
        result = render(scene, camera, model, np.zeros(3), threads=threads)
        _write_image(out, f"blend_{variant}_{name}_rgb", result.rgb, cfg)
        _write_image(out, f"blend_{variant}_{name}_inv_transmittance",
                     1.0 - result.residual, cfg)
        row = size // 2
        with open(out / f"blend_{variant}_{name}_scanline.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["column", "r", "g", "b"])
            for col in range(size):
                r, g, b = result.rgb[row, col]
                writer.writerow([col, f"{r:.12g}", f"{g:.12g}", f"{b:.12g}"])
        click.echo(f"blend-study[{variant}]: {model.describe()} done")


@main.command("render")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--camera", "camera_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", default="exponential", show_default=True)
@click.option("--param", "params", multiple=True, help="Model parameter k=v (repeatable).")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--background", nargs=3, type=float, default=(0.0, 0.0, 0.0), show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--max-splats", type=int, default=128, show_default=True)
@click.option("--alpha-cutoff", type=float, default=1.0 / 255.0, show_default=True)
def cmd_render(scene_path, camera_path, model, params, out, background, threads,
               max_splats, alpha_cutoff):
    """Render a scene file and write radiance, overdraw, and residual maps."""
    mdl = _parse_model(model, params)
    try:
        scene = load_scene(scene_path)
        camera = load_camera(camera_path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise click.UsageError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    result = render(scene, camera, mdl, np.asarray(background), threads=threads,
                    max_splats=max_splats, alpha_cutoff=alpha_cutoff)
    cfg = {"scene": str(scene_path), "camera": str(camera_path),
           "model": model_to_config(mdl), "background": list(background),
           "max_splats": max_splats, "alpha_cutoff": alpha_cutoff}
    _write_image(out, "rgb", result.rgb, cfg)
    _write_image(out, "overdraw",
                 result.overdraw / max(1, result.overdraw.max()),
                 cfg | {"max_overdraw": int(result.overdraw.max())})
    _write_image(out, "residual_transmittance", result.residual, cfg)
    click.echo(f"rendered {camera.width}x{camera.height}, "
               f"mean overdraw {result.overdraw.mean():.2f}")


@main.command("gradcheck")
@click.option("--model", default="linear", show_default=True)
@click.option("--param", "params", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--rays", type=int, default=100, show_default=True)
@click.pass_context
def cmd_gradcheck(ctx, model, params, seed, rays):
    """Analytic adjoints against finite differences on random rays."""
    mdl = _parse_model(model, params)
    seed = _resolve_seed(seed)
    report = gradient_check(mdl, n_rays=rays, rng_seed=seed)
    click.echo(f"gradcheck {report['model']}: mode={report['mode']} "
               f"max_rel_err={report['max_rel_err']:.3e} "
               f"rays={report['n_checked']} skipped_boundary={report['n_skipped']}")
    if report["max_rel_err"] > GRADCHECK_TOLERANCE:
        click.echo(f"FAIL: above tolerance {GRADCHECK_TOLERANCE:g}")
        ctx.exit(1)
    click.echo("PASS")


@main.command("stochastic-check")
@click.option("--model", default="linear", show_default=True)
@click.option("--param", "params", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--trials", type=int, default=100_000, show_default=True)
@click.option("--rays", type=int, default=10, show_default=True)
@click.pass_context
def cmd_stochastic_check(ctx, model, params, seed, trials, rays):
    """Roulette estimator means against the deterministic forward pass."""
    from .compositor import SplatSample

    mdl = _parse_model(model, params)
    seed = _resolve_seed(seed)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for r in range(rays):
        n = int(rng.integers(2, 20))
        samples = [SplatSample(float(i), float(a), tuple(e)) for i, (a, e) in
                   enumerate(zip(rng.uniform(0.05, 0.9, n), rng.uniform(0, 1, (n, 3))))]
        bg = rng.uniform(0, 1, 3)
        det = composite_forward(mdl, samples, bg).radiance
        mean, se = russian_roulette_estimate(mdl, samples, rng_seed=seed + r,
                                             n_trials=trials, background=bg)
        if trials < 2:
            click.echo(f"ray {r}: mean={mean.round(6).tolist()} se={se.tolist()} "
                       "(single trial: no pass/fail)")
            continue
        z = np.abs(mean - det) / np.maximum(se, 1e-12)
        worst = max(worst, float(z.max()))
        click.echo(f"ray {r}: |z| = {z.round(3).tolist()}")
    if trials < 2:
        return
    click.echo(f"stochastic-check {mdl.describe()}: worst |z| = {worst:.3f}")
    if worst > 3.0:
        click.echo("FAIL: beyond 3 standard errors")
        ctx.exit(1)
    click.echo("PASS")


@main.command("fit")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "targets", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--camera", "cameras", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
def cmd_fit(config_path, scene_path, targets, cameras, out):
    """Fit a scene to target images; write the scene, report, and metrics."""
    if len(targets) != len(cameras):
        raise click.UsageError("--target and --camera must be paired")
    try:
        config = TrainConfig.from_json(config_path)
        scene = load_scene(scene_path)
        views = [(load_camera(c), read_png(t)) for c, t in zip(cameras, targets)]
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise click.UsageError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    fitted, report = train(scene, views, config)
    save_scene(fitted, out / "scene_final.json")
    report.to_csv(out / "report.csv")
    report.metrics_to_json(out / "metrics.json")
    final_psnr = [m["psnr"] for m in report.final_metrics]
    click.echo(f"fit: {report.iterations} iterations, "
               f"psnr per view: {[round(p, 2) for p in final_psnr]}")


if __name__ == "__main__":
    sys.exit(main())
