#!/usr/bin/env python3

import json
import logging
import os
import sys
import time

import click
import numpy as np
import torch

from . import optimize
from .diff import FD_STEP, PER_GROUP, GradReport, grad_check, random_scene
from .extract import Scene, TriMesh, extract_quads
from .export import read_mesh, write_obj, write_tet
from .grid import ScalarGrid
from .lib import ensure_output_dir, expand_targets, get_config, target_slug, write_config
from .logger import handler, logger, timings
from .meshcheck import check_topology
from .metrics import METRIC_SAMPLES, metrics
from .optimize import FitAborted, FitConfig
from .targets import BUILTIN_PREFIX, MeshTarget, load_target
from .tets import THIN_TET_VOLUME, extract_tets, filter_thin_tets

EXIT_IO = 2
EXIT_ABORTED = 3
EXIT_GRADIENT = 1
GRADCHECK_SAMPLES = 200
OCTREE_BASE_RESOLUTION = 16
OCTREE_DEPTH = 3


def parse_rotate(ctx, param, value):
    if value is None:
        return None
    try:
        angles = tuple(float(v) for v in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected x,y,z in degrees, got {value}")
    if len(angles) != 3:
        raise click.BadParameter(f"expected three angles, got {len(angles)}")
    return angles


def parse_weights(ctx, param, value):
    weights = {}
    for item in value:
        name, sep, number = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected name=value, got {item}")
        try:
            weights[name] = float(number)
        except ValueError:
            raise click.BadParameter(f"weight {name} is not a number: {number}")
    return weights


def shape_options(f):
    f = click.option("--scale", type=float, default=None, help="uniform scale of a builtin target")(f)
    f = click.option("--rotate", callback=parse_rotate, default=None, help="x,y,z Euler angles in degrees")(f)
    return f


def fit_options(f):
    f = click.option("--samples", type=int, default=None, help="metric samples per surface")(f)
    f = click.option("--edge-phase-steps", type=int, default=None, help="steps of the edge regularizer ramp")(f)
    f = click.option(
        "-w", "--weight", "weights", multiple=True, callback=parse_weights, help="loss weight name=value"
    )(f)
    f = click.option("--seed", type=int, default=None, envvar="FLEXI_SEED", help="sampling seed")(f)
    f = click.option("--lr", type=float, default=None, help="Adam learning rate")(f)
    f = click.option("--iters", type=int, default=None, help="iterations of the main fit")(f)
    f = click.option("--res", type=int, default=None, help="grid resolution per axis")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML run configuration")(f)
    return shape_options(f)


def load_fit_config(config_path=None, weights=None, **options) -> FitConfig:
    """CLI options override the run configuration file, which overrides the defaults"""
    values = get_config(config_path) if config_path else {}
    renamed = {
        "res": "resolution",
        "iters": "iterations",
        "samples": "metric_samples",
        "octree": "octree_depth",
        "refine_threshold": "octree_threshold",
    }
    for key, value in options.items():
        if value is not None:
            values[renamed.get(key, key)] = value
    if weights:
        values["weights"] = {**(values.get("weights") or {}), **weights}
    depth = values.get("octree_depth") or (values.get("octree") or {}).get("depth")
    if depth and "resolution" not in values:
        values["resolution"] = OCTREE_BASE_RESOLUTION
    return FitConfig.from_dict(values)


def exit_on_io_error(fun, *args, **kwargs):
    try:
        return fun(*args, **kwargs)
    except (OSError, ValueError) as e:
        logger.error(f"❌ {e}")
        sys.exit(EXIT_IO)


def load_metric_target(spec: str):
    """Builtins as usual; mesh files as stored, so both sides share one frame"""
    if spec.startswith(BUILTIN_PREFIX):
        return load_target(spec)
    vertices, faces = read_mesh(spec)
    watertight = check_topology((vertices, faces), self_intersect=False).is_watertight
    return MeshTarget(spec, vertices, faces, watertight)


def write_json(data, path: str) -> None:
    with open(path, "w") as f:
        f.write(data if isinstance(data, str) else json.dumps(data, indent=2))
    logger.debug(f"Wrote {path}")


def write_surface(path: str, result, final_split: bool) -> None:
    if final_split or result.quads is None:
        write_obj(path, *result.mesh.numpy())
    else:
        quads = result.quads
        write_obj(path, quads.vertices.detach().numpy(), quads.quads.numpy(), quads.triangles.numpy())


@click.group()
@click.option("--verbose", help="verbose", is_flag=True)
@click.option("--threads", type=int, default=None, help="torch intra-op threads")
def cli(verbose, threads):
    if verbose:
        handler.setLevel(logging.DEBUG)
    else:
        handler.setLevel(logging.INFO)
    if threads:
        torch.set_num_threads(threads)
        logger.debug(f"Using {threads} thread(s)")


@cli.command()
@click.option("--target", default=None, help="builtin:<name> or a mesh file")
@fit_options
@click.option("--method", type=click.Choice(["flexicubes", "mc"]), default=None)
@click.option(
    "--octree",
    type=int,
    is_flag=False,
    flag_value=OCTREE_DEPTH,
    default=None,
    help=f"refine an octree down to this depth ({OCTREE_DEPTH} when given alone)",
)
@click.option("--refine-threshold", type=float, default=None, help="running leaf loss that triggers a split")
@click.option("--tet", "with_tet", is_flag=True, help="also write a tetrahedral mesh")
@click.option("--final-split/--keep-quads", default=True, help="triangulate the output surface")
@click.option("--out", "out_dir", default="out", show_default=True)
@click.option("--report-json", type=click.Path(dir_okay=False), help="copy of the metrics report")
def fit(with_tet, final_split, out_dir, report_json, **options):
    """Fits a grid to a target and writes the mesh, its metrics and a checkpoint"""
    if options.get("octree") and with_tet:
        raise click.UsageError("--octree cannot be combined with --tet")
    config = exit_on_io_error(load_fit_config, **options)
    out = exit_on_io_error(ensure_output_dir, out_dir)
    write_config(config.as_dict(), f"{out}/config.yaml")
    target = exit_on_io_error(load_target, config.target, config.rotate, config.scale)

    try:
        result = optimize.fit(config, target, out)
    except FitAborted as e:
        logger.error(f"💥 Fit aborted: {e.reason} (checkpoint: {e.checkpoint})")
        sys.exit(EXIT_ABORTED)

    write_surface(f"{out}/mesh.obj", result, final_split)
    if with_tet:
        scene = result.state.scene
        tets = filter_thin_tets(extract_tets(scene.grid, scene.params, scene.tables, result.quads))
        write_tet(f"{out}/mesh.tet", *tets.numpy())
        logger.info(f"Tetrahedral mesh: {tets.num_tets} tets, {tets.defects} boundary defects")
    if result.metrics is None:
        logger.warning("No metrics, the fitted surface is empty")
        return
    write_json(result.metrics.to_json(), f"{out}/metrics.json")
    if report_json:
        write_json(result.metrics.to_json(), report_json)
    logger.info(f"Chamfer distance {result.metrics.cd:.6g}, F1 {result.metrics.f1:.4f}")


@cli.command()
@click.option("--target", default="builtin:sphere", show_default=True)
@shape_options
@click.option("--res", type=int, default=32, show_default=True)
@click.option("--method", type=click.Choice(["flexicubes", "mc"]), default="flexicubes", show_default=True)
@click.option("--final-split/--keep-quads", default=True)
@click.option("--out", default="mesh.obj", show_default=True)
@click.option("--report-json", type=click.Path(dir_okay=False), help="topology report")
def extract(target, rotate, scale, res, method, final_split, out, report_json):
    """Samples a target on the grid and extracts it without fitting"""
    shape = exit_on_io_error(load_target, target, rotate or (0.0, 0.0, 0.0), scale or 1.0)
    scene = Scene(ScalarGrid.from_sdf(shape.sdf, res), method=method)
    with torch.no_grad():
        mesh = scene.final_mesh()
        quads = None if method == "mc" else extract_quads(scene.grid, scene.params, scene.tables)
    if final_split or quads is None:
        exit_on_io_error(write_obj, out, *mesh.numpy())
    else:
        exit_on_io_error(write_obj, out, quads.vertices.numpy(), quads.quads.numpy())
    report = check_topology(mesh.numpy())
    logger.info(f"✅ {len(mesh.faces)} triangles, euler {report.euler}, {report.boundary_edges} boundary edges")
    if report_json:
        write_json(report.to_json(), report_json)


@cli.command()
@click.option("--target", default="builtin:sphere", show_default=True)
@shape_options
@click.option("--res", type=int, default=32, show_default=True)
@click.option("--thin", type=float, default=THIN_TET_VOLUME, show_default=True, help="volume below which tets go")
@click.option("--out", default="mesh.tet", show_default=True)
@click.option("--report-json", type=click.Path(dir_okay=False))
def tet(target, rotate, scale, res, thin, out, report_json):
    """Samples a target on the grid and writes the tetrahedral mesh of its inside"""
    shape = exit_on_io_error(load_target, target, rotate or (0.0, 0.0, 0.0), scale or 1.0)
    scene = Scene(ScalarGrid.from_sdf(shape.sdf, res))
    with torch.no_grad():
        tets = filter_thin_tets(extract_tets(scene.grid, scene.params, scene.tables), thin)
    exit_on_io_error(write_tet, out, *tets.numpy())
    logger.info(f"✅ {tets.num_tets} tets, volume {tets.total_volume():.6g}, {tets.defects} boundary defects")
    if report_json:
        report = {
            "num_tets": tets.num_tets,
            "volume": tets.total_volume(),
            "defects": tets.defects,
            "ambiguous_cells": tets.ambiguous_cells,
        }
        write_json(report, report_json)


@cli.command()
@click.argument("targets", nargs=-1)
@fit_options
@click.option("--out", "out_dir", default="bench", show_default=True)
@click.option("--report-json", type=click.Path(dir_okay=False), help="defaults to <out>/bench.json")
def bench(targets, out_dir, report_json, **options):
    """Fits every target with both pipelines on the same budget"""
    specs = exit_on_io_error(expand_targets, targets or ("builtin:box",))
    out = exit_on_io_error(ensure_output_dir, out_dir)
    logger.info(f"Found {len(specs)} target(s)..")
    start = time.perf_counter()
    results = {}
    for spec in specs:
        results[spec] = {}
        for method in ("flexicubes", "mc"):
            config = exit_on_io_error(load_fit_config, target=spec, method=method, **options)
            target = exit_on_io_error(load_target, spec, config.rotate, config.scale)
            run_dir = exit_on_io_error(ensure_output_dir, os.path.join(out, target_slug(spec), method))
            try:
                result = optimize.fit(config, target, run_dir)
            except FitAborted as e:
                logger.error(f"💥 {spec} ({method}) aborted: {e.reason}")
                results[spec][method] = {"aborted": e.reason}
                continue
            write_obj(f"{run_dir}/mesh.obj", *result.mesh.numpy())
            results[spec][method] = result.metrics.as_dict() if result.metrics else {"empty": True}
    write_json(results, report_json or f"{out}/bench.json")

    end = time.perf_counter()
    logger.info(f"🌟 All targets finished in {round(end - start, 2)} seconds")
    logger.info("Detailed timing:")
    for timing in timings:
        logger.info(timing)
    if any("aborted" in r for by_method in results.values() for r in by_method.values()):
        sys.exit(EXIT_ABORTED)


@cli.command()
@click.option("--res", type=int, default=5, show_default=True)
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--per-group", type=int, default=PER_GROUP, show_default=True)
@click.option("--step", type=float, default=FD_STEP, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, envvar="FLEXI_SEED")
@click.option("--target", default="builtin:sphere", show_default=True)
@click.option("--samples", type=int, default=GRADCHECK_SAMPLES, show_default=True, help="loss samples per term")
@click.option("--report-json", type=click.Path(dir_okay=False))
def gradcheck(res, trials, per_group, step, tolerance, seed, target, samples, report_json):
    """Compares gradients of the full objective on random grids against central differences"""
    shape = exit_on_io_error(load_target, target)
    config = FitConfig(resolution=res, sdf_samples=samples, surface_samples=samples)
    rng = np.random.default_rng(seed)
    report = GradReport(step=step, trials=0)
    logger.info(f"🔨 Checking gradients on {trials} random {res}^3 grids")
    for trial in range(trials):
        scene = random_scene(res, rng)
        report.merge(grad_check(scene, optimize.scene_loss(shape, config, seed + trial), step, 1, per_group, rng))
    if report_json:
        write_json(report.to_json(), report_json)
    else:
        click.echo(report.to_json())
    if not report.passed(tolerance):
        logger.error(f"💥 Max relative error {report.max_rel_err:.3g} is above {tolerance}")
        sys.exit(EXIT_GRADIENT)
    logger.info(f"✅ Max relative error {report.max_rel_err:.3g}")


@cli.command("metrics")  # NOTE: to not shadow metrics()
@click.argument("pred")
@click.argument("gt")
@click.option("--samples", type=int, default=METRIC_SAMPLES, show_default=True)
@click.option("--seed", type=int, default=0, envvar="FLEXI_SEED")
@click.option("--report-json", type=click.Path(dir_okay=False))
def metrics_(pred, gt, samples, seed, report_json):
    """Accuracy and triangle quality of PRED (a mesh file) against GT (builtin:<name> or a mesh file)"""
    vertices, faces = exit_on_io_error(read_mesh, pred)
    target = exit_on_io_error(load_metric_target, gt)
    report = metrics(TriMesh.from_arrays(vertices, faces), target, np.random.default_rng(seed), samples)
    if report_json:
        write_json(report.to_json(), report_json)
    else:
        click.echo(report.to_json())


def entrypoint():
    cli()  # pylint: disable=no-value-for-parameter


if __name__ == "__main__":
    entrypoint()
