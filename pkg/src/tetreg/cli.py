"""Command-line entry point.

Subcommands:
  synth      generate deterministic synthetic case bundles
  register   run a registration mode on a case bundle (or explicit files)
  eval       recompute metrics for a stored deformation field
  serve      host the interactive session API and the browser UI

Every flag can also come from a TETREG_* environment variable or from a
`key = value` config file passed with --config. Errors are emitted as a
single JSON object on stderr so callers can parse failures.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from dataclasses import fields as dc_fields

import click
import numpy as np

from . import __version__
from . import io as tio
from .correspond import CorrespondenceSet
from .fem import assemble_stiffness, jacobian_determinants
from .mesh import PointCloud, geodesic_distance
from .metrics import (
    EvalReport,
    chamfer_one_sided,
    jacobian_report,
    jacobian_to_dict,
    save_error_csv,
    save_histogram_csv,
    tre,
    tre_by_geodesic,
)
from .pipeline import MODES, register
from .pyramid import PyramidConfig, write_trace_csv
from .synth import PRESETS, generate_case, load_case, save_case
from .volume_fit import PbmConfig

log = logging.getLogger("tetreg")


def _fail(message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": message}) + "\n")
    sys.exit(code)


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _apply_config_file(ctx: click.Context, param, value):
    if not value:
        return value
    flat = {}
    try:
        with open(value) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, raw = line.partition("=")
                flat[key.strip().replace("-", "_")] = raw.strip()
    except OSError as exc:
        raise click.BadParameter(str(exc))
    # Overrides apply to the group and to every subcommand.
    nested = dict(flat)
    for name in getattr(ctx.command, "commands", {}):
        nested[name] = flat
    ctx.default_map = {**(ctx.default_map or {}), **nested}
    return value


def _limit_threads(threads: int | None) -> None:
    if not threads:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=threads)
    except ImportError:
        log.warning("threadpoolctl not installed; --threads ignored")


def _log_config(ctx: click.Context) -> None:
    resolved = {k: v for k, v in ctx.params.items()}
    log.info("resolved config: %s", json.dumps(resolved, default=str, sort_keys=True))


@click.group(context_settings={"auto_envvar_prefix": "TETREG"})
@click.option("--log-level", default="info", show_default=True,
              type=click.Choice(["debug", "info", "warning", "error"]))
@click.option("--threads", type=int, default=None, help="Cap BLAS/OpenMP thread pools.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_apply_config_file,
              expose_value=False, is_eager=True, help="key = value file overriding flag defaults.")
@click.version_option(__version__)
def main(log_level: str, threads: int | None):
    """Deformable registration of tetrahedral organ models to partial clouds."""
    _setup_logging(log_level)
    _limit_threads(threads)


@main.command("synth")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="liver-beam", show_default=True)
@click.option("--count", type=int, default=1, show_default=True, help="Number of cases (sequential seeds).")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the first case.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
def cmd_synth(ctx, preset: str, count: int, seed: int, out: str):
    """Generate deterministic synthetic deformation case bundles."""
    _log_config(ctx)
    if count <= 0:
        _fail("--count must be positive", code=2)
    spec = PRESETS[preset]
    tio.ensure_dir(out)
    manifest = {"preset": preset, "seed": seed, "count": count, "cases": []}
    for i in range(count):
        case = generate_case(spec, seed + i)
        name = f"case_{seed + i:04d}"
        save_case(case, os.path.join(out, name))
        manifest["cases"].append(name)
        log.info("wrote %s (visibility %.2f)", name, case.visibility)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    click.echo(f"{count} case(s) in {out}")


def _load_inputs(case_dir, mesh_node, mesh_ele, cloud_path, corr_path):
    if case_dir:
        case = load_case(case_dir)
        return case.mesh, case.cloud, case.corr, case
    if not (mesh_node and mesh_ele and cloud_path):
        _fail("need --case or all of --mesh-node/--mesh-ele/--cloud")
    mesh = tio.load_tet_mesh(mesh_node, mesh_ele)
    cloud = tio.load_cloud(cloud_path)
    corr = CorrespondenceSet.load(corr_path) if corr_path else None
    return mesh, cloud, corr, None


def _pyramid_cfg_from_flags(case, seed, steps, lambda_strain, lambda_rigid) -> PyramidConfig:
    cfg = PyramidConfig(seed=seed)
    if case is not None:
        cfg = PyramidConfig(
            seed=seed,
            lambda_strain=case.spec.lambda_strain,
            lambda_rigid=case.spec.lambda_rigid,
        )
    updates = {}
    if steps is not None:
        updates["steps_per_level"] = steps
    if lambda_strain is not None:
        updates["lambda_strain"] = lambda_strain
    if lambda_rigid is not None:
        updates["lambda_rigid"] = lambda_rigid
    if updates:
        from dataclasses import replace

        cfg = replace(cfg, **updates)
    return cfg


def _evaluate(mesh, cloud, result_u_vol, case, mode, sigma2, timings) -> EvalReport:
    n = mesh.boundary_count
    deformed = mesh.nodes[:n] + result_u_vol[:n]
    report = EvalReport(mode=mode, sigma2=sigma2, timings=timings)
    report.chamfer = chamfer_one_sided(cloud, PointCloud(deformed))
    dets = jacobian_determinants(mesh, result_u_vol)
    report.jacobian = jacobian_to_dict(jacobian_report(dets))
    if case is not None:
        true_pos = mesh.nodes[:n] + case.u_true[:n]
        errors = np.linalg.norm(deformed - true_pos, axis=1)
        report.tre_mean, report.tre_std = tre(true_pos, deformed)
        report.raw_errors = errors.tolist()
        geo = geodesic_distance(mesh.boundary_surface(), case.visible_vertices, normalized=True)
        bins = tre_by_geodesic(errors, geo)
        report.geodesic_bin_edges = bins.edges.tolist()
        report.geodesic_bin_means = bins.means.tolist()
        report.geodesic_bin_counts = bins.counts.tolist()
    return report


@main.command("register")
@click.option("--case", "case_dir", type=click.Path(file_okay=False, exists=True), default=None,
              help="Case bundle directory (mesh + cloud + correspondences + ground truth).")
@click.option("--mesh-node", type=click.Path(exists=True), default=None)
@click.option("--mesh-ele", type=click.Path(exists=True), default=None)
@click.option("--cloud", "cloud_path", type=click.Path(exists=True), default=None)
@click.option("--corr", "corr_path", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(MODES), default="biompinn-pbm", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=None, help="Override optimization steps per level.")
@click.option("--lambda-strain", type=float, default=None)
@click.option("--lambda-rigid", type=float, default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
def cmd_register(ctx, case_dir, mesh_node, mesh_ele, cloud_path, corr_path, mode, seed,
                 steps, lambda_strain, lambda_rigid, out):
    """Run one registration mode and write field, surface, and report."""
    _log_config(ctx)
    t0 = time.perf_counter()
    mesh, cloud, corr, case = _load_inputs(case_dir, mesh_node, mesh_ele, cloud_path, corr_path)
    if corr is None:
        from .correspond import mutual_nn

        corr = mutual_nn(PointCloud(mesh.nodes[: mesh.boundary_count]), cloud)
    material = case.material if case is not None else None
    cfg = _pyramid_cfg_from_flags(case, seed, steps, lambda_strain, lambda_rigid)
    result = register(mesh, cloud, corr, mode=mode, material=material,
                      pyramid_cfg=cfg, pbm_cfg=PbmConfig())
    tio.ensure_dir(out)
    tio.save_field(result.u_vol, os.path.join(out, "field.txt"))
    surf = mesh.boundary_surface()
    deformed = type(surf)(vertices=result.deformed_boundary, triangles=surf.triangles)
    tio.save_surface(deformed, os.path.join(out, "deformed_surface.ply"))
    if result.pyramid is not None:
        write_trace_csv(result.pyramid.trace, os.path.join(out, "loss_trace.csv"))
    timings = dict(result.timings)
    timings["wall_s"] = time.perf_counter() - t0
    report = _evaluate(mesh, cloud, result.u_vol, case, mode, result.sigma2, timings)
    report.to_json(os.path.join(out, "report.json"))
    if report.raw_errors:
        save_error_csv(np.array(report.raw_errors), os.path.join(out, "errors.csv"))
    click.echo(json.dumps({
        "mode": mode,
        "tre_mean": report.tre_mean,
        "chamfer": report.chamfer,
        "seconds": round(timings["wall_s"], 3),
    }))


@main.command("eval")
@click.option("--field", "field_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--case", "case_dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_context
def cmd_eval(ctx, field_path, case_dir, out):
    """Recompute all metrics for a stored deformation field."""
    _log_config(ctx)
    case = load_case(case_dir)
    mesh = case.mesh
    try:
        u = tio.load_field(field_path, n_nodes=mesh.n_nodes)
    except tio.FileFormatError as exc:
        _fail(str(exc))
    report = _evaluate(mesh, case.cloud, u, case, mode="stored-field", sigma2=None, timings={})
    if out:
        tio.ensure_dir(out)
        report.to_json(os.path.join(out, "report.json"))
        if report.jacobian is not None:
            from .metrics import JacobianReport

            rep = jacobian_report(jacobian_determinants(mesh, u))
            save_histogram_csv(rep, os.path.join(out, "jacobian_hist.csv"))
    click.echo(json.dumps({"tre_mean": report.tre_mean, "chamfer": report.chamfer}))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--cases", "cases_dir", type=click.Path(file_okay=False, exists=True), required=True,
              help="Directory of case bundles (each a subdirectory with case.json).")
@click.option("--ui", "ui_dir", type=click.Path(file_okay=False), default=None,
              help="Static UI bundle to serve at /.")
@click.pass_context
def cmd_serve(ctx, host, port, cases_dir, ui_dir):
    """Serve the interactive session API (and UI bundle when provided)."""
    _log_config(ctx)
    import uvicorn

    from .service import create_app

    try:
        app = create_app(cases_dir, ui_dir=ui_dir)
    except ValueError as exc:
        _fail(str(exc))
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
