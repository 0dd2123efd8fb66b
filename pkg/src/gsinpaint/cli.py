"""Command-line entry point: one subcommand per pipeline stage plus ``pipeline``.

Every stage writes ``run_config.json`` next to its outputs. Passing that file back
through ``--config`` reproduces the run; flags given on the command line win over it.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
from click.core import ParameterSource

from . import __version__, io
from .inpaint import BACKENDS, InpaintResult
from .masks import DEFAULT_OPENING_RADIUS, refine_all
from .refine import (FitConfig, NothingToInpaint, RefineConfig, RemovalResult, delete_label, fit,
                     infer_object_label, init_from_points, mean_psnr, refine, remove_object)
from .render import render
from .scene import ColoredPointCloud, load_dataset, load_gaussians, save_gaussians
from .synth import SceneSpec, eval_metrics, fixture_spec, generate, psnr, write_scene

log = logging.getLogger("gsinpaint")

RUN_CONFIG = "run_config.json"
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class StageError(RuntimeError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    params: dict
    derived: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / RUN_CONFIG
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"subcommand": self.subcommand, "version": self.version, "params": self.params, **self.derived}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
        return path


def _view_name(i: int, ext: str = "png") -> str:
    return f"view_{i:03d}.{ext}"


def _set_threads(threads: int | None) -> None:
    if not threads:
        return
    import numba
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# stages (file in, file out; ``pipeline`` is their composition)
# ---------------------------------------------------------------------------

def stage_fit(data, out, init=None, iterations=2000, loss_variant="literal", lam=0.2, seed=0) -> Path:
    dataset = load_dataset(data)
    if init:
        start = load_gaussians(init)
    elif dataset.points is not None:
        start = init_from_points(dataset.points)
    else:
        raise StageError(f"{data} has no points3d.ply; pass --init")
    config = FitConfig(iterations=iterations, lam=lam, loss_variant=loss_variant, seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    every = max(1, iterations // 20)

    def progress(it, parts):
        if it % every == 0 or it == iterations - 1:
            rows.append({"iteration": it, **{k: float(v) for k, v in parts.items()}})
            log.info("fit %d/%d loss %.5f", it + 1, iterations, parts["total"])

    fitted = fit(dataset, start, config, callback=progress)
    save_gaussians(fitted, out / "scene.gsip")
    report = {"gaussians": len(fitted), "iterations": iterations, "train_psnr": mean_psnr(fitted, dataset),
              "log": rows}
    (out / "fit_report.json").write_text(json.dumps(report, indent=1))
    RunConfig("fit", dict(data=str(data), out=str(out), init=init and str(init), iterations=iterations,
                          loss_eq1_variant=loss_variant, lam=lam, seed=seed),
              {"fit": config.to_dict()}).write(out)
    return out / "scene.gsip"


def _load_external_depth(directory, count: int) -> list[np.ndarray]:
    d = Path(directory)
    out = []
    for i in range(count):
        for cand in (d / _view_name(i, "pfm"), d / "depth" / _view_name(i, "pfm")):
            if cand.exists():
                out.append(io.read_pfm(cand))
                break
        else:
            raise StageError(f"no depth map for view {i} in {d}")
    return out


def stage_infer_masks(data, scene, out, radius=DEFAULT_OPENING_RADIUS, external_depth=None) -> Path:
    dataset = load_dataset(data)
    out = Path(out)
    if external_depth:
        depths = _load_external_depth(external_depth, len(dataset))
    else:
        g = load_gaussians(scene)
        depths = [render(g, v.pose, identity=False).depth for v in dataset.views]
    for i, (d, v) in enumerate(zip(depths, dataset.views)):
        if d.shape != v.mask.shape:
            raise StageError(f"depth for view {i} is {d.shape}, expected {v.mask.shape}")
    masks = refine_all(dataset, depths, radius)
    for i in range(len(dataset)):
        io.write_mask_png(out / "masks_refined" / _view_name(i), masks.refined[i])
        io.write_mask_png(out / "masks_unopened" / _view_name(i), masks.unopened[i])
        io.write_png(out / "bg" / _view_name(i), masks.backgrounds[i])
        io.write_pfm(out / "depth" / _view_name(i, "pfm"), depths[i])
    report = {"original_area": [int(m.sum()) for m in masks.original], "refined_area": masks.areas(),
              "unopened_area": [int(m.sum()) for m in masks.unopened]}
    (out / "masks_report.json").write_text(json.dumps(report, indent=1))
    RunConfig("infer-masks", dict(data=str(data), scene=scene and str(scene), out=str(out), radius=radius,
                                  external_depth=external_depth and str(external_depth))).write(out)
    return out


def _refine_config(**kw) -> RefineConfig:
    return RefineConfig(**{k: v for k, v in kw.items() if v is not None})


def stage_remove(data, scene, masks_dir, out, object_label=None, **refine_kw) -> Path:
    dataset = load_dataset(data)
    g = load_gaussians(scene)
    masks = [io.read_mask_png(Path(masks_dir) / "masks_refined" / _view_name(i)) for i in range(len(dataset))]
    config = _refine_config(**refine_kw)
    label = object_label if object_label is not None else infer_object_label(g, dataset)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params = dict(data=str(data), scene=str(scene), masks=str(masks_dir), out=str(out),
                  object_label=object_label, **refine_kw)
    try:
        removal = remove_object(g, label, dataset, masks, config)
    except NothingToInpaint:
        remaining, hit = delete_label(g, label)
        save_gaussians(remaining, out / "scene_init.gsip")
        summary = {"nothing_to_inpaint": True, "label": label, "remaining_count": len(remaining),
                   "removed_count": int(hit.sum())}
        (out / "removal.json").write_text(json.dumps(summary, indent=1))
        RunConfig("remove", params, {"refine": config.to_dict()}).write(out)
        log.warning("all refined masks are empty; the removal-only scene is final")
        return out
    save_gaussians(removal.gaussians, out / "scene_init.gsip")
    np.savez(out / "removal.npz", inpainted_rgb=removal.inpainted.image, inpainted_depth=removal.inpainted.depth,
             supervision=np.stack(removal.supervision), refined=np.stack(removal.refined),
             p1_points=removal.cloud.points, p1_colors=removal.cloud.colors, p1_depths=removal.cloud.depths)
    io.write_png(out / "inpainted.png", removal.inpainted.image)
    io.write_pfm(out / "inpainted_depth.pfm", removal.inpainted.depth)
    for k, img in enumerate(removal.supervision):
        io.write_png(out / "supervision" / _view_name(k), img)
    removal.cloud.save_ply(out / "p1.ply")
    summary = {"nothing_to_inpaint": False, "label": label, "reference": removal.reference,
               "remaining_count": removal.remaining_count, "removed_count": removal.removed_count,
               "p1_points": len(removal.cloud), "restored_pixels": removal.inpainted.restored}
    (out / "removal.json").write_text(json.dumps(summary, indent=1))
    RunConfig("remove", params, {"refine": config.to_dict()}).write(out)
    return out


def load_removal(directory) -> RemovalResult | None:
    d = Path(directory)
    summary = json.loads((d / "removal.json").read_text())
    g = load_gaussians(d / "scene_init.gsip")
    if summary["nothing_to_inpaint"]:
        return None
    with np.load(d / "removal.npz") as z:
        cloud = ColoredPointCloud(z["p1_points"], z["p1_colors"], z["p1_depths"])
        return RemovalResult(
            gaussians=g, remaining_count=summary["remaining_count"], removed_count=summary["removed_count"],
            reference=summary["reference"], cloud=cloud, supervision=list(z["supervision"]),
            inpainted=InpaintResult(z["inpainted_rgb"], z["inpainted_depth"]),
            refined=tuple(z["refined"]), label=summary["label"])


def stage_refine(data, removal_dir, out, **refine_kw) -> Path:
    dataset = load_dataset(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not refine_kw.get("inpainter"):
        prev = Path(removal_dir) / RUN_CONFIG
        if prev.exists():
            refine_kw["inpainter"] = json.loads(prev.read_text()).get("refine", {}).get("inpainter")
    config = _refine_config(**refine_kw)
    removal = load_removal(removal_dir)
    if removal is None:
        save_gaussians(load_gaussians(Path(removal_dir) / "scene_init.gsip"), out / "refined.gsip")
    else:
        refine(removal, dataset, config, out)
    params = dict(data=str(data), removal=str(removal_dir), out=str(out), **refine_kw)
    if "freeze" in params:  # recorded under its flag name so --config can replay it
        params["unfreeze_all"] = not params.pop("freeze")
    RunConfig("refine", params, {"refine": config.to_dict()}).write(out)
    return out / "refined.gsip"


def stage_render(scene, data, out, views=()) -> Path:
    dataset = load_dataset(data)
    g = load_gaussians(scene)
    out = Path(out)
    picks = list(views) if views else list(range(len(dataset)))
    for i in picks:
        if not 0 <= i < len(dataset):
            raise StageError(f"view {i} out of range (dataset has {len(dataset)} views)")
        rv = render(g, dataset.views[i].pose)
        io.write_png(out / "rgb" / _view_name(i), rv.rgb)
        io.write_pfm(out / "depth" / _view_name(i, "pfm"), rv.depth)
        io.write_png(out / "labels" / _view_name(i), rv.labels.astype(np.uint8))
    RunConfig("render", dict(scene=str(scene), data=str(data), out=str(out), view=picks)).write(out)
    return out


def stage_eval(scene, data, out) -> dict:
    dataset = load_dataset(data)
    g = load_gaussians(scene)
    per_view = []
    for i, v in enumerate(dataset.views):
        if v.gt_removed is None:
            raise StageError(f"view {i} of {data} has no gt_removed image to evaluate against")
        rgb = render(g, v.pose, identity=False).rgb
        m = eval_metrics(rgb, v.gt_removed, v.mask)
        m["unmasked_psnr"] = psnr(rgb, v.gt_removed, ~v.mask) if (~v.mask).any() else None
        m["view"] = i
        per_view.append(m)

    def mean(key):
        vals = [m[key] for m in per_view if m[key] is not None]
        return float(np.mean(vals)) if vals else None

    keys = ("psnr", "ssim", "masked_psnr", "masked_ssim", "unmasked_psnr")
    report = {"scene": str(scene), "data": str(data), "views": per_view,
              "mean": {k: mean(k) for k in keys},
              "min": {k: (min(v) if (v := [m[k] for m in per_view if m[k] is not None]) else None) for k in keys}}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=1))
    RunConfig("eval", dict(scene=str(scene), data=str(data), out=str(out))).write(out)
    return report


# ---------------------------------------------------------------------------
# click plumbing
# ---------------------------------------------------------------------------

def _apply_config(ctx: click.Context, params: dict) -> dict:
    """Fill parameters left at their defaults from ``--config``; explicit flags win."""
    path = params.pop("config", None)
    params.pop("threads", None)
    if not path:
        return params
    doc = json.loads(Path(path).read_text())
    if doc.get("subcommand") not in (None, ctx.info_name):
        raise click.UsageError(f"{path} was written by '{doc['subcommand']}', not '{ctx.info_name}'")
    for key, value in doc.get("params", {}).items():
        if key not in params:
            raise click.UsageError(f"{path}: unknown setting {key!r}")
        if ctx.get_parameter_source(key) in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP):
            params[key] = tuple(value) if isinstance(params[key], tuple) else value
    return params


def _common(f):
    f = click.option("--config", type=click.Path(exists=True, dir_okay=False),
                     help="run_config.json to take settings from (flags win).")(f)
    f = click.option("--threads", type=int, envvar="GSINPAINT_THREADS", default=None,
                     help="Cap on worker threads (env GSINPAINT_THREADS).", callback=lambda c, p, v: _set_threads(v) or v,
                     expose_value=True)(f)
    return f


def _refine_options(f):
    f = click.option("--inpainter", type=click.Choice(BACKENDS), default=None,
                     help="2D inpainting backend (default diffuse).")(f)
    f = click.option("--seed", type=int, default=0, show_default=True)(f)
    f = click.option("--exchange-dir", type=click.Path(file_okay=False), default=None,
                     help="Directory for the external inpainter's files.")(f)
    f = click.option("--external-command", default=None, help="Command that services the exchange directory.")(f)
    f = click.option("--external-timeout", type=float, default=600.0, show_default=True)(f)
    return f


def _refine_kw(p: dict) -> dict:
    return dict(inpainter=p.get("inpainter"), seed=p.get("seed"), exchange_dir=p.get("exchange_dir"),
                external_command=p.get("external_command"), external_timeout=p.get("external_timeout"))


def _loop_options(f):
    f = click.option("--iterations", type=click.IntRange(min=0), default=5000, show_default=True)(f)
    f = click.option("--reinpaint-period", type=click.IntRange(min=1), default=500, show_default=True)(f)
    f = click.option("--unfreeze-all", is_flag=True, help="Also optimize the Gaussians that were kept.")(f)
    f = click.option("--lam", type=float, default=0.2, show_default=True)(f)
    f = click.option("--checkpoint-every", type=click.IntRange(min=0), default=1000, show_default=True)(f)
    f = click.option("--frozen-eval-every", type=click.IntRange(min=0), default=500, show_default=True)(f)
    return f


def _loop_kw(p: dict) -> dict:
    return dict(iterations=p["iterations"], reinpaint_period=p["reinpaint_period"], freeze=not p["unfreeze_all"],
                lam=p["lam"], checkpoint_every=p["checkpoint_every"], frozen_eval_every=p["frozen_eval_every"])


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="gsinpaint")
@click.option("-v", "--verbose", count=True, help="More log output (-vv for debug).")
def cli(verbose):
    """Depth-guided inpainting of 3D Gaussian scenes."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


DATA = click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
OUT = click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
SCENE = click.option("--scene", required=True, type=click.Path(exists=True, dir_okay=False), help="Gaussian scene (.gsip).")


@cli.command("fit")
@DATA
@OUT
@click.option("--init", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Start from this .gsip instead of the dataset's points3d.ply.")
@click.option("--iterations", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--loss-eq1-variant", type=click.Choice(["literal", "3dgs"]), default="literal", show_default=True,
              help="Photometric loss weighting: literal puts lam on L1, 3dgs uses (1-lam) L1 + lam D-SSIM.")
@click.option("--lam", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_common
@click.pass_context
def cmd_fit(ctx, **p):
    """Fit a Gaussian scene with identity encodings to a dataset."""
    p = _apply_config(ctx, p)
    path = stage_fit(p["data"], p["out"], p["init"], p["iterations"], p["loss_eq1_variant"], p["lam"], p["seed"])
    click.echo(str(path))


@cli.command("infer-masks")
@DATA
@click.option("--scene", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fitted scene whose rendered depth drives visibility.")
@OUT
@click.option("--radius", type=click.IntRange(min=0), default=DEFAULT_OPENING_RADIUS, show_default=True,
              help="Opening radius in pixels.")
@click.option("--external-depth", type=click.Path(exists=True, file_okay=False), default=None,
              help="Use view_%03d.pfm depth maps from this directory instead of rendering.")
@_common
@click.pass_context
def cmd_infer_masks(ctx, **p):
    """Shrink object masks to the regions no other view has seen."""
    p = _apply_config(ctx, p)
    if not p["scene"] and not p["external_depth"]:
        raise click.UsageError("give --scene or --external-depth")
    click.echo(str(stage_infer_masks(p["data"], p["scene"], p["out"], p["radius"], p["external_depth"])))


@cli.command("remove")
@DATA
@SCENE
@click.option("--masks", required=True, type=click.Path(exists=True, file_okay=False),
              help="Output directory of infer-masks.")
@OUT
@click.option("--object-label", type=click.IntRange(0, 15), default=None,
              help="Identity label to delete (default: majority label under the masks).")
@_refine_options
@_common
@click.pass_context
def cmd_remove(ctx, **p):
    """Delete the object, inpaint the reference view and seed replacement Gaussians."""
    p = _apply_config(ctx, p)
    click.echo(str(stage_remove(p["data"], p["scene"], p["masks"], p["out"], p["object_label"], **_refine_kw(p))))


@cli.command("refine")
@DATA
@click.option("--removal", required=True, type=click.Path(exists=True, file_okay=False),
              help="Output directory of remove.")
@OUT
@_loop_options
@_refine_options
@_common
@click.pass_context
def cmd_refine(ctx, **p):
    """Optimize the replacement Gaussians against the inpainted reference view."""
    p = _apply_config(ctx, p)
    click.echo(str(stage_refine(p["data"], p["removal"], p["out"], **_loop_kw(p), **_refine_kw(p))))


@cli.command("render")
@SCENE
@DATA
@OUT
@click.option("--view", "view", type=int, multiple=True, help="View index (repeatable; default all).")
@_common
@click.pass_context
def cmd_render(ctx, **p):
    """Render RGB (PNG), depth (PFM) and labels (PNG) at the dataset's cameras."""
    p = _apply_config(ctx, p)
    click.echo(str(stage_render(p["scene"], p["data"], p["out"], p["view"])))


@cli.command("eval")
@SCENE
@DATA
@OUT
@_common
@click.pass_context
def cmd_eval(ctx, **p):
    """Compare renders with the dataset's object-removed ground truth."""
    p = _apply_config(ctx, p)
    report = stage_eval(p["scene"], p["data"], p["out"])
    click.echo(json.dumps(report["mean"]))


@cli.command("synth")
@click.option("--spec", type=click.Path(exists=True, dir_okay=False), default=None, help="SceneSpec JSON.")
@click.option("--fixture", default=None, help="Named fixture spec (ring8, ring8_masks, pair90, small).")
@OUT
@click.option("--seed", type=int, default=None, help="Override the spec's seed.")
@_common
@click.pass_context
def cmd_synth(ctx, **p):
    """Generate a synthetic dataset with a removable object."""
    p = _apply_config(ctx, p)
    if p["spec"] and p["fixture"]:
        raise click.UsageError("--spec and --fixture are exclusive")
    try:
        spec = SceneSpec.load(p["spec"]) if p["spec"] else fixture_spec(p["fixture"] or "ring8")
    except KeyError as err:
        raise click.UsageError(str(err.args[0])) from err
    if p["seed"] is not None:
        spec = spec.with_(seed=p["seed"])
    write_scene(generate(spec), p["out"])
    RunConfig("synth", p, {"scene_spec": spec.to_dict()}).write(p["out"])
    click.echo(p["out"])


@cli.command("pipeline")
@DATA
@OUT
@click.option("--init", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--fit-iterations", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--loss-eq1-variant", type=click.Choice(["literal", "3dgs"]), default="literal", show_default=True)
@click.option("--radius", type=click.IntRange(min=0), default=DEFAULT_OPENING_RADIUS, show_default=True)
@click.option("--external-depth", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--object-label", type=click.IntRange(0, 15), default=None)
@click.option("--eval-data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Dataset to evaluate on (default: DATA/test if present, else DATA).")
@_loop_options
@_refine_options
@_common
@click.pass_context
def cmd_pipeline(ctx, **p):
    """fit, infer-masks, remove, refine, render and eval in sequence."""
    p = _apply_config(ctx, p)
    out = Path(p["out"])
    data = p["data"]
    scene = stage_fit(data, out / "fit", p["init"], p["fit_iterations"], p["loss_eq1_variant"], p["lam"], p["seed"])
    masks = stage_infer_masks(data, scene, out / "masks", p["radius"], p["external_depth"])
    removal = stage_remove(data, scene, masks, out / "removal", p["object_label"], **_refine_kw(p))
    refined = stage_refine(data, removal, out / "refine", **_loop_kw(p), **_refine_kw(p))
    eval_data = p["eval_data"] or (str(Path(data) / "test") if (Path(data) / "test").is_dir() else data)
    stage_render(refined, eval_data, out / "render")
    report = stage_eval(refined, eval_data, out / "eval")
    RunConfig("pipeline", p).write(out)
    click.echo(json.dumps(report["mean"]))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="gsinpaint", standalone_mode=False)
    except click.exceptions.Exit as err:
        return err.exit_code
    except click.UsageError as err:
        err.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as err:
        err.show()
        return EXIT_RUNTIME
    except Exception as err:  # every runtime failure maps to one exit status
        log.debug("failure", exc_info=True)
        click.echo(f"error: {err}", err=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
