"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import os
import statistics
import sys
import time

import click
import numpy as np

from . import config as config_mod
from . import container, descriptor, diagnostics, imageio, reports, trainer
from .generator import GeneratorModel
from .noise import Region
from .trainer import NumericError

VGG_ENV = "SOLIDTEX_VGG"

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _parse_triple(text, what, allow_negative=False):
    parts = text.split(",")
    if len(parts) != 3:
        _fail(EXIT_CONFIG, f"{what}: expected three comma-separated integers")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        _fail(EXIT_CONFIG, f"{what}: expected integers, got {text!r}")
    if not allow_negative and any(v < 1 for v in vals):
        _fail(EXIT_CONFIG, f"{what}: components must be >= 1")
    return vals


def _load_model(path):
    try:
        return GeneratorModel.load(path)
    except (container.ContainerError, OSError) as e:
        _fail(EXIT_CONFIG, f"cannot load model {path}: {e}")


def _load_descriptor(path):
    if path is None:
        path = os.environ.get(VGG_ENV)
    if not path:
        _fail(EXIT_CONFIG,
              f"descriptor weights required: pass --vgg or set ${VGG_ENV}")
    try:
        return descriptor.ingest_vgg_weights(path)
    except (container.ContainerError, OSError) as e:
        _fail(EXIT_CONFIG, f"cannot load descriptor weights {path}: {e}")


@click.group()
def main():
    """Train and evaluate on-demand solid texture generators."""


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--vgg", "vgg_path", default=None,
              help=f"Descriptor weight file (default: ${VGG_ENV}).")
@click.option("--quiet", is_flag=True, help="Suppress per-iteration output.")
def train(config_path, vgg_path, quiet):
    """Train a generator from a YAML train spec."""
    try:
        spec = config_mod.load_train_spec(config_path)
    except config_mod.ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    net = _load_descriptor(vgg_path)

    images = []
    for ex in spec.exemplars:
        try:
            img = imageio.ingest_image(ex.path, ex.rotation, ex.flip)
        except (imageio.ImageFormatError, OSError) as e:
            _fail(EXIT_CONFIG, str(e))
        images.append(img)
    if spec.histogram_match and len(images) > 1:
        images = [images[0]] + [
            descriptor.histogram_match(img, images[0]) for img in images[1:]]
    directed = []
    for ex, img in zip(spec.exemplars, images):
        for d in ex.directions:
            directed.append((d, img))
    exemplars = descriptor.ExemplarSet.from_images(net, directed)

    model = GeneratorModel.build(init_seed=spec.init_seed)
    ckpt_path = spec.model_path + ".ckpt" if spec.checkpoint_every else None
    cfg = trainer.TrainingConfig(
        net=net, exemplars=exemplars, iterations=spec.iterations,
        learning_rate=spec.learning_rate, batch_size=spec.batch_size,
        slice_size=spec.slice_size, noise_seed=spec.noise_seed,
        offset_seed=spec.offset_seed, checkpoint_every=spec.checkpoint_every,
        checkpoint_path=ckpt_path,
        normalize_gradients=spec.normalize_gradients)

    def progress(iteration, loss, seconds):
        if not quiet:
            click.echo(f"iter {iteration:5d}  loss {loss:.6g}  "
                       f"{seconds:.2f}s")

    try:
        _, log = trainer.train(model, cfg, log_path=spec.loss_log_path,
                               progress=progress)
    except NumericError as e:
        _fail(EXIT_NUMERIC, str(e))
    model.save(spec.model_path, extra_metadata={
        "descriptor_checksum": net.checksum,
        "iterations": spec.iterations,
    })
    curve_path = os.path.splitext(spec.loss_log_path)[0] + ".png"
    reports.plot_loss_curve(log, curve_path)
    click.echo(f"model: {spec.model_path}")
    click.echo(f"loss log: {spec.loss_log_path}")
    click.echo(f"loss curve: {curve_path}")


@main.command()
@click.argument("model_path", type=click.Path())
@click.option("--origin", default="0,0,0", help="x,y,z signed origin.")
@click.option("--size", default="32,32,32", help="N1,N2,N3 box size.")
@click.option("--block", default=32, type=int, help="Tile block size.")
@click.option("--seed", default=0, type=int, help="Global texture seed.")
@click.option("--workers", default=1, type=int, help="Parallel block workers.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="raw",
              type=click.Choice(["raw", "png-stack"]))
def generate(model_path, origin, size, block, seed, workers, out_path, fmt):
    """Generate a box of texture on demand and export it."""
    model = _load_model(model_path)
    region = Region(_parse_triple(origin, "--origin", allow_negative=True),
                    _parse_triple(size, "--size"))
    t0 = time.perf_counter()
    tex = model.generate_tiled(region, seed, block, workers=workers)
    seconds = time.perf_counter() - t0
    if not np.isfinite(tex.data).all():
        _fail(EXIT_NUMERIC, "generated volume contains non-finite values")
    provenance = {
        "origin": list(region.origin),
        "block": block,
        "seed": seed,
        "model": os.path.abspath(model_path),
        "model_checksum": container.file_checksum(model_path),
    }
    if fmt == "raw":
        sidecar = imageio.export_raw(out_path, tex.data, provenance)
        click.echo(f"raw volume: {out_path} (sidecar {sidecar})")
    else:
        paths = imageio.export_png_stack(os.path.splitext(out_path)[0],
                                         tex.data)
        sidecar = os.path.splitext(out_path)[0] + ".json"
        import json

        with open(sidecar, "w", encoding="utf-8") as f:
            json.dump({"size": list(region.size), **provenance}, f,
                      indent=2, sort_keys=True)
            f.write("\n")
        click.echo(f"png stack: {len(paths)} slices (sidecar {sidecar})")
    click.echo(f"generated {region.size} in {seconds:.2f}s")


@main.command("verify-tiling")
@click.argument("model_path", type=click.Path())
@click.option("--origin", default="0,0,0")
@click.option("--size", default="64,64,64")
@click.option("--block", default=32, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--workers", default=1, type=int)
@click.option("--corrupt-shift", is_flag=True,
              help="Fault injection: misalign one noise window (must fail).")
def verify_tiling(model_path, origin, size, block, seed, workers,
                  corrupt_shift):
    """Compare monolithic generation against on-demand block assembly."""
    model = _load_model(model_path)
    region = Region(_parse_triple(origin, "--origin", allow_negative=True),
                    _parse_triple(size, "--size"))
    report = model.verify_tiling(region, block, seed, workers=workers,
                                 corrupt=corrupt_shift)
    click.echo(f"monolithic {region.size}: {report['monolithic_seconds']:.2f}s")
    times = [t for _, t in report["block_timings"]]
    click.echo(f"blocks: {report['blocks']} x {block}^3, per-block "
               f"median {statistics.median(times):.4f}s "
               f"min {min(times):.4f}s max {max(times):.4f}s")
    click.echo(f"max abs diff: {report['max_abs_diff']:.3g} "
               f"(tolerance {report['tolerance']:.1g})")
    click.echo("PASS" if report["passed"] else "FAIL")
    if not report["passed"]:
        sys.exit(EXIT_NUMERIC if not corrupt_shift else 0)
    if corrupt_shift:
        click.echo("warning: corruption did not change the output")
        sys.exit(EXIT_NUMERIC)


@main.command()
@click.argument("model_path", type=click.Path())
@click.option("--block", "blocks", multiple=True, type=int,
              default=(32, 64, 128), help="Block sizes to time.")
@click.option("--repeats", default=5, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_prefix", default=None,
              help="Write CSV + figure with this prefix.")
def bench(model_path, blocks, repeats, seed, out_prefix):
    """Time on-demand block generation.

    For context: a GPU implementation of this architecture has been timed
    at ~12 ms per 32^3 block on a GeForce RTX 2080; that figure is
    hardware-specific and is reported, not asserted, here.
    """
    import platform

    model = _load_model(model_path)
    rows = []
    click.echo(f"machine: {platform.processor() or platform.machine()}, "
               f"python {platform.python_version()}")
    for b in blocks:
        times = []
        for r in range(repeats):
            t0 = time.perf_counter()
            model.generate_region(Region((0, 0, 0), (b, b, b)), seed)
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        rows.append({
            "block": b,
            "repeats": repeats,
            "median_seconds": med,
            "min_seconds": min(times),
            "max_seconds": max(times),
            "stdev_seconds": statistics.stdev(times) if repeats > 1 else 0.0,
            "voxels_per_second": b ** 3 / med,
        })
        click.echo(f"{b:4d}^3: median {med * 1e3:8.1f} ms  "
                   f"min {min(times) * 1e3:8.1f} ms  "
                   f"max {max(times) * 1e3:8.1f} ms  "
                   f"{b ** 3 / med:12.0f} voxels/s")
    click.echo("reference (not reproduced here): ~12 ms per 32^3 block "
               "on an RTX 2080 GPU")
    if out_prefix:
        reports.write_bench_csv(out_prefix + ".csv", rows)
        reports.plot_bench(rows, out_prefix + ".png")
        click.echo(f"wrote {out_prefix}.csv and {out_prefix}.png")


@main.command()
@click.argument("model_path", type=click.Path())
def info(model_path):
    """Print margins, noise footprint, parameter count, channel schedule."""
    model = _load_model(model_path)
    click.echo(diagnostics.format_inspect(diagnostics.inspect(model)))


@main.command("eval")
@click.argument("model_path", type=click.Path())
@click.option("--vgg", "vgg_path", default=None)
@click.option("--exemplar", "exemplar_specs", multiple=True, required=True,
              help="direction:path, e.g. 0:histology.png (repeatable).")
@click.option("--size", default="32,32,32")
@click.option("--origin", default="0,0,0")
@click.option("--seed", default=0, type=int)
def eval_cmd(model_path, vgg_path, exemplar_specs, size, origin, seed):
    """Generate a volume and print its per-direction slice loss."""
    model = _load_model(model_path)
    net = _load_descriptor(vgg_path)
    directed = []
    for spec in exemplar_specs:
        d_str, _, path = spec.partition(":")
        if not path or d_str not in ("0", "1", "2"):
            _fail(EXIT_CONFIG,
                  f"--exemplar must be direction:path with direction 0..2, "
                  f"got {spec!r}")
        try:
            directed.append((int(d_str), imageio.ingest_image(path)))
        except (imageio.ImageFormatError, OSError) as e:
            _fail(EXIT_CONFIG, str(e))
    try:
        exemplars = descriptor.ExemplarSet.from_images(net, directed)
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    region = Region(_parse_triple(origin, "--origin", allow_negative=True),
                    _parse_triple(size, "--size"))
    tex = model.generate_region(region, seed)
    report = diagnostics.evaluate_volume(net, tex.data, exemplars)
    for d, layers in sorted(report["per_layer"].items()):
        click.echo(f"direction {d}: {report['per_direction'][d]:.6g}")
        for layer, v in layers.items():
            click.echo(f"  {layer}: {v:.6g}")
    click.echo(f"total: {report['total']:.6g}")


@main.command()
@click.argument("image_a", type=click.Path())
@click.argument("image_b", type=click.Path(), required=False)
@click.option("--patch", default=4, type=int)
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="Write the map as a PNG (coords -> red/green).")
def corrmap(image_a, image_b, patch, out_path):
    """Correspondence map between two images (or an image and itself)."""
    try:
        a = imageio.ingest_image(image_a)
        b = imageio.ingest_image(image_b) if image_b else a
    except (imageio.ImageFormatError, OSError) as e:
        _fail(EXIT_CONFIG, str(e))
    cmap = diagnostics.correspondence_map(a, b, patch)
    ident = diagnostics.identity_fraction(cmap)
    run = diagnostics.longest_identical_run(cmap)
    click.echo(f"patch {patch}^2, identity fraction {ident:.3f}, "
               f"longest identical-displacement run {run}")
    if out_path:
        img = diagnostics.render_correspondence(cmap)
        from PIL import Image

        Image.fromarray(img, mode="RGB").save(out_path)
        click.echo(f"map: {out_path}")


if __name__ == "__main__":
    main()
