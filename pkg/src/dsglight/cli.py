"""Command-line surface: fitting, reconstruction, metrics, datasets, training.

Every subcommand validates its inputs, writes outputs atomically (temp file
plus rename, so failures leave no partial artifacts), and returns a
CommandResult; ``main`` maps that to the process exit code. All randomness
flows from --seed through counter-based substreams.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write_json, atomic_write_text, make_rng
from .fitter import fit_light
from .graphnet import (ModelConfig, TrainConfig, checkpoint_hash,
                       load_checkpoint, model_forward, save_checkpoint,
                       synthetic_overfit_dataset, train, training_psnr)
from .graphnet.losses import LossContext, RandomConvExtractor
from .graphnet.train import Sample
from .panorama import (CropSpec, PanoramaFormatError, psnr, read_pfm,
                       read_radiance_hdr, sample_crop, sample_crop_specs,
                       tonemap_ldr, write_pfm, write_radiance_hdr)
from .sg_model import (DsgLight, diffuse_irradiance, light_from_json,
                       light_to_json, reconstruct_panorama, warp_probe)
from .sphere_layout import build_layout, knn_adjacency, layout_to_json
from .panorama import direction_grid, from_array

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)
    report: dict = field(default_factory=dict)


class CommandError(Exception):
    def __init__(self, message, exit_code=EXIT_ERROR):
        super().__init__(message)
        self.exit_code = exit_code


def _require_file(path, label="input"):
    if path is None:
        raise CommandError(f"missing required {label} path")
    if not os.path.isfile(path):
        raise CommandError(f"{label} file not found: {path}",
                           exit_code=EXIT_MISSING_INPUT)
    return path


def _read_hdr_or_pfm(path):
    if path.lower().endswith((".pfm",)):
        return read_pfm(path)
    return read_radiance_hdr(path)


def _load_light(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CommandError(f"invalid JSON in {path}: {exc}") from exc
    try:
        return light_from_json(obj)
    except ValueError as exc:
        raise CommandError(f"invalid light file {path}: {exc}") from exc


def _report_path(output):
    root, _ = os.path.splitext(output)
    return root + ".report.json"


def cmd_fit(args):
    pano = _read_hdr_or_pfm(_require_file(args.input))
    depth = None
    if args.depth:
        depth = read_pfm(_require_file(args.depth, "depth"))
    layout = build_layout(args.n)
    light, report = fit_light(pano, depth=depth, layout=layout,
                              weighting=args.weighting)
    output = args.output or "light.json"
    atomic_write_json(output, light_to_json(light))
    report_path = _report_path(output)
    atomic_write_json(report_path, report.to_json())
    shown = "n/a" if report.psnr_reconstruction is None \
        else f"{report.psnr_reconstruction:.2f}"
    print(f"reconstruction PSNR: {shown} dB")
    return CommandResult(EXIT_OK, artifacts=[output, report_path],
                         report=report.to_json())


def cmd_reconstruct(args):
    light = _load_light(_require_file(args.input))
    pano = reconstruct_panorama(light, args.width, args.height)
    output = args.output or "reconstruction.hdr"
    write_radiance_hdr(output, pano)
    return CommandResult(EXIT_OK, artifacts=[output],
                         report={"width": args.width, "height": args.height})


def cmd_render_irradiance(args):
    light = _load_light(_require_file(args.input))
    dirs = direction_grid(args.width, args.height)
    px = np.zeros((args.height, args.width, 3))
    for y in range(args.height):
        for x in range(args.width):
            px[y, x] = diffuse_irradiance(light, dirs[y, x], args.samples)
    output = args.output or "irradiance.hdr"
    write_radiance_hdr(output, from_array(px))
    return CommandResult(EXIT_OK, artifacts=[output],
                         report={"samples": args.samples})


def cmd_probe(args):
    light = _load_light(_require_file(args.input))
    try:
        warped = warp_probe(light, np.array(args.offset),
                            rescale_sharpness=args.rescale_sharpness)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    output = args.output or "probe.json"
    atomic_write_json(output, light_to_json(warped))
    return CommandResult(EXIT_OK, artifacts=[output],
                         report={"offset": list(args.offset)})


def cmd_metrics(args):
    test = _read_hdr_or_pfm(_require_file(args.input))
    reference = _read_hdr_or_pfm(_require_file(args.reference, "reference"))
    value = psnr(test, reference)
    print(f"{value:.2f} dB")
    return CommandResult(EXIT_OK, report={"psnr_db": value})


def cmd_nodes(args):
    layout = build_layout(args.n)
    output = args.output or "nodes.json"
    atomic_write_json(output, layout_to_json(layout))
    return CommandResult(EXIT_OK, artifacts=[output],
                         report={"n": args.n, "lambda": layout.sharpness})


def cmd_dataset(args):
    indir = args.input
    if indir is None or not os.path.isdir(indir):
        raise CommandError(f"input directory not found: {indir}",
                           exit_code=EXIT_MISSING_INPUT)
    outdir = args.output or "dataset"
    os.makedirs(outdir, exist_ok=True)
    layout = build_layout(args.n)
    rng = make_rng(args.seed, "dataset")
    panos = sorted(p for p in os.listdir(indir)
                   if p.lower().endswith((".hdr", ".pfm")))
    samples = []
    skipped = []
    for name in panos:
        path = os.path.join(indir, name)
        try:
            pano = _read_hdr_or_pfm(path)
            if pano.channels != 3:
                raise ValueError("panorama must be 3-channel")
            light, _ = fit_light(pano, layout=layout, weighting=args.weighting)
        except (ValueError, PanoramaFormatError, OSError) as exc:
            print(f"warning: skipping {name}: {exc}", file=sys.stderr)
            skipped.append({"path": name, "error": str(exc)})
            continue
        stem = os.path.splitext(name)[0]
        light_path = os.path.join(outdir, f"{stem}.light.json")
        atomic_write_json(light_path, light_to_json(light))
        for idx, spec in enumerate(sample_crop_specs(rng, args.crops)):
            crop = sample_crop(pano, spec)
            ldr = tonemap_ldr(crop)
            crop_path = os.path.join(outdir, f"{stem}.crop{idx}.pfm")
            write_pfm(crop_path, ldr)
            samples.append({
                "image": os.path.basename(crop_path),
                "light": os.path.basename(light_path),
                "panorama": name,
                "spec": {"elevation": spec.elevation, "azimuth": spec.azimuth,
                         "fov_h": spec.fov_h, "out_width": spec.out_width,
                         "out_height": spec.out_height},
            })
    manifest = {
        "seed": args.seed, "n": args.n, "k": args.k,
        "weighting": args.weighting, "crops_per_panorama": args.crops,
        "samples": samples, "skipped": skipped,
    }
    manifest_path = os.path.join(outdir, "manifest.json")
    atomic_write_json(manifest_path, manifest)
    return CommandResult(EXIT_OK, artifacts=[manifest_path],
                         report={"samples": len(samples),
                                 "skipped": len(skipped)})


def _load_manifest_dataset(manifest_path, n):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    dataset = []
    lights = {}
    for entry in manifest["samples"]:
        image = read_pfm(os.path.join(base, entry["image"]))
        light_name = entry["light"]
        if light_name not in lights:
            with open(os.path.join(base, light_name)) as fh:
                lights[light_name] = light_from_json(json.load(fh))
        light = lights[light_name]
        if light.layout.n != n:
            raise CommandError(
                f"manifest light has n={light.layout.n}, expected {n}")
        dataset.append(Sample(image=image.pixels,
                              amplitudes=light.amplitudes,
                              meta={"image": entry["image"]}))
    return dataset


def cmd_train(args):
    graph = knn_adjacency(build_layout(args.n), args.k)
    if args.overfit_smoke:
        dataset = synthetic_overfit_dataset(graph, 8, seed=args.seed)
        target = 30.0
        epochs = min(args.epochs, 2000)
    else:
        manifest = _require_file(args.input, "manifest")
        dataset = _load_manifest_dataset(manifest, args.n)
        target = None
        epochs = args.epochs
    if not dataset:
        raise CommandError("dataset is empty")
    config = TrainConfig(epochs=epochs, seed=args.seed, target_psnr=target)
    out_channels = dataset[0].amplitudes.shape[1]
    model_config = ModelConfig(out_channels=out_channels)
    model, history = train(dataset, graph, config, model_config=model_config)

    output = args.output or "checkpoint.json"
    save_checkpoint(model, output, extra={"epochs_run": len(history)})
    curve_path = os.path.splitext(output)[0] + ".losses.csv"
    lines = ["epoch,loss,lr,psnr"]
    for h in history:
        psnr_field = f"{h['psnr']:.6f}" if "psnr" in h else ""
        lines.append(f"{h['epoch']},{h['loss']:.12g},{h['lr']:.12g},{psnr_field}")
    atomic_write_text(curve_path, "\n".join(lines) + "\n")

    ctx = LossContext(graph.layout,
                      extractor=RandomConvExtractor(seed=config.seed),
                      alpha=config.alpha, beta=config.beta)
    final_psnr = training_psnr(model, dataset, ctx)
    print(f"final training PSNR: {final_psnr:.2f} dB over {len(history)} epochs")
    report = {"epochs_run": len(history), "final_loss": history[-1]["loss"],
              "final_psnr_db": final_psnr,
              "checkpoint_sha256": checkpoint_hash(output)}
    if args.overfit_smoke and final_psnr < target:
        raise CommandError(
            f"overfit smoke failed: PSNR {final_psnr:.2f} dB < {target} dB")
    return CommandResult(EXIT_OK, artifacts=[output, curve_path], report=report)


def cmd_infer(args):
    checkpoint = _require_file(args.checkpoint, "checkpoint")
    try:
        model = load_checkpoint(checkpoint)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    image = read_pfm(_require_file(args.input))
    want = (model.config.input_height, model.config.input_width, 3)
    if image.pixels.shape != want:
        raise CommandError(
            f"input image shape {image.pixels.shape}, model expects {want}")
    amps = model_forward(model, image.pixels)
    light = DsgLight(layout=model.graph.layout, amplitudes=amps,
                     has_depth=model.config.out_channels == 4)
    output = args.output or "predicted.json"
    atomic_write_json(output, light_to_json(light))
    artifacts = [output]
    if args.render:
        write_radiance_hdr(args.render,
                           reconstruct_panorama(light, args.width, args.height))
        artifacts.append(args.render)
    return CommandResult(EXIT_OK, artifacts=artifacts,
                         report={"checkpoint": checkpoint})


def _offset(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("offset must be x,y,z")
    return tuple(float(p) for p in parts)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dsglight",
        description="Spherical Gaussian lighting: fit, reconstruct, predict.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output=True):
        p.add_argument("--input", help="input path")
        if output:
            p.add_argument("--output", help="output path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--n", type=int, default=128, help="node count")
        p.add_argument("--k", type=int, default=8, help="k-NN neighbors")

    p = sub.add_parser("fit", help="fit a light to an HDR panorama")
    common(p)
    p.add_argument("--depth", help="optional depth panorama (PFM)")
    p.add_argument("--weighting", choices=["none", "solid_angle"],
                   default="none")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("reconstruct", help="render a light to a panorama")
    common(p)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=256)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render-irradiance",
                       help="diffuse irradiance map of a light")
    common(p)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--samples", type=int, default=512)
    p.set_defaults(func=cmd_render_irradiance)

    p = sub.add_parser("probe", help="warp a light to an insertion point")
    common(p)
    p.add_argument("--offset", type=_offset, default=(0.0, 0.0, 0.0),
                   help="x,y,z in meters")
    p.add_argument("--rescale-sharpness", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("metrics", help="PSNR between two images")
    common(p, output=False)
    p.add_argument("--reference", help="reference image path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("nodes", help="export the node layout")
    common(p)
    p.set_defaults(func=cmd_nodes)

    p = sub.add_parser("dataset", help="fit + crop a panorama directory")
    common(p)
    p.add_argument("--crops", type=int, default=3)
    p.add_argument("--weighting", choices=["none", "solid_angle"],
                   default="none")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the predictor")
    common(p)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--overfit-smoke", action="store_true",
                   help="memorize 8 synthetic samples instead of a manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a light from one crop")
    common(p)
    p.add_argument("--checkpoint", help="trained checkpoint path")
    p.add_argument("--render", help="also write a reconstructed HDR here")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=128)
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except PanoramaFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
