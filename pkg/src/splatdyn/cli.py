"""Command-line entry point: perceive, simulate, synth, info."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("splatdyn")

EXIT_OK = 0
EXIT_MANIFEST = 3
EXIT_INPUT = 4
EXIT_STAGE = 5
EXIT_ABORTED = 6


def _configure_threads(args):
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    n = args.threads or limit
    if n > limit:
        log.warning("--threads %d exceeds the numba pool (%d); using %d", n, limit, limit)
        n = limit
    numba.set_num_threads(n)
    return n


def _stage(timings, name):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, *exc):
            timings[name] = time.perf_counter() - self.t0

    return _Timer()


# --- perceive ---------------------------------------------------------------------------

def _make_provider(args):
    from .perception import ColorPositionEmbedder, HttpEmbeddingProvider, MeanColorEmbedder

    if args.provider == "mean-color":
        return MeanColorEmbedder()
    if args.provider == "color-position":
        return ColorPositionEmbedder()
    url = args.embed_url or os.environ.get("EMBEDDING_URL")
    if not url:
        raise SystemExit("--provider http needs --embed-url or EMBEDDING_URL")
    return HttpEmbeddingProvider(url, api_key=os.environ.get("EMBEDDING_API_KEY"))


def _make_reasoner(args, manifest):
    from .materials import HttpReasoner, StaticTableReasoner

    if args.reasoner == "static":
        return StaticTableReasoner(manifest.region_names)
    return HttpReasoner(url=args.reasoner_url, temperature=args.temperature,
                        timeout=args.timeout, retries=args.retries)


def cmd_perceive(args):
    from .materials import ReasonerError
    from .perception import SegmentationMap, label_cloud
    from .scene import (ManifestError, load_manifest, read_depth, read_image, read_labels,
                        read_sidecar, write_sidecar)
    from .splat import PlyError, load_splat_ply

    out = Path(args.out)
    written = []
    timings = {}
    try:
        with _stage(timings, "load"):
            cloud = load_splat_ply(args.cloud)
            manifest = load_manifest(args.manifest)
            input_image = read_image(manifest.input_image)
            input_map = SegmentationMap.from_labels(read_labels(manifest.input_mask)).validate()
            views = []
            for v in manifest.views:
                seg = SegmentationMap.from_labels(read_labels(v.mask))
                views.append((v.camera, read_image(v.image), seg, read_depth(v, cloud)))
        provider = _make_provider(args)
        reasoner = _make_reasoner(args, manifest)
        with _stage(timings, "segment"):
            result = label_cloud(cloud, input_image, input_map, views, provider,
                                 occlusion_threshold=args.occlusion_threshold, k=args.neighbors)
        with _stage(timings, "reason"):
            from .materials import reason_materials

            props = reason_materials(input_image, input_map, reasoner)
        materials = {m + 1: p for m, p in enumerate(props)}
        with _stage(timings, "write"):
            out.parent.mkdir(parents=True, exist_ok=True)
            written.extend(write_sidecar(out, result.cloud.group_ids, materials))
    except ManifestError as exc:
        _cleanup(written)
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except (PlyError, FileNotFoundError) as exc:
        _cleanup(written)
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ReasonerError, ValueError) as exc:
        _cleanup(written)
        print(f"perception failed: {exc}", file=sys.stderr)
        return EXIT_STAGE

    groups = result.cloud.group_ids
    print(f"{'group':>5}  {'kernels':>8}  {'material':<10} {'name':<12} {'density':>9}  "
          f"{'E [Pa]':>10}  {'nu':>5}")
    for g, p in materials.items():
        print(f"{g:>5}  {int(np.sum(groups == g)):>8}  {p.material_type:<10} {p.name[:12]:<12} "
              f"{p.density:>9.4g}  {p.youngs_modulus:>10.4g}  {p.poissons_ratio:>5.3g}")
    if args.ground_truth:
        truth, _ = read_sidecar(args.ground_truth)
        print(f"label accuracy vs ground truth: {np.mean(truth == groups):.4f}")
    log.info("stage timings: %s", {k: round(v, 3) for k, v in timings.items()})
    return EXIT_OK


def _cleanup(paths):
    for p in paths:
        try:
            Path(p).unlink()
        except FileNotFoundError:
            pass


# --- simulate ----------------------------------------------------------------------------

def cmd_simulate(args):
    from .dynamics import ConfigError, SimulationConfig, load_config, simulate, write_sequence
    from .scene import read_sidecar
    from .splat import PlyError, load_splat_ply

    try:
        cloud = load_splat_ply(args.cloud)
        groups, materials = read_sidecar(args.sidecar)
        config = load_config(args.config) if args.config else SimulationConfig()
    except (PlyError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if len(groups) != cloud.count:
        print(f"input error: sidecar labels {len(groups)} kernels but the cloud has "
              f"{cloud.count}", file=sys.stderr)
        return EXIT_INPUT
    if args.frames is not None:
        config.frames = args.frames
    if args.deterministic:
        config.transfer = "gather"
    cloud = cloud.replace(group_ids=groups, materials=materials)
    try:
        # a dt above the stability bound is logged as a warning before the first substep
        seq = simulate(cloud, config)
    except ValueError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    seq.report["threads"] = args.threads_used
    seq.report["deterministic"] = args.deterministic
    write_sequence(seq, args.out, figures=not args.no_figures)
    print(f"wrote {len(seq.frames)} frame(s) to {args.out} "
          f"({seq.report['timings']['simulate']:.1f} s simulating)")
    if not seq.completed:
        print(f"simulation aborted: {seq.report['failure']['message']}", file=sys.stderr)
        return EXIT_ABORTED
    return EXIT_OK


# --- synth / info ------------------------------------------------------------------------

def cmd_synth(args):
    from .synth import SCENES, make_scene, write_scene

    if args.scene not in SCENES:
        print(f"unknown scene {args.scene!r}; available: {', '.join(sorted(SCENES))}",
              file=sys.stderr)
        return EXIT_INPUT
    scene = make_scene(args.scene, n_views=args.views, resolution=args.resolution)
    write_scene(scene, args.out)
    print(f"{args.scene}: {scene.cloud.count} kernels, {len(scene.region_names)} group(s), "
          f"{len(scene.views)} views -> {args.out}")
    return EXIT_OK


def cmd_info(args):
    from .scene import read_sidecar
    from .splat import PlyError, load_splat_ply

    try:
        cloud = load_splat_ply(args.cloud)
    except (PlyError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
    sig = np.sqrt(np.maximum(np.linalg.eigvalsh(cloud.covariances), 0))
    print(f"kernels      {cloud.count}")
    print(f"bbox min     {np.array2string(lo, precision=4)}")
    print(f"bbox max     {np.array2string(hi, precision=4)}")
    print(f"opacity      mean {cloud.opacities.mean():.3f}  min {cloud.opacities.min():.3f}  "
          f"max {cloud.opacities.max():.3f}")
    print(f"std-dev      median {np.median(sig):.4g}  max {sig.max():.4g}")
    if args.sidecar:
        groups, materials = read_sidecar(args.sidecar)
        for g in sorted(set(groups.tolist())):
            name = materials[g].name if g in materials else "-"
            print(f"group {g:>3}    {int(np.sum(groups == g))} kernels  {name}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="splatdyn",
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="fixed-order transfers; repeated runs give identical frames")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("perceive", help="label kernels with material groups and properties")
    sp.add_argument("cloud", help="input splat PLY")
    sp.add_argument("--manifest", required=True, help="scene manifest JSON")
    sp.add_argument("--out", required=True, help="output sidecar JSON path")
    sp.add_argument("--provider", choices=["mean-color", "color-position", "http"],
                    default="mean-color")
    sp.add_argument("--embed-url", default=None)
    sp.add_argument("--reasoner", choices=["static", "http"], default="static")
    sp.add_argument("--reasoner-url", default=None, help="defaults to $REASONER_URL")
    sp.add_argument("--temperature", type=float, default=0.8)
    sp.add_argument("--timeout", type=float, default=60.0)
    sp.add_argument("--retries", type=int, default=2)
    sp.add_argument("--occlusion-threshold", type=float, default=0.1)
    sp.add_argument("--neighbors", type=int, default=300)
    sp.add_argument("--ground-truth", default=None, help="sidecar to score labels against")
    sp.set_defaults(func=cmd_perceive)

    sp = sub.add_parser("simulate", help="generate frames with MPM")
    sp.add_argument("cloud")
    sp.add_argument("sidecar")
    sp.add_argument("--config", default=None, help="TOML simulation config")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--frames", type=int, default=None, help="override [time].frames")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("synth", help="write a synthetic test scene")
    sp.add_argument("scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--views", type=int, default=29)
    sp.add_argument("--resolution", type=int, default=128)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("info", help="print cloud statistics")
    sp.add_argument("cloud")
    sp.add_argument("--sidecar", default=None)
    sp.set_defaults(func=cmd_info)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    args.threads_used = _configure_threads(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
