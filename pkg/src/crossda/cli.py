"""Command-line entry point: ``crossda <command> [options]``.

Every command writes ``run.json`` (the run manifest) into its output
directory with the argument vector, resolved config, seed, input hashes and
library versions.  ``--manifest PATH`` reruns a recorded command, optionally
into a new ``--out``.  Failures exit nonzero with a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger("crossda")

CACHE_ENV = "CROSSDA_CACHE"
MANIFEST = "run.json"  # checkpoint dirs already own manifest.json
SUFFIXES = ("_mask", "_quality", "_prob")


class CLIError(RuntimeError):
    pass


# --- helpers -------------------------------------------------------------------


def _versions() -> dict:
    import rasterio
    import scipy
    import torch

    from . import __version__

    return {
        "crossda": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "rasterio": rasterio.__version__,
    }


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths: Sequence) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = file_digest(f)
    return out


def write_manifest(out_dir: Path, argv: Sequence[str], command: str, config: dict, seed, inputs) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": _hash_inputs(inputs),
        "versions": _versions(),
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _image_files(paths: Sequence[str]) -> list[Path]:
    """Expand directories to their image GeoTIFFs (masks and flags excluded)."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(f for f in sorted(p.glob("*.tif")) if not f.stem.endswith(SUFFIXES))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"input: no such file or directory {p}")
    if not files:
        raise FileNotFoundError(f"input: no GeoTIFFs found in {list(paths)}")
    return files


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}{suffix}.tif")


def _default_out(command: str, argv: Sequence[str]) -> Path:
    root = Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "crossda"))
    digest = hashlib.sha256(json.dumps(list(argv)).encode()).hexdigest()[:12]
    return root / command / digest


def _pools(args, patch_size: int):
    """PV and LU patch pools from a benchmark split or from explicit files."""
    from .experiment import load_bench, source_pool, target_pool
    from .raster import PatchSet, extract_patches, load_image

    if args.bench:
        pairs = load_bench(args.bench, args.split)
        return target_pool(pairs, patch_size), source_pool(pairs, patch_size)
    if not (args.pv and args.lu):
        raise CLIError("train-da needs --bench or both --pv and --lu")
    pv = PatchSet.concat([extract_patches(load_image(f), patch_size, patch_size) for f in _image_files(args.pv)])
    lu = PatchSet.concat([extract_patches(load_image(f), patch_size, patch_size) for f in _image_files(args.lu)])
    return pv, lu


def _da_config(args):
    from .config import DAConfig, da_preset, load_config

    cfg = load_config(args.config, DAConfig) if args.config else da_preset(args.preset)
    overrides = {k: v for k, v in (("steps", args.steps), ("seed", args.seed), ("batch_size", args.batch_size),
                                   ("patch_size", args.patch_size), ("classifier", args.classifier)) if v is not None}
    return cfg.replace(**overrides)


def _with_out(argv: list[str], out: Path) -> list[str]:
    argv = list(argv)
    if "--out" in argv:
        argv[argv.index("--out") + 1] = str(out)
    else:
        argv += ["--out", str(out)]
    return argv


# --- commands ------------------------------------------------------------------


def cmd_harmonize(args, out: Path) -> dict:
    import rasterio

    from .harmonize import upscale_l8, upscale_labels
    from .raster import load_mask, save_image, save_mask

    src_path = Path(args.input)
    if not src_path.exists():
        raise FileNotFoundError(f"input: no such file {src_path}")
    with rasterio.open(src_path) as src:
        names = args.band_order.split(",") if args.band_order else [d for d in src.descriptions]
        if None in names or len(names) != src.count:
            raise CLIError(f"band order: file has {src.count} bands; pass --band-order B1,B2,...")
        data = src.read().astype(np.float32)
        nodata = src.nodata
        transform = src.transform
        crs = src.crs.to_string() if src.crs else None
    valid = np.ones(data.shape[1:], dtype=bool)
    if nodata is not None:
        valid &= ~np.any(data == nodata, axis=0)
    bands = dict(zip(names, data))
    lu = upscale_l8(bands, valid=None if valid.all() else valid)
    scale = lu.resolution_m / abs(transform.a)
    lu.transform = transform @ transform.scale(scale, scale)
    lu.crs = crs
    lu.name = src_path.stem
    image_path, mask_path = out / f"{src_path.stem}.tif", out / f"{src_path.stem}_mask.tif"
    if args.out_prefix:
        image_path, mask_path = Path(f"{args.out_prefix}_lu.tif"), Path(f"{args.out_prefix}_lu_mask.tif")
        image_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(lu, image_path)
    if args.labels:
        labels = upscale_labels(load_mask(args.labels), image_shape=data.shape[1:])
        h, w = lu.shape
        labels.labels = labels.labels[:h, :w]
        save_mask(labels, mask_path, transform=lu.transform, crs=crs)
    return {"config": {"band_order": names}, "seed": None, "inputs": [args.input, args.labels]}


def cmd_synth(args, out: Path) -> dict:
    from .experiment import save_bench
    from .synth import DegradationSpec, make_benchmark

    spec = DegradationSpec(
        blue_clip=args.blue_clip, noise_sigma=args.noise_sigma, blur_sigma=args.blur_sigma
    )
    pairs = make_benchmark(args.n, args.size, seed=args.seed, spec=spec)
    cfg = {"n": args.n, "size": args.size, "degradation": spec.__dict__}
    save_bench(pairs, out, meta={"seed": args.seed, **cfg})
    return {"config": cfg, "seed": args.seed, "inputs": []}


def cmd_train_da(args, out: Path) -> dict:
    from .da import train_da

    cfg = _da_config(args)
    pv, lu = _pools(args, cfg.patch_size)
    logger.info("train-da: %d PV / %d LU patches, %s steps", len(pv), len(lu), cfg.steps)
    result = train_da(pv, lu, cfg, out_dir=out)
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": [args.bench] + list(args.pv or []) + list(args.lu or []) + [cfg.classifier],
        "last": result.records[-1] if result.records else {},
    }


def cmd_adapt(args, out: Path) -> dict:
    from .da import adapt_image, load_generator
    from .raster import load_image, save_image

    G = load_generator(args.checkpoint)
    files = _image_files(args.input)
    for f in files:
        save_image(adapt_image(load_image(f), G, tile=args.tile), out / f.name)
    return {"config": {"tile": args.tile}, "seed": None, "inputs": files + [args.checkpoint]}


def cmd_hist_match(args, out: Path) -> dict:
    from .histmatch import HistogramMatchModel, histogram_match_apply, histogram_match_fit
    from .raster import load_image, save_image

    if args.action == "fit":
        pv = [load_image(f) for f in _image_files(args.pv)]
        lu = [load_image(f) for f in _image_files(args.lu)]
        model = histogram_match_fit(pv, lu, n_quantiles=args.quantiles)
        model.save(out / "histmatch.json")
        return {"config": {"quantiles": args.quantiles}, "seed": None, "inputs": list(args.pv) + list(args.lu)}
    model = HistogramMatchModel.load(args.model)
    files = _image_files(args.input)
    for f in files:
        save_image(histogram_match_apply(load_image(f), model), out / f.name)
    return {"config": {}, "seed": None, "inputs": files + [args.model]}


def cmd_train_cloud(args, out: Path) -> dict:
    from .cloud import train_cloud, train_cloud_ensemble
    from .config import CloudTrainConfig, load_config
    from .experiment import load_bench, source_pool
    from .raster import PatchSet, extract_patches, load_image, load_mask

    cfg = load_config(args.config, CloudTrainConfig) if args.config else CloudTrainConfig()
    overrides = {k: v for k, v in (("steps", args.steps), ("seed", args.seed), ("batch_size", args.batch_size)) if v is not None}
    cfg = cfg.replace(**overrides)
    size = args.pool_patch
    if args.bench:
        pool = source_pool(load_bench(args.bench, args.split), size)
        inputs = [args.bench]
    else:
        if not args.lu:
            raise CLIError("train-cloud needs --bench or --lu")
        files = _image_files(args.lu)
        sets = []
        for f in files:
            mask_path = _sibling(f, "_mask")
            if not mask_path.exists():
                raise FileNotFoundError(f"labels: missing {mask_path}")
            sets.append(extract_patches(load_image(f), size, size, labels=load_mask(mask_path)))
        pool = PatchSet.concat(sets)
        inputs = files
    if args.seeds:
        seeds = [cfg.seed + k for k in range(args.seeds)]
        _, stats = train_cloud_ensemble(pool, cfg, seeds, out_dir=out)
        return {"config": {**cfg.to_dict(), "seeds": seeds}, "seed": seeds, "inputs": inputs, "last": stats}
    result = train_cloud(pool, cfg, out_dir=out)
    return {"config": cfg.to_dict(), "seed": cfg.seed, "inputs": inputs, "last": result.records[-1]}


def cmd_predict(args, out: Path) -> dict:
    from .cloud import load_cloud_net, predict_cloud
    from .raster import load_image, save_float, save_mask

    net = load_cloud_net(args.checkpoint)
    files = _image_files(args.input)
    if (args.out_mask or args.out_prob) and len(files) != 1:
        raise CLIError("--out-mask/--out-prob need exactly one input image")
    for f in files:
        image = load_image(f)
        prob, mask = predict_cloud(image, net, threshold=args.threshold)
        prob_path = Path(args.out_prob) if args.out_prob else out / f"{f.stem}_prob.tif"
        mask_path = Path(args.out_mask) if args.out_mask else out / f"{f.stem}_mask.tif"
        save_float(prob, prob_path, image.resolution_m, image.transform, image.crs)
        save_mask(mask, mask_path, image.transform, image.crs)
    return {"config": {"threshold": args.threshold}, "seed": None, "inputs": files + [args.checkpoint]}


def _evaluate_dirs(args, out: Path) -> dict:
    """Radiometric report for adapted images when no benchmark labels exist."""
    from .evaluation import (
        band_histograms,
        fft_amplitude_db,
        histogram_distance,
        plot_differences,
        plot_histograms,
        plot_spectra,
        toa_difference_stats,
    )
    from .raster import extract_patches, load_image, load_quality

    pv_files = _image_files([args.pv])
    quality_dir = Path(args.quality) if args.quality else Path(args.pv)
    pv, adapted, quality = [], [], []
    for f in pv_files:
        other = Path(args.adapted) / f.name
        if not other.exists():
            raise FileNotFoundError(f"adapted: missing {other}")
        pv.append(load_image(f))
        adapted.append(load_image(other))
        quality.append(load_quality(quality_dir / f"{f.stem}_quality.tif"))
    lu = [load_image(f) for f in _image_files([args.lu])]

    ref = band_histograms(lu)
    hists = {"lu": ref, "pv": band_histograms(pv), "adapted": band_histograms(adapted)}
    diff = toa_difference_stats(pv, adapted, quality)
    report = {
        "hist_l1": {k: histogram_distance(ref, h).tolist() for k, h in hists.items() if k != "lu"},
        "toa_difference": {
            b: {s: {k: v for k, v in d[s].items() if k != "hist"} for s in ("good", "bad")}
            for b, d in diff["bands"].items()
        },
        "binning": {"bins": len(ref.edges) - 1, "range": [ref.edges[0], ref.edges[-1]]},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    with open(out / "metrics.jsonl", "w") as fh:
        for name in ("pv", "adapted"):
            fh.write(json.dumps({"method": name, "hist_l1": report["hist_l1"][name]}) + "\n")
    plot_histograms(hists, out / "histograms.png")
    plot_differences(diff, out / "differences.png")
    size = 64
    spectra = {}
    for name, images in (("lu", lu), ("pv", pv), ("adapted", adapted)):
        sets = [extract_patches(im, size, size) for im in images if min(im.shape) >= size]
        if sets:
            spectra[name] = fft_amplitude_db(np.concatenate([s.patches for s in sets]))
    if spectra:
        plot_spectra(spectra, out / "spectra.png")
    inputs = pv_files + [Path(args.adapted) / f.name for f in pv_files] + [args.lu]
    return {"config": {"mode": "directories"}, "seed": None, "inputs": inputs}


def cmd_evaluate(args, out: Path) -> dict:
    if args.bench is None:
        return _evaluate_dirs(args, out)
    from .cloud import load_cloud_net
    from .da import adapt_array, load_generator
    from .experiment import evaluate_methods, load_bench
    from .histmatch import HistogramMatchModel, histogram_match_apply

    pairs = load_bench(args.bench, args.split)
    net = load_cloud_net(args.classifier)
    methods = {}
    if args.hist_match:
        model = HistogramMatchModel.load(args.hist_match)
        methods["hist-match"] = lambda x: histogram_match_apply(x, model)
    for item in args.da or []:
        name, _, path = item.rpartition("=")
        G = load_generator(path)
        methods[name or "da"] = lambda x, G=G: adapt_array(G, x)
    results = evaluate_methods(net, pairs, methods)
    with open(out / "metrics.jsonl", "w") as fh:
        for name, entry in results.items():
            fh.write(json.dumps({"method": name, **entry}) + "\n")
    if args.figures:
        _figures(pairs, methods, out)
    inputs = [args.bench, args.classifier, args.hist_match] + [d.rpartition("=")[2] for d in args.da or []]
    return {"config": {"split": args.split}, "seed": None, "inputs": inputs}


def _figures(pairs, methods, out: Path) -> None:
    from .evaluation import band_histograms, fft_amplitude_db, plot_histograms, plot_spectra

    src = np.stack([p.source.data for p in pairs])
    tgt = np.stack([p.target.data for p in pairs])
    named = {"source": src, "target": tgt}
    for name, fn in methods.items():
        named[name] = np.stack([fn(x) for x in tgt])
    plot_histograms({k: band_histograms(list(v)) for k, v in named.items()}, out / "histograms.png")
    plot_spectra({k: fft_amplitude_db(v) for k, v in named.items()}, out / "spectra.png")


def cmd_report(args, out: Path) -> dict:
    from .evaluation import ablation_report

    runs: dict[str, list[float]] = {}
    files = []
    for d in map(Path, args.runs):
        path = d / "metrics.jsonl" if d.is_dir() else d
        if not path.exists():
            raise FileNotFoundError(f"runs: no metrics at {path}")
        files.append(path)
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            runs.setdefault(rec["method"], []).append(rec["accuracy"])
    rows = ablation_report(list(runs.items()), out_dir=out)
    for r in rows:
        print(f"{r['config']}: mean {r['mean']:.2f} std {r['std']:.2f} (n={r['n_seeds']})")
    return {"config": {}, "seed": None, "inputs": files}


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        p.add_argument("--out", help=f"output directory (default: under ${CACHE_ENV})")
        p.add_argument("--manifest", help="rerun the command recorded in this manifest")
        return p

    p = command("harmonize", cmd_harmonize, "upscale a Landsat-8 GeoTIFF to the 333 m domain")
    p.add_argument("--input", "--in", dest="input")
    p.add_argument("--out-prefix", help="write <prefix>_lu.tif (and <prefix>_lu_mask.tif) instead of into --out")
    p.add_argument("--band-order", help="comma-separated band names in file order, e.g. B1,B2,B3,B4,B5,B6,B7")
    p.add_argument("--labels", help="30 m cloud mask to upscale alongside")

    p = command("synth", cmd_synth, "write a synthetic two-domain benchmark")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blue-clip", type=float, default=0.35)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--blur-sigma", type=float, default=0.7)

    p = command("train-da", cmd_train_da, "train the domain adaptation networks")
    p.add_argument("--bench")
    p.add_argument("--split", default="train")
    p.add_argument("--pv", nargs="+")
    p.add_argument("--lu", nargs="+")
    p.add_argument("--config")
    p.add_argument("--preset", default="full-da")
    p.add_argument("--classifier", help="frozen LU cloud classifier checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)

    p = command("adapt", cmd_adapt, "apply a trained PV->LU generator")
    p.add_argument("--input", "--in", dest="input", nargs="+")
    p.add_argument("--checkpoint", "--ckpt", dest="checkpoint")
    p.add_argument("--tile", type=int, default=64)

    p = command("hist-match", cmd_hist_match, "histogram matching baseline")
    p.add_argument("action", choices=("fit", "apply"))
    p.add_argument("--pv", nargs="+")
    p.add_argument("--lu", nargs="+")
    p.add_argument("--quantiles", type=int, default=1024)
    p.add_argument("--model")
    p.add_argument("--input", nargs="+")

    p = command("train-cloud", cmd_train_cloud, "train the LU cloud classifier")
    p.add_argument("--bench")
    p.add_argument("--split", default="train")
    p.add_argument("--lu", "--data", dest="lu", nargs="+", help="LU images with <name>_mask.tif labels")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="ensemble mode: train this many seeds starting at --seed")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pool-patch", type=int, default=64, help="size of the patches cut from each scene")

    p = command("predict", cmd_predict, "cloud probability and mask for images")
    p.add_argument("--input", "--in", dest="input", nargs="+")
    p.add_argument("--checkpoint", "--ckpt", dest="checkpoint")
    p.add_argument("--out-mask", help="mask path for a single input image")
    p.add_argument("--out-prob", help="probability path for a single input image")
    p.add_argument("--threshold", type=float, default=0.5)

    p = command("evaluate", cmd_evaluate, "score a classifier on raw and adapted benchmark targets")
    p.add_argument("--bench")
    p.add_argument("--split", default="test")
    p.add_argument("--classifier")
    p.add_argument("--pv", help="directory mode: raw PV images")
    p.add_argument("--adapted", help="directory mode: adapted PV images (same file names)")
    p.add_argument("--lu", help="directory mode: LU reference images")
    p.add_argument("--quality", help="directory mode: <name>_quality.tif flags (default: next to --pv)")
    p.add_argument("--hist-match", help="fitted histogram-match model")
    p.add_argument("--da", action="append", help="[name=]DA checkpoint; repeatable")
    p.add_argument("--figures", action="store_true")

    p = command("report", cmd_report, "aggregate evaluate runs into an ablation table")
    p.add_argument("runs", nargs="+", help="evaluate output directories (one per seed)")
    return parser


REQUIRED = {
    "harmonize": ("input",),
    "adapt": ("input", "checkpoint"),
    "predict": ("input", "checkpoint"),
}


def _resolve(parser: argparse.ArgumentParser, argv: list[str]):
    args = parser.parse_args(argv)
    if args.manifest:
        recorded = json.loads(Path(args.manifest).read_text())["argv"]
        rerun = parser.parse_args(recorded)
        rerun.out = args.out or rerun.out
        rerun.manifest = None
        args = rerun
        argv = recorded
    for name in REQUIRED.get(args.command, ()):
        if getattr(args, name) is None:
            parser.error(f"{args.command}: --{name.replace('_', '-')} is required")
    if args.command == "evaluate":
        if args.bench and not args.classifier:
            parser.error("evaluate: --bench needs --classifier")
        if not args.bench and not (args.pv and args.adapted and args.lu):
            parser.error("evaluate: pass --bench and --classifier, or --pv, --adapted and --lu")
    return args, argv


def _error_line(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc).splitlines()[0] if str(exc) else ""})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, argv = _resolve(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError, KeyError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    clean = [a for a in argv if a not in ("-v", "--verbose")]
    out = Path(args.out) if args.out else _default_out(args.command, clean)
    try:
        out.mkdir(parents=True, exist_ok=True)
        info = args.func(args, out)
        write_manifest(out, _with_out(clean, out), args.command, info["config"], info["seed"], info["inputs"])
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        logger.debug("command failed", exc_info=True)
        print(_error_line(exc), file=sys.stderr)
        return 1
    print(str(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
