"""Command-line entry point: dataset generation, certification runs, metric
recomputation, and schedule audits.

Every output artifact except ``run.log`` (which records wall-clock timings)
is a pure function of the run manifest plus the dataset bytes; reruns are
byte-identical regardless of ``--jobs``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import nseg
from .certifier import certify_image
from .core import CertifyConfig, Image, LabelMap
from .errors import BridgeError, CertSegError, EmptyDatasetError
from .models import OracleDenoiser, make_denoiser, make_segmenter
from .schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    linear_schedule,
    sigma_at,
    timestep_for_sigma,
)
from .synth import generate_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BRIDGE = 3


# ---------------------------------------------------------------------------
# run manifest


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce a certification run bit-for-bit."""

    dataset: str
    model: str
    denoiser: str | None
    config: CertifyConfig
    schedule_t: int
    beta_start: float
    beta_end: float
    output: str

    def to_json(self) -> str:
        doc = {
            "dataset": self.dataset,
            "model": self.model,
            "denoiser": self.denoiser,
            "config": self.config.to_dict(),
            "schedule": {
                "T": self.schedule_t,
                "beta_start": self.beta_start,
                "beta_end": self.beta_end,
            },
            "output": self.output,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        doc = json.loads(text)
        sched = doc.get("schedule", {})
        return cls(
            dataset=doc["dataset"],
            model=doc["model"],
            denoiser=doc.get("denoiser"),
            config=CertifyConfig.from_dict(doc["config"]),
            schedule_t=int(sched.get("T", DEFAULT_T)),
            beta_start=float(sched.get("beta_start", DEFAULT_BETA_START)),
            beta_end=float(sched.get("beta_end", DEFAULT_BETA_END)),
            output=doc["output"],
        )


def sidecar_dict(cert) -> dict:
    return {
        "radius": cert.radius,
        "sigma": cert.config.sigma,
        "n0": cert.config.n0,
        "n": cert.config.n,
        "alpha": cert.config.alpha,
        "tau": cert.config.tau,
        "seed": cert.config.seed,
        "abstain_fraction": metrics_mod.abstain_fraction(cert),
    }


# ---------------------------------------------------------------------------
# dataset I/O


def _load_dataset(path: Path):
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CertSegError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    entries = sorted(manifest.get("images", []), key=lambda e: e["index"])
    if not entries:
        raise EmptyDatasetError(f"dataset {path} lists no images")
    return manifest, entries


def _load_pair(path: Path, entry: dict, num_classes: int):
    img_arr = nseg.read(path / entry["image"])
    gt_arr = nseg.read(path / entry["gt"])
    img = Image.from_array(img_arr)
    gt = LabelMap(gt_arr.shape[0], gt_arr.shape[1], num_classes, gt_arr)
    return img, gt


# ---------------------------------------------------------------------------
# certify


def _certify_one(index, img, gt, model, denoiser_spec, denoiser, config, schedule,
                 outdir: Path, dump_tests: bool):
    if denoiser_spec == "oracle" and config.denoise_mode != "none":
        denoiser = OracleDenoiser(img)
    t0 = time.perf_counter()
    result = certify_image(
        model, denoiser, img, gt, config,
        image_index=index, schedule=schedule, return_tests=dump_tests,
    )
    if dump_tests:
        cert, tests = result
        with open(outdir / f"tests_{index:04d}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["pixel_index", "candidate_class", "agree_count", "p_value"])
            for pt in tests:
                w.writerow([pt.pixel_index, pt.candidate_class, pt.agree_count, repr(pt.p_value)])
    else:
        cert = result
    elapsed = time.perf_counter() - t0
    nseg.write(outdir / f"cert_{index:04d}.nseg", cert.data)
    with open(outdir / f"cert_{index:04d}.json", "w") as f:
        json.dump(sidecar_dict(cert), f, indent=2, sort_keys=True)
        f.write("\n")
    return cert, metrics_mod.image_report(cert, gt), elapsed


def _run_certify(manifest: RunManifest, jobs: int, dump_tests: bool,
                 bridge_timeout: float) -> None:
    dataset_dir = Path(manifest.dataset)
    ds_manifest, entries = _load_dataset(dataset_dir)
    num_classes = int(ds_manifest["num_classes"])
    config = manifest.config

    outdir = Path(manifest.output)
    outdir.mkdir(parents=True, exist_ok=True)

    model = make_segmenter(manifest.model, ds_manifest, timeout=bridge_timeout,
                           pool_size=jobs)
    if model.num_classes != num_classes:
        raise CertSegError(
            f"model declares {model.num_classes} classes, dataset has {num_classes}"
        )
    denoiser = None
    if config.denoise_mode != "none":
        if manifest.denoiser is None:
            raise CertSegError(f"denoise_mode={config.denoise_mode} requires --denoiser")
        if manifest.denoiser != "oracle":
            denoiser = make_denoiser(manifest.denoiser, timeout=bridge_timeout,
                                     pool_size=jobs)
    schedule = linear_schedule(manifest.schedule_t, manifest.beta_start, manifest.beta_end)

    start = time.perf_counter()
    results: dict[int, tuple] = {}

    def work(entry):
        idx = int(entry["index"])
        img, gt = _load_pair(dataset_dir, entry, num_classes)
        return idx, _certify_one(
            idx, img, gt, model, manifest.denoiser, denoiser, config, schedule,
            outdir, dump_tests,
        )

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                for idx, payload in pool.map(work, entries):
                    results[idx] = payload
        else:
            for entry in entries:
                idx, payload = work(entry)
                results[idx] = payload
    finally:
        for handle in (model, denoiser):
            if hasattr(handle, "close"):
                handle.close()

    ordered = [results[int(e["index"])] for e in entries]
    report = metrics_mod.aggregate([rep for _, rep, _ in ordered])
    radius = ordered[0][0].radius
    with open(outdir / "metrics.csv", "w", newline="") as f:
        metrics_mod.write_report_csv(
            f, report, dataset=manifest.dataset, model=manifest.model,
            sigma=config.sigma, radius=radius,
        )
    (outdir / "run_manifest.json").write_text(manifest.to_json())

    total = time.perf_counter() - start
    with open(outdir / "run.log", "w") as f:
        f.write(f"seed {config.seed}\n")
        f.write(f"images {len(ordered)}\n")
        for entry, (_, _, dt) in zip(entries, ordered):
            f.write(f"image {int(entry['index']):04d} {dt:.3f}s\n")
        f.write(f"total {total:.3f}s\n")


def cmd_certify(args) -> int:
    if args.manifest:
        manifest = RunManifest.from_json(Path(args.manifest).read_text())
        if args.out:
            manifest = RunManifest(
                dataset=manifest.dataset, model=manifest.model,
                denoiser=manifest.denoiser, config=manifest.config,
                schedule_t=manifest.schedule_t, beta_start=manifest.beta_start,
                beta_end=manifest.beta_end, output=args.out,
            )
    else:
        if not args.dataset or not args.out:
            print("certify: --dataset and --out are required (or --manifest)", file=sys.stderr)
            return EXIT_CONFIG
        overrides = {}
        if args.config:
            overrides = json.loads(Path(args.config).read_text())
        cfg_kwargs = {
            "sigma": args.sigma,
            "n0": args.n0,
            "n": args.n,
            "alpha": args.alpha,
            "tau": args.tau,
            "seed": args.seed,
            "denoise_mode": args.denoise_mode,
        }
        cfg_kwargs.update({k: v for k, v in overrides.items() if k in cfg_kwargs})
        manifest = RunManifest(
            dataset=args.dataset,
            model=args.model,
            denoiser=args.denoiser,
            config=CertifyConfig(**cfg_kwargs),
            schedule_t=args.schedule_t,
            beta_start=args.beta_start,
            beta_end=args.beta_end,
            output=args.out,
        )

    if args.compare:
        base_out = Path(manifest.output)
        rows = {}
        radius = None
        for mode in ("none", "single_step"):
            sub = RunManifest(
                dataset=manifest.dataset, model=manifest.model,
                denoiser=manifest.denoiser,
                config=CertifyConfig(**{**manifest.config.to_dict(), "denoise_mode": mode}),
                schedule_t=manifest.schedule_t, beta_start=manifest.beta_start,
                beta_end=manifest.beta_end, output=str(base_out / mode),
            )
            _run_certify(sub, args.jobs, args.dump_tests, args.bridge_timeout)
            with open(base_out / mode / "metrics.csv", newline="") as f:
                for row in csv.DictReader(f):
                    rows.setdefault(int(row["class"]), {})[mode] = row
                    radius = row["radius"]
        with open(base_out / "compare.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([
                "class", "radius",
                "dice_none", "iou_none", "abstain_none",
                "dice_single_step", "iou_single_step", "abstain_single_step",
            ])
            for cls in sorted(rows):
                a, b = rows[cls]["none"], rows[cls]["single_step"]
                w.writerow([
                    cls, radius,
                    a["dice"], a["iou"], a["abstain_fraction"],
                    b["dice"], b["iou"], b["abstain_fraction"],
                ])
        return EXIT_OK

    _run_certify(manifest, args.jobs, args.dump_tests, args.bridge_timeout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics recompute


def cmd_metrics(args) -> int:
    cert_dir = Path(args.cert_dir)
    gt_dir = Path(args.gt_dir)
    run_manifest_path = cert_dir / "run_manifest.json"
    if not run_manifest_path.is_file():
        raise CertSegError(f"no run_manifest.json in {cert_dir}")
    manifest = RunManifest.from_json(run_manifest_path.read_text())
    ds_manifest, entries = _load_dataset(gt_dir)
    num_classes = int(ds_manifest["num_classes"])

    reports = []
    radius = None
    for entry in entries:
        idx = int(entry["index"])
        cert_path = cert_dir / f"cert_{idx:04d}.nseg"
        sidecar = json.loads((cert_dir / f"cert_{idx:04d}.json").read_text())
        data = nseg.read(cert_path)
        config = CertifyConfig(
            sigma=sidecar["sigma"], n0=sidecar["n0"], n=sidecar["n"],
            alpha=sidecar["alpha"], tau=sidecar["tau"], seed=sidecar["seed"],
            denoise_mode=manifest.config.denoise_mode,
        )
        from .core import CertifiedSegmentation

        cert = CertifiedSegmentation(
            height=data.shape[0], width=data.shape[1], num_classes=num_classes,
            data=data, radius=sidecar["radius"], config=config,
        )
        radius = cert.radius
        gt_arr = nseg.read(gt_dir / entry["gt"])
        gt = LabelMap(gt_arr.shape[0], gt_arr.shape[1], num_classes, gt_arr)
        reports.append(metrics_mod.image_report(cert, gt))

    report = metrics_mod.aggregate(reports)
    if args.out:
        with open(args.out, "w", newline="") as f:
            metrics_mod.write_report_csv(
                f, report, dataset=manifest.dataset, model=manifest.model,
                sigma=manifest.config.sigma, radius=radius,
            )
    else:
        metrics_mod.write_report_csv(
            sys.stdout, report, dataset=manifest.dataset, model=manifest.model,
            sigma=manifest.config.sigma, radius=radius,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# schedule audit


def cmd_schedule(args) -> int:
    sched = linear_schedule(args.schedule_t, args.beta_start, args.beta_end)
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.sigmas:
        w.writerow(["sigma", "t_star", "alpha_bar", "sigma_at"])
        for sigma in args.sigmas:
            t_star = timestep_for_sigma(sched, sigma)
            w.writerow([
                format(sigma, ".10g"), t_star,
                format(float(sched.alpha_bars[t_star]), ".10g"),
                format(sigma_at(sched, t_star), ".10g"),
            ])
    else:
        w.writerow(["t", "beta", "alpha_bar", "sigma_at"])
        for t in range(sched.T):
            w.writerow([
                t, format(float(sched.betas[t]), ".10g"),
                format(float(sched.alpha_bars[t]), ".10g"),
                format(sigma_at(sched, t), ".10g"),
            ])
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth dataset


def cmd_synth(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    intensities = None
    for i in range(args.count):
        scene_seed = int(
            np.uint64(args.seed) ^ np.uint64(0x53594E5448) ^ np.uint64(i * 0x9E3779B97F4A7C15 & (2**64 - 1))
        )
        scene = generate_scene(scene_seed, args.height, args.width, args.classes, args.shapes)
        img_name = f"img_{i:04d}.nseg"
        gt_name = f"gt_{i:04d}.nseg"
        nseg.write(outdir / img_name, scene.image.data)
        nseg.write(outdir / gt_name, scene.ground_truth.data)
        entries.append({"index": i, "image": img_name, "gt": gt_name})
        intensities = list(scene.spec.class_intensities)
    manifest = {
        "num_classes": args.classes,
        "height": args.height,
        "width": args.width,
        "channels": 1,
        "seed": args.seed,
        "shape_count": args.shapes,
        "class_intensities": intensities,
        "images": entries,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certseg",
        description="Per-pixel certified segmentation under L2 perturbations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="certify a dataset and emit maps + metrics")
    p.add_argument("--dataset", help="dataset directory (NSEG pairs + manifest.json)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", default="prototype:auto", help="segmenter spec")
    p.add_argument("--denoiser", default=None, help="identity | oracle | external:CMD ...")
    p.add_argument("--denoise-mode", default="none",
                   choices=["none", "single_step", "multi_step"])
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--n0", type=int, default=10)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config file; its keys override the flags above")
    p.add_argument("--manifest", help="run manifest JSON reproducing a previous run")
    p.add_argument("--jobs", type=int, default=1, help="images processed in parallel")
    p.add_argument("--schedule-t", type=int, default=DEFAULT_T, dest="schedule_t")
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    p.add_argument("--compare", action="store_true",
                   help="run denoise_mode none and single_step side by side")
    p.add_argument("--dump-tests", action="store_true",
                   help="write per-pixel test records for audit")
    p.add_argument("--bridge-timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("metrics", help="recompute the metrics CSV from stored maps")
    p.add_argument("--cert-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("schedule", help="audit the sigma <-> timestep mapping")
    p.add_argument("sigmas", nargs="*", type=float)
    p.add_argument("--t", type=int, default=DEFAULT_T, dest="schedule_t")
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("synth", help="generate a synthetic NSEG dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--shapes", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BridgeError as exc:
        print(f"certseg: bridge failure: {exc}", file=sys.stderr)
        return EXIT_BRIDGE
    except (CertSegError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"certseg: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
