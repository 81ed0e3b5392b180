"""Command-line entry points.

Five subcommands: ``train`` fits a cascade from a manifest of annotated
faces, ``hallucinate`` runs a trained model over images or a manifest,
``evaluate`` scores predicted images against manifest ground truth,
``degrade`` synthesises low-res inputs, and ``inspect`` prints a model or
the default configuration. Exit code 0 on success, 2 on bad input or data,
with the diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio
from .cascade import hallucinate, train_cascade
from .config import dump_config, load_config
from .errors import DataError, DegenerateInputError
from .metrics import facial_region, psnr, ssim
from .modelfile import load_model, save_model
from .resample import resize_bicubic


def _parse_eyes(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise DataError("--eyes wants four comma-separated numbers: "
                        "left-x,left-y,right-x,right-y")
    try:
        x1, y1, x2, y2 = (float(p) for p in parts)
    except ValueError:
        raise DataError(f"--eyes: could not parse '{text}' as numbers") from None
    return np.array([x1, y1]), np.array([x2, y2])


def _load_records(path, split):
    records = dataio.load_manifest(path)
    if split:
        records = [r for r in records if r.split == split]
    if not records:
        raise DataError(f"manifest '{path}' has no records"
                        + (f" with split '{split}'" if split else ""))
    return records


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fan_out(jobs, workers):
    """Run the callables, optionally on a small thread pool."""
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


# ----------------------------------------------------------------- train

def cmd_train(args):
    exp = load_config(args.config, os.environ)
    cfg = exp.cascade
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)

    records = _load_records(args.manifest, args.split)
    annotated = []
    extra_faces = []
    for rec in records:
        if rec.landmarks is not None:
            annotated.append((dataio.load_image(rec.path), rec.landmarks))
        else:
            extra_faces.append((dataio.load_image(rec.path), rec.eye_pair()))
    if not annotated:
        raise DataError(f"manifest '{args.manifest}': training needs at "
                        "least one record with landmarks")
    faces = None
    if extra_faces:
        from .geometry import eye_centers
        faces = [(img, eye_centers(lms)) for img, lms in annotated]
        faces += extra_faces

    if not args.quiet:
        print(f"training {cfg.n_stages}-stage cascade on {len(annotated)} "
              f"annotated faces"
              + (f" + {len(extra_faces)} extra" if extra_faces else ""))
    model = train_cascade(annotated, cfg, faces=faces)
    n_bytes = save_model(model, args.out)
    if not args.quiet:
        print(f"wrote {args.out} ({n_bytes} bytes)")
    return 0


# ----------------------------------------------------------- hallucinate

def _trace_arrays(trace):
    tf = trace.transform
    out = {"aligned_input": trace.aligned_input,
           "transform": np.array([tf.a, tf.b, tf.tx, tf.ty]),
           "p0": trace.p0}
    for k, st in enumerate(trace.stages, start=1):
        out[f"p{k}"] = st.p
        out[f"landmarks{k}"] = st.landmarks
        out[f"gate{k}"] = st.gate
        out[f"residual{k}"] = st.residual
        out[f"image{k}"] = st.image
    return out


def _hallucinate_one(model, path, eyes, out_dir, with_trace):
    y, chroma = dataio.load_face(path)
    out, trace = hallucinate(model, y, eyes)
    if chroma is not None:
        chroma = np.stack([resize_bicubic(chroma[:, :, c],
                                          out_shape=out.shape)
                           for c in range(2)], axis=2)
    stem = Path(path).stem
    dataio.save_face(out_dir / f"{stem}.png", out, chroma)
    if with_trace:
        np.savez(out_dir / f"{stem}_trace.npz", **_trace_arrays(trace))
    return stem


def cmd_hallucinate(args):
    model = load_model(args.model)
    out_dir = _out_dir(args.out)
    if (args.image is None) == (args.manifest is None):
        raise DataError("give exactly one of --image or --manifest")

    if args.image is not None:
        if args.eyes is None:
            raise DataError("--image mode needs --eyes")
        eyes = _parse_eyes(args.eyes)
        jobs = [(args.image, eyes)]
    else:
        records = _load_records(args.manifest, args.split)
        jobs = [(rec.path, rec.eye_pair()) for rec in records]

    def make_job(path, eyes):
        return lambda: _hallucinate_one(model, path, eyes, out_dir,
                                        not args.no_trace)

    stems = _fan_out([make_job(p, e) for p, e in jobs], args.workers)
    if not args.quiet:
        print(f"hallucinated {len(stems)} image(s) into {out_dir}")
    return 0


# -------------------------------------------------------------- evaluate

def _score_prediction(record, pred_dir):
    pred_path = pred_dir / f"{Path(record.path).stem}.png"
    if not pred_path.exists():
        raise DataError(f"no prediction for '{record.path}' "
                        f"(expected {pred_path})")
    pred = dataio.load_image(pred_path)
    truth = dataio.load_image(record.path)
    if pred.shape != truth.shape:
        # score in the reference frame; never resample the reference
        pred = np.clip(resize_bicubic(pred, out_shape=truth.shape), 0.0, 1.0)
    region = None
    if record.landmarks is not None:
        region = facial_region(record.landmarks, truth.shape)
    return (Path(record.path).stem,
            psnr(pred, truth, region=region),
            ssim(pred, truth, region=region))


def cmd_evaluate(args):
    records = _load_records(args.manifest, args.split)
    pred_dir = Path(args.pred)
    rows = _fan_out([(lambda r=rec: _score_prediction(r, pred_dir))
                     for rec in records], args.workers)
    lines = ["name\tpsnr\tssim"]
    for name, p, s in rows:
        lines.append(f"{name}\t{p:.6f}\t{s:.6f}")
    mean_p = float(np.mean([p for _, p, _ in rows]))
    mean_s = float(np.mean([s for _, _, s in rows]))
    lines.append(f"mean\t{mean_p:.6f}\t{mean_s:.6f}")
    report = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    print(report, end="")
    return 0


# --------------------------------------------------------------- degrade

def _degrade_one(img, landmarks, eyes, settings, seed, out_path):
    rng = np.random.default_rng(seed)
    res = dataio.degrade(img, landmarks=landmarks, eyes=eyes,
                         factor=settings.factor,
                         target_px_iod=settings.target_px_iod,
                         blur_sigma=settings.blur_sigma,
                         noise_level=settings.noise_level, rng=rng)
    dataio.save_image(out_path, res.image)
    return res


def cmd_degrade(args):
    exp = load_config(args.config, os.environ)
    settings = exp.degrade
    if args.factor is not None:
        settings = replace(settings, factor=args.factor, target_px_iod=None)
    if args.target_px_iod is not None:
        settings = replace(settings, target_px_iod=args.target_px_iod,
                           factor=None)
    if args.blur_sigma is not None:
        settings = replace(settings, blur_sigma=args.blur_sigma)
    if args.noise_level is not None:
        settings = replace(settings, noise_level=args.noise_level)
    if settings.factor is None and settings.target_px_iod is None:
        raise DataError("degrade needs --factor or --target-px-iod "
                        "(or a config that sets one)")
    out_dir = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed

    if (args.image is None) == (args.manifest is None):
        raise DataError("give exactly one of --image or --manifest")
    if args.image is not None:
        eyes = None
        if args.eyes is not None:
            eyes = np.stack(_parse_eyes(args.eyes))
        img = dataio.load_image(args.image)
        stem = Path(args.image).stem
        _degrade_one(img, None, eyes, settings, seed,
                     out_dir / f"{stem}.png")
        if not args.quiet:
            print(f"wrote {out_dir / (stem + '.png')}")
        return 0

    records = _load_records(args.manifest, args.split)
    out_records = []
    for i, rec in enumerate(records):
        img = dataio.load_image(rec.path)
        stem = Path(rec.path).stem
        res = _degrade_one(img, rec.landmarks, rec.eyes, settings, seed + i,
                           out_dir / f"{stem}.png")
        out_records.append(dataio.ManifestRecord(
            path=str(out_dir / f"{stem}.png"), landmarks=res.landmarks,
            eyes=res.eyes, split=rec.split))
    dataio.save_manifest(out_records, out_dir / "manifest.jsonl")
    if not args.quiet:
        print(f"degraded {len(records)} image(s) into {out_dir}")
    return 0


# --------------------------------------------------------------- inspect

def _count_params(net):
    total = 0
    for stack in (net.common, net.hf, net.gate):
        for layer in stack.layers:
            total += layer.weight.data.size + layer.bias.data.size
    return total


def cmd_inspect(args):
    if args.model is None:
        exp = load_config(args.config, os.environ)
        print("# defaults (override via --config or FACESR_* env vars)")
        print(dump_config(exp), end="")
        return 0
    model = load_model(args.model)
    cfg = model.config
    print(f"cascade stages (K): {cfg.n_stages}")
    print(f"upscale per stage:  x{cfg.stage_upscale} "
          f"(total x{cfg.total_upscale})")
    ladder = " -> ".join(f"{t.px_iod:g}" for t in model.templates)
    print(f"pxIOD ladder:       {ladder}")
    print(f"deformation bases:  {cfg.n_bases}")
    print(f"prior channels:     {cfg.prior.channels}")
    for k, net in enumerate(model.nets, start=1):
        depth = cfg.branch_depth_first if k == 1 else cfg.branch_depth_later
        rate = 1.0 if k == 1 else cfg.later_rate_scale
        print(f"stage {k}: branch depth {depth} width {cfg.branch_width}, "
              f"gate depth {cfg.gate_depth} width {cfg.gate_width}, "
              f"{_count_params(net)} parameters, rate scale {rate:g}")
    print(f"back-projection:    "
          f"{'on' if cfg.back_projection else 'off'} "
          f"({cfg.bp_iters} iters, step {cfg.bp_step:g})")
    if cfg.common_only or cfg.hf_only:
        which = "common" if cfg.common_only else "high-frequency"
        print(f"ablation:           {which} branch only")
    print("# full configuration")
    from .config import ExperimentConfig, DegradeSettings
    print(dump_config(ExperimentConfig(cascade=cfg,
                                       degrade=DegradeSettings())), end="")
    return 0


# ------------------------------------------------------------------ main

def build_parser():
    ap = argparse.ArgumentParser(
        prog="facesr",
        description="cascaded face hallucination: train, run, and score")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", default=None,
                       help="YAML config (see `facesr inspect` for keys)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--split", default="",
                       help="only use manifest records with this split tag")
        p.add_argument("--quiet", action="store_true")
        if workers:
            p.add_argument("--workers", type=int, default=1,
                           help="fan out over images with this many threads")

    p = sub.add_parser("train", help="fit a cascade from an annotated manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train, split="train")

    p = sub.add_parser("hallucinate", help="run a model over images")
    common(p, workers=True)
    p.add_argument("--model", required=True)
    p.add_argument("--image", default=None)
    p.add_argument("--eyes", default=None,
                   help="left-x,left-y,right-x,right-y (with --image)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-trace", action="store_true",
                   help="skip the per-image trace dumps")
    p.set_defaults(func=cmd_hallucinate)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    common(p, workers=True)
    p.add_argument("--manifest", required=True,
                   help="records are the ground-truth images")
    p.add_argument("--pred", required=True,
                   help="directory of predicted images (by stem)")
    p.add_argument("--out", default=None, help="write the TSV report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("degrade", help="synthesise low-res inputs")
    common(p)
    p.add_argument("--image", default=None)
    p.add_argument("--eyes", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--factor", type=float, default=None)
    p.add_argument("--target-px-iod", type=float, default=None)
    p.add_argument("--blur-sigma", type=float, default=None)
    p.add_argument("--noise-level", type=float, default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("inspect", help="describe a model, or print defaults")
    common(p)
    p.add_argument("--model", default=None)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
