"""Command-line entry point: ``vsnerf synth | distill | train | eval | ablate | memest``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .consistency import format_bytes, memory_estimate, profile_ray
from .dataset import (
    DatasetFormatError,
    correspondences,
    read_dataset,
    split_views,
    synth_scene,
    write_dataset,
    write_pfm,
)
from .features import (
    CorrespondenceBatch,
    CorrespondenceGenerator,
    apply_projector,
    cosine_matrix,
    distill_train,
    save_projector,
)
from .field import load_field, save_field
from .geometry import generate_ray
from .trainer import TrainingDiverged, eval_metrics, train


class CliError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with (nested) configuration keys")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. --set train.field.width=32 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (default: $VSNERF_SEED or 0)")
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS/OpenMP threads; 0 leaves the library default")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsnerf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--views", type=int, help="number of ring cameras")
    p.add_argument("--size", type=int, help="image width and height in pixels")
    p.add_argument("--raw-dim", type=int, help="also write raw feature maps of this dimension")

    p = sub.add_parser("distill", help="train a bottleneck feature projector")
    _add_common(p)
    p.add_argument("--out", required=True, help="output projector file (.vspj)")
    p.add_argument("--data", help="dataset with raw feature maps and ground truth; "
                                  "default is the synthetic correspondence generator")
    p.add_argument("--steps", type=int)
    p.add_argument("--c-out", type=int)

    p = sub.add_parser("train", help="fit a radiance field to a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--sampler", choices=["vs", "uniform", "stratified"])
    p.add_argument("--iters", type=int)
    p.add_argument("--vs-iters", type=int, help="iterations with view-consistent sampling")
    p.add_argument("--lambda-depu", type=float, help="depth-pushing loss weight")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--samples", type=int, help="final samples per ray")
    p.add_argument("--presamples", type=int, help="consistency pre-samples per ray")
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--n-eval", type=int, help="evenly spaced held-out views")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib output")

    p = sub.add_parser("eval", help="render held-out views of a trained field")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, help="stratified samples per ray")
    p.add_argument("--views", help="comma-separated view indices (default: held-out split)")
    p.add_argument("--n-eval", type=int)

    p = sub.add_parser("ablate", help="compare samplers and the depth-pushing loss on random scenes")
    _add_common(p)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", default=None,
                   help="subset of baseline, vs, dl, vs+dl (default: all)")
    p.add_argument("--iters", type=int)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("memest", help="projection-feature memory of a ray batch")
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--presamples", type=int, required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--bytes", type=int, default=4, help="bytes per scalar")
    return parser


def _resolve(args, flags) -> dict:
    flags = dict(flags)
    flags["seed"] = args.seed
    return cfgmod.resolve(args.config, args.overrides, flags)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(f"missing file: {exc.filename}") from exc


def _enclosure(doc: dict):
    scene = doc.get("scene")
    return scene["enclosure_radius"] if scene else None


def _split(views, n_eval: int, doc: dict):
    if n_eval == 0:
        return list(range(len(views))), []
    if n_eval >= len(views):
        raise CliError(f"n_eval={n_eval} leaves no training views out of {len(views)}")
    return split_views(len(views), n_eval)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    tree = _resolve(args, {"scene.n_views": args.views, "scene.width": args.size,
                           "scene.height": args.size, "scene.raw_feature_dim": args.raw_dim})
    spec = cfgmod.scene_spec(tree)
    views, gt = synth_scene(spec, tree["seed"])
    out = _out_dir(args.out)
    write_dataset(out, views, gt, extra={"scene": spec.to_dict(), "seed": tree["seed"]})
    from .report import write_json
    write_json(out / "config.json", tree)
    hits = float(np.mean([np.mean(h >= 0) for h in gt.hit_id]))
    print(f"wrote {len(views)} views ({spec.width}x{spec.height}) to {out}; "
          f"{hits:.0%} of pixels hit a primitive")
    return 0


def cmd_distill(args) -> int:
    from .report import plot_similarity, write_json
    tree = _resolve(args, {"distill.steps": args.steps, "distill.c_out": args.c_out})
    dcfg = cfgmod.distill_config(tree)
    d = tree["distill"]
    seed = tree["seed"]
    held_rng = np.random.default_rng([seed, 1])
    if args.data:
        views, gt, _ = _load(args.data)
        if gt is None:
            raise CliError(f"{args.data} has no ground truth to match points across views")
        if any("raw" not in v.feature_maps for v in views):
            raise CliError(f"{args.data} has no raw feature maps (synthesise with --raw-dim)")
        dcfg.c_in = views[0].feature_maps["raw"].channels
        if dcfg.c_out > dcfg.c_in:
            raise CliError(f"c_out={dcfg.c_out} exceeds the raw feature dimension {dcfg.c_in}")

        def batch(i):
            return CorrespondenceBatch(*correspondences(views, gt, dcfg.batch_size,
                                                        np.random.default_rng([seed, 2, i])))

        held = CorrespondenceBatch(*correspondences(views, gt, d["held_out_k"], held_rng))
    else:
        gen = CorrespondenceGenerator(dcfg.c_in, d["latent_dim"], d["nuisance"], d["noise"], seed)

        def batch(i):
            return gen.batch(dcfg.batch_size, np.random.default_rng([seed, 2, i]))

        held = gen.batch(d["held_out_k"], held_rng)
    projector, report = distill_train(batch, dcfg, held_out=held)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_projector(out, projector)
    za, zb = apply_projector(projector, held.feats_a), apply_projector(projector, held.feats_b)
    stem = out.with_suffix("")
    write_json(stem.with_name(stem.name + "_report.json"), {
        "steps": report.steps, "final_loss": report.final_loss,
        "diagonal_fraction": report.diagonal_fraction,
        "raw_diagonal_fraction": report.raw_diagonal_fraction, "config": tree})
    plot_similarity(stem.with_name(stem.name + "_similarity.png"),
                    cosine_matrix(held.feats_a, held.feats_b), za @ zb.T)
    print(f"projector {dcfg.c_in}->{dcfg.c_out}: final loss {report.final_loss:.4f}, "
          f"diagonal argmax {report.diagonal_fraction:.0%} (raw {report.raw_diagonal_fraction:.0%})")
    return 0


def cmd_train(args) -> int:
    from . import report as rep
    tree = _resolve(args, {
        "train.sampler": args.sampler, "train.iterations": args.iters,
        "train.vs_iterations": args.vs_iters, "train.lambda_depu": args.lambda_depu,
        "train.batch_size": args.batch_size, "train.samples": args.samples,
        "train.presamples": args.presamples, "train.eval_interval": args.eval_interval,
        "data.n_eval": args.n_eval})
    tcfg = cfgmod.train_config(tree)
    tcfg.validate()
    views, gt, doc = _load(args.data)
    radius = _enclosure(doc)
    if radius is None and tcfg.t_far is None:
        raise CliError("dataset has no scene bounds; set train.t_far")
    tr, held = _split(views, tree["data"]["n_eval"], doc)
    out = _out_dir(args.out)
    rep.write_json(out / "config.json", tree)
    train_views = [views[i] for i in tr]
    eval_views = [views[i] for i in held]
    start = time.perf_counter()
    try:
        field, history = train(train_views, tcfg, eval_views, enclosure_radius=radius)
    except TrainingDiverged as exc:
        save_field(out / "last_good.vsfd", exc.last_good)
        rep.write_train_log(out / "train_log.csv", exc.history)
        raise CliError(f"training diverged: {exc}; last good field in {out / 'last_good.vsfd'}")
    elapsed = time.perf_counter() - start
    save_field(out / "field.vsfd", field)
    rep.write_metrics_csv(out / "metrics.csv", history.evals)
    rep.write_train_log(out / "train_log.csv", history)
    final = history.evals[-1] if history.evals else None
    summary = {
        "iterations": tcfg.iterations, "sampler": tcfg.sampler,
        "vs_active_iterations": tcfg.vs_active_iterations, "lambda_depu": tcfg.lambda_depu,
        "train_views": tr, "eval_views": held,
        "final_psnr": final.psnr if final else None, "final_ssim": final.ssim if final else None,
        "seed": tcfg.seed,
    }
    if not tcfg.deterministic:
        summary["wall_seconds"] = elapsed
    rep.write_json(out / "summary.json", summary)
    if not args.no_figures:
        rep.plot_training(out / "training.png", history)
        if eval_views:
            _, _, images = eval_metrics(field, eval_views, tcfg.eval_samples, tcfg.seed, tcfg.t_near,
                                        tcfg.t_far, radius, return_images=True)
            rep.plot_renders(out / "renders.png", [v.image for v in eval_views],
                             [im for im, _ in images], [dp for _, dp in images])
        if tcfg.sampler == "vs" and "distilled" in train_views[0].feature_maps:
            _profile_figure(out / "vc_profile.png", train_views, tr, gt, tcfg, radius)
    msg = f"trained {tcfg.iterations} iterations ({tcfg.sampler})"
    if final:
        msg += f": held-out PSNR {final.psnr:.2f} dB, SSIM {final.ssim:.4f}"
    print(msg + f"; outputs in {out}")
    return 0


def _profile_figure(path, views, view_ids, gt, tcfg, radius):
    from dataclasses import replace
    from .dataset import enclosure_distance
    from .report import plot_profile

    v = views[0]
    K = v.intrinsics
    px = ((K.width - 1) // 2, (K.height - 1) // 2)
    ray = generate_ray(v, px, tcfg.t_near, 1.0)
    far = tcfg.t_far or float(enclosure_distance(radius, ray.origin[None], ray.direction[None])[0])
    ray = replace(ray, t_far=far, source_view=0)
    prof = profile_ray(ray, views, tcfg.presamples, tcfg.delta, pixel=px, gamma=tcfg.gamma,
                       center=tcfg.center_measures)
    surface = None
    if gt is not None:
        pts = gt.points[view_ids[0]][px[1], px[0]]
        surface = float(np.linalg.norm(pts - ray.origin))
    plot_profile(path, prof.depths, prof.scores, surface)


def cmd_eval(args) -> int:
    from .report import write_json
    tree = _resolve(args, {"train.eval_samples": args.samples, "data.n_eval": args.n_eval})
    tcfg = cfgmod.train_config(tree)
    views, _, doc = _load(args.data)
    try:
        field = load_field(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(f"missing checkpoint {args.checkpoint}") from exc
    if args.views:
        try:
            ids = [int(x) for x in args.views.split(",")]
        except ValueError as exc:
            raise CliError(f"bad --views list {args.views!r}") from exc
        if any(not 0 <= i < len(views) for i in ids):
            raise CliError(f"view index out of range 0..{len(views) - 1}")
    else:
        ids = _split(views, tree["data"]["n_eval"], doc)[1] or list(range(len(views)))
    out = _out_dir(args.out)
    radius = _enclosure(doc)
    per_view = []
    for i in ids:
        p, s, images = eval_metrics(field, [views[i]], tcfg.eval_samples, tcfg.seed, tcfg.t_near,
                                    tcfg.t_far, radius, return_images=True)
        img, depth = images[0]
        write_pfm(out / f"render_{i:03d}.pfm", np.clip(img, 0, 1).astype(np.float32))
        write_pfm(out / f"depth_{i:03d}.pfm", depth.astype(np.float32))
        per_view.append({"view": i, "psnr": p, "ssim": s})
    p, s = eval_metrics(field, [views[i] for i in ids], tcfg.eval_samples, tcfg.seed, tcfg.t_near,
                        tcfg.t_far, radius)
    write_json(out / "eval.json", {"psnr": p, "ssim": s, "views": per_view,
                                   "checkpoint": str(args.checkpoint)})
    print(f"{len(ids)} views: PSNR {p:.2f} dB, SSIM {s:.4f}; renders in {out}")
    return 0


def cmd_ablate(args) -> int:
    from dataclasses import replace
    from .experiments import ARMS, AblationSetup, judge, run_ablation
    from .report import plot_ablation, write_json, write_rows_csv
    # the ablation uses fewer final samples than a plain training run unless overridden
    tree = _resolve(args, {"train.iterations": args.iters, "train.samples": args.samples or 16})
    tcfg = cfgmod.train_config(tree)
    tcfg.validate()
    arms = args.arms or list(ARMS)
    setup = AblationSetup(n_views=tree["scene"]["n_views"], n_eval=tree["data"]["n_eval"],
                          train=replace(tcfg, eval_interval=max(tcfg.iterations, 1)))

    def progress(arm, seed, p):
        print(f"seed {seed} {arm:8s} PSNR {p:.3f} dB", flush=True)

    result = run_ablation(args.seeds, setup, arms, progress)
    out = _out_dir(args.out)
    write_rows_csv(out / "ablation.csv", result.rows())
    summary = {"arms": {a: {"mean_psnr": result.mean(a), "stderr_psnr": result.stderr(a)}
                        for a in arms}, "seeds": args.seeds, "config": tree}
    if {"baseline", "vs", "dl", "vs+dl"} <= set(arms):
        summary["verdict"] = judge(result)
    write_json(out / "ablation.json", summary)
    plot_ablation(out / "ablation.png", result)
    for a in arms:
        print(f"{a:8s} {result.mean(a):.3f} +- {result.stderr(a):.3f} dB")
    return 0


def cmd_memest(args) -> int:
    n = memory_estimate(args.batch, args.presamples, args.views, args.channels, args.bytes)
    print(f"{n} bytes ({format_bytes(n)})")
    return 0


COMMANDS = {"synth": cmd_synth, "distill": cmd_distill, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "memest": cmd_memest}


def _thread_limit(n: int):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(getattr(args, "threads", 0)):
            return COMMANDS[args.command](args)
    except (CliError, cfgmod.ConfigError, DatasetFormatError, OverflowError) as exc:
        print(f"vsnerf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"vsnerf {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
