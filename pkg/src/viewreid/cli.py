"""Command line entry point.

Exit codes: 0 success, 1 failed check or other error, 2 malformed input
file or manifest, 3 a view without same-view positives (diagonal center
missing), 4 view ids outside the scaling matrix.

Every command prints ``name=value`` lines on stdout.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import io
from .embedding import pairwise_euclidean
from .evaluation import CurveConfig, distance_curve, evaluate
from .exceptions import FormatError, MissingDiagonalCenter, ViewOutOfRange, ViewReidError
from .losses import LossConfig, finite_diff_check, gsupcon, lsupcon
from .synth import SynthConfig, TrainConfig, generate_synthetic, random_loss_instance, toy_train
from .vabpp import ScalingMatrix, VabppConfig, compute_center_matrix, compute_delta, vabpp_pipeline

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_FORMAT = 2
EXIT_DIAGONAL = 3
EXIT_VIEWS = 4


def _emit(**pairs):
    for key, value in pairs.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        print(f"{key}={value}")


def _parse_matrix(text):
    try:
        return [[float(x) for x in row.split(",")] for row in text.split(";")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse matrix {text!r}; use 'a,b;c,d'") from None


def _add_synth_args(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--num-views", type=int, default=3)
    g.add_argument("--num-ids", type=int, default=40)
    g.add_argument("--num-test-ids", type=int, default=10)
    g.add_argument("--images-per-id-per-view", type=int, default=4)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--view-offset-scale", type=float, default=1.0)
    g.add_argument("--inflation", type=float, default=None,
                   help="cross-view inflation applied to every off-diagonal view pair")
    g.add_argument("--inflation-matrix", type=_parse_matrix, default=None,
                   help="full inflation matrix, rows separated by ';'")
    g.add_argument("--noise-sigma", type=float, default=0.5)
    g.add_argument("--num-cameras", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)


def _synth_config(args):
    inflation = args.inflation_matrix if args.inflation_matrix is not None else args.inflation
    return SynthConfig(
        num_views=args.num_views,
        num_ids=args.num_ids,
        num_test_ids=args.num_test_ids,
        images_per_id_per_view=args.images_per_id_per_view,
        dim=args.dim,
        view_offset_scale=args.view_offset_scale,
        cross_view_inflation=inflation,
        noise_sigma=args.noise_sigma,
        num_cameras=args.num_cameras,
        seed=args.seed,
    )


def _load_delta(args):
    if getattr(args, "bundled", None):
        return io.load_bundled_delta(args.bundled)
    if getattr(args, "delta", None):
        return io.read_delta(args.delta)
    return None


def _check_views(delta: ScalingMatrix, *sets):
    for emb in sets:
        if len(emb) and int(emb.view_ids.max()) >= delta.num_views:
            raise ViewOutOfRange(
                f"dump uses view id {int(emb.view_ids.max())} but the scaling matrix has {delta.num_views} views"
            )


def _scaled_or_raw(args, query, gallery):
    delta = _load_delta(args)
    if delta is None:
        return pairwise_euclidean(query.normalize(), gallery.normalize())
    _check_views(delta, query, gallery)
    return vabpp_pipeline(query, gallery, delta, VabppConfig(gamma=args.gamma))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    splits = generate_synthetic(_synth_config(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "query", "gallery"):
        emb = getattr(splits, name)
        path = io.write_embeddings(out / f"{args.prefix}{name}.json", emb, payload=args.payload)
        _emit(**{f"{name}_count": len(emb), f"{name}_manifest": path})
    return EXIT_OK


def cmd_compute_delta(args):
    train = io.read_embeddings(args.train).normalize()
    centers = compute_center_matrix(train)
    view_names = args.views.split(",") if args.views else None
    delta = compute_delta(centers, VabppConfig(fallback_delta=args.fallback_delta),
                          dataset=args.dataset, view_names=view_names)
    io.write_delta(args.out, delta, binary=args.binary)
    report = args.centers_out or f"{args.out}.centers.csv"
    io.write_centers_report(report, centers)
    _emit(num_views=delta.num_views, delta_file=args.out, centers_report=report,
          empty_cells=int(np.sum(centers.counts == 0)))
    return EXIT_OK


def cmd_apply(args):
    query = io.read_embeddings(args.query)
    gallery = io.read_embeddings(args.gallery)
    delta = _load_delta(args)
    _check_views(delta, query, gallery)
    scaled = vabpp_pipeline(query, gallery, delta, VabppConfig(gamma=args.gamma))
    if args.out:
        io.write_distances(args.out, scaled)
        _emit(distances=args.out)
    if args.ranking:
        io.write_ranking(args.ranking, scaled, top_k=args.top_k)
        _emit(ranking=args.ranking)
    _emit(rows=scaled.shape[0], cols=scaled.shape[1], gamma=float(args.gamma))
    return EXIT_OK


def cmd_eval(args):
    if args.distances:
        dist = io.read_distances(args.distances)
    else:
        if not (args.query and args.gallery):
            raise SystemExit("eval needs --distances or both --query and --gallery")
        dist = _scaled_or_raw(args, io.read_embeddings(args.query), io.read_embeddings(args.gallery))
    report = evaluate(dist)
    _emit(mAP=report.map, **{"CMC@1": report.rank(1), "CMC@5": report.rank(5)},
          num_valid_queries=report.num_valid_queries)
    return EXIT_OK


def cmd_curve(args):
    query = io.read_embeddings(args.query)
    if args.train_mode:
        gallery = None
    elif args.gallery:
        gallery = io.read_embeddings(args.gallery)
    else:
        raise SystemExit("curve needs --gallery unless --train-mode is set")
    curve = distance_curve(query, gallery, CurveConfig(alpha=args.alpha, max_rank=args.max_rank))
    io.write_curve(args.out, curve)
    _emit(points=len(curve), curve=args.out)
    return EXIT_OK


def cmd_grad_check(args):
    rng = np.random.default_rng(args.seed)
    fn = lsupcon if args.loss == "lsupcon" else gsupcon
    if args.corrupt:
        base = fn

        def fn(*a, **kw):
            out = base(*a, **kw)
            return type(out)(out.value, 2.0 * out.grad_anchors)

    worst = 0.0
    for _ in range(args.instances):
        feats, kwargs = random_loss_instance(rng, args.loss, tau=args.tau)
        report = finite_diff_check(fn, feats, step=args.step, tol=args.tol, **kwargs)
        worst = max(worst, report.max_rel_error)
    passed = worst < args.tol
    print(f"loss={args.loss}")
    print(f"instances={args.instances}")
    print(f"max_rel_error={worst:.3e}")
    print(f"tol={args.tol:.1e}")
    print(f"result={'pass' if passed else 'fail'}")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_train_toy(args):
    if args.train:
        initial = io.read_embeddings(args.train).normalize()
    else:
        initial = generate_synthetic(_synth_config(args)).train
    loss_cfg = LossConfig(tau=args.tau, include_self_in_global_positives=not args.exclude_self,
                          dictionary_momentum=args.momentum)
    cfg = TrainConfig(
        steps=args.steps,
        learning_rate=args.lr,
        loss_mode=args.loss_mode,
        batch_size=args.batch_size,
        ids_per_batch=args.ids_per_batch,
        full_batch=args.full_batch,
        update_dictionary=not args.freeze_dictionary,
        config=loss_cfg,
        seed=args.train_seed if args.train_seed is not None else args.seed,
    )
    result = toy_train(initial, cfg)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for step, value in enumerate(result.trace):
                w.writerow([step, repr(float(value))])
    if args.out:
        io.write_embeddings(args.out, result.trained)
    _emit(steps=len(result.trace), final_loss=float(result.trace[-1]) if result.trace else float("nan"))
    print(f"max_positive_gap={result.stats.max_positive_gap:.6e}")
    print(f"max_negative_mass={result.stats.max_negative_mass:.6e}")
    return EXIT_OK


def cmd_show_delta(args):
    sys.stdout.write(io.format_delta(io.load_bundled_delta(args.dataset)))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="viewreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/query/gallery dumps")
    _add_synth_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="")
    p.add_argument("--payload", choices=("binary", "csv"), default="binary")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compute-delta", help="scaling matrix from a training dump")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--centers-out", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--views", default=None, help="comma-separated view names")
    p.add_argument("--fallback-delta", type=float, default=1.0)
    p.add_argument("--binary", action="store_true", help="also write a full-precision sidecar")
    p.set_defaults(func=cmd_compute_delta)

    def add_delta_source(p, required):
        g = p.add_mutually_exclusive_group(required=required)
        g.add_argument("--delta")
        g.add_argument("--bundled", choices=io.BUNDLED)
        p.add_argument("--gamma", type=float, default=2.0)

    p = sub.add_parser("apply", help="rescale query-gallery distances")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    add_delta_source(p, required=True)
    p.add_argument("--out", default=None, help="distance dump manifest to write")
    p.add_argument("--ranking", default=None, help="top-k ranking CSV to write")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="mAP and CMC")
    p.add_argument("--distances", default=None)
    p.add_argument("--query", default=None)
    p.add_argument("--gallery", default=None)
    add_delta_source(p, required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="mean sorted-distance curve")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", default=None)
    p.add_argument("--train-mode", action="store_true", help="use the query set as its own gallery")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--max-rank", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference loss gradients")
    p.add_argument("--loss", choices=("lsupcon", "gsupcon"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help="double the analytic gradient (negative control)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train-toy", help="gradient descent on raw embeddings")
    _add_synth_args(p)
    p.add_argument("--train", default=None, help="training dump; synthetic data when omitted")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--loss-mode", choices=("lsupcon", "gsupcon", "both"), default="gsupcon")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--ids-per-batch", type=int, default=None)
    p.add_argument("--full-batch", action="store_true")
    p.add_argument("--freeze-dictionary", action="store_true")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--train-seed", type=int, default=None)
    p.add_argument("--trace", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("show-delta", help="print a bundled scaling matrix")
    p.add_argument("dataset", choices=io.BUNDLED)
    p.set_defaults(func=cmd_show_delta)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except MissingDiagonalCenter as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIAGONAL
    except ViewOutOfRange as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VIEWS
    except ViewReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
