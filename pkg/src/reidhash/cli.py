"""Command-line interface.

Subcommands: generate (synthetic dataset), train, encode (manifest ->
gallery file), query (gallery search -> results CSV), evaluate (results
-> metric files), compare-losses (three-way convergence comparison).

Results CSV schema: query-index,rank,gallery-image-id,distance with
query-index the 0-based row of the query manifest and gallery-image-id
the 0-based record ordinal of the gallery file.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import codebank, metrics, synthgen, tensornet, training
from .batcher import MiningConfig, load_index
from .estimator import default_net_config
from .synthgen import SynthConfig
from .tensornet import ConfigError
from .training import TrainSettings, TrainingDiverged


def _parse_cams(text):
    if text is None:
        return None
    return {int(t) for t in text.split(",") if t.strip() != ""}


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    config = SynthConfig(
        num_identities=args.identities,
        images_per_view=args.images_per_view,
        views=args.views,
        image_size=(args.height, args.width, args.channels),
        identity_separation=args.separation,
        view_shift=args.view_shift,
        noise=args.noise,
        seed=args.seed,
    )
    manifest = synthgen.generate(config, args.out)
    print(f"wrote {manifest}")
    if args.split:
        counts = tuple(int(t) for t in args.split.split("/"))
        if len(counts) != 3:
            raise ValueError("--split expects train/val/test identity counts")
        for p in synthgen.split(manifest, counts, args.seed):
            print(f"wrote {p}")
    return 0


def _settings_from_args(args) -> TrainSettings:
    mining = MiningConfig(args.batch_size, args.negatives,
                          args.refresh_interval, args.descriptor_source,
                          args.mining_rule)
    return TrainSettings(args.loss, args.grad_mode, args.bits, args.epochs,
                         args.lr, args.momentum, args.margin,
                         not args.fc2_only, args.seed, mining)


def _net_config_for(args, input_shape):
    if args.config:
        return tensornet.read_net_config(args.config)
    return default_net_config(input_shape)


def cmd_train(args) -> int:
    index = load_index(args.manifest, query_cams=_parse_cams(args.query_cams))
    config = _net_config_for(args, index.images.shape[1:])
    settings = _settings_from_args(args)
    model = training.train(index, config, settings,
                           loss_log_path=args.loss_log,
                           checkpoint_path=args.out)
    final = model.epoch_losses[-1] if model.epoch_losses else float("nan")
    print(f"trained {settings.loss} for {settings.epochs} epochs, "
          f"final epoch-mean loss {final:.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_encode(args) -> int:
    model = training.load_model(args.checkpoint)
    rows = synthgen.read_manifest(args.manifest)
    if rows:
        images = synthgen.load_images(args.manifest, rows)
        codes = model.encode_images(images)
    else:
        codes = np.zeros((0, (model.bits + 63) // 64), dtype=np.uint64)
    ids = [r[1] for r in rows]
    cams = [r[2] for r in rows]
    from .hashhead import write_gallery
    write_gallery(args.out, model.bits, codes, ids, cams)
    print(f"wrote {args.out} ({len(rows)} records, {model.bits} bits)")
    return 0


def cmd_query(args) -> int:
    model = training.load_model(args.checkpoint)
    bank = codebank.CodeBank.from_gallery_file(args.gallery)
    if bank.r != model.bits:
        raise ValueError(f"gallery is {bank.r}-bit but checkpoint encodes "
                         f"{model.bits}-bit codes")
    rows = synthgen.read_manifest(args.manifest)
    if not rows:
        raise ValueError(f"{args.manifest}: no queries")
    images = synthgen.load_images(args.manifest, rows)
    codes = model.encode_images(images)
    with open(args.out, "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(["query-index", "rank", "gallery-image-id", "distance"])
        for qi, (_, ident, cam) in enumerate(rows):
            ranked = bank.rank(codes[qi], ident, cam)
            keep = ranked.distances <= args.radius if args.radius is not None \
                else np.ones(len(ranked), dtype=bool)
            n_out = 0
            for rank_pos, (gid, dist) in enumerate(
                    zip(ranked.image_ids[keep], ranked.distances[keep]), 1):
                if args.topn is not None and rank_pos > args.topn:
                    break
                wtr.writerow([qi, rank_pos, int(gid), int(dist)])
                n_out += 1
    print(f"wrote {args.out} ({len(rows)} queries)")
    return 0


def _read_results(path):
    """results.csv -> {query-index: [(gallery-id, distance), ...]} in rank order."""
    out: dict[int, list] = {}
    with open(path, newline="") as f:
        rdr = csv.reader(f)
        header = next(rdr, None)
        if header != ["query-index", "rank", "gallery-image-id", "distance"]:
            raise ValueError(f"{path}: bad results header {header}")
        for row in rdr:
            if not row:
                continue
            qi, rank_pos, gid, dist = (int(row[0]), int(row[1]),
                                       int(row[2]), int(row[3]))
            out.setdefault(qi, []).append((rank_pos, gid, dist))
    for qi in out:
        out[qi].sort()
    return {qi: [(g, d) for _, g, d in entries] for qi, entries in out.items()}


def cmd_evaluate(args) -> int:
    results = _read_results(args.results)
    if not results:
        raise ValueError(f"{args.results}: no queries in results")
    q_rows = synthgen.read_manifest(args.query_manifest)
    g_rows = synthgen.read_manifest(args.gallery_manifest)
    g_ident = np.array([r[1] for r in g_rows])
    g_cam = np.array([r[2] for r in g_rows])
    judgments = []
    for qi in sorted(results):
        if qi >= len(q_rows):
            raise ValueError(f"results reference query {qi} but the query "
                             f"manifest has {len(q_rows)} rows")
        entries = results[qi]
        for gid, _ in entries:
            if gid >= len(g_rows):
                raise ValueError(f"results reference gallery id {gid} but the "
                                 f"gallery manifest has {len(g_rows)} rows")
        _, ident, cam = q_rows[qi]
        rel = frozenset(np.flatnonzero(
            (g_ident == ident) & (g_cam != cam)).tolist())
        ranked = codebank.RankedList(
            np.array([g for g, _ in entries], dtype=np.int64),
            np.array([d for _, d in entries], dtype=np.int64))
        judgments.append(metrics.QueryJudgment(ranked, rel))
    if args.single_shot is not None:
        judgments = metrics.single_shot(judgments, args.single_shot)
    report = metrics.compute_report(
        judgments, bits=args.bits, radius=args.radius,
        radius_top_n=args.topn, denominator=args.radius_denominator)
    report.write(args.out)
    print(f"wrote {os.path.join(args.out, 'metrics.json')}")
    print(f"MAP {report.map:.4f}  prec@r<={args.radius} "
          f"{report.precision_at_hamming2:.4f}  "
          f"CMC(1) {report.cmc[0][1]:.4f}  "
          f"({report.n_excluded} queries excluded)")
    return 0


def cmd_compare_losses(args) -> int:
    index = load_index(args.manifest, query_cams=_parse_cams(args.query_cams))
    config = _net_config_for(args, index.images.shape[1:])
    base = _settings_from_args(args)
    runs = training.compare_losses(index, config, base, args.triplet_batch_size)
    os.makedirs(args.out, exist_ok=True)
    partial = False
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(["loss-name", "initial-loss", "final-loss",
                      "epochs-to-half", "diverged"])
        for name in training.LOSS_NAMES:
            curve, err = runs[name]
            if curve is None:
                partial = True
                wtr.writerow([name, "", "", "", 1])
                continue
            path = os.path.join(args.out, f"loss_{name}.csv")
            with open(path, "w", newline="") as cf:
                cw = csv.writer(cf)
                cw.writerow(["epoch", "mean-loss"])
                for e, v in enumerate(curve, 1):
                    cw.writerow([e, repr(v)])
            half = training.epochs_to_fraction(curve, 0.5)
            wtr.writerow([name, repr(curve[0]), repr(curve[-1]),
                          half if half is not None else "", 0])
    for name in training.LOSS_NAMES:
        curve, err = runs[name]
        if err:
            print(f"{name}: diverged ({err})", file=sys.stderr)
        else:
            half = training.epochs_to_fraction(curve, 0.5)
            print(f"{name}: initial {curve[0]:.6f} final {curve[-1]:.6f} "
                  f"epochs-to-half {half}")
    if partial:
        print("warning: partial report, at least one run diverged",
              file=sys.stderr)
    print(f"wrote {os.path.join(args.out, 'summary.csv')}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="net config text file (default: scaled to input)")
    p.add_argument("--loss", default="structured",
                   choices=["contrastive", "triplet", "structured"])
    p.add_argument("--grad-mode", default="exact",
                   choices=["exact", "shared-indicator"])
    p.add_argument("--bits", type=int, default=48)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--negatives", type=int, default=2,
                   help="hard negatives per pair side (K)")
    p.add_argument("--refresh-interval", type=int, default=50)
    p.add_argument("--descriptor-source", default="raw-pixels",
                   choices=["raw-pixels", "current-embedding"])
    p.add_argument("--mining-rule", default="semi-hard",
                   choices=["semi-hard", "nearest"])
    p.add_argument("--fc2-only", action="store_true",
                   help="drop the FC1 bypass into the hash layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--query-cams",
                   help="comma-separated query camera ids (default: lowest)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="reidhash",
        description="Structured deep hashing for person re-identification")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--identities", type=int, default=30)
    g.add_argument("--images-per-view", type=int, default=4)
    g.add_argument("--views", type=int, default=2)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--separation", type=float, default=0.9)
    g.add_argument("--view-shift", type=float, default=0.25)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", help="train/val/test identity counts, e.g. 20/5/5")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a hashing model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-log", help="per-batch loss CSV path")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a manifest into a gallery file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    q = sub.add_parser("query", help="rank a gallery for each query image")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--gallery", required=True)
    q.add_argument("--manifest", required=True, help="query manifest")
    q.add_argument("--out", required=True, help="results CSV path")
    q.add_argument("--radius", type=int, default=None,
                   help="keep only results within this Hamming radius")
    q.add_argument("--topn", type=int, default=None,
                   help="truncate each query's output to N rows")
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("evaluate", help="score a results CSV")
    v.add_argument("--results", required=True)
    v.add_argument("--query-manifest", required=True)
    v.add_argument("--gallery-manifest", required=True)
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--bits", type=int, default=48,
                   help="code width recorded in the report")
    v.add_argument("--radius", type=int, default=2)
    v.add_argument("--topn", type=int, default=None,
                   help="top-N for the radius precision (default min(100, gallery))")
    v.add_argument("--radius-denominator", default="top-n",
                   choices=["top-n", "within-radius"])
    v.add_argument("--single-shot", type=int, default=None,
                   help="subsample one ground truth per query with this seed")
    v.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare-losses",
                       help="train all three losses under shared settings")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--triplet-batch-size", type=int, default=120)
    _add_train_flags(c)
    c.set_defaults(func=cmd_compare_losses)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
