"""``e2bows`` command line: data generation, training, extraction, indexing,
querying, evaluation and reporting.

Exit codes: 0 success, 1 domain error (bad file, bad value), 2 usage error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from .backbone import BackboneConfig, read_feature_file
from .bowl import read_words, write_words
from .errors import E2BowsError
from .evaluation import average_precision, complete_ranking, ndcg_at_k, relevance_grades
from .index import build_index, index_stats, load_index, query_with_work, save_index
from .losses import read_category_tree
from .pipeline import sparse_from_dense, threshold_sweep
from .trainer import (TrainConfig, extract_dense_words, forward_words, head_forward, load_checkpoint,
                      save_checkpoint, train)

log = logging.getLogger("e2bows")

RANKS_HEADER = "# e2bows-ranks"


def _load_data(args):
    return data_mod.load_dataset(args.data, args.cifar_variant)


def _subset(ds, which):
    if which == "db":
        return ds.subset(~ds.is_query)
    if which == "query":
        return ds.subset(ds.is_query)
    return ds


# subcommands ------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = data_mod.SyntheticConfig(
        class_count=args.classes, images_per_class=args.per_class, image_size=args.size,
        noise_sigma=args.sigma, rng_seed=args.seed, queries_per_class=args.queries_per_class,
        jitter=args.jitter, distractors=args.distractors)
    ds = data_mod.gen_synthetic(cfg)
    data_mod.save_dataset(args.out, ds)
    print(f"wrote {len(ds)} images ({int(ds.is_query.sum())} queries) to {args.out}")
    return 0


def cmd_train(args):
    ds = _load_data(args)
    tree = read_category_tree(args.tree) if args.tree else ds.tree
    _, h, w, c = ds.images.shape
    cfg = TrainConfig(
        lambda1=args.lambda1, lambda2=args.lambda2, alpha=args.alpha, rho_hat=args.rho_hat,
        learning_rate=args.lr, beta_learning_rate=args.beta_lr, batch_size=args.batch,
        epochs=args.epochs, rng_seed=args.seed, m=args.m, cls_loss=args.cls_loss,
        backbone=BackboneConfig(input_height=h, input_width=w, input_channels=c, rng_seed=args.seed))
    train_set = ds.subset(~ds.is_query)
    params, history = train(train_set, cfg, tree=tree)
    save_checkpoint(params, cfg, args.out)
    if history:
        r = history[-1]
        print(f"steps={len(history)} cls={r.cls:.4f} tri={r.tri:.4f} spa={r.spa:.4f} "
              f"rho={r.rho:.4f} beta={params.bowl.beta:.6f}")
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_extract(args):
    params, _ = load_checkpoint(args.ckpt)
    beta = params.bowl.beta if args.beta_override is None else args.beta_override
    if beta < 0:
        raise ValueError("--beta-override must be non-negative")
    if args.features:
        records = read_feature_file(args.features)
        ids = [i for i, _ in records]
        feats = np.array([f for _, f in records], dtype=np.float64)
        dense = head_forward(params, feats)["words"] if records else np.zeros((0, params.dim))
    else:
        ds = _subset(_load_data(args), args.subset)
        ids = ds.ids.tolist()
        dense = extract_dense_words(params, ds.images)
    vectors = sparse_from_dense(dense, beta, args.binarize)
    write_words(args.out, zip(ids, vectors))
    print(f"wrote {len(vectors)} word vectors (dim {params.dim}, beta {beta:.6g}) to {args.out}")
    return 0


def cmd_build_index(args):
    records = read_words(args.words, args.dim)
    index = build_index(records, args.dim)
    save_index(index, args.out)
    print(f"indexed {index.image_count} images, {index.total_postings} postings -> {args.out}")
    return 0


def cmd_query(args):
    if args.k < 1:
        raise ValueError("--k must be positive")
    index = load_index(args.index)
    stats = index_stats(index)
    queries = read_words(args.words, index.dim)
    with open(args.out, "w") as fh:
        fh.write(f"{RANKS_HEADER} k={args.k} anv={stats.anv!r} ani={stats.ani!r} ano={stats.ano!r}\n")
        for qid, q in queries:
            hits, touched = query_with_work(index, q, args.k)
            parts = [f"{i}:{s:.17g}" for i, s in hits]
            fh.write(" ".join([str(qid), str(touched), str(len(hits))] + parts) + "\n")
    print(f"ranked {len(queries)} queries -> {args.out}")
    return 0


def read_ranks(path):
    """Parse a ranks file into ``(header dict, [(qid, touched, [ids...]), ...])``."""
    header = {}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith(RANKS_HEADER):
                header = dict(kv.split("=", 1) for kv in line.split()[2:])
                continue
            fields = line.split()
            if not fields:
                continue
            try:
                qid, touched, count = int(fields[0]), int(fields[1]), int(fields[2])
                if len(fields) != count + 3:
                    raise ValueError(f"expected {count} hits, found {len(fields) - 3}")
                rows.append((qid, touched, [int(f.split(":")[0]) for f in fields[3:]]))
            except (ValueError, IndexError) as exc:
                raise E2BowsError(f"ranks file line {lineno}: {exc}") from None
    if not header:
        raise E2BowsError(f"{path} has no {RANKS_HEADER} header line")
    return header, rows


def cmd_eval(args):
    header, rows = read_ranks(args.ranks)
    if not rows:
        raise ValueError("ranks file holds no queries")
    ds = _load_data(args)
    label_sets = ds.label_sets()
    db_ids = ds.ids[~ds.is_query].tolist()
    db_labels = {i: label_sets[i] for i in db_ids}
    lines = []
    aps, ndcgs = [], []
    for qid, touched, ranked in rows:
        if qid not in label_sets:
            raise ValueError(f"query id {qid} is not in the label set")
        grades = relevance_grades(label_sets[qid], db_labels)
        ranking = complete_ranking(ranked, db_ids)
        ap = average_precision(ranking, {i for i, g in grades.items() if g > 0})
        nd = ndcg_at_k(ranking, grades, args.ndcg_k)
        aps.append(ap)
        ndcgs.append(nd)
        lines.append(f"{qid} {ap:.6f} {nd:.6f} {touched}")
    k = args.ndcg_k
    lines.append(f"mAP={np.mean(aps):.6f} NDCG@{k}={np.mean(ndcgs):.6f} "
                 f"ANV={float(header['anv']):.4f} ANI={float(header['ani']):.4f} "
                 f"ANO={float(header['ano']):.4f}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(lines[-1])
    return 0


def cmd_stats(args):
    index = load_index(args.index)
    s = index_stats(index)
    print(f"images={index.image_count} dim={index.dim} postings={index.total_postings}")
    print(f"ANV={s.anv:.4f} ANI={s.ani:.4f} ANO={s.ano:.4f}")
    return 0


def write_pgm(path, image):
    """8-bit binary portable graymap; values min-max scaled (constant maps become 0)."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    scaled = np.zeros(image.shape) if hi <= lo else (image - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def cmd_export_sfm(args):
    params, _ = load_checkpoint(args.ckpt)
    ds = _load_data(args)
    hit = np.flatnonzero(ds.ids == args.image)
    if hit.size == 0:
        raise ValueError(f"image id {args.image} not in {args.data}")
    fwd = forward_words(params, ds.images[hit].astype(np.float64))
    maps, avg = fwd["sfm"].maps[0], fwd["sfm"].avg[0]
    os.makedirs(args.out, exist_ok=True)
    for c, m in enumerate(maps):
        write_pgm(os.path.join(args.out, f"sfm_{c:03d}.pgm"), m)
    with open(os.path.join(args.out, "sfm_avg.tsv"), "w") as fh:
        fh.write("category\tavg\tactive\n")
        for c, a in enumerate(avg):
            fh.write(f"{c}\t{a:.6f}\t{int(a >= 0)}\n")
    print(f"wrote {len(maps)} maps for image {args.image} to {args.out}")
    return 0


def cmd_sweep(args):
    from .plotting import plot_sweep

    params, _ = load_checkpoint(args.ckpt)
    ds = _load_data(args)
    if args.betas:
        betas = [float(b) for b in args.betas.split(",")]
    else:
        betas = np.linspace(0.0, args.beta_max, args.steps).tolist()
    if args.include_learned:
        betas.append(params.bowl.beta)
    betas = sorted(set(betas))
    if any(b < 0 for b in betas):
        raise ValueError("betas must be non-negative")
    rows = threshold_sweep(params, ds, betas, args.ndcg_k, args.binarize)
    tsv = args.out + ".tsv"
    with open(tsv, "w") as fh:
        fh.write(f"beta\tmAP\tNDCG@{args.ndcg_k}\tANV\tANI\tANO\ttouched\n")
        for b, s in rows:
            fh.write(f"{b:.6f}\t{s.map:.6f}\t{s.ndcg:.6f}\t{s.anv:.4f}\t{s.ani:.4f}\t{s.ano:.4f}\t{s.touched:.4f}\n")
    png = plot_sweep(rows, args.out + ".png", params.bowl.beta)
    print(f"wrote {tsv} and {png}")
    return 0


# parser -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="e2bows", description="Learned sparse visual-word retrieval.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, required=True):
        sp.add_argument("--data", required=required, help="dataset directory or CIFAR .bin file")
        sp.add_argument("--cifar-variant", choices=["cifar10", "cifar100"], default="cifar10")

    sp = sub.add_parser("gen-data", help="write a synthetic blob dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--per-class", type=int, default=60)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--queries-per-class", type=int, default=10)
    sp.add_argument("--jitter", type=float, default=1.0)
    sp.add_argument("--distractors", type=int, default=3)
    sp.set_defaults(func=cmd_gen_data)

    d = TrainConfig()
    sp = sub.add_parser("train", help="train a model on the non-query images")
    data_args(sp)
    sp.add_argument("--tree", help="category tree file for adaptive margins")
    sp.add_argument("--out", required=True)
    sp.add_argument("--m", type=int, default=d.m)
    sp.add_argument("--rho-hat", type=float, default=d.rho_hat)
    sp.add_argument("--alpha", type=float, default=d.alpha)
    sp.add_argument("--lambda1", type=float, default=d.lambda1)
    sp.add_argument("--lambda2", type=float, default=d.lambda2)
    sp.add_argument("--lr", type=float, default=d.learning_rate)
    sp.add_argument("--beta-lr", type=float, default=d.beta_learning_rate)
    sp.add_argument("--epochs", type=int, default=d.epochs)
    sp.add_argument("--batch", type=int, default=d.batch_size)
    sp.add_argument("--seed", type=int, default=d.rng_seed)
    sp.add_argument("--cls-loss", choices=["sigmoid", "softmax"], default=d.cls_loss)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("extract", help="write sparse words for images")
    sp.add_argument("--ckpt", required=True)
    data_args(sp, required=False)
    sp.add_argument("--features", help="E2FM feature file to use instead of --data")
    sp.add_argument("--subset", choices=["all", "db", "query"], default="all")
    sp.add_argument("--out", required=True)
    sp.add_argument("--binarize", action="store_true")
    sp.add_argument("--beta-override", type=float)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("build-index", help="build an inverted index from a words file")
    sp.add_argument("--words", required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_index)

    sp = sub.add_parser("query", help="rank the index for each query vector")
    sp.add_argument("--index", required=True)
    sp.add_argument("--words", required=True)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("eval", help="score a ranks file against dataset labels")
    sp.add_argument("--ranks", required=True)
    sp.add_argument("--labels", dest="data", required=True, help="dataset directory")
    sp.add_argument("--cifar-variant", choices=["cifar10", "cifar100"], default="cifar10")
    sp.add_argument("--ndcg-k", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stats", help="print ANV, ANI and ANO of an index")
    sp.add_argument("--index", required=True)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("export-sfm", help="dump one image's SFMs as graymaps")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.add_argument("--image", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_sfm)

    sp = sub.add_parser("sweep", help="threshold sweep report (TSV + PNG)")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.add_argument("--betas", help="comma-separated thresholds")
    sp.add_argument("--beta-max", type=float, default=0.6)
    sp.add_argument("--steps", type=int, default=13)
    sp.add_argument("--no-learned", dest="include_learned", action="store_false",
                    help="do not add the checkpoint's own beta to the grid")
    sp.add_argument("--ndcg-k", type=int, default=100)
    sp.add_argument("--binarize", action="store_true")
    sp.add_argument("--out", required=True, help="output prefix; writes PREFIX.tsv and PREFIX.png")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.command == "extract" and not (args.data or args.features):
        parser.print_usage(sys.stderr)
        print("e2bows extract: one of --data or --features is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (E2BowsError, ValueError, OSError, KeyError) as exc:
        print(f"e2bows {args.command}: error: {exc}", file=sys.stderr)
        return 1


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
