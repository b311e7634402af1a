"""Brute-force pixel-distance statistics for a generated dataset.

Prints the mean Euclidean pixel distance over all within-class image pairs
and over all between-class image pairs, using ``--per-class`` images from
every class.

    python scripts/dataset_stats.py --per-class 12 --seed 0
"""
import argparse
import itertools
import json

import numpy as np

from bikop.data import DataConfig, generate_dataset


def pair_distances(dataset, per_class):
    flat = {
        spec.class_id: dataset.images[dataset.class_indices(spec.class_id)[:per_class]]
        .reshape(per_class, -1).astype(np.float64)
        for spec in dataset.classes
    }
    intra, inter = [], []
    ids = sorted(flat)
    for a, b in itertools.combinations_with_replacement(ids, 2):
        xa, xb = flat[a], flat[b]
        for i in range(per_class):
            for j in range(per_class):
                if a == b and j <= i:
                    continue
                d = float(np.sqrt(((xa[i] - xb[j]) ** 2).sum()))
                (intra if a == b else inter).append(d)
    return float(np.mean(intra)), float(np.mean(inter)), len(intra), len(inter)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-class", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    ds = generate_dataset(DataConfig(images_per_class=max(args.per_class, 1), master_seed=args.seed))
    intra, inter, n_intra, n_inter = pair_distances(ds, args.per_class)
    print(json.dumps({"mean_intra": intra, "mean_inter": inter,
                      "n_intra_pairs": n_intra, "n_inter_pairs": n_inter}))
    return 0 if inter > intra else 1


if __name__ == "__main__":
    raise SystemExit(main())
