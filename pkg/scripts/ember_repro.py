"""Detection on an EMBER subsample: train on N records, test on M.

    python3 scripts/ember_repro.py /data/ember2018 [--train 60000] [--test 20000] [--seed 0]

Expects the EMBER release layout: ``train_features*.jsonl`` and
``test_features*.jsonl`` in one directory. Unlabeled records are dropped;
each side is a uniform reservoir sample over the labeled records, so memory
stays bounded by the sample sizes. Prints accuracy, AUC and TPR at 0.1% FPR.
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from malpipe import config, dataset, gbdt
from malpipe.metrics import accuracy, roc_auc_binary, tpr_at_fpr
from malpipe.pipeline import DETECTION
from malpipe.vectorizer import FeatureLayout, build_import_vocabulary, vectorize_many


def reservoir(paths, n, rng):
    kept, seen = [], 0
    for path in paths:
        for rec in dataset.read_jsonl(path):
            if rec.label not in (0, 1):
                continue
            if len(kept) < n:
                kept.append(rec)
            else:
                j = int(rng.integers(0, seen + 1))
                if j < n:
                    kept[j] = rec
            seen += 1
    return kept


def run(root: Path, n_train: int = 60_000, n_test: int = 20_000, seed: int = 0, params=None) -> dict:
    train_paths = sorted(root.glob("train_features*.jsonl"))
    test_paths = sorted(root.glob("test_features*.jsonl"))
    if not train_paths or not test_paths:
        raise FileNotFoundError(f"{root}: expected train_features*.jsonl and test_features*.jsonl")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    train = reservoir(train_paths, n_train, rng)
    test = reservoir(test_paths, n_test, rng)

    layout = FeatureLayout.build(build_import_vocabulary(train))
    X, y = vectorize_many(train, layout), np.array([r.label for r in train])
    Xt, yt = vectorize_many(test, layout), np.array([r.label for r in test])
    params = params or config.load().pipeline.params[DETECTION]
    model = gbdt.train(X, y, gbdt.BINARY, params, layout_version=layout.version)

    p = model.predict_proba(Xt)[:, 1]
    tpr, _ = tpr_at_fpr(p, yt, 0.001)
    return {
        "train": len(train),
        "test": len(test),
        "accuracy": accuracy((p >= 0.5).astype(int).tolist(), yt.tolist()),
        "auc": roc_auc_binary(p, yt),
        "tpr_at_0.1%_fpr": tpr,
        "seconds": round(time.perf_counter() - start, 1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description="EMBER subsample detection check")
    ap.add_argument("ember_dir", type=Path)
    ap.add_argument("--train", type=int, default=60_000)
    ap.add_argument("--test", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    result = run(args.ember_dir, args.train, args.test, args.seed)
    print(json.dumps(result, indent=2))
    ok = result["accuracy"] >= 0.93 and result["auc"] >= 0.97
    print("PASS" if ok else "FAIL", file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
