"""Run the whole pipeline on a shrunken world and print the headline numbers.

    python demos/smoke_pipeline.py [out_dir]

Takes well under a minute. This world is too small for the codes to recover
the hidden classes cleanly; run the CLI with the default config (500 users,
a few minutes) for that.
"""

import csv
import sys

import numpy as np

from userip import bank, corpus, pipeline, quant

SMALL = {
    "data": {"n_users": 120, "n_items": 80, "n_background": 300, "n_heldout": 40},
    "lm": {"d": 32, "epochs": 3},
    "infer": {"epochs": 15},
    "rec": {"max_epochs": 10},
}


def main(out="runs/demo"):
    cfg = pipeline.RunConfig.from_dict(SMALL)
    run = pipeline.Run(cfg, out)
    for stage in pipeline.PIPELINE:
        pipeline.ensure(run, stage)
        print(f"{stage:>10}: done")

    with open(run.path("metrics.csv")) as fh:
        for row in csv.DictReader(fh):
            print(f"{row['variant']:>7} {row['fold']:>5}  auc {row['auc']}  logloss {row['logloss']}")

    # how well do the discrete codes line up with the hidden classes?
    data = corpus.load_dataset(run.path("data"))
    fb = bank.read_bank(run.path("bank.uipb"))
    truth = data.truth.user_classes[fb.user_ids]
    for m in range(fb.M):
        usage = np.bincount(fb.codes[:, m], minlength=fb.sizes[m])
        print(f"profile {m}: purity {quant.purity(fb.codes[:, m], truth[:, m]):.3f}, "
              f"code usage {usage.tolist()}")
    print("user 0 ->", fb.lookup(0), "| unknown user ->", fb.lookup(10**9))


if __name__ == "__main__":
    main(*sys.argv[1:])
