"""Full-scale synthetic benchmark (hours on one core; not part of the test suite).

Generates the default 30-feature, order-6 problem with 100 000 train and test
rows, fits the logistic baseline and ExM at the requested ranks, and prints
one line of test AUC per model.

    python scripts/long_run.py --ranks 2 4 8 --iters 20000 --batch 500
"""

import argparse
import time

from expmachines.data import SynthSpec, auc, synth_generate
from expmachines.model import predict_batch
from expmachines.optim import TrainConfig, train, train_linear


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ranks", type=int, nargs="+", default=[8])
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--keep", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100_000, help="rows in each of train and test")
    args = p.parse_args(argv)

    train_ds, test_ds, _ = synth_generate(SynthSpec(n_train=args.n, n_test=args.n, seed=args.seed))
    fit = train_linear(train_ds, 0.0, "logistic")
    print(f"logistic regression  test AUC {auc(test_ds.X @ fit.w + fit.b, test_ds.y):.4f}")
    for r in args.ranks:
        cfg = TrainConfig(rank=r, iterations=args.iters, batch_size=args.batch, keep_prob=args.keep, seed=args.seed)
        t0 = time.perf_counter()
        w, trace = train(train_ds, cfg)
        score = auc(predict_batch(w, test_ds.X, test_ds.schema), test_ds.y)
        note = " (stalled)" if trace.stalled else ""
        print(f"ExM rank {r:<3d}          test AUC {score:.4f}  {time.perf_counter() - t0:.0f} s{note}")


if __name__ == "__main__":
    main()
