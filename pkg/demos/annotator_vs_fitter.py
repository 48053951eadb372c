"""Learned annotation of an auxiliary 3D dataset against per-sample fitting.

Both produce body parameters from noisy, partially missing 3D joints; the
script prints the root-relative joint error and wall clock of each.
"""

import argparse
import time

from neuralannot import annotator as an
from neuralannot import synthdata
from neuralannot.evalmetrics import direct_3d_error
from neuralannot.fitter import FitConfig, fit_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = synthdata.gen_model(args.seed, "body")
    ds = synthdata.gen_dataset(model, args.n, "aux", synthdata.Corruption(noise3d=0.005, missing3d=0.1),
                               seed=args.seed + 1)

    net = an.RegressorNet(an.NetConfig.for_model(model, synthdata.feature_dim(model)), seed=args.seed)
    res = an.train(net, model, [ds.training_view()], "ax", an.TrainConfig(epochs=args.epochs, seed=args.seed))
    t = time.perf_counter()
    star = an.annotate_dataset(net, ds.training_view(), "ax", batch_size=1)
    ann_time = res.seconds + time.perf_counter() - t
    ann_err = direct_3d_error(model, star, ds.sealed)

    t = time.perf_counter()
    fits = fit_dataset(model, ds.training_view(), "3d", FitConfig())
    fit_time = time.perf_counter() - t
    fit_err = direct_3d_error(model, ds.with_params(fits))

    print(f"annotator  {ann_err:6.2f} mm  {ann_time:7.1f} s (train + annotate)")
    print(f"fitter     {fit_err:6.2f} mm  {fit_time:7.1f} s")


if __name__ == "__main__":
    main()
