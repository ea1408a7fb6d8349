"""Train on a handful of windows until the training MSE falls below a fraction of its first value."""

import argparse
import time

from gdcaf.data import WindowSet, WindowTask, gen_synthetic, split
from gdcaf.model import GDCAF, ModelConfig
from gdcaf.train import TrainConfig, fit


class _Done(Exception):
    pass


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--case", type=int, default=1, choices=[1, 2, 3, 4])
    p.add_argument("--windows", type=int, default=32)
    p.add_argument("--target", type=float, default=0.1)
    p.add_argument("--max-epochs", type=int, default=150)
    p.add_argument("--raw", action="store_true", help="skip max-scaling")
    args = p.parse_args()

    ds = gen_synthetic(0, 400, 4, 16, 16)
    task = WindowTask(6, 1, 4)
    sp = split(ds, task, seed=0)
    scale = 1.0 if args.raw else 1.0 / float(ds.frames.max())
    windows = WindowSet(ds.frames, sp.train[: args.windows], task, scale)
    model = GDCAF(ModelConfig.for_case(args.case, n_nodes=4, t_in=6, heads=4, blocks=2, height=16, width=16), seed=0)

    first = []
    t0 = time.perf_counter()

    def report(rec):
        if not first:
            first.append(rec.train_mse)
        ratio = rec.train_mse / first[0]
        print(f"epoch {rec.epoch:3d}  train {rec.train_mse:.4e}  ratio {ratio:.3f}  lr {rec.lr:.0e}  {time.perf_counter() - t0:.0f}s", flush=True)
        if ratio < args.target:
            raise _Done

    try:
        fit(model, windows, windows, TrainConfig(max_epochs=args.max_epochs, early_stop_patience=args.max_epochs), on_epoch=report)
        print("target not reached")
    except _Done:
        print("target reached")


if __name__ == "__main__":
    main()
