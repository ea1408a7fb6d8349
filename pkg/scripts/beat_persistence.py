"""Compare a briefly trained model against persistence at several lead times on synthetic advection."""

import argparse
import time

import numpy as np

from gdcaf.data import WindowSet, WindowTask, gen_synthetic, holdout_length, split
from gdcaf.model import GDCAF, ModelConfig
from gdcaf.train import TrainConfig, evaluate_loss, fit


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--hours", type=int, default=4000)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--leads", default="1,3,6")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--case", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--blocks", type=int, default=1)
    args = p.parse_args()

    ds = gen_synthetic(0, args.hours, args.nodes, args.size, args.size)
    n_dev = ds.n_frames - holdout_length(ds.n_frames)
    scale = 1.0 / float(ds.frames[:n_dev].max())
    cfg = ModelConfig.for_case(args.case, n_nodes=args.nodes, t_in=6, heads=args.heads, blocks=args.blocks,
                               height=args.size, width=args.size)
    print("lead,model_mse,persistence_mse,seconds")
    for lead in (int(v) for v in args.leads.split(",")):
        t0 = time.perf_counter()
        task = WindowTask(6, lead, args.nodes)
        sp = split(ds, task, seed=0)
        train, val, test = (WindowSet(ds.frames, s, task, scale) for s in (sp.train, sp.val, sp.test))
        model = GDCAF(cfg, seed=0)
        fit(model, train, val, TrainConfig(max_epochs=args.epochs, batch_size=8))
        mse = evaluate_loss(model, test) / scale**2
        sse = sum(float(np.sum((x[:, :, -1].astype(np.float64) - y) ** 2)) for x, y in test.batches(64))
        pers = sse / (len(test) * args.nodes * args.size**2) / scale**2
        print(f"{lead},{mse:.4e},{pers:.4e},{time.perf_counter() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
