"""Print parameter and multiply-accumulate counts for the four pooling cases."""

import argparse

from gdcaf.model import GDCAF, ModelConfig, forward_macs


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--nodes", type=int, default=16)
    p.add_argument("--t-in", type=int, default=6)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--size", type=int, default=32)
    args = p.parse_args()

    print("case,pool_qkv,pool_input,params,macs")
    for case in (1, 2, 3, 4):
        cfg = ModelConfig.for_case(case, n_nodes=args.nodes, t_in=args.t_in, heads=args.heads,
                                   blocks=args.blocks, height=args.size, width=args.size)
        n_params = sum(q.value.size for q in GDCAF(cfg).parameters())
        print(f"{case},{cfg.pool_qkv},{cfg.pool_input},{n_params},{forward_macs(cfg)}")


if __name__ == "__main__":
    main()
