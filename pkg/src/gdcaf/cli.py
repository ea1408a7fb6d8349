"""Command-line entry point: ``gdcaf {gen,train,eval,export-attention,gradcheck}``.

Exit codes: 0 success, 2 contract/config error, 3 numeric abort, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    GRAPH_SIZES,
    INPUT_HOURS,
    LEAD_HOURS,
    AdvectionParams,
    WindowSet,
    WindowTask,
    gen_synthetic,
    read_dataset,
    split,
    write_dataset,
)
from .metrics import evaluate, persistence_predict, reports_to_csv
from .model import GDCAF, ModelConfig
from .nn import load_parameters, save_parameters
from .tensor import ShapeError
from .train import NumericAbort, TrainConfig, evaluate_loss, fit

log = logging.getLogger("gdcaf")

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SCENARIOS = ("single", "ablation", "graph-size", "window-sweep")


class ContractError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    scenario: str = "single"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    dataset: str = ""
    out: str = "runs/default"
    split_seed: int = 0
    scale_max: bool = False

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ContractError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        for key, allowed in (("graph_sizes", GRAPH_SIZES), ("inputs", INPUT_HOURS), ("leads", LEAD_HOURS), ("cases", (1, 2, 3, 4))):
            bad = [v for v in self.grid.get(key, []) if v not in allowed]
            if bad:
                raise ContractError(f"grid {key} values {bad} not in {allowed}")

    def variants(self, n_nodes: int) -> list[tuple[str, dict, WindowTask]]:
        """(name, model-config overrides, task) for every run in the scenario."""
        t_in = self.task.get("t_in", 6)
        lead = self.task.get("lead", 6)
        gsize = self.task.get("graph_size", n_nodes)
        case = self.model.get("case", 4)
        if self.scenario == "single":
            return [("single", {"case": case}, WindowTask(t_in, lead, gsize))]
        if self.scenario == "ablation":
            cases = self.grid.get("cases", [1, 2, 3, 4])
            return [(f"case{c}", {"case": c}, WindowTask(t_in, lead, gsize)) for c in cases]
        if self.scenario == "graph-size":
            sizes = self.grid.get("graph_sizes", list(GRAPH_SIZES))
            too_big = [s for s in sizes if s > n_nodes]
            if too_big:
                raise ContractError(f"graph sizes {too_big} exceed the dataset's {n_nodes} regions")
            return [(f"nodes{s}", {"case": case}, WindowTask(t_in, lead, s)) for s in sizes]
        inputs = self.grid.get("inputs", list(INPUT_HOURS))
        leads = self.grid.get("leads", list(LEAD_HOURS))
        return [
            (f"in{i}_lead{d}", {"case": case}, WindowTask(i, d, gsize))
            for i in inputs
            for d in leads
        ]


def _model_config(spec: ExperimentSpec, overrides: dict, task: WindowTask, H: int, W: int) -> ModelConfig:
    m = {k: v for k, v in spec.model.items() if k != "case"}
    m.update(n_nodes=task.graph_size, t_in=task.t_in, height=H, width=W)
    return ModelConfig.for_case(overrides["case"], **m)


def _reproducibility(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "argv": sys.argv[1:],
        **payload,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    adv = AdvectionParams(speed=args.speed, rotation_period=args.rotation_period, correlation=args.correlation)
    ds = gen_synthetic(args.seed, args.hours, args.nodes, args.height, args.width, adv)
    meta = {"generator": "synthetic-advection", "seed": args.seed, "hours": args.hours, "advection": asdict(adv)}
    manifest = write_dataset(args.out, ds, meta)
    _reproducibility(Path(args.out), {"command": "gen", **meta})
    print(manifest)
    return EXIT_OK


def build_spec(args) -> ExperimentSpec:
    raw = _load_json(args.config)
    spec = ExperimentSpec(**{k: v for k, v in raw.items() if k in ExperimentSpec.__dataclass_fields__})
    if args.scenario:
        spec.scenario = args.scenario
    if args.dataset:
        spec.dataset = args.dataset
    if args.out:
        spec.out = args.out
    for key in ("t_in", "lead", "graph_size"):
        if getattr(args, key) is not None:
            spec.task[key] = getattr(args, key)
    for key in ("case", "heads", "blocks"):
        if getattr(args, key) is not None:
            spec.model[key] = getattr(args, key)
    for key in ("epochs", "batch_size", "lr", "patience"):
        v = getattr(args, key)
        if v is not None:
            name = {"epochs": "max_epochs", "patience": "early_stop_patience"}.get(key, key)
            spec.train[name] = v
    if args.seed is not None:
        spec.train["seed"] = args.seed
    if args.scale_max:
        spec.scale_max = True
    for key in ("cases", "graph_sizes", "inputs", "leads"):
        v = getattr(args, key)
        if v:
            spec.grid[key] = [int(s) for s in v.split(",")]
    if not spec.dataset:
        raise ContractError("--dataset is required")
    spec.validate()
    return spec


def cmd_train(args) -> int:
    spec = build_spec(args)
    ds, n_test = read_dataset(spec.dataset)
    _, N, H, W = ds.frames.shape
    out = Path(spec.out)
    tcfg = TrainConfig(**spec.train)
    dev_max = float(ds.frames[: ds.n_frames - n_test].max())
    scale = 1.0 / dev_max if spec.scale_max and dev_max > 0 else 1.0
    _reproducibility(out, {"command": "train", "spec": asdict(spec)})
    for name, overrides, task in spec.variants(N):
        cfg = _model_config(spec, overrides, task, H, W)
        sp = split(ds, task, spec.split_seed, test_frames=n_test)
        train = WindowSet(ds.frames, sp.train, task, scale)
        val = WindowSet(ds.frames, sp.val, task, scale)
        model = GDCAF(cfg, seed=tcfg.seed)
        vdir = out / name
        vdir.mkdir(parents=True, exist_ok=True)
        if args.resume:
            state, _ = load_parameters(Path(args.resume) / name / "params.bin" if Path(args.resume).is_dir() else args.resume)
            model.load_state_dict(state)
            print(f"{name}: resumed, val_mse {evaluate_loss(model, val):.8g}")
        log.info("training %s (%d train / %d val windows)", name, len(train), len(val))
        res = fit(model, train, val, tcfg, log_path=vdir / "train_log.csv")
        config = {
            "model": asdict(cfg),
            "task": asdict(task),
            "scale": scale,
            "split_seed": spec.split_seed,
            "train": asdict(tcfg),
            "best_epoch": res.best_epoch,
            "best_val": res.best_val,
        }
        save_parameters(vdir / "params.bin", res.best_state, {"variant": name})
        (vdir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        print(f"{name}: best epoch {res.best_epoch}, val_mse {res.best_val:.8g}")
    return EXIT_OK


def load_run(run_dir: Path) -> tuple[GDCAF, dict]:
    config = json.loads((run_dir / "config.json").read_text())
    model = GDCAF(ModelConfig.from_dict(config["model"]))
    state, _ = load_parameters(run_dir / "params.bin")
    model.load_state_dict(state)
    return model, config


def _variant_dirs(path: Path) -> list[Path]:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint path {path} does not exist")
    if (path / "config.json").exists():
        return [path]
    dirs = sorted(p.parent for p in path.glob("*/config.json"))
    if not dirs:
        raise ContractError(f"{path}: no trained variants found")
    return dirs


def _scaled_predictor(model: GDCAF, scale: float):
    def predict(x):
        return model.predict(x * np.float32(scale)) / np.float32(scale)

    return predict


def cmd_eval(args) -> int:
    ds, n_test = read_dataset(args.dataset)
    region = None
    if args.region:
        ids = [r.id for r in ds.regions]
        if args.region not in ids:
            raise ContractError(f"unknown region {args.region!r}")
        region = ids.index(args.region)
    rows = []
    for vdir in _variant_dirs(Path(args.checkpoint)):
        model, config = load_run(vdir)
        task = WindowTask(**config["task"])
        cfg = model.cfg
        if (cfg.n_nodes, cfg.t_in, cfg.height, cfg.width) != (task.graph_size, task.t_in, *ds.frames.shape[2:]):
            raise ContractError(f"{vdir}: model config does not match task/dataset shapes")
        if task.graph_size > ds.n_nodes:
            raise ContractError(f"{vdir}: task needs {task.graph_size} regions, dataset has {ds.n_nodes}")
        sp = split(ds, task, config.get("split_seed", 0), test_frames=n_test)
        test = WindowSet(ds.frames, sp.test, task)
        key = {"variant": vdir.name, "nodes": task.graph_size, "input": task.t_in, "lead": task.lead, "case": cfg.case_id}
        for label, fn in (("Persistence", persistence_predict), ("GD-CAF", _scaled_predictor(model, config["scale"]))):
            rep = evaluate(fn, test.batches(args.batch_size), restrict_to_region=region)
            rows.append(({**key, "model": label}, rep))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(reports_to_csv(rows))
    payload = [{"key": k, "report": r.to_dict()} for k, r in rows]
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _reproducibility(out, {"command": "eval", "checkpoint": args.checkpoint, "dataset": args.dataset, "region": args.region})
    sys.stdout.write(reports_to_csv(rows))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    from .export import collect_attention, write_export

    ds, n_test = read_dataset(args.dataset)
    vdir = _variant_dirs(Path(args.checkpoint))[0]
    model, config = load_run(vdir)
    task = WindowTask(**config["task"])
    sp = split(ds, task, config.get("split_seed", 0), test_frames=n_test)
    windows = WindowSet(ds.frames, sp.test, task, config["scale"])
    hours = ds.start_hour + sp.test + task.t_in - 1
    labels = [r.id for r in ds.regions[: task.graph_size]]
    chosen = args.regions.split(",") if args.regions else None
    if chosen and any(c not in labels for c in chosen):
        raise ContractError(f"regions must be among {labels}")
    export = collect_attention(model, windows, hours, labels)
    summary = write_export(export, args.out, k=args.top_k, temporal_regions=chosen)
    _reproducibility(Path(args.out), {"command": "export-attention", "checkpoint": str(vdir), "top_k": args.top_k})
    for season, entry in summary["seasons"].items():
        print(f"{season}: {entry['samples']} windows{' (empty)' if entry['empty'] else ''}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
        worst = max(worst, err)
    print(f"worst relative error {worst:.3e}")
    return EXIT_OK if worst < args.tolerance else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="gdcaf", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic advection dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--hours", type=int, default=4000)
    g.add_argument("--nodes", type=int, default=16)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--speed", type=float, default=1.0)
    g.add_argument("--rotation-period", type=float, default=240.0)
    g.add_argument("--correlation", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train one scenario")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--scenario", choices=SCENARIOS)
    t.add_argument("--case", type=int, choices=(1, 2, 3, 4))
    t.add_argument("--heads", type=int)
    t.add_argument("--blocks", type=int)
    t.add_argument("--t-in", dest="t_in", type=int)
    t.add_argument("--lead", type=int)
    t.add_argument("--graph-size", dest="graph_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--scale-max", action="store_true", help="divide inputs/targets by the training maximum")
    t.add_argument("--cases", help="comma list for the ablation grid")
    t.add_argument("--graph-sizes", dest="graph_sizes")
    t.add_argument("--inputs")
    t.add_argument("--leads")
    t.add_argument("--resume", help="checkpoint file or previous output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score trained variants and the persistence baseline")
    e.add_argument("--checkpoint", required=True, help="variant directory or training output directory")
    e.add_argument("--dataset", required=True)
    e.add_argument("--region", help="score only this region id, e.g. R1")
    e.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("export-attention", parents=[common], help="seasonal attention matrices, top-k edges and SVG panels")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--top-k", dest="top_k", type=int, default=20)
    a.add_argument("--regions", help="comma list of regions for temporal matrices (default all)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_export_attention)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive and the full model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-2)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:  # ShapeError, ContractError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
