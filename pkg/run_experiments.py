"""
blockroll-fl experiment runner
- run:       one federated run per (split, distribution, scheme, seed) cell
             -> runs/<run_id>.csv, metrics.csv, summary.txt, effective_config.yaml
- coverage:  selection-only traversal table -> coverage.csv
- gradcheck: finite-difference check of the training engine on random tiny archs
- Exit codes: 0 success, 1 usage/config error, 2 runtime error
- Example Usage:
    python run_experiments.py run --config config/desk_scale.yaml --out results/desk
    python run_experiments.py run --config config/smoke.yaml --scheme fedbrb --seed 0 --seed 1
    python run_experiments.py coverage --config config/desk_scale.yaml
    python run_experiments.py gradcheck --seed 3
"""
import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.config import SMALLEST, ConfigError, ExperimentConfig, dump_config, load_experiment_config
from engine.neural import (ModelArch, TrainConfig, default_arch, dense_arch, gradient_check, init_params,
                           random_tiny_arch)
from etl.dataset import Dataset, DataFormatError
from etl.mnist import load_mnist_idx, standard_paths
from etl.sharding import subset_dataset
from etl.synthetic import synthetic_classes
from fl.aggregate import AggregationPolicy
from fl.coverage import PRIMARY, rounds_to_full, simulate_coverage, traversal_rounds
from fl.federation import (METRIC_COLUMNS, TRADITIONAL, FederationConfig, LrSchedule, Setting, parse_distribution,
                           run, scheme_from_name, traditional_arch, traditional_distribution)
from fl.partition import Ratio, SchemeKind, layer_dims, ratio_from_letter

logger = logging.getLogger("blockroll")

RUN_COLUMNS = ["run_id", "scheme", "distribution", "setting", "seed"]
GRADCHECK_TOL = 1e-4
NEVER = "never"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"[ERROR] {message}", file=sys.stderr)
        sys.exit(1)


def parse_args(argv: Optional[Sequence[str]] = None):
    ap = _Parser(description="Federated sub-model training experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="YAML experiment profile")
        p.add_argument("--out", type=str, default=None, help="Output directory (default BLOCKROLL_OUT_DIR)")
        p.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING ...")
        p.add_argument("--quiet", action="store_true", help="Disable progress bars")

    p_run = sub.add_parser("run", help="Run the experiment grid")
    common(p_run)
    p_run.add_argument("--seed", type=int, action="append", help="Seed; repeat for several")
    p_run.add_argument("--scheme", type=str, action="append",
                       help="heterofl, fedrolex, dropout, fedbrb, fedbrb_nowb or tf; repeatable")
    p_run.add_argument("--distribution", type=str, action="append", help="e.g. a0-b1-c1-d1-e1; repeatable")
    p_run.add_argument("--beta", type=float, default=None, help="Broadcast weight in [0, 1)")
    p_run.add_argument("--setting", choices=["dynamic", "fixed"], default=None)
    p_run.add_argument("--exclude-small", action="store_true",
                       help="Leave the smallest sub-models out of aggregation")
    p_run.add_argument("--no-broadcast", action="store_true", help="Also run fedbrb with broadcast off")
    p_run.add_argument("--workers", type=int, default=None, help="Parallel runs")

    p_cov = sub.add_parser("coverage", help="Selection-only coverage table")
    common(p_cov)

    p_grad = sub.add_parser("gradcheck", help="Finite-difference gradient check")
    p_grad.add_argument("--seed", type=int, action="append", help="Seed; default 0..4")
    p_grad.add_argument("--log-level", type=str, default=None)
    return ap.parse_args(argv)


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def overrides_from_args(args) -> Dict[str, object]:
    overrides: Dict[str, object] = {}
    if getattr(args, "out", None):
        overrides["output.out_dir"] = args.out
    if getattr(args, "log_level", None):
        overrides["output.log_level"] = args.log_level
    if getattr(args, "seed", None):
        overrides["experiment.seeds"] = args.seed
    if getattr(args, "scheme", None):
        overrides["experiment.schemes"] = args.scheme
    if getattr(args, "distribution", None):
        overrides["experiment.distributions"] = args.distribution
    if getattr(args, "beta", None) is not None:
        overrides["aggregation.beta"] = args.beta
    if getattr(args, "setting", None):
        overrides["experiment.setting"] = args.setting
    if getattr(args, "exclude_small", False):
        overrides["aggregation.exclude_letters"] = [SMALLEST]
    if getattr(args, "workers", None) is not None:
        overrides["experiment.workers"] = args.workers
    return overrides


def load_config(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config, overrides_from_args(args))
    if getattr(args, "no_broadcast", False) and "fedbrb_nowb" not in cfg.experiment.schemes:
        cfg.experiment.schemes.append("fedbrb_nowb")
    for name in cfg.experiment.schemes:
        try:
            scheme_from_name(name)
        except ValueError as e:
            raise ConfigError(f"experiment.schemes: {e}") from None
    for dist in cfg.experiment.distributions:
        try:
            parse_distribution(dist)
        except ValueError as e:
            raise ConfigError(f"experiment.distributions: {e}") from None
    return cfg


# -------------- Data / model ----------------
def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.data
    rng = np.random.default_rng(d.subset_seed)
    if d.source == "synthetic":
        full = synthetic_classes(d.classes, d.per_class + d.test_per_class, d.dim, d.separation, rng,
                                 tuple(d.image_shape))
        n_train = d.classes * d.per_class
        trainset, testset = full.subset(np.arange(n_train)), full.subset(np.arange(n_train, len(full)))
    else:
        train_images, train_labels = standard_paths(d.mnist_dir, "train")
        test_images, test_labels = standard_paths(d.mnist_dir, "test")
        trainset = load_mnist_idx(train_images, train_labels, d.mean, d.std)
        testset = load_mnist_idx(test_images, test_labels, d.mean, d.std)
    return subset_dataset(trainset, d.subset, rng), subset_dataset(testset, d.test_size, rng)


def build_arch(cfg: ExperimentConfig, input_shape: Tuple[int, int, int], num_classes: int) -> ModelArch:
    e = cfg.experiment
    if e.model == "mlp":
        return dense_arch(math.prod(input_shape), tuple(e.widths), num_classes, input_shape)
    return default_arch(input_shape, num_classes, tuple(e.widths))


# -------------- Grid ----------------
def build_grid(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    """One cell per (split, distribution, scheme, seed), in that nesting order."""
    e = cfg.experiment
    return [
        {"run_id": f"{scheme}_{dist}_{split}_{e.setting}_s{seed}",
         "split": split, "distribution": dist, "scheme": scheme, "seed": seed}
        for split in cfg.data.splits
        for dist in e.distributions
        for scheme in e.schemes
        for seed in e.seeds
    ]


def federation_config(cfg: ExperimentConfig, cell: Dict[str, Any]) -> FederationConfig:
    kind, broadcast = scheme_from_name(cell["scheme"])
    dist = parse_distribution(cell["distribution"])
    a, t, f = cfg.aggregation, cfg.train, cfg.federation
    excluded = {dist.min_ratio if letter == SMALLEST else ratio_from_letter(letter) for letter in a.exclude_letters}
    if cell["scheme"] == TRADITIONAL:
        # every client trains the whole narrow model, nothing to exclude
        dist, excluded = traditional_distribution(), set()
    return FederationConfig(
        distribution=dist,
        scheme=kind,
        policy=AggregationPolicy(a.beta, broadcast, frozenset(excluded), a.sample_weighted),
        setting=Setting(cfg.experiment.setting),
        num_clients=f.num_clients,
        selected_fraction=f.selected_fraction,
        rounds=f.rounds,
        train=TrainConfig(t.lr, t.momentum, t.weight_decay, t.batch_size, t.local_epochs),
        schedule=LrSchedule(t.decay_interval, t.decay_factor),
        split=cell["split"],
        seed=cell["seed"],
        eval_every=cfg.experiment.eval_every,
    )


def cell_arch(arch: ModelArch, cell: Dict[str, Any]) -> ModelArch:
    """The global model a cell trains: `tf` shrinks it to the distribution's smallest width."""
    if cell["scheme"] != TRADITIONAL:
        return arch
    return traditional_arch(arch, parse_distribution(cell["distribution"]).min_ratio)


def execute_run(cfg: ExperimentConfig, cell: Dict[str, Any], arch: ModelArch, trainset: Dataset, testset: Dataset,
                runs_dir: str, progress: bool = False) -> Tuple[str, float, pd.DataFrame]:
    """One grid cell; writes runs/<run_id>.csv and returns (run_id, final accuracy, metrics)."""
    report = run(federation_config(cfg, cell), cell_arch(arch, cell), trainset, testset, progress=progress)
    frame = report.to_frame()
    values = {**cell, "setting": cfg.experiment.setting}
    for pos, col in enumerate(RUN_COLUMNS):
        frame.insert(pos, col, values[col])
    frame.to_csv(Path(runs_dir) / f"{cell['run_id']}.csv", index=False)
    return cell["run_id"], report.final_accuracy, frame


# (scheme, baseline, heading) pairs reported as mean accuracy differences
COMPARISONS = [
    ("fedbrb", "fedbrb_nowb", "broadcast on minus off (accuracy points)"),
    ("fedbrb", TRADITIONAL, "fedbrb minus full-model training at the smallest width (accuracy points)"),
]


def summarize(grid: List[Dict[str, Any]], finals: Dict[str, float], cfg: ExperimentConfig) -> str:
    df = pd.DataFrame([{**c, "final_accuracy": finals[c["run_id"]]} for c in grid])
    lines = [f"experiment: {cfg.experiment.name}  setting: {cfg.experiment.setting}",
             "final-round test accuracy, mean +/- std over seeds", ""]
    grouped = df.groupby(["split", "distribution", "scheme"], sort=False)["final_accuracy"]
    stats = grouped.agg(["mean", "std", "count"]).fillna({"std": 0.0})
    for (split, dist, scheme), row in stats.iterrows():
        lines.append(f"{split:<10} {dist:<18} {scheme:<12} {100 * row['mean']:6.2f} +/- {100 * row['std']:5.2f}"
                     f"  (n={int(row['count'])})")

    means = stats["mean"]
    for scheme, baseline, heading in COMPARISONS:
        diffs = []
        for split, dist in dict.fromkeys(zip(df["split"], df["distribution"])):
            if (split, dist, scheme) in means.index and (split, dist, baseline) in means.index:
                diff = means[(split, dist, scheme)] - means[(split, dist, baseline)]
                diffs.append(f"{split:<10} {dist:<18} {100 * diff:+6.2f}")
        if diffs:
            lines += ["", heading] + diffs
    if cfg.aggregation.exclude_letters:
        lines += ["", f"excluded from aggregation: {', '.join(cfg.aggregation.exclude_letters)}"]
    return "\n".join(lines) + "\n"


# -------------- Commands ----------------
def cmd_run(args) -> int:
    try:
        cfg = load_config(args)
        cfg.check_paths()
    except ConfigError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1
    setup_logging(cfg.output.log_level)
    out_dir = Path(cfg.output.out_dir)
    runs_dir = out_dir / "runs"
    try:
        runs_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out_dir / "effective_config.yaml")
        trainset, testset = load_data(cfg)
        arch = build_arch(cfg, trainset.input_shape, trainset.class_count)
    except (OSError, DataFormatError, ValueError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2

    grid = build_grid(cfg)
    finals: Dict[str, float] = {}
    frames: Dict[str, pd.DataFrame] = {}
    workers = cfg.experiment.workers
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(execute_run, cfg, cell, arch, trainset, testset, str(runs_dir))
                           for cell in grid]
                for fut in tqdm(as_completed(futures), total=len(futures), desc="runs", disable=args.quiet):
                    run_id, acc, frame = fut.result()
                    finals[run_id] = acc
                    frames[run_id] = frame
        else:
            for cell in tqdm(grid, desc="runs", disable=args.quiet):
                run_id, acc, frame = execute_run(cfg, cell, arch, trainset, testset, str(runs_dir),
                                                 progress=not args.quiet)
                finals[run_id] = acc
                frames[run_id] = frame
    except (OSError, ValueError, FloatingPointError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2

    metrics = pd.concat([frames[cell["run_id"]] for cell in grid], ignore_index=True)
    metrics = metrics[RUN_COLUMNS + METRIC_COLUMNS]
    metrics.to_csv(out_dir / "metrics.csv", index=False)
    (out_dir / "summary.txt").write_text(summarize(grid, finals, cfg), encoding="utf-8")
    print(f"[OK] {len(grid)} runs -> {out_dir / 'metrics.csv'}")
    return 0


def _fmt(rounds: Optional[int]) -> str:
    return NEVER if rounds is None else str(rounds)


def coverage_table(cfg: ExperimentConfig, arch: ModelArch) -> pd.DataFrame:
    """Simulated vs predicted rounds to full primary coverage, one row per tracked tensor."""
    rows = []
    layers = {layer.name: layer for layer in arch.param_layers()}
    for dist_text in cfg.experiment.distributions:
        ratio = parse_distribution(dist_text).min_ratio
        n = ratio.denominator
        horizon = 4 * n * n
        for layer in layers.values():
            out_ch, in_ch, _ = layer_dims(layer)
            horizon = max(horizon, out_ch * in_ch // math.gcd(out_ch, in_ch))
        for scheme in cfg.experiment.schemes:
            kind, _ = scheme_from_name(scheme)
            sim_arch, sim_ratio = arch, ratio
            if scheme == TRADITIONAL:
                sim_arch, sim_ratio = traditional_arch(arch, ratio), Ratio(0)
            mask = simulate_coverage(sim_arch, kind, sim_ratio, sim_ratio, horizon, seed=cfg.experiment.seeds[0])
            for name, simulated in rounds_to_full(mask, PRIMARY).items():
                layer = layers[name.rsplit(".", 1)[0]]
                predicted = "-"
                if name.endswith(".weight") and layer.partition_out and layer.partition_in and kind is not SchemeKind.RANDOM:
                    out_ch, in_ch, _ = layer_dims(layer)
                    predicted = _fmt(traversal_rounds(kind, sim_ratio, out_ch, in_ch))
                rows.append({"scheme": scheme, "distribution": dist_text, "layer": name,
                             "simulated": _fmt(simulated), "predicted": predicted})
    return pd.DataFrame(rows, columns=["scheme", "distribution", "layer", "simulated", "predicted"])


def cmd_coverage(args) -> int:
    try:
        cfg = load_config(args)
    except ConfigError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1
    setup_logging(cfg.output.log_level)
    d = cfg.data
    input_shape = tuple(d.image_shape) if d.source == "synthetic" else (1, 28, 28)
    try:
        arch = build_arch(cfg, input_shape, d.classes)
        table = coverage_table(cfg, arch)
        out_dir = Path(cfg.output.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "coverage.csv", index=False)
    except (OSError, ValueError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2
    print(table.to_string(index=False))
    print(f"[OK] coverage table -> {out_dir / 'coverage.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    setup_logging(args.log_level or "WARNING")
    seeds = args.seed or list(range(5))
    worst_name, worst_err = "", 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        arch = random_tiny_arch(rng)
        params = init_params(arch, rng)
        x = rng.standard_normal((4, *arch.input_shape))
        labels = rng.integers(0, arch.num_classes, size=4)
        errors = gradient_check(params, arch, x, labels, rng)
        name = max(errors, key=errors.get)
        err = errors[name]
        logger.info("seed %d: worst %s %.2e", seed, name, err)
        if err >= GRADCHECK_TOL:
            print(f"[ERROR] seed {seed}: {name} relative error {err:.3e} >= {GRADCHECK_TOL:g}", file=sys.stderr)
            return 2
        if err > worst_err:
            worst_name, worst_err = name, err
    print(f"[OK] gradcheck passed for {len(seeds)} seeds; worst {worst_name or '-'} {worst_err:.3e}")
    return 0


COMMANDS = {"run": cmd_run, "coverage": cmd_coverage, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
