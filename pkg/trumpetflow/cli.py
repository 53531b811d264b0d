"""
TrumpetFlow Command Line

Subcommands:
    generate   write train/test datasets and a manifest
    train      two-phase training, checkpoint + per-step loss CSV
    evaluate   MMSE / UQ / surrogate-MAP report (plus oracle columns for GRF)
    map        surrogate-MAP estimates for a test set
    verify     run the oracle and property suites

Exit codes: 0 ok, 1 usage/config/I-O error, 2 training divergence,
3 verification failure.
"""

import argparse
import concurrent.futures
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from trumpetflow import settings
from trumpetflow.metrics import (
    ks_statistics,
    mobius_distance,
    pearson,
    posterior_samples,
    snr_db,
    ssim,
    summarize_samples,
    torus_distance,
)
from trumpetflow.model import CheckpointError, CTrumpetModel, MAPPreconditionError, load_checkpoint
from trumpetflow.oracles import analytic_posterior
from trumpetflow.problems import (
    FIBER_PROBLEMS,
    PROBLEMS,
    DatasetFormatError,
    ProblemInstance,
    angle_conditioning,
    export_csv,
    read_dataset,
    write_dataset,
)
from trumpetflow.settings import ConfigError, RunConfig, build_run_config
from trumpetflow.training import DivergenceError, TrainState, diverged_checkpoint_path, train
from trumpetflow.verify import run_all

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_VERIFY_FAILED = 3

TRAIN_FILE = "train.dataset"
TEST_FILE = "test.dataset"
CHECKPOINT_FILE = "checkpoint.ckpt"
METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.csv"
MAP_FILE = "map.csv"
FIBER_SAMPLES_FILE = "fiber_samples.csv"
FIBER_STEP_DEG = 6
FIBER_TOLERANCE = 0.1

IMAGE_REPORT_COLUMNS = ["item", "mmse_snr", "mmse_ssim", "map_snr", "map_ssim", "uq_mean"]
ORACLE_REPORT_COLUMNS = ["oracle_mmse_snr", "oracle_mmse_ssim", "uq_oracle_corr"]


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"[ERROR] {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="trumpetflow", description="Conditional injective flows for small inverse problems")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    def common(p, with_run: bool = True):
        p.add_argument("--seed", type=int, default=None, help="Seed for every random stream")
        if with_run:
            p.add_argument("--config", type=Path, default=None, help="Run configuration file (KEY=VALUE)")
            p.add_argument("--problem", choices=PROBLEMS, default=None, help="Problem id (overrides the file)")
            p.add_argument("--out", type=Path, default=None, help="Output directory")
            p.add_argument("--quick", action="store_true", help="Small fast preset")

    p = sub.add_parser("generate", help="Generate train/test datasets")
    common(p)
    p.add_argument("--csv", action="store_true", help="Also export the datasets as CSV")

    p = sub.add_parser("train", help="Train a model")
    common(p)
    p.add_argument("--dataset", type=Path, default=None, help=f"Training set (default OUT/{TRAIN_FILE})")
    p.add_argument("--resume", action="store_true", help=f"Resume from OUT/{CHECKPOINT_FILE}")

    p = sub.add_parser("evaluate", help="Posterior estimates and metrics on the test set")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help=f"Checkpoint (default OUT/{CHECKPOINT_FILE})")
    p.add_argument("--dataset", type=Path, default=None, help=f"Test set (default OUT/{TEST_FILE})")
    p.add_argument("--k", type=int, default=None, help="Posterior samples per item (default 25)")

    p = sub.add_parser("map", help="Surrogate-MAP estimates on the test set")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help=f"Checkpoint (default OUT/{CHECKPOINT_FILE})")
    p.add_argument("--dataset", type=Path, default=None, help=f"Test set (default OUT/{TEST_FILE})")

    p = sub.add_parser("verify", help="Run the oracle and property suites")
    common(p, with_run=False)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {
        "problem": args.problem,
        "seed": args.seed,
        "out": str(args.out) if args.out is not None else None,
        "k_samples": getattr(args, "k", None),
    }
    return build_run_config(args.config, quick=args.quick, overrides=overrides)


def _write_rows(path: Path, header: List[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig, export: bool = False) -> int:
    out = Path(config.out)
    problem = ProblemInstance(config.problem, seed=config.seed, **config.problem_params())
    train_set = problem.generate(config.num_samples, np.random.default_rng([config.seed, 1]))
    test_set = problem.generate(config.num_test, np.random.default_rng([config.seed, 2]))
    write_dataset(train_set, out / TRAIN_FILE)
    write_dataset(test_set, out / TEST_FILE)
    manifest = {
        "config": config.to_dict(),
        "files": {"train": TRAIN_FILE, "test": TEST_FILE},
        "train_shape": {"x": list(train_set.x.shape), "y": list(train_set.y.shape)},
        "test_shape": {"x": list(test_set.x.shape), "y": list(test_set.y.shape)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if export:
        export_csv(train_set, out / "train.csv")
        export_csv(test_set, out / "test.csv")
    print(f"[OK] {config.problem}: {len(train_set)} training and {len(test_set)} test samples written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_problem(config: RunConfig, dataset_path: Path):
    dataset = read_dataset(dataset_path)
    if dataset.problem != config.problem:
        raise ConfigError(f"{dataset_path} holds a '{dataset.problem}' dataset, config says '{config.problem}'")
    return dataset, ProblemInstance.from_dataset(dataset)


def cmd_train(config: RunConfig, dataset_path: Optional[Path] = None, resume: bool = False) -> int:
    out = Path(config.out)
    dataset, problem = _load_problem(config, dataset_path or out / TRAIN_FILE)
    cond = problem.conditioning(dataset.y)
    arch = config.architecture(problem.data_dim, problem.cond_dim)
    checkpoint_path = out / CHECKPOINT_FILE
    state = None
    if resume:
        model, described, extras = load_checkpoint(checkpoint_path, expected=arch)
        if described is None:
            raise CheckpointError(f"{checkpoint_path} has no trainer state to resume from")
        state = TrainState.from_checkpoint(described, extras)
        print(f"[OK] Resuming at phase '{state.phase}', epoch {state.epoch}, step {state.step}")
    else:
        model = CTrumpetModel(arch)

    try:
        result = train(model, dataset.x, cond, config.train_config(), checkpoint_path=checkpoint_path,
                       metrics_path=out / METRICS_FILE, state=state)
    except DivergenceError as e:
        print(f"[ERROR] {e}")
        if resume or e.phase != "mse" or e.epoch > 0:
            print(f"  Last good checkpoint kept at {checkpoint_path}")
        else:
            print("  No epoch finished, so no checkpoint was written")
        print(f"  Diverged state written to {diverged_checkpoint_path(checkpoint_path)}")
        return EXIT_DIVERGED

    mse = result.epoch_losses("mse")
    ml = result.epoch_losses("ml")
    print(f"[OK] Training finished: {result.state.step} steps")
    if mse:
        print(f"  MSE phase: {mse[0]:.6f} -> {mse[-1]:.6f}")
    if ml:
        print(f"  ML phase:  {ml[0]:.6f} -> {ml[-1]:.6f}")
    print(f"  Checkpoint: {checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / map
# ---------------------------------------------------------------------------

def _load_for_inference(config: RunConfig, checkpoint: Optional[Path], dataset_path: Optional[Path]):
    out = Path(config.out)
    dataset, problem = _load_problem(config, dataset_path or out / TEST_FILE)
    arch = config.architecture(problem.data_dim, problem.cond_dim)
    model, _, _ = load_checkpoint(checkpoint or out / CHECKPOINT_FILE, expected=arch)
    return dataset, problem, model


def _evaluate_fibers(config: RunConfig, dataset, problem: ProblemInstance, model: CTrumpetModel) -> int:
    out = Path(config.out)
    rng = np.random.default_rng([config.seed, 3])
    rows = []
    for degrees in range(0, 360, FIBER_STEP_DEG):
        t = np.full(config.k_samples, np.deg2rad(degrees))
        points = model.sample(angle_conditioning(t), rng=rng)
        rows.extend([degrees, k, *(_fmt(v) for v in p)] for k, p in enumerate(points))
    _write_rows(out / FIBER_SAMPLES_FILE, ["angle_deg", "sample", "x", "y", "z"], rows)

    cond = problem.conditioning(dataset.y)
    generated = model.sample(cond, rng=rng)
    distance = torus_distance(generated) if config.problem == "torus" else mobius_distance(generated)
    latents = model.intermediate_latents(dataset.x, cond)
    ks = ks_statistics(latents)
    metrics = [("within_tolerance_fraction", float(np.mean(distance <= FIBER_TOLERANCE))),
               ("mean_distance", float(distance.mean())),
               ("ks_max", float(ks.max()))]
    metrics += [(f"ks_z{j}", float(v)) for j, v in enumerate(ks)]
    _write_rows(out / REPORT_FILE, ["metric", "value"], [[name, _fmt(v)] for name, v in metrics])
    print(f"[OK] {config.problem}: {metrics[0][1]:.1%} of {len(distance)} samples within {FIBER_TOLERANCE} "
          f"of the ideal set, max KS {ks.max():.4f}")
    print(f"  Report: {out / REPORT_FILE}, samples every {FIBER_STEP_DEG} degrees: {out / FIBER_SAMPLES_FILE}")
    return EXIT_OK


def _evaluate_item(index: int, config: RunConfig, dataset, problem: ProblemInstance, model: CTrumpetModel,
                   cond: np.ndarray, with_map: bool, with_oracle: bool) -> dict:
    rng = np.random.default_rng([config.seed, 3, index])
    truth = dataset.x[index]
    samples = posterior_samples(model, cond[index], config.k_samples, rng)
    mmse, uq = summarize_samples(samples)
    row = {"item": index, "mmse_snr": snr_db(truth, mmse), "mmse_ssim": ssim(truth, mmse),
           "map_snr": None, "map_ssim": None, "uq_mean": float(uq.mean())}
    if with_map:
        estimate = model.surrogate_map(cond[index])
        row.update(map_snr=snr_db(truth, estimate), map_ssim=ssim(truth, estimate))
    if with_oracle:
        posterior = analytic_posterior(problem.prior, problem.forward, dataset.y[index])
        masked = np.diag(problem.forward.matrix) == 0 if problem.forward.matrix.shape[0] == problem.data_dim else None
        region = masked if masked is not None and masked.any() else np.ones(problem.data_dim, dtype=bool)
        row.update(oracle_mmse_snr=snr_db(truth, posterior.mean), oracle_mmse_ssim=ssim(truth, posterior.mean),
                   uq_oracle_corr=pearson(uq[region], posterior.std()[region]))
    return {"row": row, "samples": samples, "mmse": mmse, "uq": uq}


def cmd_evaluate(config: RunConfig, checkpoint: Optional[Path] = None, dataset_path: Optional[Path] = None) -> int:
    dataset, problem, model = _load_for_inference(config, checkpoint, dataset_path)
    if config.problem in FIBER_PROBLEMS:
        return _evaluate_fibers(config, dataset, problem, model)

    out = Path(config.out)
    cond = problem.conditioning(dataset.y)
    with_map = model.h_mode == "fvc"
    with_oracle = config.problem == "grf-inpaint"
    columns = IMAGE_REPORT_COLUMNS + (ORACLE_REPORT_COLUMNS if with_oracle else [])
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(settings.THREADS, 1)) as pool:
        results = list(pool.map(
            lambda i: _evaluate_item(i, config, dataset, problem, model, cond, with_map, with_oracle),
            range(len(dataset)),
        ))

    rows = []
    for result in results:
        row = result["row"]
        rows.append([row["item"]] + [_fmt(row.get(c)) for c in columns[1:]])
        prefix = out / "items" / f"item_{row['item']:03d}"
        _write_rows(Path(f"{prefix}_samples.csv"), [f"p{j}" for j in range(problem.data_dim)],
                    [[_fmt(v) for v in s] for s in result["samples"]])
        _write_rows(Path(f"{prefix}_estimates.csv"), ["pixel", "truth", "mmse", "uq"],
                    [[j, _fmt(t), _fmt(m), _fmt(u)] for j, (t, m, u)
                     in enumerate(zip(dataset.x[row["item"]], result["mmse"], result["uq"]))])
    _write_rows(out / REPORT_FILE, columns, rows)

    def mean(key: str) -> float:
        return float(np.mean([r["row"][key] for r in results]))

    print(f"[OK] Evaluated {len(results)} items with K={config.k_samples}")
    print(f"  model MMSE: {mean('mmse_snr'):.2f} dB / SSIM {mean('mmse_ssim'):.3f}")
    if with_map:
        print(f"  surrogate MAP: {mean('map_snr'):.2f} dB / SSIM {mean('map_ssim'):.3f}")
    if with_oracle:
        print(f"  analytic MMSE: {mean('oracle_mmse_snr'):.2f} dB / SSIM {mean('oracle_mmse_ssim'):.3f}, "
              f"UQ correlation {mean('uq_oracle_corr'):.3f}")
    print(f"  Report: {out / REPORT_FILE}")
    return EXIT_OK


def cmd_map(config: RunConfig, checkpoint: Optional[Path] = None, dataset_path: Optional[Path] = None) -> int:
    dataset, problem, model = _load_for_inference(config, checkpoint, dataset_path)
    cond = problem.conditioning(dataset.y)
    estimates = model.surrogate_map(cond)
    out = Path(config.out)
    rows = [[i, _fmt(snr_db(dataset.x[i], estimates[i]))] + [_fmt(v) for v in estimates[i]]
            for i in range(len(dataset))]
    _write_rows(out / MAP_FILE, ["item", "snr"] + [f"p{j}" for j in range(problem.data_dim)], rows)
    print(f"[OK] Surrogate MAP for {len(dataset)} items written to {out / MAP_FILE}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(seed: int = 0) -> int:
    print("Running verification suites...")
    print("-" * 60)
    results = run_all(seed)
    for result in results:
        tag = "[OK]" if result.ok else "[ERROR]"
        print(f"{tag} {result.name:<12} passed {result.passed:>6}  failed {result.failed:>3}")
        for message in result.messages[:10]:
            print(f"    {message}")
    print("-" * 60)
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"[ERROR] {len(failed)} of {len(results)} suites failed: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    print(f"[OK] All {len(results)} suites passed")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.seed if args.seed is not None else 0)
        config = _run_config(args)
        if args.command == "generate":
            return cmd_generate(config, export=args.csv)
        if args.command == "train":
            return cmd_train(config, args.dataset, resume=args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoint, args.dataset)
        return cmd_map(config, args.checkpoint, args.dataset)
    except (ConfigError, CheckpointError, DatasetFormatError, MAPPreconditionError) as e:
        print(f"[ERROR] {e}")
        return EXIT_USAGE
    except OSError as e:
        print(f"[ERROR] I/O error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
