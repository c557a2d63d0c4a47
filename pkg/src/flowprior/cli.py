"""Command-line entry point: ``flowprior <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import theory
from .config import INPUT_PATH_KEYS, ConfigError, ExperimentConfig, parse_config
from .flow import CheckpointError, FlowNumericalError, FlowStack, load, save
from .inverse import (
    InitStrategy,
    MeasurementOperator,
    gamma_sweep,
    measurement_sweep,
    perturbation_sensitivity,
    read_samples,
    read_vector,
    run_cells,
)
from .inverse.vecio import VectorFileError
from .numerics import RngStream
from .training import TrainConfig, TrainingDiverged, make_smooth_patches, make_toy_2d, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SUBCOMMANDS = ("train", "denoise", "cs", "inpaint", "theory", "jacobian", "perturb", "lasso")


class NumericalFailure(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------


def _dataset(cfg: ExperimentConfig, count: int, stream: RngStream):
    name = cfg.text("dataset", required=True)
    if name == "smooth-patches":
        return make_smooth_patches(count, cfg.integer("side", 4), stream, cfg.number("decay", 1.0))
    try:
        return make_toy_2d(name, count, cfg.number("noise_std", 0.1), stream)
    except ValueError as exc:
        raise ConfigError(str(exc), cfg.lines.get("dataset")) from None


def _signals(cfg: ExperimentConfig, n: int | None, seed: int, default_count: int = 10) -> np.ndarray:
    """Test signals: from the ``samples`` vector file, else freshly generated from ``dataset``."""
    if "samples" in cfg:
        path = cfg.path("samples")
        try:
            if n is None:
                return read_vector(path)[None, :]
            return read_samples(path, n)
        except VectorFileError as exc:
            raise ConfigError(str(exc), cfg.lines.get("samples")) from None
    if "dataset" not in cfg:
        raise ConfigError("need either 'samples' or 'dataset' for test signals")
    count = cfg.integer("test_count", default_count)
    data = _dataset(cfg, count, RngStream(seed, 0x7E57))
    return data.samples


def _load_model(cfg: ExperimentConfig) -> FlowStack:
    path = cfg.path("model", required=True, must_exist=True)
    try:
        return load(path, cfg.number("activation_clip", 40.0))
    except (CheckpointError, OSError) as exc:
        raise ConfigError(f"cannot load model {path}: {exc}", cfg.lines.get("model")) from None


def _shape(cfg: ExperimentConfig):
    raw = cfg.text("shape")
    if raw is None:
        return None
    try:
        h, w = (int(v) for v in raw.lower().split("x"))
    except ValueError:
        raise ConfigError(f"shape must look like HxW, got {raw!r}", cfg.lines.get("shape")) from None
    return h, w


def _init(cfg: ExperimentConfig) -> InitStrategy:
    kind = cfg.text("init", "zero")
    if kind == "zero":
        return InitStrategy.zero()
    if kind == "gaussian":
        return InitStrategy.gaussian(cfg.number("init_std", 0.1))
    if kind == "from_image":
        return InitStrategy.from_image(read_vector(cfg.path("init_image", required=True, must_exist=True)))
    raise ConfigError(f"unknown init {kind!r}", cfg.lines.get("init"))


def _write(out_dir: str, name: str, text: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _finish_sweep(table, out_dir, name):
    path = _write(out_dir, name, table.to_csv())
    if table.cells and not any(c.ok for c in table.cells):
        raise NumericalFailure(f"every cell failed; see {path}")
    return path


# -- subcommands -----------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, seed: int, out: str, threads: int):
    model_path = cfg.path("model", required=True)
    count = cfg.integer("count", 5000)
    data = _dataset(cfg, count, RngStream(seed, 0xDA7A))
    if "init_model" in cfg:
        G = load(cfg.path("init_model"), cfg.number("activation_clip", 40.0))
        if G.n != data.dimension:
            raise ConfigError(f"init_model has n={G.n}, dataset has n={data.dimension}")
    else:
        G = FlowStack.build(
            data.dimension,
            steps=cfg.integer("layers", 8),
            hidden=cfg.integer("hidden"),
            mixing=cfg.text("mixing", "permutation"),
            epsilon=cfg.number("epsilon", 5e-4),
            activation_clip=cfg.number("activation_clip", 40.0),
            seed=seed,
        )
    steps = cfg.integer("steps", 20000)
    try:
        tc = TrainConfig(
            learning_rate=cfg.number("learning_rate", 1e-3),
            warmup_steps=cfg.integer("warmup_steps", min(500, steps)),
            batch_size=cfg.integer("batch_size", 256),
            steps=steps,
            seed=seed,
            checkpoint_every=cfg.integer("checkpoint_every", 0),
            checkpoint_path=model_path,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    log = train(G, data, tc)
    save(G, model_path)
    return [model_path, _write(out, "train_log.csv", log.to_csv())]


def _gamma_grid(cfg):
    return cfg.numbers("gamma", [0.0])


def cmd_denoise(cfg, seed, out, threads):
    G = _load_model(cfg)
    X = _signals(cfg, G.n, seed)
    if "noise_level" in cfg:
        level = cfg.number("noise_level")
    else:
        level = cfg.number("sigma", 0.0) * np.sqrt(G.n)
    op = MeasurementOperator.identity(G.n, level)
    table = gamma_sweep(G, X, _gamma_grid(cfg), op, seed, _init(cfg), cfg.integer("max_iters", 500),
                        cfg.number("tolerance", 1e-8), _shape(cfg), threads)
    return [_finish_sweep(table, out, "denoise.csv")]


def _m_grid(cfg, n):
    ms = cfg.integers("m", required=True)
    if not ms:
        raise ConfigError("m grid is empty", cfg.lines.get("m"))
    bad = [m for m in ms if not 1 <= m <= n]
    if bad:
        raise ConfigError(f"m values {bad} outside [1, {n}]", cfg.lines.get("m"))
    return ms


def cmd_cs(cfg, seed, out, threads):
    G = _load_model(cfg)
    X = _signals(cfg, G.n, seed)
    gammas = _gamma_grid(cfg)
    if len(gammas) != 1:
        raise ConfigError("cs takes a single gamma", cfg.lines.get("gamma"))
    table = measurement_sweep(G, X, _m_grid(cfg, G.n), cfg.number("noise_level", 0.0), seed, gammas[0],
                              _init(cfg), cfg.integer("max_iters", 500), cfg.number("tolerance", 1e-8),
                              _shape(cfg), threads)
    return [_finish_sweep(table, out, "cs.csv")]


def cmd_lasso(cfg, seed, out, threads):
    n = None
    if "model" in cfg:
        n = _load_model(cfg).n
    X = _signals(cfg, n, seed)
    n = X.shape[1]
    table = measurement_sweep(None, X, _m_grid(cfg, n), cfg.number("noise_level", 0.0), seed,
                              max_iters=cfg.integer("max_iters", 1000), shape=_shape(cfg), threads=threads,
                              method="lasso", lasso_lambda=cfg.number("lambda", 0.01))
    return [_finish_sweep(table, out, "lasso.csv")]


def cmd_inpaint(cfg, seed, out, threads):
    G = _load_model(cfg)
    X = _signals(cfg, G.n, seed)
    if "mask" in cfg:
        mask = read_vector(cfg.path("mask"))
        if mask.size != G.n:
            raise ConfigError(f"mask has {mask.size} entries, model has n={G.n}", cfg.lines.get("mask"))
    else:
        keep = cfg.number("mask_fraction", 0.5)
        if not 0 < keep <= 1:
            raise ConfigError("mask_fraction must lie in (0, 1]", cfg.lines.get("mask_fraction"))
        # exactly round(keep * n) observed pixels, at least one
        count = max(1, int(round(keep * G.n)))
        mask = np.zeros(G.n)
        mask[RngStream(seed, 0x3A5C).sampler().permutation(G.n)[:count]] = 1.0
    if not np.any(mask):
        raise ConfigError("mask observes no pixels", cfg.lines.get("mask"))
    try:
        op = MeasurementOperator.from_mask(mask, cfg.number("noise_level", 0.0))
    except ValueError as exc:
        raise ConfigError(str(exc), cfg.lines.get("mask")) from None
    table = gamma_sweep(G, X, _gamma_grid(cfg), op, seed, _init(cfg), cfg.integer("max_iters", 500),
                        cfg.number("tolerance", 1e-8), _shape(cfg), threads)
    return [_finish_sweep(table, out, "inpaint.csv")]


def cmd_theory(cfg, seed, out, threads):
    n = cfg.integer("n", 20)
    profiles = [p.strip() for p in cfg.text("sigma_profile", "1/i").split(",")]
    ms = cfg.integers("m", list(range(4, n)))
    trials = cfg.integer("trials", 10000)
    for p in profiles:
        if p not in theory.PROFILES:
            raise ConfigError(f"unknown sigma profile {p!r}", cfg.lines.get("sigma_profile"))
    bad = [m for m in ms if not 4 <= m < n]
    if bad:
        raise ConfigError(f"m values {bad} violate 4 <= m < n={n}", cfg.lines.get("m"))
    if trials < 2:
        raise ConfigError("trials must be at least 2", cfg.lines.get("trials"))
    root = RngStream(seed)
    gens = {p: theory.LinearGenerator.from_sigma(theory.sigma_profile(p, n), root.child(k, 0x6E))
            for k, p in enumerate(profiles)}
    cells = [(p, m) for p in profiles for m in ms]

    def run(cell):
        p, m = cell
        return theory.bound_report(gens[p], m, trials, root.child(profiles.index(p), m), p)

    reports = run_cells(run, cells, threads)
    sigmas = [gens[r.sigma_profile].sigma for r in reports]
    return [_write(out, "theory.csv", theory.bound_reports_csv(reports, sigmas))]


def cmd_jacobian(cfg, seed, out, threads):
    G = _load_model(cfg)
    count = cfg.integer("points", 10)
    if "samples" in cfg:
        X = _signals(cfg, G.n, seed)[:count]
    elif count > 0:
        X = _signals(cfg, G.n, seed, default_count=count)[:count]
    else:
        X = np.zeros((0, G.n))
    Z = G.inverse(X) if len(X) else X

    def one(z):
        return np.log(G.jacobian_singular_values(z)), G.log_det(z)

    results = run_cells(one, list(Z), threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "index", "log_sigma", "sum_log_sigma", "log_det"])
    for p, (logs, ld) in enumerate(results):
        total = float(np.sum(logs))
        for i, v in enumerate(logs):
            w.writerow([p, i, repr(float(v)), repr(total), repr(float(ld))])
    return [_write(out, "jacobian.csv", buf.getvalue())]


def cmd_perturb(cfg, seed, out, threads):
    G = _load_model(cfg)
    X = _signals(cfg, G.n, seed, default_count=2)
    if len(X) < 2:
        raise ConfigError("perturb needs two data points")
    alphas = cfg.numbers("alpha", [0.0, 0.25, 0.5, 1.0, 2.0])
    za, zb = G.inverse(X[0]), G.inverse(X[1])
    table = perturbation_sensitivity(G, za, zb, alphas, RngStream(seed, 0xD1), cfg.integer("directions", 30))
    return [_write(out, "perturb.csv", table.to_csv())]


COMMANDS = {
    "train": cmd_train,
    "denoise": cmd_denoise,
    "cs": cmd_cs,
    "inpaint": cmd_inpaint,
    "theory": cmd_theory,
    "jacobian": cmd_jacobian,
    "perturb": cmd_perturb,
    "lasso": cmd_lasso,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value experiment file")
        p.add_argument("--seed", type=int, help="base seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads for independent cells")
        if name == "theory":
            p.add_argument("--n", type=int)
            p.add_argument("--profile", help="flat, 1/i or 1/i^2 (comma-separated for several)")
            p.add_argument("--m", help="comma-separated measurement counts")
            p.add_argument("--trials", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        input_paths = INPUT_PATH_KEYS if args.command == "train" else INPUT_PATH_KEYS | {"model"}
        cfg = parse_config(args.config, input_paths) if args.config else ExperimentConfig()
        kind = cfg.text("kind")
        if kind is not None and kind != args.command:
            raise ConfigError(f"config is for {kind!r}, not {args.command!r}", cfg.lines.get("kind"))
        if args.command == "theory":
            cfg.set("n", args.n)
            cfg.set("sigma_profile", args.profile)
            cfg.set("m", args.m)
            cfg.set("trials", args.trials)
        seed = args.seed if args.seed is not None else cfg.integer("seed", 0)
        out = args.out if args.out is not None else cfg.path("out", ".")
        threads = args.threads if args.threads is not None else cfg.integer("threads", 1)
        if seed < 0 or threads < 1:
            raise ConfigError("seed must be non-negative and threads positive")
        written = COMMANDS[args.command](cfg, seed, out, threads)
    except ConfigError as exc:
        print(f"flowprior {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"flowprior {args.command}: training diverged at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericalFailure, FlowNumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"flowprior {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"flowprior {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a failure of the computation itself
        print(f"flowprior {args.command}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
