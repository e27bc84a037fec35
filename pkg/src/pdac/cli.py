"""Command-line entry point: ``pdac {fit-pgm,select,stream,valex,bound,metrics}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Logs go to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import coreset, dataio, pgm
from .errors import DegenerateCovarianceError, FeatureFileError, InputError, StateError
from .valex import BoundParams, ValexConfig, acc_fm_metrics, run_valex, variance_bound, write_report

logger = logging.getLogger("pdac")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _config(args, **overrides):
    return dataio.load_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit_pgm(args) -> int:
    cfg = _config(args, d=args.d, L=args.L, G=args.G, seed=args.seed)
    _, labels, X = dataio.load_feature_arrays(args.features)
    rng = np.random.default_rng(cfg.seed)
    registry = pgm.fit_registry(X, labels, d=cfg.d, L=cfg.L, G=cfg.G, rng=rng)
    dataio.save_registry(registry, args.out)
    for label, ll in pgm.class_log_likelihoods(registry, X, labels).items():
        print(f"class {label}\tmean_log_likelihood {ll!r}")
    return 0


def _buffer_paths(out: Path) -> tuple[Path, Path]:
    return out, out.with_suffix(".csv")


def cmd_select(args) -> int:
    cfg = _config(args, N=args.buffer_size, seed=args.seed)
    tasks, labels, X = dataio.load_feature_arrays(args.features)
    registry = dataio.load_registry(args.model)
    if args.buffer_in:
        buffer = dataio.load_buffer(args.buffer_in)
        if buffer.capacity != cfg.N:
            raise InputError(f"buffer capacity {buffer.capacity} differs from --buffer-size {cfg.N}")
        # reattach features of stored samples so eviction can rescore them
        buffer.entries = [
            coreset.BufferEntry(e.sample_id, e.task_id, e.label, e.log_density,
                                X[e.sample_id] if isinstance(e.sample_id, int) and 0 <= e.sample_id < len(X) else None)
            for e in buffer.entries
        ]
    else:
        buffer = coreset.MemoryBuffer(cfg.N)
    coreset.allocate_quotas(cfg.N, args.task)
    mask = tasks == args.task
    ids = [int(i) for i in np.flatnonzero(mask)]
    rng = np.random.default_rng(cfg.seed)
    coreset.pdac_update(buffer, registry, ids, X[mask], labels[mask], args.task, rng)
    json_path, csv_path = _buffer_paths(Path(args.buffer_out))
    dataio.save_buffer(buffer, json_path)
    dataio.export_buffer_csv(buffer, csv_path)
    for task, count in buffer.task_counts().items():
        print(f"task {task}\tcount {count}")
    return 0


def cmd_stream(args) -> int:
    cfg = _config(args, batch_size=args.batch_size, beta=args.beta, N=args.buffer_size, d=args.d, L=args.L, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    registry = pgm.PGMRegistry(d=cfg.d, n_components=cfg.L)
    buffer = coreset.MemoryBuffer(cfg.N)
    log_rows = []
    batch: list[tuple[int, int, np.ndarray]] = []
    index = 0

    def flush():
        ids = list(range(index - len(batch), index))
        feats = np.vstack([b[2] for b in batch]).astype(np.float64)
        labs = np.array([b[1] for b in batch])
        task = batch[0][0]
        pgm.ingest_batch(registry, feats, labs, cfg.beta, rng)
        coreset.spdac_process_batch(buffer, registry, ids, feats, labs, rng, task_id=task)
        ready = sorted(k for k, m in registry.models.items() if m.initialized)
        log_rows.append((len(log_rows), len(batch), len(buffer), registry.total_count, " ".join(map(str, ready))))
        batch.clear()

    for record in dataio.read_features(args.features):
        batch.append(record)
        index += 1
        if len(batch) == cfg.batch_size:
            flush()
    if batch:
        flush()

    dataio.save_registry(registry, out / "registry.json")
    dataio.save_buffer(buffer, out / "buffer.json")
    dataio.export_buffer_csv(buffer, out / "buffer.csv")
    with open(out / "batches.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("batch", "size", "buffer_occupancy", "samples_seen", "classes_initialized"))
        writer.writerows(log_rows)
    print(f"batches {len(log_rows)}\tbuffer {len(buffer)}/{buffer.capacity}\tseen {registry.total_count}")
    return 0


def cmd_valex(args) -> int:
    cfg = _config(
        args, n_train=args.n_train, n_test=args.n_test, trials=args.trials, N_list=args.N_list,
        strategies=args.strategies, m=args.m, side=args.side, epochs=args.epochs, seed=args.seed,
    )
    vcfg = ValexConfig(
        n_train=cfg.n_train, n_test=cfg.n_test, trials=cfg.trials, N_list=tuple(cfg.N_list),
        strategies=tuple(cfg.strategies), side=cfg.side, m=cfg.m, epochs=cfg.epochs,
        warmup_epochs=min(10, cfg.epochs), seed=cfg.seed,
    )
    report = run_valex(vcfg)
    paths = write_report(report, args.out_dir)
    for cell in report.summary["cells"]:
        print(f"{cell['strategy']}\tN={cell['N']}\tmse={cell['mse_mean']:.6g}\tsem={cell['mse_sem']:.3g}")
    logger.info("report written to %s", paths["summary"].parent)
    return 0


def cmd_bound(args) -> int:
    params = BoundParams(C0=args.C0, C1=args.C1, C2=args.C2, gamma=args.gamma, N=args.N, p=args.p, l=args.l)
    print(repr(variance_bound(params)))
    return 0


def cmd_metrics(args) -> int:
    A = np.loadtxt(args.accuracy, delimiter=",", ndmin=2)
    acc, fm = acc_fm_metrics(A)
    print(f"ACC {acc!r}\nFM {fm!r}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdac", description="Density-aware coreset selection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pgm", help="fit per-class projected Gaussian mixtures to a feature file")
    p.add_argument("--features", required=True, help="input feature file")
    p.add_argument("--d", type=int, help="projection dimension (default 10)")
    p.add_argument("--L", type=int, help="mixture components per class (default 7)")
    p.add_argument("--G", type=int, help="maximum EM iterations (default 20)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="output registry document (JSON)")
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.set_defaults(func=cmd_fit_pgm)

    p = sub.add_parser("select", help="offline density-aware buffer update for one task")
    p.add_argument("--features", required=True, help="feature file; records of --task are candidates")
    p.add_argument("--model", required=True, help="registry document from fit-pgm")
    p.add_argument("--buffer-size", type=int, help="buffer capacity N (default 500)")
    p.add_argument("--task", type=int, required=True, help="current task index t (1-based)")
    p.add_argument("--buffer-in", help="existing buffer document (omit for an empty buffer)")
    p.add_argument("--buffer-out", required=True, help="output buffer document; a .csv export is written alongside")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("stream", help="streaming density-aware selection over a feature file")
    p.add_argument("--features", required=True, help="feature file replayed in record order")
    p.add_argument("--batch-size", type=int, help="records per batch (default 32)")
    p.add_argument("--beta", type=float, help="EMA step size in (0, 1] (default 0.5)")
    p.add_argument("--buffer-size", type=int, help="buffer capacity N (default 500)")
    p.add_argument("--d", type=int, help="projection dimension (default 10)")
    p.add_argument("--L", type=int, help="mixture components per class (default 7)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="output directory (registry.json, buffer.json, buffer.csv, batches.csv)")
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("valex", help="synthetic validation experiment")
    p.add_argument("--n-train", type=int, help="training samples (default 100000)")
    p.add_argument("--n-test", type=int, help="test samples (default 100000)")
    p.add_argument("--trials", type=int, help="independent trials per cell (default 10)")
    p.add_argument("--N-list", type=_csv_ints, help="comma-separated buffer sizes (default 10,100,1000)")
    p.add_argument("--strategies", type=_csv_strs, help="comma-separated subset of uniform,prop_p,prop_inv_p,model_proxy")
    p.add_argument("--m", type=float, help="grid cell width (default 0.4)")
    p.add_argument("--side", type=float, help="side of the analysed square (default 20)")
    p.add_argument("--epochs", type=int, help="training epochs (default 50)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out-dir", required=True, help="directory for the report tables")
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.set_defaults(func=cmd_valex)

    p = sub.add_parser("bound", help="evaluate the per-region variance bound")
    p.add_argument("--p", type=float, required=True, help="region resampling probability")
    p.add_argument("--l", type=int, required=True, help="training samples in the region")
    p.add_argument("--N", type=int, required=True, help="buffer size")
    p.add_argument("--C0", type=float, default=1.0, help="constant C0 (default 1)")
    p.add_argument("--C1", type=float, default=1.0, help="constant C1 (default 1)")
    p.add_argument("--C2", type=float, default=1.0, help="constant C2 (default 1)")
    p.add_argument("--gamma", type=float, default=0.0, help="locality constant gamma (default 0)")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("metrics", help="ACC and forgetting from an accuracy matrix CSV")
    p.add_argument("--accuracy", required=True, help="T x T CSV; row i = accuracies after training task i")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (DegenerateCovarianceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (InputError, FeatureFileError, StateError, OSError, KeyError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
