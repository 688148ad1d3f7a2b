"""Command-line surface: data generation, training, evaluation, scoring,
and the two self-verification commands (gradcheck, selfcheck).

Every run writes its fully resolved configuration to run_config.json next
to its outputs, and all artifact-producing commands are deterministic for a
fixed seed (no timestamps are embedded anywhere). Exit codes: 0 success,
2 usage error, 3 data/schema error, 4 numeric failure, 5 verification
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import (
    DataError,
    Dataset,
    Normalizer,
    SynthConfig,
    _atomic_write,
    _canonical_json,
    load_checkpoint,
    load_dataset,
    preprocess,
    save_checkpoint,
    synth_generate,
    write_dataset_csvs,
)
from .metrics import eval_task1, eval_task2
from .model import Dims, init_params
from .oracle import fd_gradient, kalman_loglik, lgssm_from_linear_model
from .scoring import score_trajectory
from .training import TrainConfig, elbo_estimate, stratified_folds, total_loss, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5

GRADCHECK_TOL = 1e-4
DOMINANCE_SLACK = 1e-6


def _sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _write_run_config(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "run_config.json"), _canonical_json(resolved))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as f:
            file_values = json.load(f)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise DataError(f"unknown config key(s): {sorted(unknown)}")
        resolved.update(file_values)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _load_records(data_dir: str, need_labels: bool = True):
    ts = os.path.join(data_dir, "timeseries.csv")
    st = os.path.join(data_dir, "static.csv")
    lb = os.path.join(data_dir, "labels.csv")
    if need_labels and not os.path.exists(lb):
        raise DataError(f"labels file not found: {lb}")
    return load_dataset(ts, st, lb if os.path.exists(lb) else None)


def _dims_from_config(cfg: dict, feature_dim: int) -> Dims:
    return Dims(
        latent_dim=cfg["latent_dim"],
        static_dim=7,
        feature_dim=feature_dim,
        transition_hidden=cfg["transition_hidden"],
        emission_hidden=cfg["emission_hidden"],
        rnn_dim=cfg["rnn_dim"],
        attention_dim=cfg["attention_dim"],
        predictor_hidden=cfg["predictor_hidden"],
    )


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {
    "records": 1000,
    "seed": 0,
    "features": 8,
    "latent_dim": 4,
    "t_min": 16,
    "t_max": 28,
    "missing_rate": 0.3,
    "prevalence": 0.104,
}


def _cmd_gen(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    synth = SynthConfig(
        n_records=cfg["records"],
        latent_dim=cfg["latent_dim"],
        feature_dim=cfg["features"],
        t_min=cfg["t_min"],
        t_max=cfg["t_max"],
        missing_rate=cfg["missing_rate"],
        prevalence=cfg["prevalence"],
        spectral_radius=0.97,
        mode_decays=tuple([0.97, 0.9] + [0.6] * (cfg["latent_dim"] - 2))
        if cfg["latent_dim"] >= 2
        else None,
        process_noise=0.35,
        obs_noise=0.3,
        static_drive=0.5,
        readout_scale=8.0,
        seed=cfg["seed"],
    )
    ds = synth_generate(synth)
    write_dataset_csvs(ds, args.out_dir)
    _write_run_config(args.out_dir, {"command": "gen", **cfg})
    n_pos = int(sum(r.y for r in ds.records))
    print(f"wrote {len(ds.records)} records ({n_pos} positive) to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "seed": 0,
    "fold": 0,
    "folds": 5,
    "alpha": 0.01,
    "mc_samples": 1,
    "learning_rate": 2e-4,
    "batch_size": 128,
    "max_epochs": 100,
    "patience": 20,
    "latent_dim": 16,
    "transition_hidden": 64,
    "emission_hidden": 32,
    "rnn_dim": 16,
    "attention_dim": 24,
    "predictor_hidden": 4,
    "var_floor": 1e-4,
    "linear_mode": False,
    "unsupervised": False,
    "val_metric": "auroc",
    "val_samples": 5,
}


def _cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    ds = _load_records(args.data_dir, need_labels=not cfg["unsupervised"])
    k = cfg["folds"]
    test_fold = cfg["fold"]
    if not 0 <= test_fold < k:
        raise DataError(f"fold {test_fold} outside 0..{k - 1}")

    if cfg["unsupervised"] and any(r.y is None for r in ds.records):
        # label-free protocol still needs a deterministic split; use plain chunks
        rng = np.random.default_rng(cfg["seed"])
        order = rng.permutation(len(ds.records))
        folds = [sorted(int(i) for i in order[f::k]) for f in range(k)]
    else:
        folds = stratified_folds([r.y for r in ds.records], k, cfg["seed"])

    manifest_lines = ["stay_id,fold"]
    fold_of = {}
    for f, idx in enumerate(folds):
        for i in idx:
            fold_of[ds.records[i].stay_id] = f
    for r in ds.records:
        manifest_lines.append(f"{r.stay_id},{fold_of[r.stay_id]}")
    os.makedirs(args.out_dir, exist_ok=True)
    folds_path = os.path.join(args.out_dir, "folds.csv")
    _atomic_write(folds_path, "\n".join(manifest_lines) + "\n")

    rng = np.random.default_rng(cfg["seed"])
    remaining = [f for f in range(k) if f != test_fold]
    val_fold = remaining[int(rng.integers(len(remaining)))]
    train_idx = [i for f in remaining if f != val_fold for i in folds[f]]
    val_idx = folds[val_fold]

    raw_train = [ds.records[i] for i in train_idx]
    raw_val = [ds.records[i] for i in val_idx]
    normalizer = Normalizer.fit(raw_train)
    train_recs = preprocess(raw_train, normalizer)
    val_recs = preprocess(raw_val, normalizer)

    dims = _dims_from_config(cfg, feature_dim=len(ds.feature_names))
    tc = TrainConfig(
        dims=dims,
        alpha=cfg["alpha"],
        mc_samples=cfg["mc_samples"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        seed=cfg["seed"],
        var_floor=cfg["var_floor"],
        linear_mode=cfg["linear_mode"],
        supervised=not cfg["unsupervised"],
        val_metric=cfg["val_metric"],
        val_samples=cfg["val_samples"],
    )
    params, report = train(train_recs, val_recs, tc)

    meta = {
        "command": "train",
        "seed": cfg["seed"],
        "test_fold": test_fold,
        "val_fold": val_fold,
        "folds_sha256": _sha256(folds_path),
        "feature_names": ds.feature_names,
        "config": cfg,
    }
    save_checkpoint(params, os.path.join(args.out_dir, "checkpoint.json"),
                    normalizer=normalizer, meta=meta)
    report_payload = {
        "train_losses": report.train_losses,
        "val_metrics": report.val_metrics,
        "val_metric_name": report.val_metric_name,
        "best_epoch": report.best_epoch,
        "stopped_epoch": report.stopped_epoch,
        "rho": report.rho,
    }
    _atomic_write(os.path.join(args.out_dir, "report.json"), _canonical_json(report_payload))
    _write_run_config(args.out_dir, {"command": "train", **cfg})
    print(f"best epoch {report.best_epoch}, stopped at {report.stopped_epoch}; "
          f"checkpoint written to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "seed": 0,
    "mc_samples": 20,
    "horizon_min": 12,
    "horizon_max": 48,
    "horizon_step": 2,
    "lead_min": -120,
    "lead_max": 0,
    "lead_step": 2,
}


def _cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    params, normalizer, meta = load_checkpoint(args.checkpoint)
    if normalizer is None:
        raise DataError("checkpoint has no normalizer; cannot preprocess evaluation data")
    folds_path = args.folds_file
    if _sha256(folds_path) != meta.get("folds_sha256"):
        raise DataError(
            "fold manifest does not match the checkpoint's training split "
            f"({folds_path} vs checkpoint meta)"
        )
    test_fold = meta["test_fold"]
    with open(folds_path) as f:
        lines = f.read().strip().splitlines()
    if lines[0] != "stay_id,fold":
        raise DataError(f"{folds_path}: header must be stay_id,fold")
    fold_of = dict(line.split(",") for line in lines[1:])

    ds = _load_records(args.data_dir)
    test_ids = {sid for sid, f in fold_of.items() if int(f) == test_fold}
    raw = [r for r in ds.records if r.stay_id in test_ids]
    if not raw:
        raise DataError(f"no records in test fold {test_fold}")
    records = preprocess(raw, normalizer)

    horizons = list(range(cfg["horizon_min"], cfg["horizon_max"] + 1, cfg["horizon_step"]))
    curve1 = eval_task1(params, records, horizons, cfg["mc_samples"], cfg["seed"])
    leads = list(range(cfg["lead_min"], cfg["lead_max"] + 1, cfg["lead_step"]))
    curve2 = eval_task2(params, records, leads, cfg["mc_samples"], cfg["seed"])

    os.makedirs(args.out_dir, exist_ok=True)
    _atomic_write(os.path.join(args.out_dir, "task1.csv"), curve1.to_csv())
    _atomic_write(os.path.join(args.out_dir, "task2.csv"), curve2.to_csv())
    _write_run_config(args.out_dir, {"command": "eval", **cfg})
    print(f"task1 aggregate AUROC {curve1.aggregate_auroc:.4f}, "
          f"task2 aggregate AUROC {curve2.aggregate_auroc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

SCORE_DEFAULTS = {
    "seed": 0,
    "mc_samples": 100,
    "stride": 1,
}


def _cmd_score(args) -> int:
    cfg = _resolve(args, SCORE_DEFAULTS)
    params, normalizer, _ = load_checkpoint(args.checkpoint)
    if normalizer is None:
        raise DataError("checkpoint has no normalizer; cannot preprocess scoring data")
    ds = _load_records(args.data_dir, need_labels=False)
    raw = ds.records
    if args.stay_id:
        wanted = set(args.stay_id)
        missing = wanted - {r.stay_id for r in raw}
        if missing:
            raise DataError(f"stay_id(s) not in dataset: {sorted(missing)}")
        raw = [r for r in raw if r.stay_id in wanted]
    records = preprocess(raw, normalizer)

    lines = ["stay_id,hours_from_admission,mean,ci_low,ci_high"]
    for record in records:
        points = score_trajectory(record, params, cfg["mc_samples"], cfg["stride"], cfg["seed"])
        for t_prime, rs in points:
            lines.append(
                f"{record.stay_id},{2 * t_prime},{rs.mean!r},{rs.ci_low!r},{rs.ci_high!r}"
            )
    os.makedirs(args.out_dir, exist_ok=True)
    _atomic_write(os.path.join(args.out_dir, "trajectories.csv"), "\n".join(lines) + "\n")
    _write_run_config(args.out_dir, {"command": "score", **cfg})
    print(f"scored {len(records)} stay(s) into {args.out_dir}/trajectories.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / selfcheck
# ---------------------------------------------------------------------------

GRADCHECK_DEFAULTS = {
    "seed": 7,
    "records": 2,
    "steps": 10,
    "features": 5,
}


def gradcheck(seed: int = 7, n_records: int = 2, T: int = 10, M: int = 5,
              verbose: bool = True) -> float:
    """Max per-group relative error between reverse-mode and central
    finite-difference gradients of the full training loss."""
    synth = SynthConfig(
        n_records=n_records, latent_dim=3, feature_dim=M, t_min=T, t_max=T,
        missing_rate=0.3, prevalence=0.5, seed=seed,
    )
    ds = synth_generate(synth)
    normalizer = Normalizer.fit(ds.records)
    records = preprocess(ds.records, normalizer)
    if len({r.y for r in records}) == 1:  # tiny cohorts can come out single-class
        records[0].y = 1 - records[0].y

    dims = Dims(feature_dim=M)
    params = init_params(dims, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    for _, p in params.named_parameters():
        p.data = np.asarray(p.data + 0.05 * rng.standard_normal(p.data.shape))

    tc = TrainConfig(dims=dims, alpha=0.5, mc_samples=2, seed=seed + 3)
    rho = 2.0
    loss = total_loss(records, params, tc, rho, seed=seed + 4)
    grads = ad.reverse_gradients(loss, [p for _, p in params.named_parameters()])

    def loss_fn() -> float:
        with ad.no_grad():
            return total_loss(records, params, tc, rho, seed=seed + 4).item()

    fd = fd_gradient(loss_fn, params.named_parameters())
    worst = 0.0
    for name, p in params.named_parameters():
        a, b = grads[p], fd[name]
        rel = np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
        if verbose:
            print(f"  {name:28s} rel_err {rel:.3e}")
        worst = max(worst, rel)
    return worst


def _cmd_gradcheck(args) -> int:
    cfg = _resolve(args, GRADCHECK_DEFAULTS)
    worst = gradcheck(cfg["seed"], cfg["records"], cfg["steps"], cfg["features"])
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_CHECK


SELFCHECK_DEFAULTS = {
    "seed": 0,
    "records": 100,
}


def selfcheck(seed: int = 0, n_records: int = 100, verbose: bool = True) -> int:
    """ELBO-vs-Kalman dominance on a linear-mode model: the Monte-Carlo
    ELBO must never exceed the exact marginal log-likelihood."""
    synth = SynthConfig(
        n_records=n_records, latent_dim=4, feature_dim=6, t_min=20, t_max=20,
        missing_rate=0.3, prevalence=0.3, seed=seed,
    )
    ds = synth_generate(synth)
    normalizer = Normalizer.fit(ds.records)
    records = preprocess(ds.records, normalizer)

    dims = Dims(latent_dim=4, feature_dim=6, transition_hidden=8, emission_hidden=8,
                rnn_dim=8, attention_dim=6, predictor_hidden=3)
    params = init_params(dims, seed=seed + 1, linear_mode=True)
    rng = np.random.default_rng(seed + 2)
    for _, p in params.named_parameters():
        p.data = np.asarray(p.data + 0.1 * rng.standard_normal(p.data.shape))

    lgssm = lgssm_from_linear_model(params)
    violations = 0
    for i, r in enumerate(records):
        elbo, _, _ = elbo_estimate(r, params, N=16, seed=seed + 100 + i)
        exact = kalman_loglik(lgssm, r.x, r.m, s=r.s)
        ok = elbo <= exact + DOMINANCE_SLACK
        if not ok:
            violations += 1
        if verbose and (not ok or i < 3):
            print(f"  record {r.stay_id}: elbo {elbo:.4f} <= kalman {exact:.4f}  "
                  f"{'ok' if ok else 'VIOLATION'}")
    return violations


def _cmd_selfcheck(args) -> int:
    cfg = _resolve(args, SELFCHECK_DEFAULTS)
    violations = selfcheck(cfg["seed"], cfg["records"])
    print(f"{cfg['records'] - violations}/{cfg['records']} records satisfy "
          f"ELBO <= exact log-likelihood (+{DOMINANCE_SLACK:g})")
    return EXIT_OK if violations == 0 else EXIT_CHECK


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icurisk",
        description="Attentive deep Markov model for ICU risk scoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort (CSV triplet)")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--records", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--t-min", dest="t_min", type=int)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    p.add_argument("--prevalence", type=float)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="5-fold split, train, write checkpoint + report")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--linear-mode", dest="linear_mode", action="store_const", const=True)
    p.add_argument("--unsupervised", action="store_const", const=True)
    p.add_argument("--val-metric", dest="val_metric", choices=("auroc", "loss"))
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="horizon and lead-time sweeps on the test fold")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--folds-file", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--horizon-min", dest="horizon_min", type=int)
    p.add_argument("--horizon-max", dest="horizon_max", type=int)
    p.add_argument("--horizon-step", dest="horizon_step", type=int)
    p.add_argument("--lead-min", dest="lead_min", type=int)
    p.add_argument("--lead-max", dest="lead_max", type=int)
    p.add_argument("--lead-step", dest="lead_step", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("score", help="risk trajectories with confidence intervals")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stay-id", action="append")
    p.add_argument("--seed", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference gradients")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--records", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--features", type=int)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("selfcheck", help="ELBO vs exact Kalman log-likelihood dominance")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--records", type=int)
    p.set_defaults(func=_cmd_selfcheck)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"error: file not found: {err.filename}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"error: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
