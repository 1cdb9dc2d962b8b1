"""Multi-fold comparison of the three variants and its summary tables."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from scalevec import data
from scalevec.models import VARIANTS, ModelConfig, build_model
from scalevec.training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)


def run_protocol(images, labels, out, n_folds=3, sizes=data.SPLIT_SIZES, train_cfg=None,
                 variants=VARIANTS, base_seed=0):
    """Train every variant on every fold and append one record per run to ``out`` (JSON).

    Finished runs already present in ``out`` are skipped, so an interrupted
    sweep can be resumed.
    """
    train_cfg = train_cfg or TrainConfig()
    out = Path(out)
    results = json.loads(out.read_text()) if out.exists() else {"runs": []}
    results["protocol"] = {"n_folds": n_folds, "sizes": list(sizes), "train": train_cfg.as_dict(),
                           "n_source_images": int(len(images))}
    done = {(r["variant"], r["fold"]) for r in results["runs"]}
    for f in range(n_folds):
        fold = data.generate_fold(images, labels, base_seed + f, sizes)
        for variant in variants:
            if (variant, f) in done:
                continue
            model = build_model(ModelConfig(variant), seed=train_cfg.seed + f, dtype=train_cfg.dtype)
            t0 = time.perf_counter()
            res = train(model, fold, train_cfg)
            test = evaluate(model, fold.test, train_cfg.eval_batch)
            results["runs"].append({
                "variant": variant, "fold": f, "fold_seed": base_seed + f, "sizes": list(sizes),
                "epochs": train_cfg.epochs, "best_epoch": res.best_epoch,
                "test_error_pct": test["classification_error_pct"], "test_scale_rmse": test["scale_rmse"],
                "seconds": time.perf_counter() - t0, "history": res.history,
            })
            out.write_text(json.dumps(results, indent=1))
            log.info("%s fold %d: %.2f%% error, rmse %.4f", variant, f, test["classification_error_pct"],
                     test["scale_rmse"])
    return results


def summarize(results):
    """Per-variant mean and sd of test error and scale RMSE over folds."""
    table = {}
    for variant in VARIANTS:
        runs = [r for r in results["runs"] if r["variant"] == variant]
        if not runs:
            continue
        err = np.array([r["test_error_pct"] for r in runs])
        rmse = np.array([r["test_scale_rmse"] for r in runs])
        table[variant] = {"n_folds": len(runs), "error_mean": float(err.mean()), "error_sd": float(err.std()),
                          "rmse_mean": float(rmse.mean()), "rmse_sd": float(rmse.std()),
                          "folds": sorted(r["fold"] for r in runs)}
    return table


def format_table(table):
    lines = [f"{'variant':<12} {'folds':>5} {'error %':>15} {'scale RMSE':>17}"]
    for variant, row in table.items():
        lines.append(f"{variant:<12} {row['n_folds']:>5} {row['error_mean']:>7.2f} ± {row['error_sd']:<5.2f} "
                     f"{row['rmse_mean']:>8.4f} ± {row['rmse_sd']:.4f}")
    return "\n".join(lines)
