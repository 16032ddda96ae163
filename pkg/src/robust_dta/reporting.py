"""Assemble analysis reports as plain dicts and serialise them deterministically."""

from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from .baseline import BaselineFit, fit_baseline
from .core import StudyData, inverse_logit
from .diagnostics import diagnose
from .dpd import DpdFit, fit_dpd
from .inference import gls_cov, normal_quantile, pooled_intervals, sandwich_cov
from .tuning import TuningResult, alpha_ges, select_alpha

SCHEMA_VERSION = "1.0"


def _clean(obj):
    """Recursively convert numpy scalars/arrays and map non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False, ensure_ascii=False) + "\n"


def _sigma_dict(sigma) -> dict:
    return {"sigma1sq": sigma.sigma1sq, "sigma2sq": sigma.sigma2sq, "sigma12": sigma.sigma12, "rho": sigma.rho}


def _ci_dict(cis: dict) -> dict:
    return {kind: {"se": [se.lower, se.upper], "sp": [sp.lower, sp.upper]} for kind, (se, sp) in cis.items()}


def baseline_section(data: StudyData, fit: BaselineFit, level: float) -> dict:
    cov = gls_cov(data, fit.sigma_hat)
    cis = pooled_intervals(fit.mu_hat, cov, data.n_studies, ("wald",), level)
    return {
        "method": fit.method,
        "mu": [fit.mu_hat.mu1, fit.mu_hat.mu2],
        "sensitivity": fit.sensitivity,
        "specificity": fit.specificity,
        "sigma": _sigma_dict(fit.sigma_hat),
        "mu_cov": cov.matrix,
        "ci": _ci_dict(cis),
        "log_lik": fit.log_lik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "boundary": list(fit.boundary),
    }


def dpd_section(data: StudyData, fit: DpdFit, kinds, level: float, alpha_mode: str) -> dict:
    out = {
        "alpha": fit.alpha,
        "alpha_mode": alpha_mode,
        "mu": [fit.mu_hat.mu1, fit.mu_hat.mu2],
        "sensitivity": fit.sensitivity,
        "specificity": fit.specificity,
        "sigma": _sigma_dict(fit.sigma_hat),
        "objective": fit.objective,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "mu_residual": fit.mu_residual,
        "boundary": list(fit.boundary),
        "weights": {sid: g for sid, g in zip(data.study_ids, fit.per_study_weights)},
        "mu_cov": None,
        "ci": {},
    }
    if fit.converged:
        try:
            cov = sandwich_cov(data, fit)
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            out["ci_error"] = str(exc)
        else:
            out["mu_cov"] = cov.matrix
            out["ci"] = _ci_dict(pooled_intervals(fit.mu_hat, cov, data.n_studies, kinds, level))
    return out


def tuning_section(result: TuningResult) -> dict:
    return {
        "criterion": result.criterion,
        "alpha_selected": result.alpha_selected,
        "boundary_flag": result.boundary_flag,
        "excluded": list(result.excluded),
        "grid": [
            {"alpha": p.alpha, "H": p.h, "mu1": p.mu1, "mu2": p.mu2, "converged": p.converged}
            for p in result.grid
        ],
    }


def resolve_alpha(data: StudyData, alpha_mode, grid, baseline_ml=None):
    """Return ``(alpha, mode_label, dpd_fit_or_None, tuning_result_or_None)``."""
    if alpha_mode == "ges":
        return alpha_ges(2), "ges", None, None
    if alpha_mode == "hyvarinen":
        result = select_alpha(data, grid)
        return result.alpha_selected, "hyvarinen", result.selected_fit, result
    return float(alpha_mode), "fixed", None, None


def run_fit(data: StudyData, alpha_mode="ges", kinds=("wald", "hksj"), level=0.95, grid="0.01:0.50:0.01", baseline_method="REML"):
    """Baseline plus DPD analysis; returns ``(report, dpd_fit, baseline_fit)``."""
    base = fit_baseline(data, baseline_method)
    ml = base if baseline_method.upper() == "ML" else fit_baseline(data, "ML")
    alpha, mode, fit, tuning = resolve_alpha(data, alpha_mode, grid)
    if fit is None:
        fit = fit_dpd(data, alpha, init=(ml.mu_hat, ml.sigma_hat))
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "n_studies": data.n_studies,
        "config": {"alpha": str(alpha_mode), "ci": list(kinds), "level": level, "baseline_method": base.method},
        "baseline": baseline_section(data, base, level),
        "dpd": dpd_section(data, fit, kinds, level, mode),
        "status": "ok" if (fit.converged and base.converged) else "not_converged",
    }
    if tuning is not None:
        report["tuning"] = tuning_section(tuning)
    return report, fit, base


def diagnostics_section(data: StudyData, fit: DpdFit, base: BaselineFit) -> list[dict]:
    return [
        {
            "study": d.study_id,
            "g_weight": d.g_weight,
            "g_relative": d.g_relative,
            "u_matrix": d.u_matrix,
            "p_se": d.p_se,
            "p_sp": d.p_sp,
            "std_resid": list(d.std_resid),
        }
        for d in diagnose(data, fit, base)
    ]


def forest_rows(data: StudyData, level: float = 0.95) -> list[list]:
    """Per-study sensitivity/specificity with logit-scale Wald intervals back-transformed."""
    z = normal_quantile(level)
    rows = []
    for sid, y, s2 in zip(data.study_ids, data.y, data.s2):
        half = z * np.sqrt(s2)
        rows.append(
            [
                sid,
                inverse_logit(y[0]),
                inverse_logit(y[0] - half[0]),
                inverse_logit(y[0] + half[0]),
                inverse_logit(y[1]),
                inverse_logit(y[1] - half[1]),
                inverse_logit(y[1] + half[1]),
            ]
        )
    return rows


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def fit_summary_rows(report: dict) -> list[list]:
    """Flat rows ``method, estimand, estimate, ci_kind, lower, upper`` for CSV output."""
    rows = []
    b = report["baseline"]
    for j, est in enumerate(("se", "sp")):
        value = b["sensitivity"] if est == "se" else b["specificity"]
        for kind, ci in b["ci"].items():
            rows.append([f"BNN-{b['method']}", est, value, kind, ci[est][0], ci[est][1]])
    d = report["dpd"]
    for est in ("se", "sp"):
        value = d["sensitivity"] if est == "se" else d["specificity"]
        for kind, ci in d["ci"].items():
            rows.append([f"BNN-DPD(alpha={d['alpha']:.6g})", est, value, kind, ci[est][0], ci[est][1]])
    return rows


def human_table(report: dict) -> str:
    """Console summary with 6 significant digits."""
    lines = [f"{'method':<26}{'Se':>10}  {'Se CI':<24}{'Sp':>10}  {'Sp CI':<24}"]

    def fmt(ci):
        return f"({ci[0]:.6g}, {ci[1]:.6g})" if ci else "-"

    b = report["baseline"]
    bci = b["ci"].get("wald", {})
    lines.append(
        f"{'BNN-' + b['method'] + ' (wald)':<26}{b['sensitivity']:>10.6g}  {fmt(bci.get('se')):<24}{b['specificity']:>10.6g}  {fmt(bci.get('sp')):<24}"
    )
    d = report["dpd"]
    label = f"BNN-DPD a={d['alpha']:.6g}"
    kinds = list(d["ci"]) or ["-"]
    for kind in kinds:
        ci = d["ci"].get(kind, {})
        lines.append(
            f"{label + ' (' + kind + ')':<26}{d['sensitivity']:>10.6g}  {fmt(ci.get('se')):<24}{d['specificity']:>10.6g}  {fmt(ci.get('sp')):<24}"
        )
    return "\n".join(lines) + "\n"
