"""Monte-Carlo harness: outlier-contaminated bivariate binomial-normal data,
method comparison and performance measures (bias, RMSE, coverage, CI width).

Every replicate draws from its own Philox stream keyed by
``SeedSequence(spec.seed, spawn_key=(rep_index,))`` so datasets depend only
on ``(seed, spec, rep_index)`` and results do not depend on how replicates
are distributed over worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline import fit_baseline
from .core import StudyCounts, StudyData, inverse_logit, logit
from .dpd import fit_dpd
from .inference import gls_cov, pooled_intervals, sandwich_cov
from .tuning import DEFAULT_GRID, alpha_ges, select_alpha

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy Philox4x64-10 seeded by SeedSequence(seed, spawn_key=(rep_index,))"
METHODS = ("BNN-ML", "BNN-REML", "BNN-DPD(GES)", "BNN-DPD(H)")
DEFAULT_METHODS = ("BNN-REML", "BNN-DPD(GES)", "BNN-DPD(H)")
CI_KINDS = ("wald", "hksj")
ESTIMANDS = ("se", "sp")
SCENARIOS = {"A": (0, 0), "B": (2, 0), "C": (0, 2), "D": (2, 1), "E": (1, 2)}
GROUPS = ("outlier-se", "outlier-sp", "normal")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "A-N8"
    n_studies: int = 8
    k1: int = 0
    k2: int = 0
    se_normal: float = 0.61
    sp_normal: float = 0.82
    se_out: float = 0.27
    sp_out: float = 0.39
    tau1sq: float = 0.15
    tau2sq: float = 0.10
    rho: float = -0.7
    size_range: tuple = (53, 351)
    prevalence_range: tuple = (0.13, 0.53)
    n_reps: int = 1000
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))
        object.__setattr__(self, "prevalence_range", tuple(float(v) for v in self.prevalence_range))
        if self.n_studies < 2:
            raise SpecError("n_studies must be at least 2")
        if self.k1 < 0 or self.k2 < 0 or self.k1 + self.k2 >= self.n_studies:
            raise SpecError("need k1, k2 >= 0 and k1 + k2 < n_studies")
        for name in ("se_normal", "sp_normal", "se_out", "sp_out"):
            if not 0 < getattr(self, name) < 1:
                raise SpecError(f"{name} must lie in (0, 1)")
        lo, hi = self.prevalence_range
        if not 0 < lo <= hi < 1:
            raise SpecError("prevalence_range must satisfy 0 < lo <= hi < 1")
        if not 1 <= self.size_range[0] <= self.size_range[1]:
            raise SpecError("size_range must satisfy 1 <= lo <= hi")
        if self.tau1sq < 0 or self.tau2sq < 0 or not -1 <= self.rho <= 1:
            raise SpecError("invalid heterogeneity parameters")
        if self.n_reps < 1:
            raise SpecError("n_reps must be positive")

    @property
    def truth(self) -> tuple[float, float]:
        return (self.se_normal, self.sp_normal)

    @property
    def sigma(self) -> np.ndarray:
        c = self.rho * math.sqrt(self.tau1sq * self.tau2sq)
        return np.array([[self.tau1sq, c], [c, self.tau2sq]])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_range"] = list(self.size_range)
        d["prevalence_range"] = list(self.prevalence_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown scenario fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None


def load_specs(path) -> list[ScenarioSpec]:
    """Read one spec object or a list of them from a JSON file."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON: {exc}") from None
    items = raw if isinstance(raw, list) else [raw]
    if not all(isinstance(i, dict) for i in items):
        raise SpecError(f"{path}: expected an object or a list of objects")
    return [ScenarioSpec.from_dict(i) for i in items]


def dump_specs(path, specs) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2) + "\n", encoding="utf-8")


def scenario_catalog(n_reps: int = 1000, seed: int = 20240101, sizes=(8, 12, 16), scenarios="ABCDE") -> list[ScenarioSpec]:
    """The 5 outlier configurations crossed with the study counts (15 settings by default).

    Scenario ``j`` gets seed ``seed + j`` so settings use distinct streams.
    """
    specs = []
    for n in sizes:
        for label in scenarios:
            k1, k2 = SCENARIOS[label]
            specs.append(ScenarioSpec(name=f"{label}-N{n}", n_studies=n, k1=k1, k2=k2, n_reps=n_reps, seed=seed + len(specs)))
    return specs


@dataclass(frozen=True)
class SimStudyTruth:
    theta: tuple
    group: str
    n_total: int
    n_diseased: int


def replicate_rng(spec: ScenarioSpec, rep_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(spec.seed, spawn_key=(int(rep_index),))
    return np.random.Generator(np.random.Philox(ss))


def generate_dataset_with_truth(spec: ScenarioSpec, rep_index: int) -> tuple[list[StudyCounts], list[SimStudyTruth]]:
    """Simulate one meta-analysis.

    The first ``k1`` studies have outlying sensitivity, the next ``k2``
    outlying specificity. Latent logits are bivariate normal around the
    group mean; 2x2 tables follow by binomial sampling.
    """
    rng = replicate_rng(spec, rep_index)
    counts, truths = [], []
    t1, t2 = math.sqrt(spec.tau1sq), math.sqrt(spec.tau2sq)
    factor = np.array([[t1, 0.0], [spec.rho * t2, t2 * math.sqrt(1 - spec.rho**2)]])
    for i in range(spec.n_studies):
        if i < spec.k1:
            group, se, sp = "outlier-se", spec.se_out, spec.sp_normal
        elif i < spec.k1 + spec.k2:
            group, se, sp = "outlier-sp", spec.se_normal, spec.sp_out
        else:
            group, se, sp = "normal", spec.se_normal, spec.sp_normal
        z = rng.standard_normal(2)
        mean = np.array([logit(se), logit(sp)])
        theta = mean + factor @ z
        n_total = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        prevalence = rng.uniform(*spec.prevalence_range)
        n_dis = int(round(prevalence * n_total))
        tp = int(rng.binomial(n_dis, inverse_logit(theta[0])))
        tn = int(rng.binomial(n_total - n_dis, inverse_logit(theta[1])))
        if n_dis < 1 or n_total - n_dis < 1:
            # keep at least one subject per arm so the table is analysable
            n_dis = min(max(n_dis, 1), n_total - 1)
            tp = min(tp, n_dis)
            tn = min(tn, n_total - n_dis)
        counts.append(StudyCounts(str(i + 1), tp, n_dis - tp, n_total - n_dis - tn, tn))
        truths.append(SimStudyTruth((float(theta[0]), float(theta[1])), group, n_total, n_dis))
    return counts, truths


def generate_dataset(spec: ScenarioSpec, rep_index: int) -> list[StudyCounts]:
    return generate_dataset_with_truth(spec, rep_index)[0]


@dataclass(frozen=True)
class MethodOutcome:
    """Probability-scale estimates and intervals of one method on one replicate."""

    method: str
    converged: bool
    estimate: tuple = (float("nan"), float("nan"))
    intervals: dict = field(default_factory=dict)  # kind -> ((lo, hi), (lo, hi))
    alpha: float = float("nan")


def _interval_tuple(cis) -> tuple:
    return tuple((c.lower, c.upper) for c in cis)


def apply_method(method: str, data: StudyData, ml_fit=None, level: float = 0.95, grid=DEFAULT_GRID) -> MethodOutcome:
    n = data.n_studies
    nan = MethodOutcome(method, False)
    try:
        if method in ("BNN-ML", "BNN-REML"):
            fit = ml_fit if (method == "BNN-ML" and ml_fit is not None) else fit_baseline(data, method[4:])
            if not fit.converged:
                return nan
            cov = gls_cov(data, fit.sigma_hat)
            cis = pooled_intervals(fit.mu_hat, cov, n, CI_KINDS, level)
            return MethodOutcome(method, True, (fit.sensitivity, fit.specificity), {k: _interval_tuple(v) for k, v in cis.items()})
        if method in ("BNN-DPD(GES)", "BNN-DPD(H)"):
            init = None if ml_fit is None else (ml_fit.mu_hat, ml_fit.sigma_hat)
            if method == "BNN-DPD(GES)":
                alpha = alpha_ges(2)
                fit = fit_dpd(data, alpha, init=init)
            else:
                tuned = select_alpha(data, grid)
                alpha = tuned.alpha_selected
                fit = tuned.selected_fit
            if fit is None or not fit.converged:
                return nan
            cov = sandwich_cov(data, fit)
            cis = pooled_intervals(fit.mu_hat, cov, n, CI_KINDS, level)
            return MethodOutcome(
                method, True, (fit.sensitivity, fit.specificity), {k: _interval_tuple(v) for k, v in cis.items()}, alpha
            )
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        logger.debug("%s failed: %s", method, exc)
        return nan
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def run_replicate(spec: ScenarioSpec, rep_index: int, methods=DEFAULT_METHODS, level: float = 0.95, grid=DEFAULT_GRID) -> list[MethodOutcome]:
    data = StudyData.from_counts(generate_dataset(spec, rep_index))
    try:
        ml = fit_baseline(data, "ML")
    except (ArithmeticError, ValueError):
        ml = None
    return [apply_method(m, data, ml, level, grid) for m in methods]


def _run_chunk(args):
    spec, reps, methods, level, grid = args
    return [(r, run_replicate(spec, r, methods, level, grid)) for r in reps]


@dataclass(frozen=True)
class EstimandMetrics:
    n_converged: int
    bias: float
    abs_bias: float
    variance: float
    rmse: float
    mcse_bias: float
    coverage: dict
    mean_ci_width: dict
    mcse_coverage: dict
    convergence_rate: float


@dataclass(frozen=True)
class ScenarioMetrics:
    spec: ScenarioSpec
    methods: tuple
    metrics: dict  # (method, estimand) -> EstimandMetrics or None when unavailable
    replicates: tuple = field(default=(), repr=False)  # per replicate: list of MethodOutcome

    def get(self, method: str, estimand: str) -> EstimandMetrics | None:
        return self.metrics[(method, estimand)]

    def estimates(self, method: str) -> np.ndarray:
        """Converged replicate estimates of ``method`` with shape (R, 2); NaN rows for failures."""
        idx = self.methods.index(method)
        return np.array([rep[idx].estimate for rep in self.replicates], dtype=float)

    def tidy_rows(self) -> list[tuple]:
        rows = []
        for method in self.methods:
            for j, est in enumerate(ESTIMANDS):
                m = self.metrics[(method, est)]
                base = (self.spec.name, method, est)
                if m is None:
                    rows.append(base + ("available", 0.0))
                    continue
                rows.append(base + ("n_converged", float(m.n_converged)))
                rows.append(base + ("convergence_rate", m.convergence_rate))
                rows.append(base + ("bias", m.bias))
                rows.append(base + ("abs_bias", m.abs_bias))
                rows.append(base + ("mcse_bias", m.mcse_bias))
                rows.append(base + ("variance", m.variance))
                rows.append(base + ("rmse", m.rmse))
                for kind in CI_KINDS:
                    rows.append(base + (f"coverage_{kind}", m.coverage[kind]))
                    rows.append(base + (f"mcse_coverage_{kind}", m.mcse_coverage[kind]))
                    rows.append(base + (f"mean_ci_width_{kind}", m.mean_ci_width[kind]))
        return rows


def aggregate(spec: ScenarioSpec, methods, replicates) -> ScenarioMetrics:
    """Reduce replicate outcomes (ordered by replicate index) to performance measures."""
    truth = spec.truth
    metrics = {}
    n_reps = len(replicates)
    for mi, method in enumerate(methods):
        outcomes = [rep[mi] for rep in replicates]
        ok = [o for o in outcomes if o.converged]
        for j, est in enumerate(ESTIMANDS):
            if not ok:
                metrics[(method, est)] = None
                continue
            x = np.array([o.estimate[j] for o in ok])
            r = len(x)
            bias = float(np.mean(x) - truth[j])
            variance = float(np.mean((x - np.mean(x)) ** 2))
            rmse = float(np.sqrt(np.mean((x - truth[j]) ** 2)))
            mcse = float(np.std(x, ddof=1) / math.sqrt(r)) if r > 1 else float("nan")
            cov, width, mcse_cov = {}, {}, {}
            for kind in CI_KINDS:
                lo = np.array([o.intervals[kind][j][0] for o in ok])
                hi = np.array([o.intervals[kind][j][1] for o in ok])
                c = float(np.mean((lo <= truth[j]) & (truth[j] <= hi)))
                cov[kind] = c
                width[kind] = float(np.mean(hi - lo))
                mcse_cov[kind] = math.sqrt(c * (1 - c) / r)
            metrics[(method, est)] = EstimandMetrics(
                n_converged=r,
                bias=bias,
                abs_bias=abs(bias),
                variance=variance,
                rmse=rmse,
                mcse_bias=mcse,
                coverage=cov,
                mean_ci_width=width,
                mcse_coverage=mcse_cov,
                convergence_rate=r / n_reps,
            )
    return ScenarioMetrics(spec, tuple(methods), metrics, tuple(replicates))


def run_scenario(spec: ScenarioSpec, methods=DEFAULT_METHODS, jobs: int = 1, level: float = 0.95, grid=DEFAULT_GRID, executor=None) -> ScenarioMetrics:
    """Simulate ``spec.n_reps`` datasets, apply ``methods`` and aggregate.

    Only converged replications enter a method's measures; a method that never
    converges is reported as unavailable.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    reps = list(range(spec.n_reps))
    if jobs <= 1 and executor is None:
        results = _run_chunk((spec, reps, methods, level, grid))
    else:
        n_chunks = max(1, min(len(reps), 4 * max(jobs, 1)))
        chunks = [reps[i::n_chunks] for i in range(n_chunks)]
        args = [(spec, c, methods, level, grid) for c in chunks if c]
        if executor is None:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(_run_chunk, args))
        else:
            parts = list(executor.map(_run_chunk, args))
        results = sorted((item for part in parts for item in part), key=lambda t: t[0])
    return aggregate(spec, methods, [outcomes for _, outcomes in results])


def metrics_csv(results) -> str:
    """Tidy CSV text (``scenario,method,estimand,measure,value``) for a list of ScenarioMetrics."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "method", "estimand", "measure", "value"])
    for res in results:
        for row in res.tidy_rows():
            writer.writerow(list(row[:4]) + [repr(float(row[4]))])
    return buf.getvalue()


def with_reps(specs, n_reps: int | None = None, seed: int | None = None) -> list[ScenarioSpec]:
    out = []
    for i, s in enumerate(specs):
        changes = {}
        if n_reps is not None:
            changes["n_reps"] = n_reps
        if seed is not None:
            changes["seed"] = seed + i
        out.append(replace(s, **changes))
    return out
