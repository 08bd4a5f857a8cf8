"""Data-generating processes and the Monte Carlo benchmark runner.

Two scenario families are built in:

* ``S1``: sparse linear/logistic truth with decaying coefficient patterns;
  the misspecified variants replace the first covariate's linear term by its
  square (no intercept, no signal scaling) in the respective model. The
  target mean is 1 in every variant.
* ``S2``: the classic four-covariate design with outcome level 210; the
  misspecified variants generate from models additive in the transformed
  covariates ``M1 = exp(X1/2)``, ``M2 = X2/(1+exp(X1)) + 10``,
  ``M3 = (X1*X3/25 + 0.6)^3`` and ``X4``. The target mean for the
  misspecified outcome model is computed once by a 10^7-draw Monte Carlo
  oracle and cached.

Replication ``r`` of a run draws from the RNG stream keyed by
``(seed, r)``, so the runner is order-independent and parallelizable with
bit-identical output. Within a replication, covariates, treatments and
outcomes use three separate child streams; datasets therefore nest across
sample sizes (the first ``n`` rows at a larger ``n'`` are identical),
which stabilises sample-size sweeps.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .dataset import Dataset
from .errors import ConfigError, DimensionError
from .estimators import ALL_TAGS, DEFAULT_ROSTER, estimate_suite

_MU0_ORACLE_DRAWS = 10_000_000
_MU0_ORACLE_SEED = 202406  # fixed stream so the cached oracle value is reproducible
_MU0_CACHE: Dict[Tuple[str, bool], float] = {}

VALID_SCENARIOS = ("S1", "S2")


@dataclass
class ScenarioSpec:
    """Fully parameterized simulation cell."""

    scenario: str
    n: int
    p: int
    correlated: bool
    or_correct: bool
    ps_correct: bool
    reps: int
    seed: int
    c_signal: float = 0.75

    def __post_init__(self) -> None:
        if self.scenario not in VALID_SCENARIOS:
            raise ConfigError(f"scenario must be one of {VALID_SCENARIOS}, got {self.scenario!r}")
        if self.scenario == "S1" and self.p < 15:
            raise DimensionError("scenario S1 requires p >= 15 (signal support spans 15 covariates)")
        if self.scenario == "S2" and self.p < 4:
            raise DimensionError("scenario S2 requires p >= 4")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.n < 2:
            raise ConfigError("n must be at least 2")

    def cell_name(self) -> str:
        return (
            f"{self.scenario}_{'corr' if self.correlated else 'uncorr'}"
            f"_OR{'correct' if self.or_correct else 'incorrect'}"
            f"_PS{'correct' if self.ps_correct else 'incorrect'}"
            f"_n{self.n}_p{self.p}"
        )


@dataclass
class TrueModel:
    """True conditional mean, true propensity, and the implied target mean."""

    m0: Callable[[np.ndarray], np.ndarray]
    pi0: Callable[[np.ndarray], np.ndarray]
    mu0: float


def ar1_covariance(p: int, rho: float = 0.5) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gen_covariates(n: int, p: int, correlated: bool, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero multivariate normal rows; identity covariance, or AR(1) with
    decay 0.5 generated through its Cholesky factor."""
    z = rng.standard_normal((n, p))
    if not correlated or p < 2:
        return z
    chol = np.linalg.cholesky(ar1_covariance(p))
    return z @ chol.T


def _s1_coefficients(p: int) -> Tuple[np.ndarray, np.ndarray]:
    """Outcome pattern b and propensity pattern g for scenario S1 (length p)."""
    b = np.zeros(p)
    b[0:5] = 1.0 / np.arange(1, 6)
    b[10:15] = 1.0 / np.arange(1, 6)
    g = np.zeros(p)
    g[0:10] = 1.0 / np.arange(1, 11)
    return b, g


def scenario1_model(spec: ScenarioSpec) -> TrueModel:
    """Sparse linear/logistic truth; target mean is 1 in all variants.

    Correct outcome: ``m0 = 1 + c * b.x``; misspecified: ``m0 = x1^2 +
    c * b[2:].x[2:]`` (the squared term replaces the leading linear one, the
    signal scale stays; its mean is E[x1^2] = 1 since covariates have unit
    variance in both correlation settings). Correct propensity:
    ``expit(g.x)``; misspecified: ``expit(x1^2 + g[2:].x[2:])``.
    """
    if spec.p < 15:
        raise DimensionError("scenario S1 requires p >= 15")
    b, g = _s1_coefficients(spec.p)
    c = spec.c_signal

    if spec.or_correct:
        def m0(x: np.ndarray) -> np.ndarray:
            return 1.0 + c * (x @ b)
    else:
        def m0(x: np.ndarray) -> np.ndarray:
            return x[:, 0] ** 2 + c * (x[:, 1:] @ b[1:])

    if spec.ps_correct:
        def pi0(x: np.ndarray) -> np.ndarray:
            return expit(x @ g)
    else:
        def pi0(x: np.ndarray) -> np.ndarray:
            return expit(x[:, 0] ** 2 + x[:, 1:] @ g[1:])

    return TrueModel(m0, pi0, 1.0)


_S2_OUTCOME = np.array([27.4, 13.7, 13.7, 13.7])
_S2_PROPENSITY = np.array([-1.0, 0.5, -0.25, -0.1])


def _s2_features(x: np.ndarray, transformed: bool) -> np.ndarray:
    """First four covariates, or their misspecification transforms
    ``(M1, M2, M3, X4)``."""
    if not transformed:
        return x[:, :4]
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    return np.column_stack(
        [
            np.exp(x1 / 2.0),
            x2 / (1.0 + np.exp(x1)) + 10.0,
            (x1 * x3 / 25.0 + 0.6) ** 3,
            x4,
        ]
    )


def _s2_misspecified_mu0(correlated: bool) -> float:
    """Target mean of the transformed-covariate outcome model, by a cached
    10^7-draw Monte Carlo oracle with a fixed internal stream."""
    key = ("S2", correlated)
    if key not in _MU0_CACHE:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=_MU0_ORACLE_SEED, spawn_key=(int(correlated),))
        )
        total = 0.0
        chunk = 1_000_000
        for _ in range(_MU0_ORACLE_DRAWS // chunk):
            x = gen_covariates(chunk, 4, correlated, rng)
            total += float(np.sum(210.0 + _s2_features(x, True) @ _S2_OUTCOME))
        _MU0_CACHE[key] = total / _MU0_ORACLE_DRAWS
    return _MU0_CACHE[key]


def scenario2_model(spec: ScenarioSpec) -> TrueModel:
    """Four-covariate design with outcome level 210.

    Misspecified variants generate from the same coefficient vectors applied
    additively to the transformed covariates; the outcome target is then the
    Monte Carlo oracle mean of the transformed model.
    """
    if spec.p < 4:
        raise DimensionError("scenario S2 requires p >= 4")

    or_transformed = not spec.or_correct
    ps_transformed = not spec.ps_correct

    def m0(x: np.ndarray) -> np.ndarray:
        return 210.0 + _s2_features(x, or_transformed) @ _S2_OUTCOME

    def pi0(x: np.ndarray) -> np.ndarray:
        return expit(_s2_features(x, ps_transformed) @ _S2_PROPENSITY)

    mu0 = 210.0 if spec.or_correct else _s2_misspecified_mu0(spec.correlated)
    return TrueModel(m0, pi0, mu0)


def build_model(spec: ScenarioSpec) -> TrueModel:
    return scenario1_model(spec) if spec.scenario == "S1" else scenario2_model(spec)


def draw_dataset(
    model: TrueModel, n: int, p: int, correlated: bool, rng: np.random.Generator
) -> Dataset:
    """Draw one dataset: covariates, Bernoulli treatments, unit-variance
    normal outcomes around the true conditional mean (same conditional law for
    every unit, so the outcome mean matches the stated targets).

    Covariates, treatments and outcomes use three separate child streams of
    ``rng``; with a fixed seed the first ``n`` rows of a larger draw coincide
    with the smaller draw.
    """
    rng_x, rng_a, rng_y = rng.spawn(3)
    x = gen_covariates(n, p, correlated, rng_x)
    a = (rng_a.random(n) < model.pi0(x)).astype(float)
    y = model.m0(x) + rng_y.standard_normal(n)
    return Dataset(y, a, x)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    """Monte Carlo summary for one estimator."""

    bias: float
    rmse: float
    mae: float
    mcsd: float
    asse: float
    cov: float
    n_failed: int = 0


@dataclass
class MetricsTable:
    """Per-estimator metrics for one simulation cell."""

    rows: Dict[str, MetricsRow]
    mu0: float
    spec: Optional[ScenarioSpec] = None

    def to_csv_text(self) -> str:
        lines = ["estimator,bias,rmse,mae,mcsd,asse,cov,n_failed"]
        for tag in sorted(self.rows):
            r = self.rows[tag]
            vals = ",".join(format(v, ".17g") for v in (r.bias, r.rmse, r.mae, r.mcsd, r.asse, r.cov))
            lines.append(f"{tag},{vals},{r.n_failed}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv_text())


def compute_metrics(
    estimates: Sequence[float],
    ses: Sequence[float],
    ci_hits: Sequence[bool],
    mu0: float,
) -> MetricsRow:
    """Standard Monte Carlo metrics.

    bias = mean(est) - mu0; rmse = sqrt(mean((est - mu0)^2)); mae is the lower
    median of absolute errors; mcsd uses divisor R-1 (0 for a single
    replication); asse = mean(se); cov = mean(ci_hits).
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("need at least one estimate")
    err = est - mu0
    bias = float(np.mean(err))
    rmse = float(np.sqrt(np.mean(err**2)))
    abs_sorted = np.sort(np.abs(err))
    mae = float(abs_sorted[(est.size - 1) // 2])
    mcsd = float(np.std(est, ddof=1)) if est.size > 1 else 0.0
    asse = float(np.mean(np.asarray(ses, dtype=float)))
    cov = float(np.mean(np.asarray(ci_hits, dtype=float)))
    return MetricsRow(bias, rmse, mae, mcsd, asse, cov)


# ---------------------------------------------------------------------------
# Monte Carlo runner
# ---------------------------------------------------------------------------


def _replicate(args: Tuple[ScenarioSpec, Tuple[str, ...], int]):
    """One replication: draw, run the suite, return compact per-tag records."""
    spec, tags, r = args
    model = build_model(spec)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(r,)))
    data = draw_dataset(model, spec.n, spec.p, spec.correlated, rng)
    suite = estimate_suite(data, tags)
    out = {}
    for tag, entry in suite.items():
        if entry.ok:
            res = entry.result
            out[tag] = ("ok", res.mu_hat, res.se, res.ci[0], res.ci[1])
        else:
            out[tag] = ("skipped" if entry.skipped else "error", entry.error)
    return r, out


def run_monte_carlo(
    spec: ScenarioSpec,
    estimators: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> MetricsTable:
    """Run ``spec.reps`` replications and aggregate per-estimator metrics.

    Replications where an estimator fails (or is skipped) are excluded from
    that estimator's metrics and counted in ``n_failed``. Aggregation folds in
    replication-index order, so parallel and serial execution produce
    identical tables.
    """
    tags = tuple(estimators) if estimators is not None else DEFAULT_ROSTER
    unknown = [t for t in tags if t not in ALL_TAGS]
    if unknown:
        raise ConfigError(f"unknown estimator tag(s) {unknown}; valid tags: {', '.join(ALL_TAGS)}")
    model = build_model(spec)  # also populates the mu0 oracle cache before forking
    mu0 = model.mu0
    jobs = [(spec, tags, r) for r in range(spec.reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, spec.reps // (8 * n_jobs))))
    else:
        results = [_replicate(j) for j in jobs]
    results.sort(key=lambda item: item[0])

    collected: Dict[str, Dict[str, list]] = {
        tag: {"mu": [], "se": [], "hit": [], "failed": 0} for tag in tags
    }
    for _, recs in results:
        for tag in tags:
            rec = recs[tag]
            if rec[0] == "ok":
                _, mu, se, lo, hi = rec
                collected[tag]["mu"].append(mu)
                collected[tag]["se"].append(se)
                collected[tag]["hit"].append(lo <= mu0 <= hi)
            else:
                collected[tag]["failed"] += 1

    rows: Dict[str, MetricsRow] = {}
    for tag in tags:
        c = collected[tag]
        if c["mu"]:
            row = compute_metrics(c["mu"], c["se"], c["hit"], mu0)
            row.n_failed = c["failed"]
        else:
            row = MetricsRow(math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, c["failed"])
        rows[tag] = row
    return MetricsTable(rows, mu0, spec)


# ---------------------------------------------------------------------------
# plain-text configuration files
# ---------------------------------------------------------------------------

CONFIG_KEYS = (
    "scenario",
    "n",
    "p",
    "correlated",
    "or_correct",
    "ps_correct",
    "reps",
    "seed",
    "estimators",
)
_SWEEP_KEYS = ("scenario", "n", "p", "correlated", "or_correct", "ps_correct")


def _parse_bool(token: str, key: str) -> bool:
    t = token.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"cannot parse boolean value {token!r} for key {key!r}")


def _parse_int(token: str, key: str) -> int:
    try:
        return int(token.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer value {token!r} for key {key!r}") from exc


def parse_config_text(text: str) -> List[Tuple[ScenarioSpec, Tuple[str, ...]]]:
    """Parse a key-value config into one or more simulation cells.

    Keys: scenario, n, p, correlated, or_correct, ps_correct, reps, seed,
    estimators. The first six accept comma-separated lists and expand to the
    cross product of cells; reps and seed are single values; estimators is a
    comma-separated tag list defaulting to the full roster.
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val.strip()

    missing = [k for k in CONFIG_KEYS if k not in values and k != "estimators"]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")

    if "estimators" in values:
        tags = tuple(t.strip() for t in values["estimators"].split(",") if t.strip())
        unknown = [t for t in tags if t not in ALL_TAGS]
        if unknown:
            raise ConfigError(
                f"unknown estimator tag(s) {unknown}; valid tags: {', '.join(ALL_TAGS)}"
            )
    else:
        tags = DEFAULT_ROSTER

    reps = _parse_int(values["reps"], "reps")
    seed = _parse_int(values["seed"], "seed")

    lists: Dict[str, list] = {}
    for key in _SWEEP_KEYS:
        tokens = [t.strip() for t in values[key].split(",") if t.strip()]
        if not tokens:
            raise ConfigError(f"empty value for key {key!r}")
        if key == "scenario":
            for t in tokens:
                if t not in VALID_SCENARIOS:
                    raise ConfigError(f"scenario must be one of {VALID_SCENARIOS}, got {t!r}")
            lists[key] = tokens
        elif key in ("n", "p"):
            lists[key] = [_parse_int(t, key) for t in tokens]
        else:
            lists[key] = [_parse_bool(t, key) for t in tokens]

    cells: List[Tuple[ScenarioSpec, Tuple[str, ...]]] = []
    for scenario in lists["scenario"]:
        for n in lists["n"]:
            for p in lists["p"]:
                for corr in lists["correlated"]:
                    for oc in lists["or_correct"]:
                        for pc in lists["ps_correct"]:
                            cells.append(
                                (
                                    ScenarioSpec(scenario, n, p, corr, oc, pc, reps, seed),
                                    tags,
                                )
                            )
    return cells


def parse_config(path) -> List[Tuple[ScenarioSpec, Tuple[str, ...]]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def serialize_config(spec: ScenarioSpec, estimators: Sequence[str]) -> str:
    """Render a single simulation cell back into the key-value format."""
    return "\n".join(
        [
            f"scenario = {spec.scenario}",
            f"n = {spec.n}",
            f"p = {spec.p}",
            f"correlated = {str(spec.correlated).lower()}",
            f"or_correct = {str(spec.or_correct).lower()}",
            f"ps_correct = {str(spec.ps_correct).lower()}",
            f"reps = {spec.reps}",
            f"seed = {spec.seed}",
            f"estimators = {','.join(estimators)}",
        ]
    ) + "\n"
