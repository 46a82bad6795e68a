"""Paired statistical testing suite for estimator comparisons.

Implements the full campaign protocol: paired two-sided t-test, Wilcoxon
signed-rank (exact by enumeration for small n, normal approximation with tie
and continuity corrections otherwise), paired Cohen's d, percentile bootstrap
confidence intervals, the Friedman rank test with tie correction, and the
Nemenyi critical-difference post-hoc.

The t and chi-square tail probabilities are computed from scratch via the
regularized incomplete beta / gamma functions (series plus continued-fraction
evaluation, Lentz's method) to double precision; no statistics library is
involved.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

_EPS = 1e-15
_FPMIN = 1e-300
_MAX_ITER = 500


# ── Special functions ────────────────────────────────────────────────

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's algorithm)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # continued fraction converges fast on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _gamma_p_series(a: float, x: float) -> float:
    ap = a
    s = 1.0 / a
    term = s
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        s += term
        if abs(term) < abs(s) * _EPS:
            break
    return s * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_lower_reg(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x); series below a+1, upper
    continued fraction above.  Each tail is evaluated on its accurate side."""
    if x < 0 or a <= 0:
        raise ValueError("invalid arguments")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_contfrac(a, x)


def gammainc_upper_reg(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x), accurate in both tails."""
    if x < 0 or a <= 0:
        raise ValueError("invalid arguments")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def t_sf(t: float, df: float) -> float:
    """Upper-tail P(T > t) of Student's t with df degrees of freedom."""
    x = df / (df + t * t)
    p = 0.5 * betainc_reg(df / 2.0, 0.5, x)
    return p if t >= 0 else 1.0 - p


def t_cdf(t: float, df: float) -> float:
    return 1.0 - t_sf(t, df)


def chi2_sf(x: float, df: float) -> float:
    """Upper-tail P(X > x) of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return gammainc_upper_reg(df / 2.0, x / 2.0)


def chi2_cdf(x: float, df: float) -> float:
    if x <= 0:
        return 0.0
    return gammainc_lower_reg(df / 2.0, x / 2.0)


def norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ── Paired tests ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    degenerate: bool = False
    exact: bool | None = None   # Wilcoxon only


@dataclass(frozen=True)
class StatReport:
    n: int
    mean_diff: float
    t_stat: float
    t_p: float
    wilcoxon_w: float
    wilcoxon_p: float
    wilcoxon_exact: bool
    cohens_d: float
    ci_lo: float
    ci_hi: float
    ci_level: float
    ci_resamples: int


def _as_diff(sample) -> np.ndarray:
    d = np.asarray(sample, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("sample must be a non-empty 1-d array")
    if not np.all(np.isfinite(d)):
        raise ValueError("sample must be finite")
    return d


def paired_t(sample) -> TestResult:
    """Two-sided paired t-test on a vector of per-pair differences."""
    d = _as_diff(sample)
    n = d.size
    if n < 2:
        raise ValueError("need at least 2 differences")
    sd = d.std(ddof=1)
    if sd == 0.0:
        # all differences identical: no variance to test against
        return TestResult(statistic=0.0 if d[0] == 0 else math.copysign(math.inf, d[0]),
                          p_value=1.0 if d[0] == 0 else 0.0, degenerate=True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = 2.0 * t_sf(abs(t), n - 1)
    return TestResult(statistic=t, p_value=min(p, 1.0))


WILCOXON_EXACT_MAX = 12


def _signed_ranks(d: np.ndarray):
    d = d[d != 0.0]
    if d.size == 0:
        return None, None
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(d.size)
    sorted_abs = absd[order]
    i = 0
    while i < d.size:
        j = i
        while j + 1 < d.size and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # mid-rank
        i = j + 1
    return d, ranks


def wilcoxon_signed_rank(sample) -> TestResult:
    """Two-sided Wilcoxon signed-rank test; W is the positive-rank sum.

    Zeros are dropped and ties mid-ranked.  For n <= 12 the null
    distribution of W is built exactly over all 2^n sign assignments
    (conditional on the observed ranks, via convolution); beyond that a
    normal approximation with tie and continuity corrections is used.
    """
    d, ranks = _signed_ranks(_as_diff(sample))
    if d is None:
        return TestResult(statistic=0.0, p_value=1.0, degenerate=True,
                          exact=True)
    n = d.size
    w_pos = float(ranks[d > 0].sum())
    mu = ranks.sum() / 2.0
    if n <= WILCOXON_EXACT_MAX:
        # exact: distribution of W+ over all sign vectors, by convolution on
        # a half-rank integer lattice (mid-ranks are multiples of 1/2)
        scale = 2
        total = int(round(ranks.sum() * scale))
        dist = np.zeros(total + 1)
        dist[0] = 1.0
        for r in ranks:
            ri = int(round(r * scale))
            new = dist.copy()
            new[ri:] += dist[:total + 1 - ri]
            dist = new
        dist /= dist.sum()
        w_idx = int(round(w_pos * scale))
        mu_idx = total / 2.0
        dev = abs(w_idx - mu_idx)
        support = np.arange(total + 1)
        p = float(dist[np.abs(support - mu_idx) >= dev - 1e-9].sum())
        return TestResult(statistic=w_pos, p_value=min(p, 1.0), exact=True)
    var = (ranks ** 2).sum() / 4.0   # tie-corrected: sum of squared ranks
    if var == 0.0:
        return TestResult(statistic=w_pos, p_value=1.0, degenerate=True,
                          exact=False)
    z = (abs(w_pos - mu) - 0.5) / math.sqrt(var)   # continuity correction
    p = 2.0 * norm_sf(max(z, 0.0))
    return TestResult(statistic=w_pos, p_value=min(p, 1.0), exact=False)


def cohens_d(sample) -> float:
    """Paired-design effect size: mean of differences over their sd (n-1)."""
    d = _as_diff(sample)
    if d.size < 2:
        raise ValueError("need at least 2 differences")
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0 if d.mean() == 0 else math.copysign(math.inf, d.mean())
    return float(d.mean() / sd)


def bootstrap_ci(sample, statistic=np.mean, level: float = 0.95,
                 resamples: int = 5000, seed: int = 0):
    """Percentile bootstrap interval; deterministic per seed (counter-based
    generator so resamples could be drawn independently in parallel)."""
    d = _as_diff(sample)
    if d.size < 2:
        raise ValueError("need at least 2 observations")
    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    stats = np.asarray(statistic(d[idx], axis=1), dtype=float)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def stat_report(sample, level: float = 0.95, resamples: int = 5000,
                seed: int = 0) -> StatReport:
    """Full per-comparison report used by the campaign summarizer."""
    d = _as_diff(sample)
    t = paired_t(d)
    w = wilcoxon_signed_rank(d)
    lo, hi = bootstrap_ci(d, level=level, resamples=resamples, seed=seed)
    return StatReport(n=d.size, mean_diff=float(d.mean()), t_stat=t.statistic,
                      t_p=t.p_value, wilcoxon_w=w.statistic,
                      wilcoxon_p=w.p_value, wilcoxon_exact=bool(w.exact),
                      cohens_d=cohens_d(d), ci_lo=lo, ci_hi=hi,
                      ci_level=level, ci_resamples=resamples)


def format_report(name: str, rep: StatReport) -> str:
    lines = [
        f"test: {name}",
        f"n: {rep.n}",
        f"mean_diff: {rep.mean_diff:.6g}",
        f"t: {rep.t_stat:.6g}  p: {rep.t_p:.6g}",
        f"wilcoxon_w: {rep.wilcoxon_w:.6g}  p: {rep.wilcoxon_p:.6g}"
        f"  exact: {rep.wilcoxon_exact}",
        f"cohens_d: {rep.cohens_d:.6g}",
        f"ci{int(rep.ci_level * 100)}: [{rep.ci_lo:.6g}, {rep.ci_hi:.6g}]"
        f"  resamples: {rep.ci_resamples}",
    ]
    return "\n".join(lines) + "\n"


# ── Rank tests ───────────────────────────────────────────────────────

def rank_matrix(outcomes: np.ndarray) -> np.ndarray:
    """Per-block mid-ranks (1 = best i.e. smallest outcome) of an
    n-blocks x k-models outcome matrix."""
    outcomes = np.asarray(outcomes, dtype=float)
    n, k = outcomes.shape
    ranks = np.empty((n, k))
    for i in range(n):
        row = outcomes[i]
        order = np.argsort(row, kind="stable")
        r = np.empty(k)
        j = 0
        while j < k:
            m = j
            while m + 1 < k and row[order[m + 1]] == row[order[j]]:
                m += 1
            r[order[j:m + 1]] = 0.5 * (j + m) + 1.0
            j = m + 1
        ranks[i] = r
    return ranks


def friedman(outcomes: np.ndarray) -> TestResult:
    """Friedman chi-square over n blocks and k models, with tie correction."""
    outcomes = np.asarray(outcomes, dtype=float)
    n, k = outcomes.shape
    if n < 2 or k < 2:
        raise ValueError("need at least 2 blocks and 2 models")
    ranks = rank_matrix(outcomes)
    rbar = ranks.mean(axis=0)
    chi2 = 12.0 * n / (k * (k + 1)) * float(((rbar - (k + 1) / 2.0) ** 2).sum())
    # tie correction: deflate by 1 - sum(t^3 - t) / (n k (k^2 - 1))
    tie_sum = 0.0
    for i in range(n):
        _, counts = np.unique(outcomes[i], return_counts=True)
        tie_sum += float((counts ** 3 - counts).sum())
    denom = 1.0 - tie_sum / (n * k * (k * k - 1))
    if denom <= 0.0:
        return TestResult(statistic=0.0, p_value=1.0, degenerate=True)
    chi2 /= denom
    return TestResult(statistic=chi2, p_value=chi2_sf(chi2, k - 1))


_q_table = None


def _load_q_table():
    global _q_table
    if _q_table is not None:
        return _q_table
    text = resources.files("pstnet.data").joinpath(
        "studentized_range.txt").read_text()
    lines = text.splitlines()
    if not lines[0].startswith("# studentized-range v"):
        raise RuntimeError("q-table fixture: missing version header")
    expected = lines[1].split(":", 1)[1].strip()
    body = "\n".join(lines[2:]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != expected:
        raise RuntimeError("q-table fixture: checksum mismatch")
    table = {}
    for line in lines[2:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, alpha, q = line.split()
        table[(int(k), float(alpha))] = float(q)
    _q_table = table
    return table


@dataclass(frozen=True)
class NemenyiResult:
    critical_difference: float
    mean_ranks: np.ndarray
    significant: np.ndarray   # k x k boolean pairwise matrix


def nemenyi(outcomes: np.ndarray, alpha: float = 0.05) -> NemenyiResult:
    """Pairwise critical-difference post-hoc on mean ranks.

    CD = q_alpha(k) * sqrt(k (k+1) / (6 n)); models i, j differ when their
    mean ranks are more than CD apart.  Supported for k <= 10 via the fixture
    quantile table.
    """
    outcomes = np.asarray(outcomes, dtype=float)
    n, k = outcomes.shape
    table = _load_q_table()
    if (k, alpha) not in table:
        raise ValueError(f"no studentized-range quantile for k={k}, "
                         f"alpha={alpha} (k <= 10, alpha in 0.05/0.01)")
    q = table[(k, alpha)]
    cd = q * math.sqrt(k * (k + 1) / (6.0 * n))
    rbar = rank_matrix(outcomes).mean(axis=0)
    sig = np.abs(rbar[:, None] - rbar[None, :]) > cd
    np.fill_diagonal(sig, False)
    return NemenyiResult(critical_difference=float(cd), mean_ranks=rbar,
                         significant=sig)
