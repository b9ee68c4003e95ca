"""Analysis instruments for trained networks: representation dimensionality
via the participation ratio of the hidden-activity covariance, and
loss-landscape flatness via Hessian trace and spectrum estimates.  Also the
multi-run distribution statistics behind violin/box plots and 2-D density
tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DEFAULT_EPS_ZERO_REL = 1e-3
HESSIAN_PARAM_CAP = 6000


class DegenerateActivityError(ValueError):
    """Activity matrix carries no variance at all."""


class CapExceededError(ValueError):
    """Too many parameters for an exact Hessian; use the estimators."""


# ---------------------------------------------------------------------------
# Participation ratio.

@dataclass
class CovarianceSummary:
    """Spectrum of the neuron-by-neuron activity covariance.

    ``ratio`` is (tr C)^2 / tr C^2, the effective number of variance
    dimensions; ``normalized`` divides by the neuron count.
    """

    eigenvalues: np.ndarray  # descending
    trace: float
    ratio: float
    normalized: float

    @property
    def n_neurons(self) -> int:
        return self.eigenvalues.size


def participation_ratio(activity: np.ndarray) -> CovarianceSummary:
    """Center each neuron's activity over inputs, form C = X X^T / M, and
    summarize how evenly its eigenvalues spread."""
    X = np.asarray(activity, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"activity must be (neurons, inputs), got shape {X.shape}")
    n, m = X.shape
    if n < 1 or m < 2:
        raise ValueError("need at least one neuron and two inputs")
    Xc = X - X.mean(axis=1, keepdims=True)
    C = (Xc @ Xc.T) / m
    C = 0.5 * (C + C.T)
    eig = np.linalg.eigvalsh(C)[::-1]
    sum_sq = float((eig * eig).sum())
    if sum_sq == 0.0:
        raise DegenerateActivityError("activity matrix is constant; covariance is zero")
    trace = float(eig.sum())
    ratio = trace * trace / sum_sq
    return CovarianceSummary(eigenvalues=eig, trace=trace, ratio=ratio, normalized=ratio / n)


# ---------------------------------------------------------------------------
# Hessian instruments.

def near_zero_fraction(eigenvalues, eps_zero: float = None, weights=None) -> float:
    """Fraction of spectral mass with |eigenvalue| below the threshold.

    The default threshold is relative, 1e-3 * max|eigenvalue|, so the
    measure survives loss rescaling.
    """
    eig = np.asarray(eigenvalues, dtype=np.float64)
    if eig.size == 0:
        return 0.0
    if eps_zero is None:
        top = np.abs(eig).max()
        if top == 0.0:
            return 1.0
        eps_zero = DEFAULT_EPS_ZERO_REL * top
    mask = np.abs(eig) < eps_zero
    if weights is None:
        return float(mask.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float(w[mask].sum() / w.sum())


@dataclass
class HessianSummary:
    """Trace, eigenvalue sample, and near-zero fraction of a loss Hessian."""

    trace: float
    eigenvalues: np.ndarray
    f_near_zero: float
    eps_zero: float
    method: str
    n_params: int
    trace_stderr: float = 0.0
    breakdown: bool = False


def hessian_matrix(lossfn, params) -> np.ndarray:
    """Assemble H column by column from Hessian-vector products on basis
    vectors.  Not symmetrized; callers can measure the numerical asymmetry."""
    params = list(params)
    n = ad.flatten_params(params).size
    H = np.empty((n, n))
    basis = np.zeros(n)
    for i in range(n):
        basis[i] = 1.0
        H[:, i] = ad.hessian_vector_product(lossfn, params, basis)
        basis[i] = 0.0
    return H


def hessian_exact(lossfn, params, cap: int = HESSIAN_PARAM_CAP,
                  eps_zero: float = None) -> HessianSummary:
    """Dense symmetric eigendecomposition of the assembled Hessian."""
    params = list(params)
    n = ad.flatten_params(params).size
    if n > cap:
        raise CapExceededError(
            f"{n} parameters exceed the exact-Hessian cap ({cap}); "
            "use hessian_trace_hutchinson / spectrum_lanczos")
    H = hessian_matrix(lossfn, params)
    H = 0.5 * (H + H.T)
    eig = np.linalg.eigvalsh(H)[::-1]
    top = np.abs(eig).max(initial=0.0)
    eps = DEFAULT_EPS_ZERO_REL * top if eps_zero is None else eps_zero
    return HessianSummary(
        trace=float(np.trace(H)),
        eigenvalues=eig,
        f_near_zero=near_zero_fraction(eig, eps),
        eps_zero=eps,
        method="exact",
        n_params=n,
    )


@dataclass
class TraceEstimate:
    value: float
    stderr: float
    n_probes: int


def hutchinson_trace(matvec, dim: int, n_probes: int, seed=0) -> TraceEstimate:
    """Mean of z^T A z over Rademacher probe vectors z, with standard error."""
    if n_probes < 2:
        raise ValueError("need at least two probes for a standard error")
    rng = np.random.default_rng(seed)
    samples = np.empty(n_probes)
    for i in range(n_probes):
        z = rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
        samples[i] = z @ matvec(z)
    return TraceEstimate(
        value=float(samples.mean()),
        stderr=float(samples.std(ddof=1) / np.sqrt(n_probes)),
        n_probes=n_probes,
    )


def hessian_trace_hutchinson(lossfn, params, n_probes: int = 200, seed=0) -> TraceEstimate:
    params = list(params)
    n = ad.flatten_params(params).size
    return hutchinson_trace(lambda z: ad.hessian_vector_product(lossfn, params, z),
                            n, n_probes, seed)


@dataclass
class LanczosResult:
    """Ritz values with their quadrature weights from one Lanczos run."""

    ritz_values: np.ndarray  # descending
    weights: np.ndarray      # matching spectral weights, sum to 1
    f_near_zero: float
    eps_zero: float
    breakdown: bool = False


def lanczos(matvec, dim: int, k: int, seed=0, eps_zero: float = None) -> LanczosResult:
    """k-step Lanczos with full reorthogonalization on a symmetric operator.

    Ritz values approximate the extreme spectrum; the squared first
    components of the tridiagonal eigenvectors weight each Ritz value's
    share of the spectral density seen by the start vector.
    """
    if not 1 <= k <= dim:
        raise ValueError(f"need 1 <= k <= dim, got k={k}, dim={dim}")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    Q = np.empty((k, dim))
    Q[0] = q
    alphas, betas = [], []
    breakdown = False
    w = matvec(q)
    alphas.append(float(q @ w))
    w = w - alphas[0] * q
    for j in range(1, k):
        for _ in range(2):  # full reorthogonalization, twice for safety
            w = w - Q[:j].T @ (Q[:j] @ w)
        beta = float(np.linalg.norm(w))
        if beta < 1e-12:
            breakdown = True
            break
        q = w / beta
        Q[j] = q
        betas.append(beta)
        w = matvec(q)
        alphas.append(float(q @ w))
        w = w - alphas[-1] * q - beta * Q[j - 1]

    steps = len(alphas)
    T = np.diag(alphas)
    if betas:
        T += np.diag(betas, 1) + np.diag(betas, -1)
    evals, evecs = np.linalg.eigh(T)
    order = np.argsort(evals)[::-1]
    ritz = evals[order]
    weights = evecs[0, order] ** 2
    top = np.abs(ritz).max(initial=0.0)
    eps = DEFAULT_EPS_ZERO_REL * top if eps_zero is None else eps_zero
    return LanczosResult(
        ritz_values=ritz,
        weights=weights,
        f_near_zero=near_zero_fraction(ritz, eps, weights=weights),
        eps_zero=eps,
        breakdown=breakdown or steps < k,
    )


def spectrum_lanczos(lossfn, params, k: int, seed=0, eps_zero: float = None) -> LanczosResult:
    params = list(params)
    n = ad.flatten_params(params).size
    return lanczos(lambda z: ad.hessian_vector_product(lossfn, params, z),
                   n, k, seed, eps_zero)


# ---------------------------------------------------------------------------
# Multi-run aggregation.

@dataclass
class RunRecord:
    """Outcome of one seeded training run, keyed by a configuration fingerprint."""

    seed: int
    fingerprint: str
    variant: str
    metric: float  # validation accuracy or loss
    replicate: int = 0
    width: int = 0
    ratio: float = float("nan")
    normalized_ratio: float = float("nan")
    hessian_trace: float = float("nan")
    hessian_trace_stderr: float = float("nan")
    f_near_zero: float = float("nan")
    status: str = "ok"


@dataclass
class GroupStats:
    fingerprint: str
    variant: str
    count: int
    mean: float
    median: float
    q1: float
    q3: float
    lo: float
    hi: float
    outliers: list = field(default_factory=list)


def _stats_for(values, fingerprint, variant) -> GroupStats:
    vals = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    iqr = q3 - q1
    fence_lo, fence_hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = sorted(float(v) for v in vals if v < fence_lo or v > fence_hi)
    return GroupStats(
        fingerprint=fingerprint, variant=variant, count=vals.size,
        mean=float(vals.mean()), median=float(med), q1=float(q1), q3=float(q3),
        lo=float(vals.min()), hi=float(vals.max()), outliers=outliers,
    )


def aggregate_runs(records, value=lambda r: r.metric) -> dict:
    """Group successful records by fingerprint; per group report count, mean,
    median, quartiles, extent, and 1.5*IQR outliers."""
    groups = {}
    for rec in records:
        if rec.status != "ok":
            continue
        groups.setdefault(rec.fingerprint, []).append(rec)
    out = {}
    for fp, recs in groups.items():
        out[fp] = _stats_for([value(r) for r in recs], fp, recs[0].variant)
    return out


@dataclass
class Hist2D:
    a_edges: np.ndarray
    r_edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray


def histogram_2d(records, bins: int = 20, a_range=None, r_range=(0.0, 1.0)) -> Hist2D:
    """Joint density over (metric, normalized participation ratio)."""
    ok = [r for r in records if r.status == "ok" and np.isfinite(r.normalized_ratio)]
    if not ok:
        raise ValueError("no records with participation ratios to bin")
    a_vals = np.array([r.metric for r in ok])
    r_vals = np.array([r.normalized_ratio for r in ok])
    if a_range is None:
        a_range = (float(a_vals.min()), float(max(a_vals.max(), a_vals.min() + 1e-12)))
    counts, a_edges, r_edges = np.histogram2d(
        a_vals, r_vals, bins=bins, range=[list(a_range), list(r_range)])
    area = np.outer(np.diff(a_edges), np.diff(r_edges))
    total = counts.sum()
    density = counts / (total * area) if total > 0 else counts
    return Hist2D(a_edges=a_edges, r_edges=r_edges, counts=counts, density=density)


# ---------------------------------------------------------------------------
# Emission.

def _fmt(x) -> str:
    return repr(float(x))


RUN_CSV_COLUMNS = ("variant", "replicate", "seed", "width", "fingerprint", "status",
                   "metric", "ratio", "normalized_ratio", "hessian_trace",
                   "hessian_trace_stderr", "f_near_zero")


def write_run_records_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(RUN_CSV_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join([
                r.variant, str(r.replicate), str(r.seed), str(r.width), r.fingerprint, r.status,
                _fmt(r.metric), _fmt(r.ratio), _fmt(r.normalized_ratio),
                _fmt(r.hessian_trace), _fmt(r.hessian_trace_stderr), _fmt(r.f_near_zero),
            ]) + "\n")


def write_group_stats_csv(groups: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fingerprint,variant,count,mean,median,q1,q3,lo,hi,outliers\n")
        for fp in sorted(groups):
            g = groups[fp]
            outliers = ";".join(_fmt(v) for v in g.outliers)
            fh.write(f"{fp},{g.variant},{g.count},{_fmt(g.mean)},{_fmt(g.median)},"
                     f"{_fmt(g.q1)},{_fmt(g.q3)},{_fmt(g.lo)},{_fmt(g.hi)},{outliers}\n")


def write_hist2d_csv(hist: Hist2D, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("a_lo,a_hi,r_lo,r_hi,count,density\n")
        for i in range(hist.counts.shape[0]):
            for j in range(hist.counts.shape[1]):
                fh.write(",".join([
                    _fmt(hist.a_edges[i]), _fmt(hist.a_edges[i + 1]),
                    _fmt(hist.r_edges[j]), _fmt(hist.r_edges[j + 1]),
                    str(int(hist.counts[i, j])), _fmt(hist.density[i, j]),
                ]) + "\n")


def write_summary_json(groups: dict, path, extra: dict = None) -> None:
    obj = {"groups": {}}
    if extra:
        obj.update(extra)
    for fp in sorted(groups):
        g = groups[fp]
        obj["groups"][fp] = {
            "variant": g.variant, "count": g.count, "mean": g.mean, "median": g.median,
            "q1": g.q1, "q3": g.q3, "lo": g.lo, "hi": g.hi, "outliers": g.outliers,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")
