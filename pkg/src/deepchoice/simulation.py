"""Monte Carlo study: synthetic choice data with a known nonlinear utility.

Utilities follow ``u_ij = x_ij . beta + q_i . gamma_j + h(x_ij) + eps_ij`` with
EV1 errors, standard normal attributes and Bernoulli(0.5) characteristics.
``h`` is a cubic in one attribute plus a (possibly shifted) tanh step in
another, so the remaining attributes enter linearly.  Only the last
alternative has a nonzero ``gamma``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import inference as I
from . import model as M
from . import sampler as S
from .data import ChoiceDataset, split_indices

log = logging.getLogger(__name__)

DGP_FORMAT = "deepchoice-dgp"
DGP_VERSION = 1
EULER_GAMMA = 0.5772156649015329


@dataclass
class DgpSpec:
    beta: list = field(default_factory=lambda: [-1.0, -0.5, -1.0, -1.0, -0.8])
    gamma_last: list = field(default_factory=lambda: [0.5, -0.5, 0.5, -0.5, 0.5])
    cubic_attr: int = 2
    cubic: list = field(default_factory=lambda: [0.0, -1.2, 0.1])  # x, x^2, x^3 coefficients
    tanh_attr: int = 3
    tanh_scale: float = -3.0
    tanh_steepness: float = 2.0
    tanh_offset: float = 1.0
    q_weight: list | None = None  # optional q-dependence: h += (q . q_weight) * x_cubic
    n_alternatives: int = 3
    n_characteristics: int = 5
    q_prob: float = 0.5
    n_obs: int = 1000
    replications: int = 100
    holdout_fraction: float = 0.2
    seed: int = 20240601

    def __post_init__(self):
        if len(self.cubic) != 3:
            raise ValueError("cubic needs three coefficients (x, x^2, x^3)")
        if len(self.gamma_last) != self.n_characteristics:
            raise ValueError("gamma_last must have one entry per characteristic")
        for k in (self.cubic_attr, self.tanh_attr):
            if not 0 <= k < self.n_attributes:
                raise ValueError(f"nonlinear attribute index {k} out of range")

    @property
    def n_attributes(self):
        return len(self.beta)

    @property
    def gamma(self):
        """Characteristic coefficients per alternative, shape (Kq, J)."""
        g = np.zeros((self.n_characteristics, self.n_alternatives))
        g[:, -1] = self.gamma_last
        return g

    def with_zero_phi(self):
        return replace(self, cubic=[0.0, 0.0, 0.0], tanh_scale=0.0, q_weight=None)

    def to_dict(self):
        return {"format": DGP_FORMAT, "version": DGP_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("format", DGP_FORMAT) != DGP_FORMAT:
            raise ValueError("not a DGP spec")
        if d.pop("version", DGP_VERSION) != DGP_VERSION:
            raise ValueError("unsupported DGP spec version")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class SyntheticDataset:
    data: ChoiceDataset
    eps: np.ndarray
    true_utilities: np.ndarray
    spec: DgpSpec
    replication: int
    shares: np.ndarray


def sample_ev1(rng, n):
    """Standard Gumbel draws by inversion: ``-log(-log(U))``."""
    u = rng.random(n)
    return ev1_from_uniform(u)


def ev1_from_uniform(u):
    return -np.log(-np.log(u))


def nonlinear_part(spec, x, q):
    """``h`` evaluated per alternative: array shaped like ``x[..., 0]``."""
    c1, c2, c3 = spec.cubic
    xc = x[..., spec.cubic_attr]
    xt = x[..., spec.tanh_attr]
    h = c1 * xc + c2 * xc**2 + c3 * xc**3
    h = h + spec.tanh_scale * np.tanh(spec.tanh_steepness * (xt - spec.tanh_offset))
    if spec.q_weight is not None:
        h = h + (q @ np.asarray(spec.q_weight))[:, None] * xc
    return h


def representative_utility(spec, x, q):
    return x @ np.asarray(spec.beta) + q @ spec.gamma + nonlinear_part(spec, x, q)


def utility_gradient(spec, x, q):
    """Analytic ``d v_ij / d x_ijk`` for every observation, alternative and attribute."""
    d = np.broadcast_to(np.asarray(spec.beta, dtype=np.float64), x.shape).copy()
    c1, c2, c3 = spec.cubic
    xc = x[..., spec.cubic_attr]
    d[..., spec.cubic_attr] += c1 + 2.0 * c2 * xc + 3.0 * c3 * xc**2
    if spec.q_weight is not None:
        d[..., spec.cubic_attr] += (q @ np.asarray(spec.q_weight))[:, None]
    z = spec.tanh_steepness * (x[..., spec.tanh_attr] - spec.tanh_offset)
    d[..., spec.tanh_attr] += spec.tanh_scale * spec.tanh_steepness / np.cosh(z) ** 2
    return d


def _replication_rng(spec, replication):
    return np.random.default_rng(np.random.SeedSequence([spec.seed, replication]))


def generate_dataset(spec, replication, n_obs=None):
    """Draw replication ``replication``; deterministic in ``(spec.seed, replication)``."""
    if not 0 <= replication < spec.replications:
        raise ValueError(f"replication {replication} outside [0, {spec.replications})")
    n = spec.n_obs if n_obs is None else n_obs
    rng = _replication_rng(spec, replication)
    J, Kx, Kq = spec.n_alternatives, spec.n_attributes, spec.n_characteristics
    x = rng.standard_normal((n, J, Kx))
    q = (rng.random((n, Kq)) < spec.q_prob).astype(np.float64)
    eps = sample_ev1(rng, (n, J))
    v = representative_utility(spec, x, q)
    y = np.argmax(v + eps, axis=1)
    shares = np.bincount(y, minlength=J) / n
    data = ChoiceDataset(x=x, q=q, y=y)
    return SyntheticDataset(data, eps, v, spec, replication, shares)


def true_mrs(spec, x, q, k, l, aggregate="ratio_of_means"):
    """Average MRS ``(dv/dx_l) / (dv/dx_k)`` over individuals and alternatives.

    Both aggregations agree whenever the denominator attribute enters linearly.
    """
    d = utility_gradient(spec, x, q)
    if aggregate == "mean_of_ratios":
        return float(np.mean(d[..., l] / d[..., k]))
    return float(np.mean(d[..., l]) / np.mean(d[..., k]))


def population_mrs(spec, k, l, n=1_000_000, seed=0, aggregate="ratio_of_means"):
    """``true_mrs`` over a fresh input sample of size ``n``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, spec.n_attributes))
    q = (rng.random((n, spec.n_characteristics)) < spec.q_prob).astype(np.float64)
    return true_mrs(spec, x, q, k, l, aggregate)


# ---------------------------------------------------------------------------
# Replication driver


@dataclass
class StudyOptions:
    base_attribute: int = 0
    level: float = 0.95
    aggregate: str = "ratio_of_means"
    bands: bool = False
    band_grid: list = field(default_factory=lambda: np.linspace(-2.0, 2.0, 21).tolist())
    band_alternative: int = 0


@dataclass
class ModelRun:
    """What one fitted model contributes to the Monte Carlo tables."""

    model: str
    n_obs: int
    replication: int
    mrs: list  # dicts: index, attribute, lower, upper, point, truth, hit, flagged
    balanced_accuracy: float
    accuracy: float
    mean_log_likelihood: float
    bands: dict | None = None  # attribute -> grid/lower/mean/upper/truth lists
    seconds: float = 0.0
    error: str | None = None


def true_band(spec, data, k, grid, alternative=0):
    """Centred true utility of one alternative along ``grid`` (same inputs as the bands)."""
    x, q = I.band_inputs(data, k, np.asarray(grid, dtype=np.float64), alternative)
    v = representative_utility(spec, x, q)[:, alternative]
    return v - v.mean()


def _replication_seed(config_seed, replication, n_obs):
    return int(np.random.SeedSequence([config_seed, replication, n_obs]).generate_state(1)[0])


def fit_replication(dgp, model_spec, config, replication, n_obs, options):
    """Generate, split, fit and score one replication; returns a :class:`ModelRun`."""
    t0 = time.perf_counter()
    sim = generate_dataset(dgp, replication, n_obs=n_obs)
    tr, te = split_indices(sim.data.y, dgp.holdout_fraction, [dgp.seed, replication, 7])
    train, test = sim.data.subset(tr), sim.data.subset(te)
    cfg = replace(config, seed=_replication_seed(config.seed, replication, n_obs))
    chain = S.run_two_step(model_spec, train, cfg)
    grads = I.input_gradients(chain, test.x, test.q)
    base = options.base_attribute
    rows = []
    for m, l in enumerate(a for a in range(dgp.n_attributes) if a != base):
        est = I.mrs(chain, test, base, l, level=options.level, grads=grads, aggregate=options.aggregate)
        truth = true_mrs(dgp, test.x, test.q, base, l, options.aggregate)
        lo, hi = est.interval
        rows.append(
            {
                "index": m + 1,
                "attribute": l,
                "lower": lo,
                "upper": hi,
                "point": est.point,
                "truth": truth,
                "hit": bool(lo <= truth <= hi),
                "flagged": est.flagged,
            }
        )
    probs = I.posterior_predictive(chain, test.x, test.q)
    bands = None
    if options.bands:
        bands = {}
        for k in range(dgp.n_attributes):
            band = I.utility_bands(chain, train, k, options.band_grid, options.level, options.band_alternative)
            bands[k] = {
                "grid": band.grid.tolist(),
                "lower": band.lower.tolist(),
                "mean": band.mean.tolist(),
                "upper": band.upper.tolist(),
                "truth": true_band(dgp, train, k, options.band_grid, options.band_alternative).tolist(),
            }
    return ModelRun(
        model=model_spec.kind,
        n_obs=n_obs,
        replication=replication,
        mrs=rows,
        balanced_accuracy=I.balanced_accuracy(probs, test.y),
        accuracy=I.accuracy(probs, test.y),
        mean_log_likelihood=float(np.mean(np.log(probs[np.arange(len(test.y)), test.y]))),
        bands=bands,
        seconds=time.perf_counter() - t0,
    )


def _job(args):
    dgp, model_spec, config, replication, n_obs, options = args
    try:
        return fit_replication(dgp, model_spec, config, replication, n_obs, options)
    except Exception as exc:  # recorded, judged by the failure policy
        log.warning("replication %d (%s, N=%d) failed: %s", replication, model_spec.kind, n_obs, exc)
        return ModelRun(model_spec.kind, n_obs, replication, [], math.nan, math.nan, math.nan, error=repr(exc))


@dataclass
class CoverageReport:
    runs: list

    def completed(self):
        return [r for r in self.runs if r.error is None]

    def coverage_table(self):
        """Rows ``(model, n_obs, [coverage per MRS], average)`` in first-seen order."""
        keys = []
        for r in self.runs:
            if (r.model, r.n_obs) not in keys:
                keys.append((r.model, r.n_obs))
        table = []
        for model, n in keys:
            runs = [r for r in self.completed() if r.model == model and r.n_obs == n]
            if not runs:
                continue
            n_mrs = len(runs[0].mrs)
            intervals = [[(row["lower"], row["upper"]) for row in r.mrs] for r in runs]
            truths = [[row["truth"] for row in r.mrs] for r in runs]
            cov = [I.empirical_coverage([iv[m] for iv in intervals], [t[m] for t in truths]) for m in range(n_mrs)]
            table.append((model, n, cov, float(np.mean(cov))))
        return table

    def band_widths(self):
        """Mean band width per ``(model, n_obs)`` and attribute, over grid points and replications."""
        out = {}
        for r in self.completed():
            if not r.bands:
                continue
            for k, b in r.bands.items():
                width = float(np.mean(np.subtract(b["upper"], b["lower"])))
                out.setdefault((r.model, r.n_obs), {}).setdefault(int(k), []).append(width)
        return {key: {k: float(np.mean(v)) for k, v in sorted(d.items())} for key, d in out.items()}

    def accuracy_table(self):
        keys = []
        for r in self.runs:
            if (r.model, r.n_obs) not in keys:
                keys.append((r.model, r.n_obs))
        out = []
        for model, n in keys:
            runs = [r for r in self.completed() if r.model == model and r.n_obs == n]
            if runs:
                out.append((model, n, float(np.mean([r.balanced_accuracy for r in runs])), float(np.mean([r.accuracy for r in runs]))))
        return out


def run_monte_carlo(dgp, model_specs, config, n_obs_list=None, replications=None, workers=1, options=None, max_failure_fraction=0.2):
    """Fit every model to every replication and collect a :class:`CoverageReport`.

    Jobs are independent; with ``workers > 1`` they run in a process pool and
    come back in (n_obs, replication, model) order, so results do not depend
    on scheduling.
    """
    options = StudyOptions() if options is None else options
    n_obs_list = [dgp.n_obs] if n_obs_list is None else list(n_obs_list)
    reps = range(dgp.replications if replications is None else replications)
    jobs = [(dgp, spec, config, r, n, options) for n in n_obs_list for r in reps for spec in model_specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_job, jobs))
    else:
        runs = [_job(j) for j in jobs]
    failed = sum(r.error is not None for r in runs)
    if runs and failed / len(runs) > max_failure_fraction:
        raise RuntimeError(f"{failed} of {len(runs)} Monte Carlo fits failed")
    return CoverageReport(runs)


def _cl_design(data):
    """Design tensor (N, J, P): attributes, then ASCs and characteristics for all but the last alternative."""
    n, J, Kx = data.x.shape
    Kq = data.q.shape[1]
    P = Kx + (J - 1) * (1 + Kq)
    z = np.zeros((n, J, P))
    z[:, :, :Kx] = data.x
    for j in range(J - 1):
        base = Kx + j * (1 + Kq)
        z[:, j, base] = 1.0
        z[:, j, base + 1 : base + 1 + Kq] = data.q
    return z


def fit_conditional_logit(data, max_iter=100, tol=1e-10):
    """Exact maximum-likelihood conditional logit by Newton's method.

    Returns the coefficient vector ``[beta, (asc_j, gamma_j) for j < J]``.
    """
    z = _cl_design(data)
    n = len(data)
    theta = np.zeros(z.shape[2])
    for _ in range(max_iter):
        v = z @ theta
        v -= v.max(axis=1, keepdims=True)
        p = np.exp(v)
        p /= p.sum(axis=1, keepdims=True)
        zbar = np.einsum("nj,njp->np", p, z)
        grad = (z[np.arange(n), data.y] - zbar).sum(axis=0)
        dz = z - zbar[:, None, :]
        hess = np.einsum("nj,njp,njr->pr", p, dz, dz)
        delta = np.linalg.solve(hess, grad)
        theta += delta
        if np.max(np.abs(delta)) < tol:
            break
    return theta


def conditional_logit_utilities(theta, data):
    return _cl_design(data) @ theta


def calibrate_phi(dgp, target=0.70, grid=None, n_obs=50_000, seed=0):
    """Pick the tanh scale so a large-sample conditional logit hits ``target`` balanced accuracy.

    Returns ``(best_spec, [(scale, accuracy), ...])``.  The conditional logit
    is fitted by Newton's method on the exact log-likelihood.
    """
    grid = np.linspace(-4.0, -1.0, 7) if grid is None else grid
    results = []
    for scale in grid:
        trial = replace(dgp, tanh_scale=float(scale), replications=1, n_obs=n_obs, seed=seed)
        sim = generate_dataset(trial, 0)
        tr, te = split_indices(sim.data.y, 0.2, seed)
        theta = fit_conditional_logit(sim.data.subset(tr))
        util = conditional_logit_utilities(theta, sim.data.subset(te))
        results.append((float(scale), I.balanced_accuracy(util, sim.data.y[te])))
    best = min(results, key=lambda r: abs(r[1] - target))
    return replace(dgp, tanh_scale=best[0]), results
