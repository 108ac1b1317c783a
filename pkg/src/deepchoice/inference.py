"""Quantities computed from a posterior chain.

Bayesian-model-average choice probabilities, utility derivatives with respect
to attributes, marginal rates of substitution (MRS), value of travel time
(VOTT), credible bands for utilities and accuracy / coverage metrics.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as M

log = logging.getLogger(__name__)


class EmptyChainError(ValueError):
    pass


class UnstableMrsError(ArithmeticError):
    pass


@dataclass
class MrsEstimate:
    numerator: int  # attribute l in (dv/dx_l) / (dv/dx_k)
    denominator: int  # attribute k
    draws: np.ndarray
    interval: tuple
    point: float
    level: float
    flagged: int = 0


@dataclass
class UtilityBand:
    attribute: int
    alternative: int
    grid: np.ndarray
    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray

    def width(self):
        return self.upper - self.lower


@dataclass
class VottSummary:
    values: np.ndarray  # (N, J) mean over draws, currency per hour
    median: float
    median_by_alternative: np.ndarray
    quantiles: dict
    histogram: tuple  # (counts, edges)
    flagged: int = 0


def _require(chain):
    if len(chain) == 0:
        raise EmptyChainError("posterior chain has no snapshots")


def posterior_predictive(chain, x, q):
    """Average over snapshots of eval-mode choice probabilities."""
    _require(chain)
    total = None
    for params in chain.snapshots:
        p = M.choice_probabilities(M.utilities(chain.spec, params, x, q, training=False))
        total = p if total is None else total + p
    return total / len(chain)


def posterior_utilities(chain, x, q):
    """Stack of eval-mode utilities, shape (S, N, J)."""
    _require(chain)
    return np.stack([M.utilities(chain.spec, p, x, q, training=False) for p in chain.snapshots])


def utility_input_gradient(spec, params, x, q, j=None, k=None):
    """Own-attribute derivatives ``d v_ij / d x_ijk`` in eval mode.

    Returns an (N, J, Kx) array, or the (N,) slice for a given ``j`` and
    ``k``.  One reverse pass is made per alternative, since the non-IIA block
    lets ``x_ij`` reach every alternative's utility.
    """
    x = np.asarray(x, dtype=np.float64)
    J, Kx = spec.J, spec.n_attributes
    if k is not None and not 0 <= k < Kx:
        raise IndexError(f"attribute index {k} out of range [0, {Kx})")
    if j is not None and not 0 <= j < J:
        raise IndexError(f"alternative index {j} out of range [0, {J})")
    if spec.kind == "conditional_logit":
        out = np.broadcast_to(params["beta"], x.shape).copy()
    else:
        fw = M.record(spec, params, x, q, training=False)
        t = fw.tape
        out = np.empty_like(x)
        for alt in range(J) if j is None else [j]:
            total = t.reduce_sum(t.embed_select(fw.utilities, alt, axis=1))
            out[:, alt, :] = t.backward(total, [fw.x])[fw.x][:, alt, :]
    if j is None:
        return out if k is None else out[:, :, k]
    return out[:, j, :] if k is None else out[:, j, k]


def input_gradients(chain, x, q, raw_scale=None):
    """Derivatives for every snapshot, shape (S, N, J, Kx).

    ``raw_scale`` (per-attribute standard deviations) converts derivatives
    taken on standardised attributes back to raw units.
    """
    _require(chain)
    grads = np.stack([utility_input_gradient(chain.spec, p, x, q) for p in chain.snapshots])
    if raw_scale is not None:
        grads = grads / np.asarray(raw_scale, dtype=np.float64)
    return grads


def equal_tailed_interval(draws, level=0.95):
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(draws, dtype=np.float64), [tail, 1.0 - tail])
    return float(lo), float(hi)


AGGREGATES = ("ratio_of_means", "mean_of_ratios")


def mrs_draws_from_gradients(grads, k, l, aggregate="ratio_of_means", max_flagged=0.10):
    """Per-draw average MRS ``(dv/dx_l) / (dv/dx_k)`` from (S, N, J, Kx) derivatives.

    ``ratio_of_means`` divides the average derivatives; ``mean_of_ratios``
    averages individual ratios.  Draws whose average denominator is below
    1e-10 in magnitude (or whose value is not finite) are dropped and
    counted.  Returns ``(draws, n_flagged)``.
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    den = grads[..., k].reshape(len(grads), -1)
    num = grads[..., l].reshape(len(grads), -1)
    den_mean = den.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        if aggregate == "ratio_of_means":
            values = num.mean(axis=1) / den_mean
        else:
            values = np.mean(num / den, axis=1)
    bad = (np.abs(den_mean) < 1e-10) | ~np.isfinite(values)
    flagged = int(bad.sum())
    if flagged > max_flagged * len(grads):
        raise UnstableMrsError(f"{flagged} of {len(grads)} draws have a vanishing denominator for attribute {k}")
    return values[~bad], flagged


def mrs(chain, data, k, l, level=0.95, grads=None, aggregate="ratio_of_means"):
    """Credible interval for the average MRS ``(dv/dx_l) / (dv/dx_k)`` on ``data``.

    Derivatives are converted to raw attribute units when ``data`` carries
    standardisation statistics.
    """
    for a in (k, l):
        if not 0 <= a < chain.spec.n_attributes:
            raise IndexError(f"attribute index {a} out of range")
    if grads is None:
        scale = data.stats.x_scale if getattr(data, "stats", None) is not None else None
        grads = input_gradients(chain, data.x, data.q, raw_scale=scale)
    draws, flagged = mrs_draws_from_gradients(grads, k, l, aggregate)
    return MrsEstimate(l, k, draws, equal_tailed_interval(draws, level), float(draws.mean()), level, flagged)


def vott(chain, data, time_attr, cost_attr, minutes_per_hour=60.0, bins=30, grads=None):
    """Per-individual value of travel time, ``(dv/dtime) / (dv/dcost) * 60``.

    Each individual's value (per alternative) is the mean over draws; draws
    with a vanishing cost derivative for that individual are skipped.
    """
    if grads is None:
        scale = data.stats.x_scale if getattr(data, "stats", None) is not None else None
        grads = input_gradients(chain, data.x, data.q, raw_scale=scale)
    d_time = grads[..., time_attr]
    d_cost = grads[..., cost_attr]
    ok = np.abs(d_cost) >= 1e-10
    flagged = int((~ok).sum())
    if flagged > 0.10 * ok.size:
        raise UnstableMrsError(f"{flagged} draw-level cost derivatives vanish")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ok, d_time / np.where(ok, d_cost, 1.0), 0.0)
    counts = ok.sum(axis=0)
    values = ratio.sum(axis=0) / np.maximum(counts, 1) * minutes_per_hour
    flat = values.ravel()
    qs = {p: float(np.quantile(flat, p)) for p in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return VottSummary(
        values=values,
        median=float(np.median(flat)),
        median_by_alternative=np.median(values, axis=0),
        quantiles=qs,
        histogram=np.histogram(flat, bins=bins),
        flagged=flagged,
    )


def utility_bands(chain, data, k, grid, level=0.95, alternative=0):
    """Credible band for ``v`` of one alternative as attribute ``k`` moves along ``grid``.

    All other inputs sit at their sample means.  Each draw's curve is centred
    on its grid mean before quantiles are taken, because the utility level is
    not identified.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    x, q = band_inputs(data, k, grid, alternative)
    util = posterior_utilities(chain, x, q)[:, :, alternative]  # (S, G)
    util = util - util.mean(axis=1, keepdims=True)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(util, [tail, 1.0 - tail], axis=0)
    return UtilityBand(k, alternative, grid, lo, util.mean(axis=0), hi)


def band_inputs(data, k, grid, alternative=0):
    mean_x = data.x.reshape(-1, data.n_attributes).mean(axis=0)
    G = len(grid)
    x = np.broadcast_to(mean_x, (G, data.n_alternatives, data.n_attributes)).copy()
    x[:, alternative, k] = grid
    q = np.broadcast_to(data.q.mean(axis=0), (G, data.n_characteristics)).copy()
    return x, q


def accuracy(probs, labels):
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def balanced_accuracy(probs, labels, n_classes=None):
    """Mean per-class recall of the argmax prediction over classes present in ``labels``."""
    labels = np.asarray(labels)
    pred = np.argmax(probs, axis=1)
    n_classes = probs.shape[1] if n_classes is None else n_classes
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            warnings.warn(f"class {c} absent from labels; excluded from balanced accuracy", stacklevel=2)
            continue
        recalls.append(np.mean(pred[mask] == c))
    return float(np.mean(recalls))


def empirical_coverage(intervals, truths):
    """Fraction of ``(lower, upper)`` intervals that contain the matching truth."""
    intervals = list(intervals)
    if not intervals:
        raise ValueError("need at least one replication")
    hits = [lo <= t <= hi for (lo, hi), t in zip(intervals, truths, strict=True)]
    return float(np.mean(hits))


def autocorrelation(draws):
    x = np.asarray(draws, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0] if acov[0] > 0 else np.ones(n)


def effective_sample_size(draws):
    """ESS from the autocorrelation with Geyer's initial positive sequence."""
    rho = autocorrelation(draws)
    n = len(rho)
    tau = -1.0
    prev = np.inf
    for m in range(0, n - 1, 2):
        pair = rho[m] + rho[m + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
    return float(n / max(tau, 1e-12)) if tau > 0 else float(n)
