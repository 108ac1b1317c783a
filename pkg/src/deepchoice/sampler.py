"""Phase-1 SGD and phase-2 SGLD posterior sampling.

The two-step procedure first optimises the informed component with the
nonlinear blocks frozen (and their scales held at zero), then unfreezes
everything, resets the scales to ``sigma_init`` and runs Stochastic Gradient
Langevin Dynamics:

    theta <- theta + (a_t / 2) * (grad log prior + (N / n) * grad log lik) + eta,
    eta ~ Normal(0, a_t I).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .data import minibatches

log = logging.getLogger(__name__)

CHAIN_FORMAT = "deepchoice-chain"
CHAIN_VERSION = 1


class SamplerDivergence(FloatingPointError):
    def __init__(self, phase, step, value):
        self.phase = phase
        self.step = step
        super().__init__(f"{phase}: loss became {value} at step {step}")


@dataclass
class SgldConfig:
    a: float = 0.5
    b: float = 10.0
    gamma_decay: float = 0.0
    scale_by_n: bool = True
    batch_size: int = 100
    phase1_max_epochs: int = 200
    phase1_tolerance: float = 1e-5
    phase1_lr: float = 0.05
    phase1_momentum: float = 0.9
    phase2_epochs: int = 1500
    burn_in_fraction: float = 0.5
    thin: int = 5
    snapshot_every: str = "epoch"
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.a <= 0 or self.b < 0 or not 0.0 <= self.gamma_decay <= 1.0:
            raise ValueError("step-size schedule needs a > 0, b >= 0 and gamma_decay in [0, 1]")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.snapshot_every not in ("epoch", "batch"):
            raise ValueError("snapshot_every must be 'epoch' or 'batch'")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def step_size(config, t, n_total=None):
    """Polynomial schedule ``a * (b + t) ** -gamma_decay`` (divided by N if ``scale_by_n``)."""
    alpha = config.a * (config.b + t) ** (-config.gamma_decay)
    if config.scale_by_n and n_total:
        alpha /= n_total
    return alpha


def sgld_step(values, grads, alpha, rng, noise_scale=1.0):
    """One Langevin update in place: ``theta += alpha/2 * grad + Normal(0, alpha)``.

    ``grads`` is the log-posterior gradient (likelihood part already scaled by
    N/n).  Only names present in ``grads`` move.  With ``noise_scale=0`` no
    random numbers are drawn, which makes the update plain gradient ascent.
    """
    half = 0.5 * alpha
    sd = math.sqrt(alpha) * noise_scale
    for name, g in grads.items():
        theta = values[name]
        theta += half * g
        if sd:
            theta += sd * rng.standard_normal(theta.shape)
    return values


def _epoch_seed(seed, phase, epoch):
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, phase, epoch]).generate_state(2)


def log_posterior_grad(spec, params, x, q, y, n_total, names=None):
    """Minibatch estimate of the log-posterior gradient and the batch NLL."""
    nll, grads, stats = M.nll_and_grad(spec, params, x, q, y, training=True, names=names)
    scale = -n_total / len(y)
    out = {k: scale * g for k, g in grads.items()}
    for k, g in M.log_prior_grad(spec, params).items():
        if k in out:
            out[k] = out[k] + g
    return nll, out, stats


def _full_loss(spec, params, data):
    util = M.utilities(spec, params, data.x, data.q, training=spec.kind == "proposed")
    return -M.log_likelihood(util, data.y) + M.penalty(spec, params)


def sgd_phase1(spec, params, data, config):
    """Optimise the unfrozen parameters with momentum SGD until the loss settles.

    Parameters in frozen groups are never touched.  Stops when the relative
    improvement of the full-data penalised loss over one epoch falls below
    ``config.phase1_tolerance`` or after ``config.phase1_max_epochs`` epochs.
    Returns ``(params, final_loss, epochs_run)``.
    """
    names = params.trainable()
    n = len(data)
    if config.phase1_max_epochs <= 0 or not names:
        return params, _full_loss(spec, params, data), 0
    velocity = {k: np.zeros_like(params[k]) for k in names}
    prev = _full_loss(spec, params, data)
    step = 0
    epoch = 0
    for epoch in range(1, config.phase1_max_epochs + 1):
        lr = config.phase1_lr / (1.0 + 0.05 * (epoch - 1))
        for idx in minibatches(n, min(config.batch_size, n), _epoch_seed(config.seed, 1, epoch)):
            nll, grads, stats = log_posterior_grad(spec, params, data.x[idx], data.q[idx], data.y[idx], n, names)
            if not math.isfinite(nll):
                raise SamplerDivergence("phase1", step, nll)
            for k in names:
                # Ascent on the per-observation log posterior.
                velocity[k] = config.phase1_momentum * velocity[k] + grads[k] / n
                params[k] += lr * velocity[k]
            if stats:
                M.update_running_stats(spec, params, stats)
            step += 1
        cur = _full_loss(spec, params, data)
        if not math.isfinite(cur):
            raise SamplerDivergence("phase1", step, cur)
        if (prev - cur) / max(abs(prev), 1e-12) < config.phase1_tolerance:
            prev = cur
            break
        prev = cur
    log.debug("phase 1 stopped after %d epochs, loss %.6g", epoch, prev)
    return params, prev, epoch


@dataclass
class PosteriorChain:
    spec: M.ModelSpec
    config: SgldConfig
    snapshots: list = field(default_factory=list)
    tags: list = field(default_factory=list)  # (phase, epoch, step)
    phase1_loss: float | None = None
    phase1_epochs: int = 0
    meta: dict = field(default_factory=dict)  # free-form, e.g. standardisation statistics

    def __len__(self):
        return len(self.snapshots)

    def __iter__(self):
        return iter(self.snapshots)

    def header(self):
        return {
            "format": CHAIN_FORMAT,
            "version": CHAIN_VERSION,
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec.digest(),
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "phase1_loss": self.phase1_loss,
            "phase1_epochs": self.phase1_epochs,
            "meta": self.meta,
        }

    def draws(self, name):
        return np.stack([s[name] for s in self.snapshots])


def run_two_step(spec, data, config, params=None):
    """Fit ``spec`` to ``data`` and return the SGLD :class:`PosteriorChain`.

    The proposed architecture and the conditional logit run phase 1 first
    (for the conditional logit that is just a full optimisation); the fully
    connected baseline goes straight to SGLD.
    """
    root = np.random.SeedSequence(int(config.seed) & 0xFFFFFFFFFFFFFFFF)
    init_seq, noise_seq = root.spawn(2)
    if params is None:
        params = M.init_params(spec, np.random.default_rng(init_seq))
    n = len(data)
    if n < 2:
        raise ValueError("need at least two training observations")
    chain = PosteriorChain(spec, config)

    if spec.kind != "fully_connected":
        if spec.kind == "proposed":
            params["sigma_iia"][:] = 0.0
            params["sigma_noniia"][:] = 0.0
            params.freeze(M.NONLINEAR)
        params, chain.phase1_loss, chain.phase1_epochs = sgd_phase1(spec, params, data, config)
        params.unfreeze(M.NONLINEAR)
        if spec.kind == "proposed":
            params["sigma_iia"][:] = spec.sigma_init
            params["sigma_noniia"][:] = spec.sigma_init

    rng = np.random.default_rng(noise_seq)
    names = params.trainable()
    batch = min(config.batch_size, n)
    kept = int(math.floor(config.phase2_epochs * (1.0 - config.burn_in_fraction) + 1e-9))
    burn = config.phase2_epochs - kept
    t = 0
    for epoch in range(config.phase2_epochs):
        for idx in minibatches(n, batch, _epoch_seed(config.seed, 2, epoch)):
            nll, grads, stats = log_posterior_grad(spec, params, data.x[idx], data.q[idx], data.y[idx], n, names)
            if not math.isfinite(nll):
                raise SamplerDivergence("phase2", t, nll)
            sgld_step(params.values, grads, step_size(config, t, n), rng, config.noise_scale)
            if stats:
                M.update_running_stats(spec, params, stats)
            t += 1
            if config.snapshot_every == "batch" and epoch >= burn and t % config.thin == 0:
                chain.snapshots.append(params.copy())
                chain.tags.append((2, epoch, t))
        r = epoch - burn + 1
        if config.snapshot_every == "epoch" and r >= 1 and r % config.thin == 0:
            chain.snapshots.append(params.copy())
            chain.tags.append((2, epoch, t))
    return chain


def save_chain(chain, path):
    """Write a chain file: one JSON header line, then one line per snapshot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(chain.header(), sort_keys=True) + "\n")
        for snap, tag in zip(chain.snapshots, chain.tags):
            append_snapshot(fh, snap, tag)


def append_snapshot(fh, snapshot, tag):
    phase, epoch, step = tag
    rec = {"phase": phase, "epoch": epoch, "step": step, "params": snapshot.to_dict()}
    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_chain(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHAIN_FORMAT:
            raise ValueError(f"{path} is not a chain file")
        if header.get("version") != CHAIN_VERSION:
            raise ValueError(f"{path}: unsupported chain version {header.get('version')}")
        chain = PosteriorChain(
            M.ModelSpec.from_dict(header["spec"]),
            SgldConfig.from_dict(header["config"]),
            phase1_loss=header.get("phase1_loss"),
            phase1_epochs=header.get("phase1_epochs", 0),
            meta=header.get("meta", {}),
        )
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            chain.snapshots.append(M.ParameterSet.from_dict(rec["params"]))
            chain.tags.append((rec["phase"], rec["epoch"], rec["step"]))
    if chain.spec.digest() != header.get("spec_hash"):
        raise ValueError(f"{path}: model spec hash mismatch")
    return chain
