"""Utility architectures for discrete choice.

Three model kinds share one interface.  Each maps alternative attributes
``x`` (N, J, Kx) and individual characteristics ``q`` (N, Kq) to
representative utilities (N, J):

``conditional_logit``
    ``v_ij = alpha_j + x_ij . beta + q_i . gamma_j`` with the last
    alternative as base (``alpha_J = 0``, ``gamma_J = 0``).
``fully_connected``
    a ReLU MLP on ``concat(flatten(x_i), q_i)`` with a J-wide linear head.
``proposed``
    an informed linear part on per-alternative embeddings ``q_ij`` plus two
    scaled, non-affine batch-normalised blocks: a network ``f`` shared across
    alternatives (IIA) and a network ``g`` that sees every alternative at once
    (non-IIA).
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, _softmax, batchnorm_stats_update, check_finite

KINDS = ("conditional_logit", "fully_connected", "proposed")
INFORMED = "informed"
NONLINEAR = "nonlinear"
PARAMS_FORMAT = "deepchoice-params"
PARAMS_VERSION = 1


@dataclass
class ModelSpec:
    kind: str
    n_alternatives: int
    n_attributes: int
    n_characteristics: int
    hidden_units: int = 64
    hidden_layers: int = 2
    embed_hidden_units: int | None = None  # defaults to 2 * n_characteristics
    embed_hidden_layers: int = 1
    lambda_iia: float = 1e-4
    lambda_noniia: float = 1e-4
    weight_decay: float = 1e-4
    share_f: bool = True
    gamma_base_zero: bool = False
    sigma_init: float = 0.1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.n_alternatives < 2:
            raise ValueError("need at least two alternatives")
        if self.hidden_units < 1 or self.hidden_layers < 1 or self.embed_hidden_layers < 0:
            raise ValueError("hidden_units and hidden_layers must be at least 1")
        if min(self.lambda_iia, self.lambda_noniia, self.weight_decay) < 0:
            raise ValueError("regularisation strengths must be non-negative")
        if self.embed_hidden_units is None:
            self.embed_hidden_units = max(1, 2 * self.n_characteristics)

    @property
    def J(self):
        return self.n_alternatives

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ParameterSet:
    """Named parameter arrays with freeze groups and batch-norm state."""

    values: dict
    groups: dict
    frozen: set = field(default_factory=set)
    state: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        self.values[name] = value

    def names(self, group=None):
        return [n for n in self.values if group is None or self.groups[n] == group]

    def trainable(self):
        return [n for n in self.values if self.groups[n] not in self.frozen]

    def freeze(self, group):
        self.frozen.add(group)

    def unfreeze(self, group):
        self.frozen.discard(group)

    def copy(self):
        return ParameterSet(
            {k: v.copy() for k, v in self.values.items()},
            dict(self.groups),
            set(self.frozen),
            copy.deepcopy(self.state),
        )

    def equals(self, other):
        if self.values.keys() != other.values.keys():
            return False
        return all(np.array_equal(self.values[k], other.values[k]) for k in self.values)

    def size(self):
        return sum(v.size for v in self.values.values())

    def to_dict(self):
        def enc(a):
            a = np.ascontiguousarray(a, dtype="<f8")
            return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}

        return {
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "params": {k: dict(enc(v), group=self.groups[k]) for k, v in self.values.items()},
            "frozen": sorted(self.frozen),
            "state": {k: [enc(m), enc(v)] for k, (m, v) in self.state.items()},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != PARAMS_FORMAT:
            raise ValueError("not a parameter snapshot")
        if d.get("version") != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter snapshot version {d.get('version')}")

        def dec(e):
            raw = base64.b64decode(e["data"])
            return np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

        values = {k: dec(e) for k, e in d["params"].items()}
        groups = {k: e["group"] for k, e in d["params"].items()}
        state = {k: (dec(m), dec(v)) for k, (m, v) in d["state"].items()}
        return cls(values, groups, set(d["frozen"]), state)

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _mlp_params(rng, prefix, n_in, n_hidden, n_layers, n_out, out_bias=True, lead=()):
    out = {}
    fan = n_in
    for layer in range(n_layers):
        out[f"{prefix}_w{layer}"] = _he(rng, fan, lead + (fan, n_hidden))
        out[f"{prefix}_b{layer}"] = np.zeros(lead + ((1,) if lead else ()) + (n_hidden,))
        fan = n_hidden
    out[f"{prefix}_wout"] = _he(rng, fan, lead + (fan, n_out))
    if out_bias:
        out[f"{prefix}_bout"] = np.zeros(lead + ((1,) if lead else ()) + (n_out,))
    return out


def init_params(spec, rng):
    """Draw an initial :class:`ParameterSet` for ``spec``.

    Network weights are Normal(0, 2 / fan_in); biases, alpha, beta and gamma
    start at zero; the two scales start at ``spec.sigma_init``.
    """
    J, Kx, Kq = spec.J, spec.n_attributes, spec.n_characteristics
    values, groups = {}, {}

    def put(d, group):
        for k, v in d.items():
            values[k] = np.asarray(v, dtype=np.float64)
            groups[k] = group

    if spec.kind == "conditional_logit":
        put({"alpha": np.zeros(J - 1), "beta": np.zeros(Kx), "gamma": np.zeros((Kq, J - 1))}, INFORMED)
    elif spec.kind == "fully_connected":
        put(_mlp_params(rng, "fc", J * Kx + Kq, spec.hidden_units, spec.hidden_layers, J), NONLINEAR)
    else:
        gamma = np.zeros((Kq, J - 1)) if spec.gamma_base_zero else np.zeros(Kq)
        put({"alpha": np.zeros(J - 1), "beta": np.zeros(Kx), "gamma": gamma}, INFORMED)
        put(
            _mlp_params(
                rng, "embed", Kq, spec.embed_hidden_units, spec.embed_hidden_layers, Kq, lead=(J,)
            ),
            INFORMED,
        )
        f_lead = () if spec.share_f else (J,)
        put(
            _mlp_params(
                rng, "f", Kx + Kq, spec.hidden_units, spec.hidden_layers, 1, out_bias=False, lead=f_lead
            ),
            NONLINEAR,
        )
        put(
            _mlp_params(rng, "g", J * Kx + Kq, spec.hidden_units, spec.hidden_layers, J, out_bias=False),
            NONLINEAR,
        )
        put({"sigma_iia": np.full(1, spec.sigma_init), "sigma_noniia": np.full(1, spec.sigma_init)}, NONLINEAR)
    params = ParameterSet(values, groups)
    if spec.kind == "proposed":
        f_feat = 1 if spec.share_f else J
        params.state = {"f": (np.zeros(f_feat), np.ones(f_feat)), "g": (np.zeros(J), np.ones(J))}
    return params


def network_weight_names(spec, params):
    return [n for n in params.values if n.split("_", 1)[0] in ("fc", "embed", "f", "g")]


class Forward:
    """Result of recording one model evaluation on a tape."""

    def __init__(self, tape, leaves, x, q, utilities, bn_nodes, informed=None):
        self.tape = tape
        self.informed = informed if informed is not None else utilities
        self.leaves = leaves
        self.x = x
        self.q = q
        self.utilities = utilities
        self.bn_nodes = bn_nodes

    def batch_stats(self):
        return {k: n.extra for k, n in self.bn_nodes.items() if n.extra is not None}


def _check_inputs(spec, x, q):
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    want = (spec.J, spec.n_attributes)
    if x.ndim != 3 or x.shape[1:] != want:
        raise ValueError(f"x must have shape (N, {want[0]}, {want[1]}), got {x.shape}")
    if q.ndim != 2 or q.shape != (x.shape[0], spec.n_characteristics):
        raise ValueError(f"q must have shape ({x.shape[0]}, {spec.n_characteristics}), got {q.shape}")
    return x, q


def _mlp(t, leaves, prefix, h, n_layers, lead=False):
    for layer in range(n_layers):
        h = t.relu(t.add(t.matmul(h, leaves[f"{prefix}_w{layer}"]), leaves[f"{prefix}_b{layer}"]))
    h = t.matmul(h, leaves[f"{prefix}_wout"])
    if f"{prefix}_bout" in leaves:
        h = t.add(h, leaves[f"{prefix}_bout"])
    return h


def _constants(t, leaves, n, J):
    zero_alt = t.leaf(np.zeros(1), kind="const")
    alpha = t.concat([leaves["alpha"], zero_alt], axis=0)
    return alpha, t.leaf(np.zeros((n, 1)), kind="const")


def record(spec, params, x, q, training=False, tape=None):
    """Record the utility computation on a tape and return a :class:`Forward`."""
    x, q = _check_inputs(spec, x, q)
    t = tape if tape is not None else Tape()
    leaves = {k: t.leaf(v, kind="param") for k, v in params.values.items()}
    xn = t.leaf(x, kind="input")
    qn = t.leaf(q, kind="input")
    n, J, Kx = x.shape
    bn_nodes = {}
    informed = None

    if spec.kind == "conditional_logit":
        alpha, zcol = _constants(t, leaves, n, J)
        util = t.matmul(xn, leaves["beta"])
        util = t.add(util, t.concat([t.matmul(qn, leaves["gamma"]), zcol], axis=1))
        util = t.add(util, alpha)
    elif spec.kind == "fully_connected":
        inp = t.concat([t.reshape(xn, (n, J * Kx)), qn], axis=1)
        util = _mlp(t, leaves, "fc", inp, spec.hidden_layers)
    else:
        alpha, zcol = _constants(t, leaves, n, J)
        emb = _mlp(t, leaves, "embed", qn, spec.embed_hidden_layers)  # (J, N, Kq)
        emb = t.transpose(emb, (1, 0, 2))
        util = t.matmul(xn, leaves["beta"])
        if spec.gamma_base_zero:
            util = t.add(util, t.concat([t.matmul(qn, leaves["gamma"]), zcol], axis=1))
        else:
            util = t.add(util, t.matmul(emb, leaves["gamma"]))
        util = t.add(util, alpha)
        informed = util

        f_in = t.concat([xn, emb], axis=-1)  # (N, J, Kx + Kq)
        if spec.share_f:
            f_out = _mlp(t, leaves, "f", f_in, spec.hidden_layers)  # (N, J, 1)
            bn_axes = (0, 1)
        else:
            f_out = _mlp(t, leaves, "f", t.transpose(f_in, (1, 0, 2)), spec.hidden_layers)
            f_out = t.transpose(f_out, (1, 0, 2))
            bn_axes = (0,)
        f_bn = t.batchnorm(
            f_out, axes=bn_axes, training=training, running=None if training else params.state["f"]
        )
        bn_nodes["f"] = f_bn
        f_bn = t.reshape(f_bn, (n, J))

        g_in = t.concat([t.reshape(xn, (n, J * Kx)), qn], axis=1)
        g_out = _mlp(t, leaves, "g", g_in, spec.hidden_layers)  # (N, J)
        g_bn = t.batchnorm(g_out, axes=(0,), training=training, running=None if training else params.state["g"])
        bn_nodes["g"] = g_bn

        util = t.add(util, t.scale(f_bn, leaves["sigma_iia"]))
        util = t.add(util, t.scale(g_bn, leaves["sigma_noniia"]))
    return Forward(t, leaves, xn, qn, util, bn_nodes, informed=informed)


def utilities(spec, params, x, q, training=False):
    return record(spec, params, x, q, training=training).utilities.value


def utilities_conditional_logit(spec, params, x, q):
    if spec.kind != "conditional_logit":
        raise ValueError("spec is not a conditional logit")
    return utilities(spec, params, x, q)


def utilities_fully_connected(spec, params, x, q):
    if spec.kind != "fully_connected":
        raise ValueError("spec is not a fully connected network")
    return utilities(spec, params, x, q)


def utilities_proposed(spec, params, x, q, mode="eval"):
    if spec.kind != "proposed":
        raise ValueError("spec is not the proposed architecture")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return utilities(spec, params, x, q, training=mode == "train")


def informed_utilities(spec, params, x, q):
    """Informed part of the proposed model (what it collapses to at zero scales)."""
    return record(spec, params, x, q, training=False).informed.value


def choice_probabilities(util):
    util = np.asarray(util, dtype=np.float64)
    if np.isnan(util).any():
        raise ValueError("utilities contain NaN")
    return _softmax(util)


def log_likelihood(util, y):
    util = np.asarray(util, dtype=np.float64)
    z = util - util.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(logp[np.arange(len(y)), y].sum())


def penalty(spec, params):
    """Negative log prior (up to a constant): scale and weight-decay terms."""
    total = 0.0
    if "sigma_iia" in params.values:
        total += 0.5 * spec.lambda_iia * float(np.sum(params["sigma_iia"] ** 2))
        total += 0.5 * spec.lambda_noniia * float(np.sum(params["sigma_noniia"] ** 2))
    if spec.weight_decay:
        total += 0.5 * spec.weight_decay * sum(
            float(np.sum(params[n] ** 2)) for n in network_weight_names(spec, params)
        )
    return total


def log_prior_grad(spec, params):
    """Gradient of the log prior: ``-lambda * sigma`` and ``-weight_decay * w``."""
    grads = {}
    if "sigma_iia" in params.values:
        grads["sigma_iia"] = -spec.lambda_iia * params["sigma_iia"]
        grads["sigma_noniia"] = -spec.lambda_noniia * params["sigma_noniia"]
    if spec.weight_decay:
        for n in network_weight_names(spec, params):
            grads[n] = -spec.weight_decay * params[n]
    return grads


def nll_and_grad(spec, params, x, q, y, training=True, names=None):
    """Batch negative log-likelihood and its gradient w.r.t. ``names``.

    Returns ``(nll, grads, batch_stats)``; ``batch_stats`` holds the
    batch-norm (mean, var) pairs observed in training mode.
    """
    fw = record(spec, params, x, q, training=training)
    t = fw.tape
    logp = t.log_softmax(fw.utilities)
    loss = t.nll_loss(logp, np.asarray(y, dtype=np.int64))
    names = params.trainable() if names is None else names
    wrt = [fw.leaves[n] for n in names]
    grads = t.backward(loss, wrt) if wrt else {}
    return float(loss.value), {n: grads[fw.leaves[n]] for n in names}, fw.batch_stats()


def penalized_loss(spec, params, x, q, y, training=True):
    """Batch cross-entropy plus the scale and weight-decay penalties.

    The likelihood term is the batch sum; rescaling to the full data set is
    the sampler's job.
    """
    fw = record(spec, params, x, q, training=training)
    t = fw.tape
    nll = t.nll_loss(t.log_softmax(fw.utilities), np.asarray(y, dtype=np.int64))
    value = float(check_finite(nll.value, "negative log-likelihood"))
    return value + penalty(spec, params)


def update_running_stats(spec, params, batch_stats):
    for key, stats in batch_stats.items():
        params.state[key] = batchnorm_stats_update(params.state[key], stats, spec.bn_momentum)
