"""Stochastic policies over small tanh MLPs with a hand-written backward pass.

Networks are two hidden layers of 64 tanh units by default. Continuous
policies use a Gaussian head (state-dependent mean, state-independent learned
log-std clamped to [-5, 2]); discrete policies use categorical logits; value
functions use a scalar head. All parameters live in one flat float64 vector
so gradient checks against finite differences stay trivial.
"""
from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = math.log(0.5)

CHECKPOINT_VERSION = 1

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """NaN or inf encountered where finite values are required."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-incompatible checkpoint file."""


@dataclass(frozen=True)
class ArchSpec:
    """Network shape: obs_dim -> hidden MLP -> head of out_dim."""

    obs_dim: int
    out_dim: int
    hidden: tuple = (64, 64)
    head: str = "gaussian"  # "gaussian" | "categorical" | "scalar"
    recurrent: bool = False

    def __post_init__(self):
        if self.obs_dim < 1 or self.out_dim < 1:
            raise ValueError("obs_dim and out_dim must be positive")
        if self.head not in ("gaussian", "categorical", "scalar"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "scalar" and self.out_dim != 1:
            raise ValueError("scalar head requires out_dim = 1")
        if self.recurrent:
            raise ValueError(
                "recurrent cells are not supported; coupling context is an "
                "explicit observation feature instead"
            )
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_dims(self) -> list:
        return [self.obs_dim, *self.hidden, self.out_dim]

    @property
    def mlp_param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))

    @property
    def param_count(self) -> int:
        extra = self.out_dim if self.head == "gaussian" else 0
        return self.mlp_param_count + extra

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "head": self.head,
            "recurrent": self.recurrent,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(
            obs_dim=int(d["obs_dim"]),
            out_dim=int(d["out_dim"]),
            hidden=tuple(d.get("hidden", (64, 64))),
            head=d.get("head", "gaussian"),
            recurrent=bool(d.get("recurrent", False)),
        )


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """Flat-parameter MLP with tanh hidden layers and a linear output."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self._slices = []
        dims = arch.layer_dims
        off = 0
        for i in range(len(dims) - 1):
            n_out, n_in = dims[i + 1], dims[i]
            w = slice(off, off + n_out * n_in)
            off += n_out * n_in
            b = slice(off, off + n_out)
            off += n_out
            self._slices.append((w, b, n_out, n_in))
        self.n_params = off

    def init_params(self, rng: np.random.Generator, out_gain: float = 1.0) -> np.ndarray:
        params = np.zeros(self.n_params)
        last = len(self._slices) - 1
        for i, (w, b, n_out, n_in) in enumerate(self._slices):
            gain = out_gain if i == last else math.sqrt(2.0)
            params[w] = _orthogonal(rng, n_out, n_in, gain).ravel()
        return params

    def _weights(self, params: np.ndarray):
        for w, b, n_out, n_in in self._slices:
            yield params[w].reshape(n_out, n_in), params[b]

    def forward(self, params: np.ndarray, obs: np.ndarray):
        """Batched forward pass; returns (out, cache) with obs of shape (B, obs_dim)."""
        h = obs
        hs = [obs]
        layers = list(self._weights(params))
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
            hs.append(h)
        w, b = layers[-1]
        out = h @ w.T + b
        return out, (params, hs)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        """Gradient of sum_b <dout_b, out_b> with respect to the flat params."""
        params, hs = cache
        grad = np.zeros(self.n_params)
        layers = list(self._weights(params))
        d = dout
        for i in range(len(layers) - 1, -1, -1):
            w_sl, b_sl, _, _ = self._slices[i]
            w, _ = layers[i]
            grad[w_sl] = (d.T @ hs[i]).ravel()
            grad[b_sl] = d.sum(axis=0)
            if i > 0:
                d = (d @ w) * (1.0 - hs[i] ** 2)
        return grad


class RunningNorm:
    """Welford running mean/variance, freezable for evaluation."""

    def __init__(self, dim: int, eps: float = 1e-8):
        self.dim = dim
        self.eps = eps
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.frozen = False

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.atleast_2d(np.asarray(x, dtype=float))
        # Chan's batched merge of (count, mean, m2) statistics
        n_b = float(x.shape[0])
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        if self.count == 0.0:
            self.count, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        delta = mean_b - self.mean
        total = self.count + n_b
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.count * n_b / total)
        self.count = total

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return self.m2 / self.count

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + self.eps)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "count": self.count,
            "mean": _encode_array(self.mean),
            "m2": _encode_array(self.m2),
            "frozen": self.frozen,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunningNorm":
        norm = RunningNorm(int(d["dim"]))
        norm.count = float(d["count"])
        norm.mean = _decode_array(d["mean"])
        norm.m2 = _decode_array(d["m2"])
        norm.frozen = bool(d["frozen"])
        return norm


def _require_finite(x: np.ndarray, what: str) -> None:
    # dot-product screen: one SIMD pass; inf**2 and nan both poison the sum
    flat = x.reshape(-1)
    if math.isfinite(float(np.dot(flat, flat))):
        return
    bad = np.argwhere(~np.isfinite(np.atleast_1d(x)))
    if bad.size == 0:  # the screen overflowed on huge-but-finite values
        return
    raise NumericalError(f"non-finite values in {what} at indices {bad[:5].tolist()}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-cdf draw; cheaper than Generator.choice for small vectors."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"),
                   len(probs) - 1))


class Policy:
    """Stochastic mapping from observations to an action distribution.

    Parameters sit in ``params`` (flat float64). Gaussian policies append the
    log-std vector after the MLP parameters. ``action_bounds`` (continuous
    only) clip sampled actions before environment execution; the reported
    log-probability is always of the unclipped sample.
    """

    def __init__(self, arch: ArchSpec, params: np.ndarray | None = None,
                 action_bounds: np.ndarray | None = None,
                 obs_norm: RunningNorm | None = None,
                 rng: np.random.Generator | None = None):
        self.arch = arch
        self.mlp = Mlp(arch)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = self._fresh_params(rng)
        params = np.asarray(params, dtype=float)
        if params.shape != (arch.param_count,):
            raise ValueError(
                f"parameter vector has {params.shape} entries, descriptor requires "
                f"({arch.param_count},)"
            )
        self.params = params
        self.action_bounds = None if action_bounds is None else np.asarray(action_bounds, dtype=float)
        self.obs_norm = obs_norm

    def _fresh_params(self, rng: np.random.Generator) -> np.ndarray:
        out_gain = 0.01 if self.arch.head in ("gaussian", "categorical") else 1.0
        params = np.zeros(self.arch.param_count)
        params[: self.mlp.n_params] = self.mlp.init_params(rng, out_gain=out_gain)
        if self.arch.head == "gaussian":
            params[self.mlp.n_params :] = LOG_STD_INIT
        return params

    # -- parameter views ---------------------------------------------------

    @property
    def mlp_params(self) -> np.ndarray:
        return self.params[: self.mlp.n_params]

    @property
    def log_std(self) -> np.ndarray:
        if self.arch.head != "gaussian":
            raise ValueError("log_std only exists for gaussian heads")
        return np.clip(self.params[self.mlp.n_params :], LOG_STD_MIN, LOG_STD_MAX)

    def _log_std_grad_mask(self) -> np.ndarray:
        raw = self.params[self.mlp.n_params :]
        return ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)

    def copy(self) -> "Policy":
        norm = None
        if self.obs_norm is not None:
            norm = RunningNorm.from_dict(self.obs_norm.to_dict())
        return Policy(self.arch, self.params.copy(),
                      None if self.action_bounds is None else self.action_bounds.copy(),
                      norm)

    # -- observation handling ----------------------------------------------

    def _prep(self, obs: np.ndarray, normalized: bool) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        _require_finite(obs, "observation")
        if self.obs_norm is not None and not normalized:
            obs = self.obs_norm.normalize(obs)
        return np.atleast_2d(obs)

    # -- acting --------------------------------------------------------------

    def act(self, obs, mode: str = "sample", rng: np.random.Generator | None = None,
            normalized: bool = False, with_raw: bool = False):
        """Draw (sample) or return the distribution mode (mean) plus its logprob.

        ``with_raw`` additionally returns the pre-clipping sample, which is
        what the density (and therefore PPO's ratio) refers to.
        """
        _require_finite(self.params, "policy parameters")
        x = self._prep(obs, normalized)
        out, _ = self.mlp.forward(self.mlp_params, x)
        out = out[0]
        if self.arch.head == "categorical":
            logp_all = _log_softmax(out)
            if mode == "mean":
                a = int(np.argmax(out))
            elif mode == "sample":
                if rng is None:
                    raise ValueError("sample mode requires an rng")
                a = _sample_index(np.exp(logp_all), rng)
            else:
                raise ValueError(f"unknown act mode {mode!r}")
            if with_raw:
                return a, float(logp_all[a]), a
            return a, float(logp_all[a])
        mean = out
        sigma = np.exp(self.log_std)
        if mode == "mean":
            raw = mean
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode requires an rng")
            raw = mean + sigma * rng.standard_normal(self.arch.out_dim)
        else:
            raise ValueError(f"unknown act mode {mode!r}")
        logprob = float(
            -0.5 * np.sum(((raw - mean) / sigma) ** 2)
            - np.sum(np.log(sigma))
            - 0.5 * self.arch.out_dim * LOG_2PI
        )
        action = raw
        if self.action_bounds is not None:
            action = np.clip(raw, self.action_bounds[:, 0], self.action_bounds[:, 1])
        if with_raw:
            return action, logprob, raw
        return action, logprob

    # -- densities and manual gradients --------------------------------------

    def logprob(self, obs: np.ndarray, actions: np.ndarray, normalized: bool = False):
        """Per-sample log-density of ``actions``; cache supports logprob_backward."""
        x = self._prep(obs, normalized)
        out, mlp_cache = self.mlp.forward(self.mlp_params, x)
        if self.arch.head == "categorical":
            acts = np.asarray(actions, dtype=int).reshape(-1)
            logp_all = _log_softmax(out)
            lp = logp_all[np.arange(len(acts)), acts]
            cache = ("categorical", mlp_cache, np.exp(logp_all), acts)
            return lp, cache
        acts = np.atleast_2d(np.asarray(actions, dtype=float))
        sigma = np.exp(self.log_std)
        z = (acts - out) / sigma
        lp = (-0.5 * (z ** 2) - np.log(sigma)).sum(axis=1) - 0.5 * self.arch.out_dim * LOG_2PI
        cache = ("gaussian", mlp_cache, z, sigma)
        return lp, cache

    def logprob_backward(self, cache, dlp: np.ndarray) -> np.ndarray:
        """Gradient of sum_b dlp_b * logprob_b with respect to the flat params."""
        kind, mlp_cache = cache[0], cache[1]
        grad = np.zeros(self.arch.param_count)
        if kind == "categorical":
            probs, acts = cache[2], cache[3]
            dout = -probs * dlp[:, None]
            dout[np.arange(len(acts)), acts] += dlp
            grad[: self.mlp.n_params] = self.mlp.backward(mlp_cache, dout)
            return grad
        z, sigma = cache[2], cache[3]
        dout = dlp[:, None] * z / sigma
        grad[: self.mlp.n_params] = self.mlp.backward(mlp_cache, dout)
        dlogstd = (dlp[:, None] * (z ** 2 - 1.0)).sum(axis=0)
        grad[self.mlp.n_params :] = dlogstd * self._log_std_grad_mask()
        return grad

    def entropy(self, obs: np.ndarray, normalized: bool = False):
        """Per-sample distribution entropy; cache supports entropy_backward."""
        x = self._prep(obs, normalized)
        if self.arch.head == "gaussian":
            ent = np.full(x.shape[0], float(np.sum(self.log_std) +
                                            0.5 * self.arch.out_dim * (1.0 + LOG_2PI)))
            return ent, ("gaussian", x.shape[0])
        out, mlp_cache = self.mlp.forward(self.mlp_params, x)
        logp = _log_softmax(out)
        p = np.exp(logp)
        ent = -(p * logp).sum(axis=1)
        return ent, ("categorical", mlp_cache, p, logp, ent)

    def entropy_backward(self, cache, dent: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.arch.param_count)
        if cache[0] == "gaussian":
            grad[self.mlp.n_params :] = dent.sum() * self._log_std_grad_mask()
            return grad
        _, mlp_cache, p, logp, ent = cache
        dout = -p * (logp + ent[:, None]) * dent[:, None]
        grad[: self.mlp.n_params] = self.mlp.backward(mlp_cache, dout)
        return grad

    def dist_params(self, obs: np.ndarray, normalized: bool = False) -> np.ndarray:
        """Mean (gaussian) or logits (categorical) for a batch of observations."""
        x = self._prep(obs, normalized)
        out, _ = self.mlp.forward(self.mlp_params, x)
        return out


class ValueFunction:
    """Scalar state-value estimator with the same MLP machinery."""

    def __init__(self, obs_dim: int, hidden: tuple = (64, 64),
                 params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.arch = ArchSpec(obs_dim=obs_dim, out_dim=1, hidden=hidden, head="scalar")
        self.mlp = Mlp(self.arch)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = self.mlp.init_params(rng, out_gain=1.0)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.mlp.n_params,):
            raise ValueError("value parameter vector does not match architecture")
        self.params = params

    def value(self, obs: np.ndarray):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        _require_finite(obs, "observation")
        out, cache = self.mlp.forward(self.params, obs)
        return out[:, 0], cache

    def value_backward(self, cache, dv: np.ndarray) -> np.ndarray:
        return self.mlp.backward(cache, dv[:, None])

    def copy(self) -> "ValueFunction":
        return ValueFunction(self.arch.obs_dim, self.arch.hidden, self.params.copy())


def policy_act(policy: Policy, obs, mode: str = "sample",
               rng: np.random.Generator | None = None):
    """Act with ``policy`` on ``obs``: sample the head or return its mode."""
    return policy.act(obs, mode=mode, rng=rng)


def make_pure_discrete_policy(n_actions: int, index: int,
                              obs_dim: int = 1, margin: float = 60.0) -> Policy:
    """Categorical policy that plays ``index`` (logit margin makes misdraws
    numerically unreachable under 53-bit uniforms)."""
    if not 0 <= index < n_actions:
        raise ValueError("pure action index out of range")
    arch = ArchSpec(obs_dim=obs_dim, out_dim=n_actions, hidden=(), head="categorical")
    params = np.zeros(arch.param_count)
    # single linear layer: weights stay zero, bias carries the logits
    params[arch.mlp_param_count - n_actions + index] = margin
    return Policy(arch, params)


# -- checkpoint container ----------------------------------------------------


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.asarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f8").copy()


def policy_to_dict(policy: Policy, kind: str | None = None,
                   budget_config: dict | None = None) -> dict:
    d = {
        "format_version": CHECKPOINT_VERSION,
        "arch": policy.arch.to_dict(),
        "params": _encode_array(policy.params),
        "dtype": "<f8",
        "action_bounds": None if policy.action_bounds is None
        else _encode_array(policy.action_bounds.ravel()),
        "obs_norm": None if policy.obs_norm is None else policy.obs_norm.to_dict(),
    }
    if kind is not None:
        d["kind"] = kind
    if budget_config is not None:
        d["budget"] = budget_config
    return d


def policy_from_dict(d: dict) -> Policy:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {d.get('format_version')!r} is not "
            f"supported (expected {CHECKPOINT_VERSION})"
        )
    arch = ArchSpec.from_dict(d["arch"])
    params = _decode_array(d["params"])
    bounds = d.get("action_bounds")
    if bounds is not None:
        bounds = _decode_array(bounds).reshape(-1, 2)
    norm = d.get("obs_norm")
    if norm is not None:
        norm = RunningNorm.from_dict(norm)
    return Policy(arch, params, bounds, norm)


def save_policy(policy: Policy, path: str, kind: str | None = None,
                budget_config: dict | None = None) -> None:
    payload = policy_to_dict(policy, kind=kind, budget_config=budget_config)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def load_policy(path: str) -> Policy:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable policy checkpoint {path}: {exc}") from exc
    return policy_from_dict(payload)


def load_policy_dict(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable policy checkpoint {path}: {exc}") from exc


def params_fingerprint(policy: Policy) -> str:
    """Stable hash of parameters plus frozen normalization statistics."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(policy.params, dtype="<f8").tobytes())
    if policy.obs_norm is not None:
        h.update(np.ascontiguousarray(policy.obs_norm.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(policy.obs_norm.m2, dtype="<f8").tobytes())
        h.update(str(policy.obs_norm.count).encode())
    return h.hexdigest()
