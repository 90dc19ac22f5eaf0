"""Small dense networks with hand-written reverse passes, Adam and checkpoints.

Every network keeps its parameters in an ordered ``dict[str, ndarray]`` so
that optimizers, gradient checks and the checkpoint writer can treat all of
them uniformly. Forward passes never mutate parameters; they return a cache
that the matching ``backward`` consumes.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient became NaN/inf; the update is aborted."""


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteLossError(f"non-finite {name}: {value!r}"[:200])


# ----------------------------------------------------------------------------
# dense stacks

_ACT = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


class DenseNet:
    """Stack of affine layers, each followed by an activation."""

    def __init__(self, name: str, sizes: list[int], activations: list[str], rng: np.random.Generator,
                 final_scale: float | None = None):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.name = name
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.params: dict[str, np.ndarray] = {}
        for k, (n_in, n_out, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            gain = math.sqrt(2.0) if act == "relu" else 1.0
            if final_scale is not None and k == len(activations) - 1:
                gain = final_scale
            self.params[f"{name}.W{k}"] = orthogonal(rng, n_in, n_out, gain)
            self.params[f"{name}.b{k}"] = np.zeros(n_out)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"{self.name}: expected input dim {self.input_dim}, got {x.shape[-1]}")
        cache = []
        for k, act in enumerate(self.activations):
            z = x @ self.params[f"{self.name}.W{k}"] + self.params[f"{self.name}.b{k}"]
            a = _ACT[act][0](z)
            cache.append((x, z, a))
            x = a
        return x, cache

    def backward(self, cache, dy: np.ndarray):
        """Gradients of ``sum(dy * y)`` w.r.t. parameters and input."""
        grads = {}
        for k in reversed(range(len(self.activations))):
            x, z, a = cache[k]
            dz = dy * _ACT[self.activations[k]][1](z, a)
            grads[f"{self.name}.W{k}"] = x.T @ dz
            grads[f"{self.name}.b{k}"] = dz.sum(axis=0)
            dy = dz @ self.params[f"{self.name}.W{k}"].T
        return grads, dy


# ----------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class Architecture:
    scan_dim: int
    tail_dim: int = 5
    n_tokens: int = 5
    embed_dim: int = 32
    scan_hidden: tuple[int, ...] = (512, 256)
    head_hidden: int = 128
    disc_hidden: int = 128
    v_max: float = 1.0
    w_max: float = 1.0
    log_std_init: float = -0.5
    embed_init_std: float = 0.1
    policy_out_scale: float = 0.01

    @property
    def feature_dim(self) -> int:
        return self.scan_dim + self.tail_dim

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["scan_hidden"] = list(self.scan_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["scan_hidden"] = tuple(d["scan_hidden"])
        return cls(**d)


class _ConditionedNet:
    """Scan trunk, then a head over [trunk output, goal/velocity tail, token embedding]."""

    def __init__(self, name: str, arch: Architecture, out_dim: int, rng: np.random.Generator,
                 final_scale: float):
        self.arch = arch
        sizes = [arch.scan_dim, *arch.scan_hidden]
        self.trunk = DenseNet(f"{name}.trunk", sizes, ["tanh"] * len(arch.scan_hidden), rng)
        head_in = sizes[-1] + arch.tail_dim + arch.embed_dim
        self.head = DenseNet(f"{name}.head", [head_in, arch.head_hidden, out_dim], ["tanh", "identity"], rng,
                             final_scale=final_scale)
        self.embed_key = f"{name}.embedding"
        self.params = {self.embed_key: rng.normal(0.0, arch.embed_init_std, (arch.n_tokens, arch.embed_dim))}
        # share array objects so optimizers see one flat dict
        self.params.update(self.trunk.params)
        self.params.update(self.head.params)

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.arch.n_tokens):
            raise ValueError(f"token out of range [0, {self.arch.n_tokens})")
        return tokens

    def _forward(self, features: np.ndarray, tokens):
        features = np.atleast_2d(features)
        if features.shape[1] != self.arch.feature_dim:
            raise ValueError(f"expected {self.arch.feature_dim} features, got {features.shape[1]}")
        tokens = self._check_tokens(tokens)
        h, c_trunk = self.trunk.forward(features[:, :self.arch.scan_dim])
        e = self.params[self.embed_key][tokens]
        x = np.concatenate([h, features[:, self.arch.scan_dim:], e], axis=1)
        raw, c_head = self.head.forward(x)
        return raw, (c_trunk, c_head, tokens, h.shape[1])

    def _backward(self, cache, d_raw):
        c_trunk, c_head, tokens, n_h = cache
        grads, dx = self.head.backward(c_head, d_raw)
        g_trunk, _ = self.trunk.backward(c_trunk, dx[:, :n_h])
        grads.update(g_trunk)
        g_emb = np.zeros_like(self.params[self.embed_key])
        np.add.at(g_emb, tokens, dx[:, n_h + self.arch.tail_dim:])
        grads[self.embed_key] = g_emb
        return grads


class PolicyNet(_ConditionedNet):
    """Token-conditioned diagonal Gaussian over (v, w)."""

    def __init__(self, arch: Architecture, rng: np.random.Generator):
        super().__init__("policy", arch, 2, rng, final_scale=arch.policy_out_scale)
        self.params["policy.log_std"] = np.full(2, arch.log_std_init)
        self.scale = np.array([arch.v_max, arch.w_max])

    def forward(self, features, tokens):
        """Returns (mean (B, 2), std (B, 2), cache)."""
        raw, cache = self._forward(features, tokens)
        t = np.tanh(raw)
        mean = np.stack([0.5 * self.scale[0] * (t[:, 0] + 1.0), self.scale[1] * t[:, 1]], axis=1)
        std = np.broadcast_to(np.exp(self.params["policy.log_std"]), mean.shape)
        return mean, std, (cache, t)

    def backward(self, cache, d_mean, d_log_std):
        inner, t = cache
        dsquash = np.stack([0.5 * self.scale[0] * (1 - t[:, 0] ** 2), self.scale[1] * (1 - t[:, 1] ** 2)], axis=1)
        grads = self._backward(inner, d_mean * dsquash)
        grads["policy.log_std"] = np.asarray(d_log_std, float).reshape(2)
        return grads


class ValueNet(_ConditionedNet):
    def __init__(self, arch: Architecture, rng: np.random.Generator):
        super().__init__("value", arch, 1, rng, final_scale=1.0)

    def forward(self, features, tokens):
        raw, cache = self._forward(features, tokens)
        return raw[:, 0], cache

    def backward(self, cache, d_value):
        return self._backward(cache, np.asarray(d_value)[:, None])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Discriminator:
    """Posterior over tokens: two ReLU layers and a softmax."""

    def __init__(self, name: str, input_dim: int, n_tokens: int, hidden: int, rng: np.random.Generator):
        self.n_tokens = n_tokens
        self.net = DenseNet(name, [input_dim, hidden, hidden, n_tokens], ["relu", "relu", "identity"], rng,
                            final_scale=0.01)
        self.params = self.net.params

    def forward(self, x):
        logits, cache = self.net.forward(np.atleast_2d(x))
        logp = log_softmax(logits)
        return np.exp(logp), (cache, logp)

    def log_probs(self, x) -> np.ndarray:
        return self.forward(x)[1][1]

    def cross_entropy(self, x, labels):
        """Mean cross-entropy, accuracy and parameter gradients."""
        labels = np.asarray(labels, dtype=np.int64)
        probs, (cache, logp) = self.forward(x)
        n = len(labels)
        loss = -float(logp[np.arange(n), labels].mean())
        check_finite("discriminator loss", loss)
        d_logits = probs.copy()
        d_logits[np.arange(n), labels] -= 1.0
        grads, _ = self.net.backward(cache, d_logits / n)
        acc = float((probs.argmax(axis=1) == labels).mean())
        return loss, acc, grads


def policy_forward(policy: PolicyNet, obs, token: int, max_range: float = 10.0):
    """Single-observation convenience: (mean, std) for one token.

    ``obs`` is either an ``Observation`` or an already flattened feature vector.
    """
    x = obs.features(max_range) if hasattr(obs, "features") else np.asarray(obs, float)
    mean, std, _ = policy.forward(x[None, :], [token])
    return mean[0], std[0]


def discriminator_forward(disc: Discriminator, x) -> np.ndarray:
    """Token posterior for one input vector, or a batch of them."""
    x = np.asarray(x, float)
    probs, _ = disc.forward(x)
    return probs[0] if x.ndim == 1 else probs


# ----------------------------------------------------------------------------
# Gaussian head


def gaussian_log_prob(actions, mean, std) -> np.ndarray:
    z = (actions - mean) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI).sum(axis=-1)


def sample_action(mean, std, rng: np.random.Generator, v_max: float = 1.0, w_max: float = 1.0):
    """Draw raw Gaussian actions; returns (clamped action, raw action, log prob of raw)."""
    mean = np.asarray(mean, float)
    std = np.asarray(std, float)
    raw = mean + std * rng.standard_normal(mean.shape)
    lo = np.array([0.0, -w_max])
    hi = np.array([v_max, w_max])
    return np.clip(raw, lo, hi), raw, gaussian_log_prob(raw, mean, std)


def gaussian_kl(mean_p, std_p, mean_q, std_q) -> np.ndarray:
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    return (np.log(std_q / std_p) + (std_p ** 2 + (mean_p - mean_q) ** 2) / (2.0 * std_q ** 2) - 0.5).sum(-1)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    params: dict[str, np.ndarray]
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            check_finite(f"gradient {k}", g)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: Adam) -> dict[str, np.ndarray]:
    """Functional spelling of ``state.step``; updates ``params`` in place and returns it."""
    if state.params is not params:
        raise ValueError("optimizer state belongs to a different parameter set")
    state.step(grads)
    return params


# ----------------------------------------------------------------------------
# bundle of all trainable pieces


class Networks:
    """Policy, value function and the two token discriminators."""

    def __init__(self, arch: Architecture, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.arch = arch
        self.policy = PolicyNet(arch, rng)
        self.value = ValueNet(arch, rng)
        self.disc_s = Discriminator("disc_s", arch.feature_dim, arch.n_tokens, arch.disc_hidden, rng)
        self.disc_sa = Discriminator("disc_sa", arch.feature_dim + 2, arch.n_tokens, arch.disc_hidden, rng)

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (self.policy, self.value, self.disc_s, self.disc_sa):
            out.update(net.params)
        return out


# ----------------------------------------------------------------------------
# gradient verification


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, float)
    n = np.asarray(numeric, float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


# ----------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   8 bytes   magic b"DIVNAVCK"
#   uint32    format version
#   uint32    number of behavior tokens M
#   uint32    header length L
#   L bytes   UTF-8 JSON header: {"arch": ..., "arrays": [[name, shape], ...], "meta": ...}
#   ...       each array as float64 little-endian, row-major, in header order
#   uint32    CRC-32 of every preceding byte

MAGIC = b"DIVNAVCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    n_tokens: int
    arch: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        header = {"arch": self.arch, "arrays": [[k, list(a.shape)] for k, a in self.arrays.items()],
                  "meta": self.meta}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<III", self.version, self.n_tokens, len(hbytes)), hbytes]
        for a in self.arrays.values():
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 20 or data[:8] != MAGIC:
            raise CorruptCheckpointError("bad magic or truncated header")
        version, n_tokens, hlen = struct.unpack("<III", data[8:20])
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
        if len(data) < 20 + hlen + 4:
            raise CorruptCheckpointError("truncated header")
        try:
            header = json.loads(data[20:20 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptCheckpointError(f"unreadable header: {e}") from None
        offset = 20 + hlen
        arrays = {}
        for name, shape in header["arrays"]:
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes + 4 > len(data):
                raise CorruptCheckpointError(f"truncated while reading {name}")
            arrays[name] = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(float)
            offset += nbytes
        if offset + 4 != len(data):
            raise CorruptCheckpointError("trailing bytes after arrays")
        (crc,) = struct.unpack("<I", data[offset:])
        if crc != zlib.crc32(data[:offset]):
            raise CorruptCheckpointError("checksum mismatch")
        return cls(n_tokens, header["arch"], arrays, header["meta"], version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


def load_into(target: dict[str, np.ndarray], arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into an existing parameter dict, checking names and shapes."""
    for k, p in target.items():
        src = arrays.get(prefix + k)
        if src is None:
            raise ShapeMismatchError(f"checkpoint lacks array {prefix + k}")
        if src.shape != p.shape:
            raise ShapeMismatchError(f"{prefix + k}: checkpoint shape {src.shape}, model shape {p.shape}")
        p[...] = src
