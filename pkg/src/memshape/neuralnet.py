"""Small tanh MLPs with hand-written backprop and an Adam optimizer.

Everything is float64 numpy. Layers store weights as ``(fan_in, fan_out)``
so a batch ``X @ W + b`` maps rows to rows.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, FormatError, TrainingDivergenceError

CHECKPOINT_MAGIC = b"MEMSHAPE-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ForwardTrace:
    # inputs[i] is the input to layer i (post-activation of layer i-1)
    inputs: list[np.ndarray]


@dataclass
class MLP:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def initialize(cls, sizes, rng: np.random.Generator, out_scale: float = 1.0) -> "MLP":
        """Glorot-uniform weights, zero biases; last layer scaled by ``out_scale``."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        weights[-1] *= out_scale
        return cls(weights, biases)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_inputs:
            raise DimensionError(f"expected {self.n_inputs} input features, got {x.shape[-1]}")
        inputs = []
        h = x
        last = self.depth - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
        return h, ForwardTrace(inputs)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without keeping a trace."""
        last = self.depth - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < last:
                x = np.tanh(x)
        return x

    def backward(self, trace: ForwardTrace, upstream: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. ``parameters()``."""
        if len(trace.inputs) != self.depth:
            raise DimensionError("trace does not match network depth")
        g = np.asarray(upstream, dtype=float)
        if g.shape[-1] != self.n_outputs:
            raise DimensionError(f"upstream gradient has {g.shape[-1]} entries, expected {self.n_outputs}")
        grads: list[np.ndarray] = [None] * (2 * self.depth)
        for i in range(self.depth - 1, -1, -1):
            a = trace.inputs[i]
            if a.ndim == 1:
                grads[2 * i] = np.outer(a, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = a.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                # a = tanh(z) of the previous layer
                g = (g @ self.weights[i].T) * (1.0 - a * a)
        return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, net: MLP) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.parameters()], [np.zeros_like(p) for p in net.parameters()])


def adam_step(net: MLP, state: AdamState, grads, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> MLP:
    """One bias-corrected Adam *descent* step, applied in place."""
    params = net.parameters()
    if len(grads) != len(params):
        raise DimensionError("gradient list does not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return net


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if max_norm is None or max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return [g * scale for g in grads]
    return grads


@dataclass
class PolicyParams:
    actor: MLP
    critic: MLP
    actor_opt: AdamState = None
    critic_opt: AdamState = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.actor_opt is None:
            self.actor_opt = AdamState.like(self.actor)
        if self.critic_opt is None:
            self.critic_opt = AdamState.like(self.critic)

    @classmethod
    def initialize(cls, n_features: int, n_actions: int, rng: np.random.Generator,
                   hidden: int = 64) -> "PolicyParams":
        actor = MLP.initialize([n_features, hidden, n_actions], rng, out_scale=0.01)
        critic = MLP.initialize([n_features, hidden, 1], rng)
        return cls(actor, critic)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net, opt in (("actor", self.actor, self.actor_opt), ("critic", self.critic, self.critic_opt)):
            for i, (p, m, v) in enumerate(zip(net.parameters(), opt.m, opt.v)):
                kind = "W" if i % 2 == 0 else "b"
                out[f"{prefix}.{kind}{i // 2}"] = p
                out[f"{prefix}.{kind}{i // 2}.m"] = m
                out[f"{prefix}.{kind}{i // 2}.v"] = v
        return out


def actor_forward(params: PolicyParams, features: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    return params.actor.forward(features)


def critic_forward(params: PolicyParams, features: np.ndarray):
    out, trace = params.critic.forward(features)
    return (float(out[0]) if out.ndim == 1 else out[:, 0]), trace


def backward(net: MLP, trace: ForwardTrace, upstream: np.ndarray) -> list[np.ndarray]:
    return net.backward(trace, upstream)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Draw an action from softmax(logits); returns (action, log-probability)."""
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    action = min(action, len(logits) - 1)
    return action, float(logp[action])


def save_checkpoint(params: PolicyParams, path) -> None:
    """Write a deterministic binary dump: magic, JSON header, raw float64 tensors."""
    tensors = params.tensors()
    header = {
        "version": CHECKPOINT_VERSION,
        "actor_t": params.actor_opt.t,
        "critic_t": params.critic_opt.t,
        "metadata": params.metadata,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(len(head).to_bytes(8, "little"))
    buf.write(head)
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> PolicyParams:
    data = Path(path).read_bytes()
    magic = CHECKPOINT_MAGIC + b"\n"
    if not data.startswith(magic):
        raise FormatError(f"{path} is not a memshape checkpoint")
    pos = len(magic)
    n = int.from_bytes(data[pos:pos + 8], "little")
    pos += 8
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after tensors")

    def rebuild(prefix: str, t: int) -> tuple[MLP, AdamState]:
        depth = sum(1 for name in arrays if name.startswith(prefix + ".W") and name.count(".") == 1)
        ws = [arrays[f"{prefix}.W{i}"] for i in range(depth)]
        bs = [arrays[f"{prefix}.b{i}"] for i in range(depth)]
        ms, vs = [], []
        for i in range(depth):
            ms += [arrays[f"{prefix}.W{i}.m"], arrays[f"{prefix}.b{i}.m"]]
            vs += [arrays[f"{prefix}.W{i}.v"], arrays[f"{prefix}.b{i}.v"]]
        return MLP(ws, bs), AdamState(ms, vs, t)

    actor, actor_opt = rebuild("actor", header["actor_t"])
    critic, critic_opt = rebuild("critic", header["critic_t"])
    return PolicyParams(actor, critic, actor_opt, critic_opt, metadata=header.get("metadata", {}))
