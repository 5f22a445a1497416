"""Minimal dense-network toolkit on float64 numpy arrays.

Everything the networks in this project need: MLP forward passes that record
an explicit tape, a matching reverse-mode backward, bias-corrected Adam,
sinusoidal index embeddings, a flat binary parameter file, and a central
finite-difference gradient checker used as the independent test oracle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, FormatError, NumericError, TapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

HIDDEN_ACTIVATIONS = ("tanh", "relu", "gelu")
# Output activations deliberately include gelu so a trunk network can end in a
# gelu layer and feed linear heads.
OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid", "gelu", "relu")


def _apply_act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "gelu":
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ConfigError(f"unknown activation {name!r}")


def _act_with_grad(name: str, pre: np.ndarray):
    """Activation output and its derivative w.r.t. the pre-activation,
    sharing the expensive transcendental evaluations."""
    if name == "identity":
        return pre, np.ones_like(pre)
    if name == "tanh":
        t = np.tanh(pre)
        return t, 1.0 - t * t
    if name == "relu":
        mask = pre > 0.0
        return pre * mask, mask.astype(np.float64)
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(pre * _INV_SQRT2))
        return pre * cdf, cdf + pre * np.exp(-0.5 * pre * pre) * _INV_SQRT_2PI
    if name == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s, s * (1.0 - s)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths [in, h1, ..., out] plus hidden/output activations."""

    widths: tuple[int, ...]
    hidden: str = "tanh"
    output: str = "identity"

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ConfigError("MlpSpec needs at least one weight layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise ConfigError("all layer widths must be >= 1")
        if self.hidden not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"hidden activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class ParamStore:
    """Named float64 parameter tensors with gradient and Adam moment buffers.

    All tensors are 2-D (biases are stored as (1, n)); the step counter is
    shared by every parameter in the store.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"parameter {name!r} already registered")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise DimensionError(
                f"gradient shape {grad.shape} != parameter shape {self.params[name].shape} for {name!r}"
            )
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.copy())
            out.grads[name][...] = self.grads[name]
            out.adam_m[name][...] = self.adam_m[name]
            out.adam_v[name][...] = self.adam_v[name]
        out.step = self.step
        return out


class Tape:
    """Record of one forward pass, consumed exactly once by backward."""

    __slots__ = ("mlp", "store", "x", "act_grads", "posts", "used")

    def __init__(self, mlp: "Mlp", store: ParamStore, x, act_grads, posts) -> None:
        self.mlp = mlp
        self.store = store
        self.x = x
        self.act_grads = act_grads
        self.posts = posts
        self.used = False


class Mlp:
    """A feed-forward network whose parameters live in a shared ParamStore.

    Weights are (fan_in, fan_out) so forward is ``x @ W + b``. Init follows
    uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), biases zero.
    """

    def __init__(self, spec: MlpSpec, store: ParamStore, prefix: str = "",
                 rng: np.random.Generator | None = None) -> None:
        self.spec = spec
        self.store = store
        self.prefix = prefix
        first = f"{prefix}W0"
        if first not in store.params:
            if rng is None:
                raise ConfigError("rng required to initialise new parameters")
            for i, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
                a = np.sqrt(6.0 / (fi + fo))
                store.add(f"{prefix}W{i}", rng.uniform(-a, a, size=(fi, fo)))
                store.add(f"{prefix}b{i}", np.zeros((1, fo)))
        else:
            for i, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
                if store.params[f"{prefix}W{i}"].shape != (fi, fo):
                    raise DimensionError(f"stored {prefix}W{i} does not match spec widths")

    def _layer_act(self, i: int) -> str:
        return self.spec.output if i == self.spec.n_layers - 1 else self.spec.hidden

    def forward(self, x: np.ndarray, record: bool = False):
        """Run the network on a (batch, in) array.

        Returns (output, tape); tape is None unless ``record`` is set.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.widths[0]:
            raise DimensionError(
                f"input shape {x.shape} incompatible with first layer width {self.spec.widths[0]}"
            )
        act_grads, posts = [], []
        h = x
        for i in range(self.spec.n_layers):
            w = self.store.params[f"{self.prefix}W{i}"]
            b = self.store.params[f"{self.prefix}b{i}"]
            pre = h @ w + b
            if record:
                h, grad = _act_with_grad(self._layer_act(i), pre)
                act_grads.append(grad)
                posts.append(h)
            else:
                h = _apply_act(self._layer_act(i), pre)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite output from network {self.prefix!r}")
        out = h[0] if squeeze else h
        tape = Tape(self, self.store, x, act_grads, posts) if record else None
        return out, tape

    def backward(self, tape: Tape, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns gradient w.r.t. the input."""
        if tape is None or tape.mlp is not self or tape.store is not self.store:
            raise TapeError("tape does not belong to this network")
        if tape.used:
            raise TapeError("tape already consumed")
        tape.used = True
        d = np.asarray(upstream, dtype=np.float64)
        if d.ndim == 1:
            d = d[None, :]
        if d.shape != tape.posts[-1].shape:
            raise TapeError(
                f"upstream gradient shape {d.shape} != output shape {tape.posts[-1].shape}"
            )
        for i in range(self.spec.n_layers - 1, -1, -1):
            dpre = d * tape.act_grads[i]
            x_in = tape.x if i == 0 else tape.posts[i - 1]
            self.store.accumulate(f"{self.prefix}W{i}", x_in.T @ dpre)
            self.store.accumulate(f"{self.prefix}b{i}", dpre.sum(axis=0, keepdims=True))
            d = dpre @ self.store.params[f"{self.prefix}W{i}"].T
        return d


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter; zeroes gradients.

    Parameters whose accumulated gradient is identically zero are left
    untouched (moments included), so a zero-gradient step is a no-op.
    """
    if lr <= 0.0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        if not np.any(g):
            continue
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grad()


def sinusoidal_embed(index: int, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sin/cos embedding of a non-negative integer index.

    First half is sin, second half cos, at geometrically spaced frequencies
    from 1 down to 1/max_period.
    """
    return sinusoidal_embed_batch(np.asarray([index]), dim, max_period)[0]


def sinusoidal_embed_batch(indices: np.ndarray, dim: int,
                           max_period: float = 10_000.0) -> np.ndarray:
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = np.asarray(indices, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def grad_check(store: ParamStore, loss_fn, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(store)`` must return the scalar loss *and* accumulate analytic
    gradients into the store. Relative error uses max(1e-8, |fd|) in the
    denominator; any non-finite loss is reported as inf. A store without
    parameters yields 0.
    """
    store.zero_grad()
    loss0 = float(loss_fn(store))
    if not np.isfinite(loss0):
        return float("inf")
    analytic = {name: g.copy() for name, g in store.grads.items()}
    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        ana = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            store.zero_grad()
            lp = float(loss_fn(store))
            flat[j] = orig - h
            store.zero_grad()
            lm = float(loss_fn(store))
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                return float("inf")
            fd = (lp - lm) / (2.0 * h)
            err = abs(ana[j] - fd) / max(1e-8, abs(fd))
            if err > worst:
                worst = err
    store.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# Binary parameter container.
#
# Layout: magic (4 bytes) | version u32 | extra header u32s | repeated
# [name_len u32 | name utf-8 | rows u32 | cols u32 | rows*cols f64 LE].
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_params(store: ParamStore, path, magic: bytes = b"ANVP",
                header_extra: tuple[int, ...] = ()) -> None:
    if len(magic) != 4:
        raise ConfigError("magic must be exactly 4 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for v in header_extra:
            fh.write(struct.pack("<I", v))
        for name, p in store.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", p.shape[0], p.shape[1]))
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def load_params(path, magic: bytes = b"ANVP", n_extra: int = 0):
    """Load a parameter container; returns (store, extra_header_tuple)."""
    store = ParamStore()
    with open(path, "rb") as fh:
        got = _read_exact(fh, 4, "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported container version {version}")
        extras = tuple(
            struct.unpack("<I", _read_exact(fh, 4, "header"))[0] for _ in range(n_extra)
        )
        while True:
            head = fh.read(4)
            if head == b"":
                break
            if len(head) != 4:
                raise FormatError("truncated file while reading tensor name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(fh, 8, "tensor shape"))
            payload = _read_exact(fh, rows * cols * 8, f"tensor {name!r} payload")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
            if name in store.params:
                raise FormatError(f"duplicate tensor {name!r}")
            store.add(name, arr)
    return store, extras
