"""MLP velocity network with hand-written forward-mode JVP and backprop.

The network computes u(x, r, t | c): the point coordinates, sinusoidal
embeddings of r and t, and (for conditional nets) a learned class embedding are
concatenated and pushed through a plain MLP. The raw output is projected onto
the tangent space at x, and that projection is part of the differentiated
model.

All parameters live in one flat float64 vector ``net.theta``. Its layout is
layer-major with each layer's weight matrix (out x in, row-major) before its
bias, followed by the class table ((num_classes + 1) x embed rows, the last
row being the null token). Gradients, AdamW moments and the checkpoint all use
this order.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, FormatError, InvalidArgument, NonFinite
from .geometry import Manifold, SO3, Sphere, manifold_from_spec

MAX_FREQ = 100.0
CHECKPOINT_MAGIC = b"RMF1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    manifold: str
    hidden_dim: int = 512
    num_layers: int = 4
    time_embed_dim: int = 64
    num_classes: int = 0
    activation: str = "silu"
    seed: int = 0
    zero_head: bool = True

    def __post_init__(self):
        if self.num_layers < 2:
            raise InvalidArgument("num_layers must be >= 2")
        if self.hidden_dim < 1:
            raise InvalidArgument("hidden_dim must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise InvalidArgument("time_embed_dim must be a positive even number")
        if self.num_classes < 0:
            raise InvalidArgument("num_classes must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        manifold_from_spec(self.manifold)

    @property
    def ambient_dim(self) -> int:
        return manifold_from_spec(self.manifold).ambient_dim

    @property
    def input_dim(self) -> int:
        extra = self.time_embed_dim if self.num_classes > 0 else 0
        return self.ambient_dim + 2 * self.time_embed_dim + extra

    def layer_shapes(self):
        dims = [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.ambient_dim]
        return [(dims[i + 1], dims[i]) for i in range(self.num_layers)]

    @property
    def parameter_count(self) -> int:
        n = sum(o * i + o for o, i in self.layer_shapes())
        if self.num_classes > 0:
            n += (self.num_classes + 1) * self.time_embed_dim
        return n

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgument(f"unknown net config keys: {sorted(unknown)}")
        return cls(**d)


# -- activations: (f, f', used in JVP and backprop) --------------------------


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _dsilu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _dtanh(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {"silu": (_silu, _dsilu), "tanh": (np.tanh, _dtanh)}


# -- tangent projection head --------------------------------------------------


def _mat(a):
    return a.reshape(a.shape[:-1] + (3, 3))


def _tr(a):
    return np.swapaxes(a, -1, -2)


def head(m: Manifold, x, w):
    if isinstance(m, Sphere):
        return w - np.sum(x * w, axis=-1, keepdims=True) * x
    if isinstance(m, SO3):
        r, wm = _mat(x), _mat(w)
        return (0.5 * (r @ _tr(r) @ wm - r @ _tr(wm) @ r)).reshape(w.shape)
    return w


def head_jvp(m: Manifold, x, dx, w, dw):
    """Directional derivative of ``head`` along (dx, dw)."""
    if isinstance(m, Sphere):
        xw = np.sum(x * w, axis=-1, keepdims=True)
        dxw = np.sum(dx * w, axis=-1, keepdims=True) + np.sum(x * dw, axis=-1, keepdims=True)
        return dw - dxw * x - xw * dx
    if isinstance(m, SO3):
        r, dr, wm, dwm = _mat(x), _mat(dx), _mat(w), _mat(dw)
        out = (
            dr @ _tr(r) @ wm + r @ _tr(dr) @ wm + r @ _tr(r) @ dwm
            - dr @ _tr(wm) @ r - r @ _tr(dwm) @ r - r @ _tr(wm) @ dr
        )
        return (0.5 * out).reshape(w.shape)
    return dw


def head_vjp(m: Manifold, x, g):
    """Adjoint of ``head`` in w (x fixed) applied to a cotangent g."""
    if isinstance(m, Sphere):
        return g - np.sum(x * g, axis=-1, keepdims=True) * x
    if isinstance(m, SO3):
        r, gm = _mat(x), _mat(g)
        return (0.5 * (r @ _tr(r) @ gm - r @ _tr(gm) @ r)).reshape(g.shape)
    return g


# -- embeddings -----------------------------------------------------------------


def time_freqs(embed_dim: int):
    return np.geomspace(1.0, MAX_FREQ, embed_dim // 2)


def time_embed(s, freqs):
    a = s[:, None] * freqs
    return np.concatenate([np.sin(a), np.cos(a)], axis=1)


def time_embed_deriv(s, freqs):
    a = s[:, None] * freqs
    return np.concatenate([np.cos(a) * freqs, -np.sin(a) * freqs], axis=1)


# -------------------------------------------------------------------------------


class Tape:
    """Activations recorded by a forward pass, consumed by ``backward``."""

    __slots__ = ("x", "inputs", "pre", "post", "labels")

    def __init__(self, x, inputs, pre, post, labels):
        self.x = x
        self.inputs = inputs
        self.pre = pre
        self.post = post
        self.labels = labels


class VelocityNet:
    """u_theta(x, r, t | c) with parameters stored as one flat vector."""

    def __init__(self, config: NetConfig, theta=None):
        self.config = config
        self.manifold = manifold_from_spec(config.manifold)
        self.freqs = time_freqs(config.time_embed_dim)
        self.theta = np.zeros(config.parameter_count)
        self._views = self._make_views(self.theta)
        if theta is None:
            self._init_params()
        else:
            theta = np.asarray(theta, dtype=np.float64)
            if theta.shape != self.theta.shape:
                raise ConfigMismatch("parameter vector does not match config")
            self.theta[:] = theta
        self.adam_m = np.zeros_like(self.theta)
        self.adam_v = np.zeros_like(self.theta)
        self.step = 0
        # (seed, draw counter) of the counter-based training stream.
        self.rng_state = (config.seed, 0)

    # -- parameter layout -----------------------------------------------------
    def _make_views(self, flat):
        layers, off = [], 0
        for o, i in self.config.layer_shapes():
            w = flat[off: off + o * i].reshape(o, i)
            off += o * i
            b = flat[off: off + o]
            off += o
            layers.append((w, b))
        table = None
        if self.config.num_classes > 0:
            rows, cols = self.config.num_classes + 1, self.config.time_embed_dim
            table = flat[off: off + rows * cols].reshape(rows, cols)
            off += rows * cols
        assert off == flat.size
        return layers, table

    @property
    def layers(self):
        return self._views[0]

    @property
    def class_table(self):
        return self._views[1]

    @property
    def parameter_count(self) -> int:
        return self.theta.size

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        layers, table = self._views
        for k, (w, b) in enumerate(layers):
            if k == len(layers) - 1 and self.config.zero_head:
                continue
            bound = math.sqrt(3.0 / w.shape[1])
            w[:] = rng.uniform(-bound, bound, size=w.shape)
        if table is not None:
            table[:] = rng.standard_normal(table.shape)

    def copy(self) -> "VelocityNet":
        other = VelocityNet(self.config, self.theta)
        other.adam_m[:] = self.adam_m
        other.adam_v[:] = self.adam_v
        other.step = self.step
        other.rng_state = self.rng_state
        return other

    # -- evaluation -----------------------------------------------------------
    def _resolve_labels(self, labels, n):
        c = self.config.num_classes
        if labels is None:
            if c > 0:
                return np.full(n, c, dtype=np.int64)
            return None
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise InvalidArgument("label batch has the wrong length")
        if c == 0:
            if np.any(labels != -1):
                raise InvalidArgument("unconditional net received class labels")
            return None
        if np.any((labels < -1) | (labels >= c)):
            raise InvalidArgument(f"labels must lie in [0, {c}) or be -1 (null)")
        return np.where(labels == -1, c, labels)

    def _inputs(self, x, r, t, labels):
        m = self.manifold
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != m.ambient_dim:
            raise InvalidArgument(f"expected x of shape (n, {m.ambient_dim}), got {x.shape}")
        n = x.shape[0]
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        idx = self._resolve_labels(labels, n)
        parts = [x, time_embed(r, self.freqs), time_embed(t, self.freqs)]
        if idx is not None:
            parts.append(self.class_table[idx])
        return x, r, t, idx, np.concatenate(parts, axis=1)

    def _run(self, x, r, t, labels, dx=None, dr=0.0, dt=1.0, record=False):
        x, r, t, idx, h = self._inputs(x, r, t, labels)
        act, dact = ACTIVATIONS[self.config.activation]
        tangent = dx is not None
        if tangent:
            dx = np.asarray(dx, dtype=np.float64)
            if dx.shape != x.shape:
                raise InvalidArgument("tangent direction must match the shape of x")
            e = self.config.time_embed_dim
            dh = np.zeros_like(h)
            dh[:, : x.shape[1]] = dx
            if dr != 0.0:
                dh[:, x.shape[1]: x.shape[1] + e] = dr * time_embed_deriv(r, self.freqs)
            if dt != 0.0:
                dh[:, x.shape[1] + e: x.shape[1] + 2 * e] = dt * time_embed_deriv(t, self.freqs)
        inputs, pre, post = h, [], []
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            z = h @ w.T + b
            if tangent:
                dz = dh @ w.T
            if k == last:
                h = z
                dh = dz if tangent else None
                break
            h = act(z)
            if tangent:
                dh = dact(z) * dz
            if record:
                pre.append(z)
                post.append(h)
        u = head(self.manifold, x, h)
        du = head_jvp(self.manifold, x, dx, h, dh) if tangent else None
        tape = Tape(x, inputs, pre, post, idx) if record else None
        return u, du, tape

    def forward(self, x, r, t, labels=None, record=False):
        """Tangent-valued prediction at each x. With ``record`` also returns a Tape."""
        u, _, tape = self._run(x, r, t, labels, record=record)
        return (u, tape) if record else u

    def jvp(self, x, r, t, labels=None, dx=None, dr=0.0, dt=1.0, record=False):
        """Primal output and its directional derivative along (dx, dr, dt).

        The derivative is propagated as dual numbers through every layer and
        through the x-dependent projection head. No parameter gradients.
        """
        if dx is None:
            dx = np.zeros_like(np.asarray(x, dtype=np.float64))
        u, du, tape = self._run(x, r, t, labels, dx=dx, dr=dr, dt=dt, record=record)
        return (u, du, tape) if record else (u, du)

    def backward(self, tape: Tape, cotangent):
        """Gradient w.r.t. theta of <cotangent, u> (summed over the batch).

        Pass dL/du as the cotangent to get dL/dtheta for a scalar loss L(u).
        Returns a flat vector in the documented parameter order.
        """
        _, dact = ACTIVATIONS[self.config.activation]
        grad = np.zeros_like(self.theta)
        glayers, gtable = self._make_views(grad)
        g = head_vjp(self.manifold, tape.x, np.asarray(cotangent, dtype=np.float64))
        n_layers = len(self.layers)
        for k in range(n_layers - 1, -1, -1):
            w, _ = self.layers[k]
            h_in = tape.post[k - 1] if k > 0 else tape.inputs
            gw, gb = glayers[k]
            gw[:] = g.T @ h_in
            gb[:] = g.sum(axis=0)
            g = g @ w
            if k > 0:
                g = g * dact(tape.pre[k - 1])
        if gtable is not None:
            c0 = self.config.ambient_dim + 2 * self.config.time_embed_dim
            np.add.at(gtable, tape.labels, g[:, c0:])
        return grad


# -- optimisation ---------------------------------------------------------------


def adamw_step(net: VelocityNet, g, lr: float, weight_decay: float = 0.01,
               betas=(0.9, 0.999), eps: float = 1e-8) -> VelocityNet:
    """Decoupled-weight-decay Adam update, in place."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != net.theta.shape:
        raise InvalidArgument("gradient length does not match parameter_count")
    if lr <= 0:
        raise InvalidArgument("learning rate must be positive")
    if not np.all(np.isfinite(g)):
        raise NonFinite("gradient contains NaN or Inf; update refused")
    b1, b2 = betas
    net.step += 1
    net.adam_m *= b1
    net.adam_m += (1.0 - b1) * g
    net.adam_v *= b2
    net.adam_v += (1.0 - b2) * (g * g)
    bc1 = 1.0 - b1 ** net.step
    bc2 = 1.0 - b2 ** net.step
    if weight_decay:
        net.theta *= 1.0 - lr * weight_decay
    denom = np.sqrt(net.adam_v) / math.sqrt(bc2) + eps
    net.theta -= (lr / bc1) * net.adam_m / denom
    return net


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(net: VelocityNet, path) -> None:
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", net.parameter_count))
    for arr in (net.theta, net.adam_m, net.adam_v):
        buf.write(arr.astype("<f8").tobytes())
    buf.write(struct.pack("<Q", net.step))
    buf.write(struct.pack("<QQ", *net.rng_state))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect: NetConfig | None = None) -> VelocityNet:
    """Read a checkpoint. With ``expect``, raise ConfigMismatch on a different
    manifold or architecture."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint is truncated")
        chunk = view[pos: pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic; not an RMF checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    try:
        config = NetConfig.from_dict(json.loads(bytes(take(clen)).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config block: {exc}") from exc
    (count,) = struct.unpack("<Q", take(8))
    if count != config.parameter_count:
        raise FormatError("parameter count disagrees with the stored config")
    arrays = [np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64) for _ in range(3)]
    (step,) = struct.unpack("<Q", take(8))
    rng_state = struct.unpack("<QQ", take(16))
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    if expect is not None:
        keys = ("manifold", "hidden_dim", "num_layers", "time_embed_dim", "num_classes", "activation")
        for k in keys:
            if getattr(expect, k) != getattr(config, k):
                raise ConfigMismatch(
                    f"checkpoint {k}={getattr(config, k)!r} but run expects {getattr(expect, k)!r}"
                )
    net = VelocityNet(config, arrays[0])
    net.adam_m[:] = arrays[1]
    net.adam_v[:] = arrays[2]
    net.step = step
    net.rng_state = tuple(int(v) for v in rng_state)
    return net
