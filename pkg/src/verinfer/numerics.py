"""Dense float64 building blocks with hand-written backward passes.

Every trainable network in the package is an :class:`MLP` or a
:class:`TransformerEncoder` over a :class:`ParameterSet`. Forward passes return
``(output, cache)`` and backward passes consume the cache, so the same network
can appear several times inside one loss without shared mutable state.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DTYPE = np.float64
MAGIC = b"SVIP"
FORMAT_VERSION = 1
_LN_EPS = 1e-8
_MASK_FILL = -1e30


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ParameterSet:
    """Named float64 tensors for one network plus its architecture descriptor."""

    arch: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.asarray(value, dtype=DTYPE)

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> ParameterSet:
        return ParameterSet(json.loads(json.dumps(self.arch)), {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def allclose(self, other: ParameterSet, atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self.tensors)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def add_grads(into: dict[str, np.ndarray], other: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for k, v in other.items():
        into[k] = into[k] + v if k in into else v
    return into


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    # x*x*x, not x**3: numpy's float pow is an order of magnitude slower
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def _gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def sigmoid(x):
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# name -> (f, f' expressed in terms of (pre-activation, activation))
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "linear": (lambda x: x, lambda x, y: np.ones_like(x)),
    "gelu": (_gelu, lambda x, y: _gelu_grad(x)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(DTYPE)),
    "sigmoid": (sigmoid, lambda x, y: y * (1.0 - y)),
}


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


class MLP:
    """Fully connected stack; weights ``W{i}`` are stored ``(fan_in, fan_out)``."""

    def __init__(self, params: ParameterSet):
        if params.arch.get("kind") != "mlp":
            raise ShapeError(f"not an MLP descriptor: {params.arch.get('kind')!r}")
        self.params = params
        self.sizes: list[int] = list(params.arch["sizes"])
        self.activation: str = params.arch.get("activation", "gelu")
        self.output_activation: str = params.arch.get("output_activation", "linear")
        self.dropout: float = float(params.arch.get("dropout", 0.0))
        for i in range(len(self.sizes) - 1):
            w = params[f"W{i}"]
            if w.shape != (self.sizes[i], self.sizes[i + 1]):
                raise ShapeError(f"layer {i}: weight shape {w.shape} disagrees with sizes {self.sizes}")

    @classmethod
    def create(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        activation: str = "gelu",
        output_activation: str = "linear",
        dropout: float = 0.0,
    ) -> MLP:
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"bad MLP sizes {sizes}")
        arch = {
            "kind": "mlp",
            "sizes": list(map(int, sizes)),
            "activation": activation,
            "output_activation": output_activation,
            "dropout": float(dropout),
        }
        ps = ParameterSet(arch)
        for i in range(len(sizes) - 1):
            ps[f"W{i}"] = xavier_uniform(rng, sizes[i], sizes[i + 1])
            ps[f"b{i}"] = np.zeros(sizes[i + 1], dtype=DTYPE)
        return cls(ps)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _act(self, i: int) -> str:
        return self.output_activation if i == self.n_layers - 1 else self.activation

    def forward(self, x: np.ndarray, *, train: bool = False, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 0 or x.shape[-1] != self.sizes[0]:
            got = x.shape[-1] if x.ndim else None
            raise ShapeError(f"layer 0 expects input width {self.sizes[0]}, got {got}")
        lead = x.shape[:-1]
        h = x.reshape(-1, self.sizes[0])
        cache = {"lead": lead, "layers": []}
        for i in range(self.n_layers):
            pre = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            act, _ = ACTIVATIONS[self._act(i)]
            out = act(pre)
            cache["layers"].append((h, pre, out))
            if train and self.dropout > 0.0 and i < self.n_layers - 1:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                keep = (rng.random(out.shape) >= self.dropout) / (1.0 - self.dropout)
                cache.setdefault("keep", {})[i] = keep
                out = out * keep
            h = out
        return h.reshape(*lead, self.sizes[-1]), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dy: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        d = np.asarray(dy, dtype=DTYPE).reshape(-1, self.sizes[-1])
        for i in reversed(range(self.n_layers)):
            h_in, pre, out = cache["layers"][i]
            keep = cache.get("keep", {}).get(i)
            if keep is not None:
                d = d * keep
            _, dact = ACTIVATIONS[self._act(i)]
            d = d * dact(pre, out)
            grads[f"W{i}"] = h_in.T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
        return d.reshape(*cache["lead"], self.sizes[0]), grads


def mlp_forward(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    return MLP(params)(x)


# ---------------------------------------------------------------------------
# Layer norm / attention helpers
# ---------------------------------------------------------------------------


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    red = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=red)
    dbias = dy.sum(axis=red)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def softmax(scores, axis=-1):
    m = scores.max(axis=axis, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=axis, keepdims=True)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=DTYPE)[:, None]
    i = np.arange(d_model, dtype=DTYPE)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _normalize_mask(mask, batch: int, length: int) -> np.ndarray:
    if mask is None:
        return np.ones((batch, length), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(batch, length).copy()
    # a row with no valid key would make softmax undefined; attend everywhere instead
    mask[~mask.any(axis=1)] = True
    return mask


def masked_mean(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    """Mean over axis 1 of ``(B, L, d)`` restricted to valid positions; returns weights too."""
    b, l = x.shape[:2]
    m = _normalize_mask(mask, b, l).astype(DTYPE)
    w = m / m.sum(axis=1, keepdims=True)
    return np.einsum("bl,bld->bd", w, x), w


# ---------------------------------------------------------------------------
# Transformer encoder
# ---------------------------------------------------------------------------


class TransformerEncoder:
    """Pre-LN encoder: ``x + MHA(LN(x))``, ``x + FFN(LN(x))``, final LN.

    Sinusoidal positions are added to the input. ``mask`` marks valid key
    positions (pads are excluded from attention).
    """

    def __init__(self, params: ParameterSet):
        if params.arch.get("kind") != "transformer":
            raise ShapeError(f"not a transformer descriptor: {params.arch.get('kind')!r}")
        a = params.arch
        self.params = params
        self.d_model = int(a["d_model"])
        self.n_layers = int(a["n_layers"])
        self.n_heads = int(a["n_heads"])
        self.d_ff = int(a["d_ff"])
        self.max_len = int(a["max_len"])
        self.use_positions = bool(a.get("positions", True))
        self._pe = sinusoidal_positions(self.max_len, self.d_model)

    @classmethod
    def create(
        cls,
        d_model: int,
        n_layers: int,
        n_heads: int,
        d_ff: int,
        max_len: int,
        rng: np.random.Generator,
        positions: bool = True,
    ) -> TransformerEncoder:
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        arch = {
            "kind": "transformer",
            "d_model": d_model,
            "n_layers": n_layers,
            "n_heads": n_heads,
            "d_ff": d_ff,
            "max_len": max_len,
            "positions": positions,
        }
        ps = ParameterSet(arch)
        d = d_model
        for l in range(n_layers):
            p = f"l{l}."
            ps[p + "ln1_g"] = np.ones(d)
            ps[p + "ln1_b"] = np.zeros(d)
            for name in ("q", "k", "v", "o"):
                ps[p + f"W{name}"] = xavier_uniform(rng, d, d)
                ps[p + f"b{name}"] = np.zeros(d)
            ps[p + "ln2_g"] = np.ones(d)
            ps[p + "ln2_b"] = np.zeros(d)
            ps[p + "W1"] = xavier_uniform(rng, d, d_ff)
            ps[p + "b1"] = np.zeros(d_ff)
            ps[p + "W2"] = xavier_uniform(rng, d_ff, d)
            ps[p + "b2"] = np.zeros(d)
        ps["lnf_g"] = np.ones(d)
        ps["lnf_b"] = np.zeros(d)
        return cls(ps)

    def forward(self, x: np.ndarray, mask=None):
        x = np.asarray(x, dtype=DTYPE)
        single = x.ndim == 2
        if single:
            x = x[None]
            mask = None if mask is None else np.asarray(mask)[None]
        b, L, d = x.shape
        if d != self.d_model:
            raise ShapeError(f"expected width {self.d_model}, got {d}")
        if L < 1 or L > self.max_len:
            raise ShapeError(f"sequence length {L} outside [1, {self.max_len}]")
        mask = _normalize_mask(mask, b, L)
        bias = np.where(mask, 0.0, _MASK_FILL)[:, None, None, :]
        H, dh = self.n_heads, self.d_model // self.n_heads
        P = self.params
        h = x + self._pe[:L] if self.use_positions else x
        caches = []
        attn_maps = []
        for l in range(self.n_layers):
            p = f"l{l}."
            a, ln1 = layer_norm(h, P[p + "ln1_g"], P[p + "ln1_b"])
            q = (a @ P[p + "Wq"] + P[p + "bq"]).reshape(b, L, H, dh).transpose(0, 2, 1, 3)
            k = (a @ P[p + "Wk"] + P[p + "bk"]).reshape(b, L, H, dh).transpose(0, 2, 1, 3)
            v = (a @ P[p + "Wv"] + P[p + "bv"]).reshape(b, L, H, dh).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + bias
            att = softmax(scores)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(b, L, d)
            h1 = h + o @ P[p + "Wo"] + P[p + "bo"]
            c, ln2 = layer_norm(h1, P[p + "ln2_g"], P[p + "ln2_b"])
            f1 = c @ P[p + "W1"] + P[p + "b1"]
            g1 = _gelu(f1)
            h2 = h1 + g1 @ P[p + "W2"] + P[p + "b2"]
            caches.append((a, ln1, q, k, v, att, o, c, ln2, f1, g1))
            attn_maps.append(att)
            h = h2
        out, lnf = layer_norm(h, P["lnf_g"], P["lnf_b"])
        cache = {"layers": caches, "lnf": lnf, "single": single, "shape": (b, L, d), "attention": attn_maps}
        return (out[0] if single else out), cache

    def __call__(self, x: np.ndarray, mask=None) -> np.ndarray:
        return self.forward(x, mask)[0]

    def backward(self, cache, dy: np.ndarray):
        P = self.params
        b, L, d = cache["shape"]
        H, dh = self.n_heads, self.d_model // self.n_heads
        dy = np.asarray(dy, dtype=DTYPE).reshape(b, L, d)
        grads: dict[str, np.ndarray] = {}
        dh_, grads["lnf_g"], grads["lnf_b"] = layer_norm_backward(dy, cache["lnf"])
        for l in reversed(range(self.n_layers)):
            p = f"l{l}."
            a, ln1, q, k, v, att, o, c, ln2, f1, g1 = cache["layers"][l]
            # FFN branch
            d_out = dh_.reshape(-1, d)
            grads[p + "W2"] = g1.reshape(-1, self.d_ff).T @ d_out
            grads[p + "b2"] = d_out.sum(axis=0)
            dg1 = (dh_ @ P[p + "W2"].T) * _gelu_grad(f1)
            grads[p + "W1"] = c.reshape(-1, d).T @ dg1.reshape(-1, self.d_ff)
            grads[p + "b1"] = dg1.reshape(-1, self.d_ff).sum(axis=0)
            dc = dg1 @ P[p + "W1"].T
            dx1, grads[p + "ln2_g"], grads[p + "ln2_b"] = layer_norm_backward(dc, ln2)
            dh1 = dh_ + dx1
            # attention branch
            d_attn = dh1.reshape(-1, d)
            grads[p + "Wo"] = o.reshape(-1, d).T @ d_attn
            grads[p + "bo"] = d_attn.sum(axis=0)
            do = (dh1 @ P[p + "Wo"].T).reshape(b, L, H, dh).transpose(0, 2, 1, 3)
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            da = np.zeros((b * L, d))
            a2 = a.reshape(-1, d)
            for name, dt in (("q", dq), ("k", dk), ("v", dv)):
                dflat = dt.transpose(0, 2, 1, 3).reshape(-1, d)
                grads[p + f"W{name}"] = a2.T @ dflat
                grads[p + f"b{name}"] = dflat.sum(axis=0)
                da += dflat @ P[p + f"W{name}"].T
            dx0, grads[p + "ln1_g"], grads[p + "ln1_b"] = layer_norm_backward(da.reshape(b, L, d), ln1)
            dh_ = dh1 + dx0
        dx = dh_[0] if cache["single"] else dh_
        return dx, grads


def transformer_encode(params: ParameterSet, tokens: np.ndarray, mask=None) -> np.ndarray:
    return TransformerEncoder(params)(tokens, mask)


def build_network(params: ParameterSet):
    kind = params.arch.get("kind")
    if kind == "mlp":
        return MLP(params)
    if kind == "transformer":
        return TransformerEncoder(params)
    raise ShapeError(f"unknown network kind {kind!r}")


# ---------------------------------------------------------------------------
# Gradients and optimisation
# ---------------------------------------------------------------------------


def check_finite(value, what: str = "loss") -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what}: {value!r}")


def grad(net, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], batch: np.ndarray, **forward_kw):
    """Loss and parameter gradients of ``loss_fn(net(batch))``.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.
    Returns ``(loss, grads)`` where ``grads`` mirrors ``net.params`` names.
    """
    out, cache = net.forward(batch, **forward_kw)
    loss, dout = loss_fn(out)
    check_finite(loss)
    _, grads = net.backward(cache, dout)
    return float(loss), grads


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, self.step / self.warmup_steps)
        return self.lr


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """One AdamW update in place (bias-corrected moments, decoupled decay, linear warm-up)."""
    state.step += 1
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper: one optimizer state per parameter set, shared schedule."""

    def __init__(self, param_sets: list[ParameterSet], lr=3e-4, weight_decay=0.01, warmup_steps=0):
        self.param_sets = param_sets
        self.states = [OptimizerState(lr=lr, weight_decay=weight_decay, warmup_steps=warmup_steps) for _ in param_sets]

    def step(self, grads_list: list[dict[str, np.ndarray]]) -> None:
        for ps, g, st in zip(self.param_sets, grads_list, self.states):
            adam_step(ps, g, st)


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def dumps_params(params: ParameterSet, role: str) -> bytes:
    descriptor = {
        "role": role,
        "arch": params.arch,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    head = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(head)))
    buf.write(head)
    for v in params.tensors.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_params(data: bytes) -> tuple[ParameterSet, str]:
    if data[:4] != MAGIC:
        raise ValueError("not a parameter container (bad magic)")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 10
    descriptor = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    ps = ParameterSet(descriptor["arch"])
    for t in descriptor["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(DTYPE)
        ps[t["name"]] = arr.reshape(t["shape"])
        off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in parameter container")
    return ps, descriptor["role"]


def save_params(path: str | Path, params: ParameterSet, role: str) -> None:
    Path(path).write_bytes(dumps_params(params, role))


def load_params(path: str | Path, role: str | None = None) -> ParameterSet:
    ps, got = loads_params(Path(path).read_bytes())
    if role is not None and got != role:
        raise ValueError(f"{path}: expected role {role!r}, found {got!r}")
    return ps


def merge_params(parts: dict[str, ParameterSet]) -> ParameterSet:
    """Pack several parameter sets into one, prefixing tensor names with ``part.``."""
    merged = ParameterSet({"kind": "composite", "parts": {k: p.arch for k, p in parts.items()}})
    for part, ps in parts.items():
        for name, t in ps.tensors.items():
            merged[f"{part}.{name}"] = t
    return merged


def split_params(merged: ParameterSet) -> dict[str, ParameterSet]:
    out = {}
    for part, arch in merged.arch["parts"].items():
        prefix = part + "."
        out[part] = ParameterSet(arch, {k[len(prefix):]: v for k, v in merged.tensors.items() if k.startswith(prefix)})
    return out
