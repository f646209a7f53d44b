"""Minimal deterministic neural-network kernel.

Every operation is a pure function of explicit parameter records and
carries a hand-written backward pass: ``forward`` returns ``(output,
cache)`` and ``backward(d_output, cache)`` accumulates parameter
gradients in place and returns the input gradients.  There is no tape
and no graph; composition order is spelled out by the callers.

Learned parameters default to 32-bit floats, but every layer is
dtype-parametric so gradient checks can run the identical code in
64-bit.  Transformer sublayers compose pre-norm: normalization before
attention/FFN, residual added after.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import DimensionError, EmptyInputError, MaskError

CHECKPOINT_SCHEMA = "gridmm-checkpoint/1"
RNG_ALGORITHM = "pcg64"


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide deterministic generator (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


class Parameter:
    """A learned array plus its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray) -> None:
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


ParamItems = Iterator[tuple[str, Parameter]]


def xavier_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)


def embedding_init(rng: np.random.Generator, rows: int, dim: int, dtype) -> np.ndarray:
    limit = 1.0 / math.sqrt(dim)
    return rng.uniform(-limit, limit, size=(rows, dim)).astype(dtype)


class Linear:
    """y = x @ W.T + b with W of shape (out, in)."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        out_dim: int,
        bias: bool = True,
        dtype=np.float32,
    ) -> None:
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(xavier_uniform(rng, out_dim, in_dim, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def named_parameters(self, prefix: str) -> ParamItems:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"linear expects (*, {self.in_dim}) input, got {x.shape} "
                f"against weight {self.weight.shape}"
            )
        y = x @ self.weight.value.T
        if self.bias is not None:
            y = y + self.bias.value
        return y, (x,)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        (x,) = cache
        self.weight.grad += dy.T @ x
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class LayerNorm:
    """Row-wise layer normalization with learned gain and shift."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32) -> None:
        self.dim = dim
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))

    def named_parameters(self, prefix: str) -> ParamItems:
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        if x.shape[-1] != self.dim:
            raise DimensionError(f"layer_norm expects width {self.dim}, got {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = centered * inv
        y = xhat * self.gain.value + self.shift.value
        return y, (xhat, inv)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        xhat, inv = cache
        self.gain.grad += (dy * xhat).reshape(-1, self.dim).sum(axis=0)
        self.shift.grad += dy.reshape(-1, self.dim).sum(axis=0)
        dxhat = dy * self.gain.value
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    """Functional layer norm over the last axis (population variance)."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + shift


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtracted)."""
    v = np.asarray(v)
    if v.size == 0:
        raise EmptyInputError("softmax requires a non-empty input")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    # tanh approximation; smooth and cheap to differentiate
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    return y, (x, t)


def gelu_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class FeedForward:
    """Two-layer row-wise feed-forward block: expand, GELU, project back."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        out_dim: int | None = None,
        inner_dim: int | None = None,
        dtype=np.float32,
    ) -> None:
        self.inner = Linear(rng, dim, inner_dim or 4 * dim, dtype=dtype)
        self.outer = Linear(rng, inner_dim or 4 * dim, out_dim or dim, dtype=dtype)

    def named_parameters(self, prefix: str) -> ParamItems:
        yield from self.inner.named_parameters(f"{prefix}.inner")
        yield from self.outer.named_parameters(f"{prefix}.outer")

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, c1 = self.inner.forward(x)
        a, c2 = gelu_forward(h)
        y, c3 = self.outer.forward(a)
        return y, (c1, c2, c3)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        c1, c2, c3 = cache
        da = self.outer.backward(dy, c3)
        dh = gelu_backward(da, c2)
        return self.inner.backward(dh, c1)


class MultiHeadAttention:
    """Scaled dot-product attention over explicit query/key/value matrices.

    ``key_mask`` flags usable keys; masked positions are excluded from
    the weight normalization.  Residuals and normalization belong to the
    caller.
    """

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, dtype=np.float32) -> None:
        if hidden % heads != 0:
            raise DimensionError(f"hidden {hidden} not divisible by heads {heads}")
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.wq = Linear(rng, hidden, hidden, dtype=dtype)
        self.wk = Linear(rng, hidden, hidden, dtype=dtype)
        self.wv = Linear(rng, hidden, hidden, dtype=dtype)
        self.wo = Linear(rng, hidden, hidden, dtype=dtype)

    def named_parameters(self, prefix: str) -> ParamItems:
        for name, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            yield from lin.named_parameters(f"{prefix}.{name}")

    def _split(self, x: np.ndarray) -> np.ndarray:
        s = x.shape[0]
        return x.reshape(s, self.heads, self.head_dim).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        return x.transpose(1, 0, 2).reshape(-1, self.hidden)

    def forward(
        self,
        queries: np.ndarray,
        keys: np.ndarray,
        values: np.ndarray,
        key_mask: np.ndarray | None = None,
    ) -> tuple[np.ndarray, tuple]:
        if keys.shape[0] != values.shape[0]:
            raise DimensionError(
                f"keys {keys.shape} and values {values.shape} disagree on length"
            )
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (keys.shape[0],):
                raise DimensionError(
                    f"key_mask shape {key_mask.shape} does not match {keys.shape[0]} keys"
                )
            if not key_mask.any():
                raise MaskError("every key is masked; queries have nothing to attend to")
        q, cq = self.wq.forward(queries)
        k, ck = self.wk.forward(keys)
        v, cv = self.wv.forward(values)
        qh = self._split(q)
        kh = self._split(k)
        vh = self._split(v)
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = (qh @ kh.transpose(0, 2, 1)) * np.asarray(scale, dtype=q.dtype)
        if key_mask is not None:
            scores = np.where(key_mask[np.newaxis, np.newaxis, :], scores, -np.inf)
        weights = softmax(scores)
        ctx = weights @ vh
        merged = self._merge(ctx)
        out, co = self.wo.forward(merged)
        return out, (cq, ck, cv, co, qh, kh, vh, weights, scale)

    def backward(self, dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cq, ck, cv, co, qh, kh, vh, weights, scale = cache
        dmerged = self.wo.backward(dout, co)
        dctx = self._split(dmerged)
        dweights = dctx @ vh.transpose(0, 2, 1)
        dvh = weights.transpose(0, 2, 1) @ dctx
        dscores = softmax_backward(dweights, weights) * np.asarray(scale, dtype=dout.dtype)
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 2, 1) @ qh
        dq = self.wq.backward(self._merge(dqh), cq)
        dk = self.wk.backward(self._merge(dkh), ck)
        dv = self.wv.backward(self._merge(dvh), cv)
        return dq, dk, dv


def attention_block(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    params: MultiHeadAttention,
    key_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Forward-only convenience wrapper over :class:`MultiHeadAttention`."""
    out, _ = params.forward(queries, keys, values, key_mask)
    return out


class EncoderLayer:
    """Pre-norm self-attention transformer layer."""

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, eps: float, dtype=np.float32) -> None:
        self.ln_attn = LayerNorm(hidden, eps, dtype)
        self.attn = MultiHeadAttention(rng, hidden, heads, dtype)
        self.ln_ffn = LayerNorm(hidden, eps, dtype)
        self.ffn = FeedForward(rng, hidden, dtype=dtype)

    def named_parameters(self, prefix: str) -> ParamItems:
        yield from self.ln_attn.named_parameters(f"{prefix}.ln_attn")
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield from self.ln_ffn.named_parameters(f"{prefix}.ln_ffn")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")

    def forward(self, x: np.ndarray, key_mask: np.ndarray | None = None) -> tuple[np.ndarray, tuple]:
        normed, c_ln1 = self.ln_attn.forward(x)
        attn_out, c_attn = self.attn.forward(normed, normed, normed, key_mask)
        h = x + attn_out
        normed2, c_ln2 = self.ln_ffn.forward(h)
        ffn_out, c_ffn = self.ffn.forward(normed2)
        return h + ffn_out, (c_ln1, c_attn, c_ln2, c_ffn)

    def backward(self, dy: np.ndarray, cache: tuple) -> np.ndarray:
        c_ln1, c_attn, c_ln2, c_ffn = cache
        dnormed2 = self.ffn.backward(dy, c_ffn)
        dh = dy + self.ln_ffn.backward(dnormed2, c_ln2)
        dq, dk, dv = self.attn.backward(dh, c_attn)
        dx = dh + self.ln_attn.backward(dq + dk + dv, c_ln1)
        return dx


class CrossModalLayer:
    """Pre-norm cross-attention + self-attention + FFN layer.

    Queries attend over an external key/value sequence first, then over
    themselves.  ``backward`` returns gradients for both the query
    sequence and the key/value sequence.
    """

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, eps: float, dtype=np.float32) -> None:
        self.ln_q = LayerNorm(hidden, eps, dtype)
        self.ln_kv = LayerNorm(hidden, eps, dtype)
        self.cross = MultiHeadAttention(rng, hidden, heads, dtype)
        self.ln_self = LayerNorm(hidden, eps, dtype)
        self.self_attn = MultiHeadAttention(rng, hidden, heads, dtype)
        self.ln_ffn = LayerNorm(hidden, eps, dtype)
        self.ffn = FeedForward(rng, hidden, dtype=dtype)

    def named_parameters(self, prefix: str) -> ParamItems:
        yield from self.ln_q.named_parameters(f"{prefix}.ln_q")
        yield from self.ln_kv.named_parameters(f"{prefix}.ln_kv")
        yield from self.cross.named_parameters(f"{prefix}.cross")
        yield from self.ln_self.named_parameters(f"{prefix}.ln_self")
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.ln_ffn.named_parameters(f"{prefix}.ln_ffn")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")

    def forward(
        self,
        x: np.ndarray,
        kv: np.ndarray,
        key_mask: np.ndarray | None = None,
    ) -> tuple[np.ndarray, tuple]:
        qn, c_lnq = self.ln_q.forward(x)
        kvn, c_lnkv = self.ln_kv.forward(kv)
        cross_out, c_cross = self.cross.forward(qn, kvn, kvn, key_mask)
        a = x + cross_out
        an, c_lns = self.ln_self.forward(a)
        self_out, c_self = self.self_attn.forward(an, an, an)
        b = a + self_out
        bn, c_lnf = self.ln_ffn.forward(b)
        ffn_out, c_ffn = self.ffn.forward(bn)
        y = b + ffn_out
        return y, (c_lnq, c_lnkv, c_cross, c_lns, c_self, c_lnf, c_ffn)

    def backward(self, dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
        c_lnq, c_lnkv, c_cross, c_lns, c_self, c_lnf, c_ffn = cache
        dbn = self.ffn.backward(dy, c_ffn)
        db = dy + self.ln_ffn.backward(dbn, c_lnf)
        dq_s, dk_s, dv_s = self.self_attn.backward(db, c_self)
        da = db + self.ln_self.backward(dq_s + dk_s + dv_s, c_lns)
        dqn, dkn, dvn = self.cross.backward(da, c_cross)
        dx = da + self.ln_q.backward(dqn, c_lnq)
        dkv = self.ln_kv.backward(dkn + dvn, c_lnkv)
        return dx, dkv


def cross_entropy(logits: np.ndarray, target: int) -> float:
    """Negative log softmax probability of the target index."""
    loss, _ = cross_entropy_with_grad(logits, target)
    return loss


def cross_entropy_with_grad(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a vector, got shape {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    m = logits.max()
    shifted = logits - m
    lse = m + np.log(np.exp(shifted).sum())
    probs = softmax(logits)
    grad = probs.copy()
    grad[target] -= 1.0
    return float(lse - logits[target]), grad


def numerical_gradient(
    f: Callable[[], float],
    arrays: list[np.ndarray],
    eps: float = 1e-4,
) -> list[np.ndarray]:
    """Central finite differences of ``f`` w.r.t. each array, in place.

    ``f`` is re-evaluated with perturbed entries; the arrays are restored
    afterwards.  Meant for tests and the self-check suite.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros(arr.size, dtype=np.float64)
        flat = arr.flat
        for i in range(arr.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f()
            flat[i] = orig - eps
            f_minus = f()
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(grad.reshape(arr.shape))
    return grads


# --------------------------------------------------------------------------
# checkpoint container: JSON mapping parameter names to shape + dtype +
# base64-encoded little-endian bytes, so 32-bit values round-trip bit-exactly
# --------------------------------------------------------------------------


def save_checkpoint(params: dict[str, Parameter], path: str | Path, meta: dict | None = None) -> None:
    entries = {}
    for name, p in params.items():
        little = np.ascontiguousarray(p.value).astype(p.value.dtype.newbyteorder("<"), copy=False)
        entries[name] = {
            "shape": list(p.value.shape),
            "dtype": p.value.dtype.name,
            "data": base64.b64encode(little.tobytes()).decode("ascii"),
        }
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "rng_algorithm": RNG_ALGORITHM,
        "meta": meta or {},
        "params": entries,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    arrays = {}
    for name, entry in payload["params"].items():
        raw = base64.b64decode(entry["data"])
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(entry["shape"])
        arrays[name] = arr.astype(dtype)
    return arrays, payload.get("meta", {})
