"""Minimal layer stack with hand-written backward passes.

Layers keep their trainable tensors in named Parameter objects and pass
activation caches back to the caller, so forward/backward for distinct
records can run concurrently; only gradient accumulation mutates shared
state (single-writer during optimization steps).

The softmax-attention and normalization inner loops route through
knowsurv._kernels (compiled extension when available, numpy otherwise).
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels as kern

LN_EPS = 1e-5


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def uniform_init(rng, shape, fan_in) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(n, d) -> (heads, n, d // heads), C-contiguous."""
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, heads, d // heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(heads, n, dh) -> (n, heads * dh)."""
    h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * dh))


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Standard sin/cos position encoding, shape (n, d). Cached; treat as
    read-only."""
    key = (n, d)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(n, dtype=np.float64)[:, None]
        i = np.arange(d, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        pe.setflags(write=False)
        if len(_PE_CACHE) < 512:
            _PE_CACHE[key] = pe
    return pe


class Module:
    """Base: children discovered by attribute scan, parameters by recursion."""

    def parameters(self) -> list[Parameter]:
        out = []
        for value in self.__dict__.values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def zero_grads(self):
        for p in self.parameters():
            p.grad[...] = 0.0


class Affine(Module):
    def __init__(self, prefix, d_in, d_out, rng, bias=True):
        self.W = Parameter(f"{prefix}.W", uniform_init(rng, (d_in, d_out), d_in))
        self.b = Parameter(f"{prefix}.b", np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.W.value
        if self.b is not None:
            y = y + self.b.value
        return y, x

    def backward(self, cache, dy):
        x = cache
        self.W.grad += x.T @ dy
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class MLP(Module):
    """Affine stack with tanh between layers (none after the last)."""

    def __init__(self, prefix, dims, rng):
        self.layers = [
            Affine(f"{prefix}.l{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)
        ]

    def forward(self, x):
        caches = []
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x)
            if i + 1 < len(self.layers):
                x = np.tanh(x)
                caches.append((c, x))
            else:
                caches.append((c, None))
        return x, caches

    def backward(self, caches, dy):
        for i in reversed(range(len(self.layers))):
            c, act = caches[i]
            if act is not None:
                dy = dy * (1.0 - act * act)
            dy = self.layers[i].backward(c, dy)
        return dy


class LayerNorm(Module):
    def __init__(self, prefix, d):
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(d))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(d))

    def forward(self, x):
        y, mean, rstd = kern.layernorm_fwd(x, self.gamma.value, self.beta.value, LN_EPS)
        return y, (x, mean, rstd)

    def backward(self, cache, dy):
        x, mean, rstd = cache
        dx, dgamma, dbeta = kern.layernorm_bwd(x, self.gamma.value, mean, rstd, dy)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class MultiHeadSelfAttention(Module):
    def __init__(self, prefix, d, heads, rng):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d // heads)
        self.wq = Affine(f"{prefix}.wq", d, d, rng)
        self.wk = Affine(f"{prefix}.wk", d, d, rng)
        self.wv = Affine(f"{prefix}.wv", d, d, rng)
        self.wo = Affine(f"{prefix}.wo", d, d, rng)

    def forward(self, x):
        q, cq = self.wq.forward(x)
        k, ck = self.wk.forward(x)
        v, cv = self.wv.forward(x)
        Qh, Kh, Vh = (split_heads(t, self.heads) for t in (q, k, v))
        P = kern.attention_probs_fwd(Qh, Kh, self.scale)
        Oh = np.matmul(P, Vh)
        o, co = self.wo.forward(merge_heads(Oh))
        return o, (cq, ck, cv, co, Qh, Kh, Vh, P)

    def backward(self, cache, do):
        cq, ck, cv, co, Qh, Kh, Vh, P = cache
        dOm = self.wo.backward(co, do)
        dOh = split_heads(dOm, self.heads)
        dP = np.matmul(dOh, np.swapaxes(Vh, 1, 2))
        dVh = np.matmul(np.swapaxes(P, 1, 2), dOh)
        dQh, dKh = kern.attention_probs_bwd(Qh, Kh, P, dP, self.scale)
        dx = self.wq.backward(cq, merge_heads(dQh))
        dx += self.wk.backward(ck, merge_heads(dKh))
        dx += self.wv.backward(cv, merge_heads(dVh))
        return dx


class TransformerLayer(Module):
    """Pre-norm encoder layer: x + MHSA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, prefix, d, heads, rng, ff_mult=2):
        self.ln1 = LayerNorm(f"{prefix}.ln1", d)
        self.attn = MultiHeadSelfAttention(f"{prefix}.attn", d, heads, rng)
        self.ln2 = LayerNorm(f"{prefix}.ln2", d)
        self.ff1 = Affine(f"{prefix}.ff1", d, ff_mult * d, rng)
        self.ff2 = Affine(f"{prefix}.ff2", ff_mult * d, d, rng)

    def forward(self, x):
        h1, c_ln1 = self.ln1.forward(x)
        attn_out, c_attn = self.attn.forward(h1)
        a = x + attn_out
        h2, c_ln2 = self.ln2.forward(a)
        f1, c_ff1 = self.ff1.forward(h2)
        t = np.tanh(f1)
        f2, c_ff2 = self.ff2.forward(t)
        y = a + f2
        return y, (c_ln1, c_attn, c_ln2, c_ff1, t, c_ff2)

    def backward(self, cache, dy):
        c_ln1, c_attn, c_ln2, c_ff1, t, c_ff2 = cache
        dt = self.ff2.backward(c_ff2, dy)
        df1 = dt * (1.0 - t * t)
        dh2 = self.ff1.backward(c_ff1, df1)
        da = dy + self.ln2.backward(c_ln2, dh2)
        dh1 = self.attn.backward(c_attn, da)
        dx = da + self.ln1.backward(c_ln1, dh1)
        return dx


class GuidedCrossAttention(Module):
    """Cross-modal attention where knowledge tokens query a modality's
    tokens, compressing n_x tokens into n_k knowledge-aligned tokens.

    out = norm(softmax(Q K^T / sqrt(d_head))) V, concatenated over heads,
    with Q from the query sequence and K, V projections of the modality
    tokens. The post-softmax norm is a row-wise normalization with scalar
    gain/bias ("layernorm" mode) or the identity ("off").
    """

    def __init__(self, prefix, d, heads, rng, norm_mode="layernorm"):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        if norm_mode not in ("layernorm", "off"):
            raise ValueError(f"unknown norm mode {norm_mode!r}")
        self.heads = heads
        self.norm_mode = norm_mode
        self.scale = 1.0 / math.sqrt(d // heads)
        self.wq = Parameter(f"{prefix}.wq", uniform_init(rng, (d, d), d))
        self.wk = Parameter(f"{prefix}.wk", uniform_init(rng, (d, d), d))
        self.wv = Parameter(f"{prefix}.wv", uniform_init(rng, (d, d), d))
        if norm_mode == "layernorm":
            self.norm_gamma = Parameter(f"{prefix}.norm_gamma", np.ones(()))
            self.norm_beta = Parameter(f"{prefix}.norm_beta", np.zeros(()))

    def forward(self, f_k, f_x):
        if f_k.shape[1] != f_x.shape[1]:
            raise ValueError(
                f"width mismatch: queries {f_k.shape[1]}, keys {f_x.shape[1]}"
            )
        if f_x.shape[0] < 1:
            raise ValueError("empty key set")
        Qh = split_heads(f_k @ self.wq.value, self.heads)
        Kh = split_heads(f_x @ self.wk.value, self.heads)
        Vh = split_heads(f_x @ self.wv.value, self.heads)
        P = kern.attention_probs_fwd(Qh, Kh, self.scale)
        if self.norm_mode == "layernorm":
            N, mean, rstd = kern.rownorm_fwd(
                P, float(self.norm_gamma.value), float(self.norm_beta.value), LN_EPS
            )
        else:
            N, mean, rstd = P, None, None
        Oh = np.matmul(N, Vh)
        out = merge_heads(Oh)
        return out, (f_k, f_x, Qh, Kh, Vh, P, N, mean, rstd)

    def backward(self, cache, dout):
        f_k, f_x, Qh, Kh, Vh, P, N, mean, rstd = cache
        dOh = split_heads(dout, self.heads)
        dN = np.matmul(dOh, np.swapaxes(Vh, 1, 2))
        dVh = np.matmul(np.swapaxes(N, 1, 2), dOh)
        if self.norm_mode == "layernorm":
            dP, dgamma, dbeta = kern.rownorm_bwd(
                P, float(self.norm_gamma.value), mean, rstd, dN
            )
            self.norm_gamma.grad += dgamma
            self.norm_beta.grad += dbeta
        else:
            dP = dN
        dQh, dKh = kern.attention_probs_bwd(Qh, Kh, P, dP, self.scale)
        dq, dk, dv = merge_heads(dQh), merge_heads(dKh), merge_heads(dVh)
        self.wq.grad += f_k.T @ dq
        self.wk.grad += f_x.T @ dk
        self.wv.grad += f_x.T @ dv
        df_k = dq @ self.wq.value.T
        df_x = dk @ self.wk.value.T + dv @ self.wv.value.T
        return df_k, df_x

    def attention_weights(self, f_k, f_x) -> np.ndarray:
        """Pre-norm softmax weights, shape (heads, n_k, n_x); rows sum to 1."""
        _, cache = self.forward(f_k, f_x)
        return cache[5]
