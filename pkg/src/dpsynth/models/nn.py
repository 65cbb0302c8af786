"""Transformer building blocks in float64 numpy with manual backprop.

Every backward pass returns per-example parameter gradients (leading batch
axis preserved), which is what per-example clipping in DP-SGD needs. The
einsum forms cost the same flops as ordinary summed gradients; memory grows
by the batch factor, which is fine at desk scale.

Parameters live in flat ``dict[str, ndarray]`` collections with dotted
names. Gradient dicts mirror them with shapes ``(batch,) + param.shape``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]

MASK_OFF = -1e30  # additive attention mask value; avoids inf-inf -> nan


def init_normal(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * phi, x


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    density = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dout * (phi + x * density)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (B, T, I) @ w: (I, O) + b: (O,)."""
    return x @ w + b


def linear_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db) with per-example dw: (B, I, O) and db: (B, O)."""
    dx = dout @ w.T
    dw = np.einsum("bti,bto->bio", x, dout)
    db = dout.sum(axis=1)
    return dx, dw, db


def layernorm_forward(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def layernorm_backward(
    dout: np.ndarray, cache: tuple[np.ndarray, np.ndarray], gain: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std = cache
    dgain = (dout * xhat).sum(axis=1)
    dbias = dout.sum(axis=1)
    dxhat = dout * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def causal_mask(seq_len: int) -> np.ndarray:
    """Additive (1, 1, T, T) mask hiding positions j > i from query i."""
    mask = np.zeros((1, 1, seq_len, seq_len))
    mask[:, :, np.triu_indices(seq_len, k=1)[0], np.triu_indices(seq_len, k=1)[1]] = MASK_OFF
    return mask


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """Additive (B, 1, 1, T) mask hiding invalid key positions from everyone."""
    return np.where(valid[:, None, None, :], 0.0, MASK_OFF)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_forward(
    params: Params, prefix: str, x: np.ndarray, num_heads: int, mask: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Multi-head self-attention with an additive mask on the score matrix."""
    q = linear_forward(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear_forward(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear_forward(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    qh, kh, vh = (_split_heads(a, num_heads) for a in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = np.einsum("bhqd,bhkd->bhqk", qh, kh) * scale + mask
    attn = softmax(scores, axis=-1)
    ctx = np.einsum("bhqk,bhkd->bhqd", attn, vh)
    merged = _merge_heads(ctx)
    out = linear_forward(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    cache = dict(x=x, qh=qh, kh=kh, vh=vh, attn=attn, merged=merged, scale=scale)
    return out, cache


def attention_backward(
    params: Params, prefix: str, cache: dict, dout: np.ndarray, num_heads: int
) -> tuple[np.ndarray, Grads]:
    x, qh, kh, vh = cache["x"], cache["qh"], cache["kh"], cache["vh"]
    attn, merged, scale = cache["attn"], cache["merged"], cache["scale"]

    dmerged, dwo, dbo = linear_backward(dout, merged, params[f"{prefix}.wo"])
    dctx = _split_heads(dmerged, num_heads)
    dattn = np.einsum("bhqd,bhkd->bhqk", dctx, vh)
    dvh = np.einsum("bhqk,bhqd->bhkd", attn, dctx)
    # softmax jacobian-vector product, rowwise over keys
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dqh = np.einsum("bhqk,bhkd->bhqd", dscores, kh) * scale
    dkh = np.einsum("bhqk,bhqd->bhkd", dscores, qh) * scale

    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    dx_q, dwq, dbq = linear_backward(dq, x, params[f"{prefix}.wq"])
    dx_k, dwk, dbk = linear_backward(dk, x, params[f"{prefix}.wk"])
    dx_v, dwv, dbv = linear_backward(dv, x, params[f"{prefix}.wv"])
    grads = {
        f"{prefix}.wq": dwq,
        f"{prefix}.bq": dbq,
        f"{prefix}.wk": dwk,
        f"{prefix}.bk": dbk,
        f"{prefix}.wv": dwv,
        f"{prefix}.bv": dbv,
        f"{prefix}.wo": dwo,
        f"{prefix}.bo": dbo,
    }
    return dx_q + dx_k + dx_v, grads


def init_block_params(rng: np.random.Generator, dim: int, prefix: str) -> Params:
    hidden = 4 * dim
    params: Params = {}
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{name}"] = init_normal(rng, (dim, dim))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.attn.{name}"] = np.zeros(dim)
    params[f"{prefix}.ln1.gain"] = np.ones(dim)
    params[f"{prefix}.ln1.bias"] = np.zeros(dim)
    params[f"{prefix}.ln2.gain"] = np.ones(dim)
    params[f"{prefix}.ln2.bias"] = np.zeros(dim)
    params[f"{prefix}.mlp.w1"] = init_normal(rng, (dim, hidden))
    params[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    params[f"{prefix}.mlp.w2"] = init_normal(rng, (hidden, dim))
    params[f"{prefix}.mlp.b2"] = np.zeros(dim)
    return params


def block_forward(
    params: Params, prefix: str, x: np.ndarray, num_heads: int, mask: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Pre-norm transformer block: attention then MLP, both residual."""
    a_in, ln1_cache = layernorm_forward(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    a_out, attn_cache = attention_forward(params, f"{prefix}.attn", a_in, num_heads, mask)
    x2 = x + a_out
    m_in, ln2_cache = layernorm_forward(x2, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h_pre = linear_forward(m_in, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])
    h_act, gelu_cache = gelu_forward(h_pre)
    m_out = linear_forward(h_act, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    y = x2 + m_out
    cache = dict(
        ln1=ln1_cache, attn=attn_cache, ln2=ln2_cache,
        m_in=m_in, gelu=gelu_cache, h_act=h_act,
    )
    return y, cache


def block_backward(
    params: Params, prefix: str, cache: dict, dy: np.ndarray, num_heads: int
) -> tuple[np.ndarray, Grads]:
    grads: Grads = {}
    dh_act, dw2, db2 = linear_backward(dy, cache["h_act"], params[f"{prefix}.mlp.w2"])
    grads[f"{prefix}.mlp.w2"] = dw2
    grads[f"{prefix}.mlp.b2"] = db2
    dh_pre = gelu_backward(dh_act, cache["gelu"])
    dm_in, dw1, db1 = linear_backward(dh_pre, cache["m_in"], params[f"{prefix}.mlp.w1"])
    grads[f"{prefix}.mlp.w1"] = dw1
    grads[f"{prefix}.mlp.b1"] = db1
    dx2, dgain2, dbias2 = layernorm_backward(dm_in, cache["ln2"], params[f"{prefix}.ln2.gain"])
    grads[f"{prefix}.ln2.gain"] = dgain2
    grads[f"{prefix}.ln2.bias"] = dbias2
    dx2 = dx2 + dy  # residual around the MLP
    da_in, attn_grads = attention_backward(params, f"{prefix}.attn", cache["attn"], dx2, num_heads)
    grads.update(attn_grads)
    dx, dgain1, dbias1 = layernorm_backward(da_in, cache["ln1"], params[f"{prefix}.ln1.gain"])
    grads[f"{prefix}.ln1.gain"] = dgain1
    grads[f"{prefix}.ln1.bias"] = dbias1
    return dx + dx2, grads  # residual around attention


def init_stack_params(rng: np.random.Generator, dim: int, num_layers: int) -> Params:
    params: Params = {}
    for i in range(num_layers):
        params.update(init_block_params(rng, dim, f"block{i}"))
    params["ln_f.gain"] = np.ones(dim)
    params["ln_f.bias"] = np.zeros(dim)
    return params


def stack_forward(
    params: Params, x: np.ndarray, num_layers: int, num_heads: int, mask: np.ndarray
) -> tuple[np.ndarray, list]:
    caches = []
    h = x
    for i in range(num_layers):
        h, cache = block_forward(params, f"block{i}", h, num_heads, mask)
        caches.append(cache)
    h, ln_cache = layernorm_forward(h, params["ln_f.gain"], params["ln_f.bias"])
    caches.append(ln_cache)
    return h, caches


def stack_backward(
    params: Params, caches: list, dh: np.ndarray, num_layers: int, num_heads: int
) -> tuple[np.ndarray, Grads]:
    grads: Grads = {}
    dh, dgain, dbias = layernorm_backward(dh, caches[-1], params["ln_f.gain"])
    grads["ln_f.gain"] = dgain
    grads["ln_f.bias"] = dbias
    for i in reversed(range(num_layers)):
        dh, block_grads = block_backward(params, f"block{i}", caches[i], dh, num_heads)
        grads.update(block_grads)
    return dh, grads


def embedding_backward(dout: np.ndarray, ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Per-example gradient of a lookup table: (B, V, D) scatter of dout."""
    batch, seq_len, dim = dout.shape
    grad = np.zeros((batch, vocab_size, dim))
    np.add.at(grad, (np.arange(batch)[:, None], ids), dout)
    return grad


def param_slices(params: Params, names: list[str]) -> list[tuple[str, slice, tuple[int, ...]]]:
    """Contiguous layout of the named parameters inside one flat vector."""
    out = []
    offset = 0
    for name in names:
        shape = params[name].shape
        size = int(np.prod(shape)) if shape else 1
        out.append((name, slice(offset, offset + size), shape))
        offset += size
    return out


def params_to_vector(params: Params, names: list[str]) -> np.ndarray:
    return np.concatenate([params[name].reshape(-1) for name in names]) if names else np.zeros(0)


def vector_to_params(vec: np.ndarray, params: Params, names: list[str]) -> Params:
    """New param dict with the named entries replaced from the flat vector."""
    out = dict(params)
    for name, sl, shape in param_slices(params, names):
        out[name] = vec[sl].reshape(shape).copy()
    return out


def grads_to_matrix(grads: Grads, params: Params, names: list[str], batch: int) -> np.ndarray:
    """Stack per-example gradient dicts into a (batch, num_params) matrix."""
    total = sum(int(np.prod(params[name].shape)) for name in names)
    out = np.zeros((batch, total))
    for name, sl, _shape in param_slices(params, names):
        g = grads.get(name)
        if g is not None:
            out[:, sl] = g.reshape(batch, -1)
    return out
