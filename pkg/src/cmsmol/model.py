"""Decoder-only transformer in numpy with hand-written backpropagation.

Pre-layer-norm residual blocks, multi-head causal softmax attention, a
tanh-GELU feed-forward layer, learned absolute positions and an output
projection tied to the token embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

LN_EPS = 1e-5
INIT_STD = 0.02
PAD_ID = 0


class ModelError(RuntimeError):
    pass


class SequenceTooLong(ModelError, ValueError):
    pass


class ShapeMismatch(ModelError, ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    context_length: int = 160
    dropout: float = 0.0
    precision: int = 64

    def __post_init__(self):
        for name in ("vocab_size", "n_heads", "d_model", "d_ff", "context_length"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.n_layers, bool) or not isinstance(self.n_layers, int) or self.n_layers < 0:
            raise ValueError("n_layers must be a non-negative integer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


Params = dict  # name -> ndarray


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"wte": (cfg.vocab_size, d), "wpe": (cfg.context_length, d)}
    for l in range(cfg.n_layers):
        p = f"h{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
            p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,)})
    return shapes


def init(cfg: ModelConfig, seed: int) -> Params:
    """Weights N(0, 0.02), biases 0, layer-norm gains 1; drawn in a fixed order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = arr.astype(cfg.dtype)
    return params


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks (each returns a cache consumed by its backward)

def ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def ln_backward(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(u):
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), (u, t)


def gelu_backward(dy, cache):
    u, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def softmax(s, axis=-1):
    s = s - s.max(axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis, keepdims=True)


def attn_forward(h, p: Params, prefix: str, n_heads: int):
    """Causal multi-head self-attention on h of shape (B, T, d)."""
    B, T, d = h.shape
    dh = d // n_heads
    q = h @ p[prefix + "wq"] + p[prefix + "bq"]
    k = h @ p[prefix + "wk"]
    v = h @ p[prefix + "wv"] + p[prefix + "bv"]
    split = lambda z: z.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    q, k, v = split(q), split(k), split(v)
    scale = 1.0 / math.sqrt(dh)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(_causal_mask(T), s, -np.inf)
    a = softmax(s)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = o @ p[prefix + "wo"] + p[prefix + "bo"]
    return out, (h, q, k, v, a, o, scale)


def attn_backward(dout, cache, p: Params, prefix: str, grads: Params):
    h, q, k, v, a, o, scale = cache
    B, T, d = h.shape
    H = q.shape[1]
    flat = lambda z: z.reshape(-1, z.shape[-1])
    grads[prefix + "wo"] += flat(o).T @ flat(dout)
    grads[prefix + "bo"] += dout.sum((0, 1))
    do = (dout @ p[prefix + "wo"].T).reshape(B, T, H, -1).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    merge = lambda z: z.transpose(0, 2, 1, 3).reshape(B, T, d)
    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    hf = flat(h)
    grads[prefix + "wq"] += hf.T @ flat(dq)
    grads[prefix + "bq"] += dq.sum((0, 1))
    grads[prefix + "wk"] += hf.T @ flat(dk)
    grads[prefix + "wv"] += hf.T @ flat(dv)
    grads[prefix + "bv"] += dv.sum((0, 1))
    return dq @ p[prefix + "wq"].T + dk @ p[prefix + "wk"].T + dv @ p[prefix + "wv"].T


def mlp_forward(h, p: Params, prefix: str):
    u = h @ p[prefix + "w1"] + p[prefix + "b1"]
    gu, gcache = gelu_forward(u)
    return gu @ p[prefix + "w2"] + p[prefix + "b2"], (h, gu, gcache)


def mlp_backward(dout, cache, p: Params, prefix: str, grads: Params):
    h, gu, gcache = cache
    flat = lambda z: z.reshape(-1, z.shape[-1])
    grads[prefix + "w2"] += flat(gu).T @ flat(dout)
    grads[prefix + "b2"] += dout.sum((0, 1))
    du = gelu_backward(dout @ p[prefix + "w2"].T, gcache)
    grads[prefix + "w1"] += flat(h).T @ flat(du)
    grads[prefix + "b1"] += du.sum((0, 1))
    return du @ p[prefix + "w1"].T


# ---------------------------------------------------------------------------
# full model

def _n_layers(params: Params) -> int:
    n = 0
    while f"h{n}.ln1.g" in params:
        n += 1
    return n


def _as_batch(ids, context_length: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeMismatch("ids must be 1-D or 2-D")
    if arr.shape[1] > context_length:
        raise SequenceTooLong(f"sequence of {arr.shape[1]} tokens exceeds context {context_length}")
    if arr.shape[1] == 0:
        raise ShapeMismatch("empty sequence")
    return arr, single


def _forward(params: Params, ids: np.ndarray, n_heads: int, dropout: float = 0.0,
             rng: np.random.Generator | None = None):
    wte, wpe = params["wte"], params["wpe"]
    B, T = ids.shape
    x = wte[ids] + wpe[:T]
    caches = []
    drop = dropout > 0.0 and rng is not None

    def dropmask(shape):
        if not drop:
            return None
        return (rng.random(shape) >= dropout).astype(x.dtype) / (1.0 - dropout)

    for l in range(_n_layers(params)):
        pre = f"h{l}."
        h1, c_ln1 = ln_forward(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a_out, c_attn = attn_forward(h1, params, pre + "attn.", n_heads)
        m1 = dropmask(a_out.shape)
        x = x + (a_out * m1 if m1 is not None else a_out)
        h2, c_ln2 = ln_forward(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        f_out, c_mlp = mlp_forward(h2, params, pre + "mlp.")
        m2 = dropmask(f_out.shape)
        x = x + (f_out * m2 if m2 is not None else f_out)
        caches.append((c_ln1, c_attn, m1, c_ln2, c_mlp, m2))
    xf, c_lnf = ln_forward(x, params["lnf.g"], params["lnf.b"])
    logits = xf @ wte.T
    return logits, (ids, xf, c_lnf, caches)


def forward(params: Params, ids, *, n_heads: int) -> np.ndarray:
    """Logits of shape (T, V) for 1-D ``ids`` or (B, T, V) for a batch."""
    arr, single = _as_batch(ids, params["wpe"].shape[0])
    logits, _ = _forward(params, arr, n_heads)
    return logits[0] if single else logits


def default_weights(targets) -> np.ndarray:
    """Weight 0 on PAD targets, 1 everywhere else (sentinels included)."""
    return (np.asarray(targets) != PAD_ID).astype(np.float64)


def loss(logits, targets, weights=None) -> float:
    """Mean cross-entropy over positions with weight 1."""
    value, _ = _loss_and_grad(logits, targets, weights, need_grad=False)
    return value if isinstance(value, np.longdouble) else float(value)


def _loss_and_grad(logits, targets, weights, need_grad=True):
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {targets.shape}")
    w = default_weights(targets) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != targets.shape:
        raise ShapeMismatch(f"weights {w.shape} vs targets {targets.shape}")
    total = w.sum()
    if total <= 0:
        raise ShapeMismatch("no positions carry weight")
    shifted = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(-1))
    picked = np.take_along_axis(shifted, targets[..., None], -1)[..., 0]
    nll = lse - picked
    value = (nll * w).sum() / total
    if not need_grad:
        return value, None
    probs = np.exp(shifted - lse[..., None])
    np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1.0, -1)
    dlogits = probs * (w / total)[..., None]
    return value, dlogits.astype(logits.dtype)


def backward(params: Params, ids, targets, weights=None, *, n_heads: int,
             dropout: float = 0.0, rng: np.random.Generator | None = None):
    """Return ``(loss, grads)`` with exact gradients for every parameter tensor."""
    arr, single = _as_batch(ids, params["wpe"].shape[0])
    tgt = np.asarray(targets, dtype=np.int64)
    if single:
        tgt = tgt[None, :]
        if weights is not None:
            weights = np.asarray(weights)[None, :]
    logits, (ids_b, xf, c_lnf, caches) = _forward(params, arr, n_heads, dropout, rng)
    value, dlogits = _loss_and_grad(logits, tgt, weights)
    value = float(value)
    grads = zeros_like(params)
    V, d = params["wte"].shape
    grads["wte"] += dlogits.reshape(-1, V).T @ xf.reshape(-1, d)
    dx, dg, db = ln_backward(dlogits @ params["wte"], c_lnf)
    grads["lnf.g"] += dg
    grads["lnf.b"] += db
    for l in reversed(range(len(caches))):
        pre = f"h{l}."
        c_ln1, c_attn, m1, c_ln2, c_mlp, m2 = caches[l]
        dh2 = mlp_backward(dx * m2 if m2 is not None else dx, c_mlp, params, pre + "mlp.", grads)
        d_in, dg, db = ln_backward(dh2, c_ln2)
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dx = dx + d_in
        dh1 = attn_backward(dx * m1 if m1 is not None else dx, c_attn, params, pre + "attn.", grads)
        d_in, dg, db = ln_backward(dh1, c_ln1)
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dx = dx + d_in
    np.add.at(grads["wte"], ids_b, dx)
    grads["wpe"][: ids_b.shape[1]] += dx.sum(0)
    return value, grads


# ---------------------------------------------------------------------------
# finite-difference check

def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def sample_coordinates(params: Params, n_coords: int, rng: np.random.Generator) -> list[tuple[str, tuple]]:
    """At least ``n_coords`` coordinates: a few from every tensor, the rest uniform."""
    coords = []
    names = list(params)
    per = max(1, n_coords // (2 * len(names)))
    for name in names:
        size = params[name].size
        for flat in rng.choice(size, size=min(per, size), replace=False):
            coords.append((name, np.unravel_index(int(flat), params[name].shape)))
    sizes = np.array([params[n].size for n in names], dtype=float)
    while len(coords) < n_coords:
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        flat = int(rng.integers(params[name].size))
        coords.append((name, np.unravel_index(flat, params[name].shape)))
    return coords


def numeric_gradient_check(f: Callable[[], float], analytic: Params, params: Params,
                           coords, eps: float) -> float:
    """Central differences of ``f`` at ``coords``; returns the max relative error."""
    worst = 0.0
    for name, idx in coords:
        arr = params[name]
        old = arr[idx]
        arr[idx] = old + eps
        up = f()
        arr[idx] = old - eps
        down = f()
        arr[idx] = old
        numeric = float((up - down) / (2 * eps))
        worst = max(worst, max_relative_error(analytic[name][idx], numeric))
    return worst


def grad_check(cfg: ModelConfig, seed: int, eps: float = 1e-5, *, n_coords: int = 200,
               seq_len: int = 6, corrupt: str | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``corrupt`` names a tensor whose analytic gradient is perturbed before
    comparison; it exists to prove the harness can fail.
    """
    if cfg.precision != 64:
        raise ValueError("grad_check needs 64-bit precision")
    rng = np.random.default_rng(seed)
    params = init(cfg, seed)
    # larger-than-default weights keep the check away from the linear regime
    for k, v in params.items():
        if k.rsplit(".", 1)[-1] not in ("g",):
            params[k] = v + rng.normal(0, 0.3, size=v.shape)
    seq = rng.integers(1, cfg.vocab_size, size=seq_len + 1)
    ids, targets = seq[:-1], seq[1:]
    _, grads = backward(params, ids, targets, n_heads=cfg.n_heads)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.5 + 0.1
    coords = sample_coordinates(params, n_coords, rng)
    # the difference quotient is evaluated in extended precision so its own
    # round-off stays well below the tolerance even for tiny gradients
    wide = {k: v.astype(np.longdouble) for k, v in params.items()}
    f = lambda: loss(forward(wide, ids, n_heads=cfg.n_heads), targets)
    return numeric_gradient_check(f, grads, wide, coords, eps)


# ---------------------------------------------------------------------------
# incremental decoding

class Decoder:
    """Key/value cache for token-by-token decoding of a single sequence.

    ``feed(ids)`` appends tokens and returns the logits of the last one;
    results equal the matching rows of :func:`forward`.
    """

    def __init__(self, params: Params, n_heads: int):
        self.params = params
        self.n_heads = n_heads
        self.n_layers = _n_layers(params)
        self.context = params["wpe"].shape[0]
        d = params["wte"].shape[1]
        dt = params["wte"].dtype
        self._k = np.zeros((self.n_layers, n_heads, self.context, d // n_heads), dtype=dt)
        self._v = np.zeros_like(self._k)
        self.length = 0

    def reset(self):
        self.length = 0

    def feed(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        n, t0 = len(ids), self.length
        if n == 0:
            raise ShapeMismatch("nothing to feed")
        if t0 + n > self.context:
            raise SequenceTooLong(f"decoder context {self.context} exhausted")
        p, H = self.params, self.n_heads
        x = p["wte"][ids] + p["wpe"][t0:t0 + n]
        d = x.shape[-1]
        dh = d // H
        scale = 1.0 / math.sqrt(dh)
        visible = np.arange(t0 + n)[None, :] <= (t0 + np.arange(n))[:, None]
        for l in range(self.n_layers):
            pre = f"h{l}."
            h, _ = ln_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(n, H, dh).transpose(1, 0, 2)
            self._k[l, :, t0:t0 + n] = (h @ p[pre + "attn.wk"]).reshape(n, H, dh).transpose(1, 0, 2)
            self._v[l, :, t0:t0 + n] = (h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(n, H, dh).transpose(1, 0, 2)
            K, V = self._k[l, :, : t0 + n], self._v[l, :, : t0 + n]
            s = np.where(visible, (q @ K.transpose(0, 2, 1)) * scale, -np.inf)
            o = (softmax(s) @ V).transpose(1, 0, 2).reshape(n, d)
            x = x + o @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            h, _ = ln_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + mlp_forward(h[None], p, pre + "mlp.")[0][0]
        self.length = t0 + n
        xf, _ = ln_forward(x[-1], p["lnf.g"], p["lnf.b"])
        return xf @ p["wte"].T
