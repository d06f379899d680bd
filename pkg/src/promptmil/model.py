"""Component interaction network with hand-written forward and backward passes.

Pipeline for one bag::

    X (n x d0) --projection--> H (n x d)
    H + component prompts --cosine top-k--> G groups of k rows
    each group --intra encoder--> mean over rows --> c_g (d)
    [cls; c_1..c_G] --inter encoder--> cls' --MLP head--> logits --> softmax

Encoders are single pre-norm transformer layers (multi-head self-attention and
a GELU feed-forward block, each with a residual connection) without positional
encodings. Group selection is discrete: no gradient reaches the similarity
scores, only the selected rows of H.

Parameters live in a flat ``dict[str, np.ndarray]``; the dtype of the arrays
(float32 or float64) sets the arithmetic precision.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import (
    DataError,
    DimensionMismatch,
    EmptyGroup,
    IoFailure,
    MalformedHeader,
    NonFiniteActivation,
    NonFiniteGradient,
)
from .grouping import ComponentGroup, group_indices

LN_EPS = 1e-5
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class ModelConfig:
    d0: int
    d: int = 512
    heads: int = 4
    ff_mult: int = 4
    head_hidden: int | None = None  # defaults to d

    def __post_init__(self):
        if self.d0 < 1 or self.d < 1:
            raise DataError("d0 and d must be positive")
        if self.heads < 1 or self.d % self.heads:
            raise DataError(f"head count {self.heads} must divide d={self.d}")

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.d


@dataclass
class PipelineOptions:
    """How a forward pass forms groups and whether the transformers run."""

    beta: float = 0.3
    grouping: str = "prompt"  # "prompt" | "kmeans" | "none"
    interaction: bool = True
    kmeans_clusters: int = 4
    kmeans_iters: int = 50
    kmeans_seed: int = 0


# -- initialisation -----------------------------------------------------------

def _encoder_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple]:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.wq": (d, d), f"{prefix}.attn.bq": (d,),
        f"{prefix}.attn.wk": (d, d), f"{prefix}.attn.bk": (d,),
        f"{prefix}.attn.wv": (d, d), f"{prefix}.attn.bv": (d,),
        f"{prefix}.attn.wo": (d, d), f"{prefix}.attn.bo": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.ff.w1": (d, ff), f"{prefix}.ff.b1": (ff,),
        f"{prefix}.ff.w2": (ff, d), f"{prefix}.ff.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d = cfg.d
    shapes = {"proj.w": (cfg.d0, d), "proj.b": (d,)}
    shapes.update(_encoder_shapes("intra", d, cfg.ff_mult * d))
    shapes["cls"] = (d,)
    shapes.update(_encoder_shapes("inter", d, cfg.ff_mult * d))
    shapes.update({
        "head.ln.g": (d,), "head.ln.b": (d,),
        "head.w1": (d, cfg.hidden), "head.b1": (cfg.hidden,),
        "head.w2": (cfg.hidden, 2), "head.b2": (2,),
    })
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains, N(0, 0.02^2) class token."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "cls":
            value = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(dtype)
    return params


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


# -- layers -------------------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _mha_fwd(x, p, prefix, heads):
    """x: (B, L, d). Returns output and cache; attention is (B, h, L, L)."""
    B, L, d = x.shape
    dh = d // heads
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    split = lambda t: t.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)  # noqa: E731
    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / math.sqrt(dh)
    attn = _softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale)
    oh = attn @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(B, L, d)
    out = o @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return out, (x, qh, kh, vh, attn, o, scale)


def _mha_bwd(dout, cache, p, prefix, grads):
    x, qh, kh, vh, attn, o, scale = cache
    B, L, d = x.shape
    heads, dh = qh.shape[1], qh.shape[3]
    grads[f"{prefix}.wo"] += _flat(o).T @ _flat(dout)
    grads[f"{prefix}.bo"] += _flat(dout).sum(axis=0)
    do = (dout @ p[f"{prefix}.wo"].T).reshape(B, L, heads, dh).transpose(0, 2, 1, 3)
    dattn = do @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ do
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, L, d)  # noqa: E731
    dx = np.zeros_like(x)
    for name, dt in (("q", merge(dqh)), ("k", merge(dkh)), ("v", merge(dvh))):
        grads[f"{prefix}.w{name}"] += _flat(x).T @ _flat(dt)
        grads[f"{prefix}.b{name}"] += _flat(dt).sum(axis=0)
        dx += dt @ p[f"{prefix}.w{name}"].T
    return dx


def encoder_forward(x, p, prefix, heads):
    """One pre-norm encoder layer over a batch of sets, x: (B, L, d)."""
    a, ln1 = _ln_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    m, mha = _mha_fwd(a, p, f"{prefix}.attn", heads)
    x1 = x + m
    b, ln2 = _ln_fwd(x1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    pre = b @ p[f"{prefix}.ff.w1"] + p[f"{prefix}.ff.b1"]
    act = _gelu(pre)
    out = x1 + act @ p[f"{prefix}.ff.w2"] + p[f"{prefix}.ff.b2"]
    return out, (ln1, mha, ln2, b, pre, act)


def encoder_backward(dout, cache, p, prefix, grads):
    ln1, mha, ln2, b, pre, act = cache
    grads[f"{prefix}.ff.w2"] += _flat(act).T @ _flat(dout)
    grads[f"{prefix}.ff.b2"] += _flat(dout).sum(axis=0)
    dpre = (dout @ p[f"{prefix}.ff.w2"].T) * _gelu_grad(pre)
    grads[f"{prefix}.ff.w1"] += _flat(b).T @ _flat(dpre)
    grads[f"{prefix}.ff.b1"] += _flat(dpre).sum(axis=0)
    db = dpre @ p[f"{prefix}.ff.w1"].T
    dx1, dg, dbeta = _ln_bwd(db, ln2)
    grads[f"{prefix}.ln2.g"] += dg
    grads[f"{prefix}.ln2.b"] += dbeta
    dx1 = dx1 + dout
    da = _mha_bwd(dx1, mha, p, f"{prefix}.attn", grads)
    dx, dg, dbeta = _ln_bwd(da, ln1)
    grads[f"{prefix}.ln1.g"] += dg
    grads[f"{prefix}.ln1.b"] += dbeta
    return dx + dx1


def attention_of(cache) -> np.ndarray:
    """Attention weights (B, h, L, L) stored in an encoder cache."""
    return cache[1][4]


def _head_fwd(z, p):
    a, ln = _ln_fwd(z, p["head.ln.g"], p["head.ln.b"])
    pre = a @ p["head.w1"] + p["head.b1"]
    act = _gelu(pre)
    logits = act @ p["head.w2"] + p["head.b2"]
    return logits, (ln, a, pre, act)


def _head_bwd(dlogits, cache, p, grads):
    ln, a, pre, act = cache
    grads["head.w2"] += np.outer(act, dlogits)
    grads["head.b2"] += dlogits
    dpre = (p["head.w2"] @ dlogits) * _gelu_grad(pre)
    grads["head.w1"] += np.outer(a, dpre)
    grads["head.b1"] += dpre
    dz, dg, db = _ln_bwd(p["head.w1"] @ dpre, ln)
    grads["head.ln.g"] += dg
    grads["head.ln.b"] += db
    return dz


# -- public operations --------------------------------------------------------

def project(instances, params) -> np.ndarray:
    w = params["proj.w"]
    x = np.asarray(instances, dtype=w.dtype)
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionMismatch(f"instances {x.shape} do not match projection input d0={w.shape[0]}")
    return x @ w + params["proj.b"]


def intra_forward(group, params, heads):
    """Contextualise one group (k x d). Returns (output k x d, attention h x k x k)."""
    g = np.asarray(group, dtype=params["cls"].dtype)
    if g.shape[0] < 1:
        raise EmptyGroup("intra_forward on an empty group")
    out, cache = encoder_forward(g[None], params, "intra", heads)
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("non-finite output from intra-component encoder")
    return out[0], attention_of(cache)[0]


def pool(group) -> np.ndarray:
    g = np.asarray(group)
    if g.ndim != 2 or g.shape[0] < 1:
        raise EmptyGroup("cannot pool an empty group")
    return g.mean(axis=0)


def inter_forward_and_classify(c_mean, params, heads):
    """Returns (P, cls_out, cls->component attention averaged over heads)."""
    p = params
    c = np.asarray(c_mean, dtype=p["cls"].dtype)
    if c.ndim != 2 or c.shape[1] != p["cls"].shape[0]:
        raise DimensionMismatch(f"component features {c.shape} do not match d={p['cls'].shape[0]}")
    seq = np.concatenate([p["cls"][None], c])[None]
    out, cache = encoder_forward(seq, p, "inter", heads)
    cls_out = out[0, 0]
    logits, _ = _head_fwd(cls_out, p)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteActivation("non-finite logits")
    attn = attention_of(cache)[0]
    return _softmax(logits), cls_out, attn.mean(axis=0)[0, 1:]


@dataclass
class ForwardTrace:
    projected: np.ndarray
    similarity: np.ndarray | None
    groups: list[ComponentGroup]
    contextualized: list[np.ndarray]
    intra_attention: list[np.ndarray]  # per group: (h, k, k)
    c_mean: np.ndarray  # (G, d)
    cls_out: np.ndarray | None
    logits: np.ndarray
    probs: np.ndarray
    inter_attention: np.ndarray | None  # (h, G+1, G+1)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def cls_attention(self) -> np.ndarray | None:
        """CLS -> component attention averaged over heads, length G."""
        if self.inter_attention is None:
            return None
        return self.inter_attention.mean(axis=0)[0, 1:]

    @property
    def representation(self) -> np.ndarray:
        """Bag representation fed to the head (CLS' or the mean of group means)."""
        return self.cls_out if self.cls_out is not None else self.c_mean.mean(axis=0)


def _kmeans_groups(h: np.ndarray, opts: PipelineOptions, rng: np.random.Generator) -> list[np.ndarray]:
    n = len(h)
    kc = min(opts.kmeans_clusters, n)
    x = h.astype(np.float64)
    # k-means++ seeding
    centers = [x[rng.integers(n)]]
    for _ in range(1, kc):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    labels, _ = kernels.kmeans_lloyd(x, np.asarray(centers), opts.kmeans_iters)
    return [np.flatnonzero(labels == c).astype(np.int64) for c in range(kc) if (labels == c).any()]


def forward(instances, component_prompts, params, heads: int, opts: PipelineOptions | None = None,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Full forward pass for one bag; ``rng`` seeds k-means when that grouping is used."""
    opts = opts or PipelineOptions()
    p = params
    x = np.asarray(instances, dtype=p["proj.w"].dtype)
    if x.shape[0] < 1:
        raise EmptyGroup("forward on an empty bag")
    h = project(x, p)

    sim = None
    if opts.grouping == "prompt":
        t = np.asarray(component_prompts, dtype=np.float64)
        if t.shape[1] != h.shape[1]:
            raise DimensionMismatch(f"component prompts have length {t.shape[1]}, model width is {h.shape[1]}")
        sim = kernels.cosine_similarity(h, t.astype(h.dtype))
        members = group_indices(sim, opts.beta)
    elif opts.grouping == "kmeans":
        members = _kmeans_groups(h, opts, rng if rng is not None else np.random.default_rng(opts.kmeans_seed))
    elif opts.grouping == "none":
        members = [np.arange(len(h), dtype=np.int64)]
    else:
        raise DataError(f"unknown grouping mode {opts.grouping!r}")

    groups = [
        ComponentGroup(i, m, h[m], sim[m, i] if sim is not None else np.zeros(len(m)))
        for i, m in enumerate(members)
    ]

    cache: dict = {"x": x, "members": members, "opts": opts, "heads": heads}
    contextualized: list[np.ndarray] = []
    intra_attn: list[np.ndarray] = []
    if opts.interaction:
        intra_caches = []
        # equal-size groups run as one batch; otherwise one at a time
        if len({len(m) for m in members}) == 1:
            batch = np.stack([h[m] for m in members])
            out, c = encoder_forward(batch, p, "intra", heads)
            contextualized = list(out)
            intra_attn = list(attention_of(c))
            intra_caches.append(("batch", c))
        else:
            for m in members:
                out, c = encoder_forward(h[m][None], p, "intra", heads)
                contextualized.append(out[0])
                intra_attn.append(attention_of(c)[0])
                intra_caches.append(("single", c))
        c_mean = np.stack([z.mean(axis=0) for z in contextualized])
        seq = np.concatenate([p["cls"][None], c_mean])[None]
        inter_out, inter_cache = encoder_forward(seq, p, "inter", heads)
        cls_out = inter_out[0, 0]
        logits, head_cache = _head_fwd(cls_out, p)
        inter_attn = attention_of(inter_cache)[0]
        cache.update(intra=intra_caches, inter=inter_cache, head=head_cache)
    else:
        c_mean = np.stack([h[m].mean(axis=0) for m in members])
        cls_out = None
        inter_attn = None
        logits, head_cache = _head_fwd(c_mean.mean(axis=0), p)
        cache.update(head=head_cache)

    if not np.all(np.isfinite(logits)):
        raise NonFiniteActivation("non-finite logits in forward pass")
    return ForwardTrace(h, sim, groups, contextualized, intra_attn, c_mean, cls_out,
                        logits, _softmax(logits), inter_attn, cache)


def backward(trace: ForwardTrace, params, dlogits) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the logits.

    Returns (parameter gradients, gradient w.r.t. the input instances).
    """
    p = params
    c = trace._cache
    members = c["members"]
    dlogits = np.asarray(dlogits, dtype=p["cls"].dtype)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dz = _head_bwd(dlogits, c["head"], p, grads)
    dh = np.zeros_like(trace.projected)
    G = len(members)

    if c["opts"].interaction:
        dseq = np.zeros((1, G + 1, dz.shape[0]), dtype=dz.dtype)
        dseq[0, 0] = dz
        dseq = encoder_backward(dseq, c["inter"], p, "inter", grads)
        grads["cls"] += dseq[0, 0]
        dc_mean = dseq[0, 1:]
        kind, first = c["intra"][0]
        if kind == "batch":
            k = len(members[0])
            dz_groups = np.repeat(dc_mean[:, None, :] / k, k, axis=1)
            dgroups = encoder_backward(dz_groups, first, p, "intra", grads)
            for m, dg in zip(members, dgroups):
                np.add.at(dh, m, dg)
        else:
            for (_, cache_g), m, dcm in zip(c["intra"], members, dc_mean):
                k = len(m)
                dzg = np.repeat((dcm / k)[None, None, :], k, axis=1)
                dg = encoder_backward(dzg, cache_g, p, "intra", grads)[0]
                np.add.at(dh, m, dg)
    else:
        dcm = dz / G
        for m in members:
            np.add.at(dh, m, np.broadcast_to(dcm / len(m), (len(m), dz.shape[0])))

    grads["proj.w"] += c["x"].T @ dh
    grads["proj.b"] += dh.sum(axis=0)
    dx = dh @ p["proj.w"].T
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    return grads, dx


def cross_entropy_grad(probs, label: int) -> np.ndarray:
    """d(-log p[label]) / d logits for a softmax output."""
    g = np.array(probs, copy=True)
    g[label] -= 1.0
    return g


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"PBCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(params: dict[str, np.ndarray], path, config: dict | None = None) -> None:
    """Binary tensor archive plus a ``.json`` sidecar holding ``config``.

    Layout (little-endian): magic ``PBCK``, version u32, tensor count u32, then
    per tensor: name length u32, UTF-8 name, dtype u8 (0=f32, 1=f64),
    ndim u32, dims u64 each, raw row-major data.
    """
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        code = 1 if arr.dtype == np.float64 else 0
        raw_name = name.encode()
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    try:
        path.write_bytes(b"".join(chunks))
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(config or {}, indent=1, sort_keys=True))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise MalformedHeader(f"{path}: bad checkpoint magic at offset 0")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise MalformedHeader(f"{path}: unsupported checkpoint version {version} at offset 4")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BI", raw, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype=dt, count=size, offset=off).reshape(shape)
            off += size * dt.itemsize
            params[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise MalformedHeader(f"{path}: corrupt checkpoint near byte offset {off} ({exc})") from exc
    if off != len(raw):
        raise MalformedHeader(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    sidecar = path.with_suffix(path.suffix + ".json")
    config = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return params, config


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
