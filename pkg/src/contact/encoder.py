"""Small transformer encoder with hand-written reverse-mode differentiation.

Post-norm layout: embeddings + learned positions -> LayerNorm -> N blocks of
(multi-head self-attention, residual, LayerNorm, GELU feed-forward, residual,
LayerNorm). Position 0 (BOS) is the pooled representation for the task heads.
All math is plain numpy so gradients can be checked against central finite
differences on a float64 build.

Parameter count (documented so it can be asserted against the tensors):

    V*d + P*d + 2d                                  embeddings + embedding LN
  + L * (4*(d*d + d) + 2d + (d*f + f) + (f*d + d) + 2d)   per block
  + (d*V + V  if untied else V)                     MLM projection (+ bias)
  + (d + 1) + (8d + 8)                              stance and argument heads

with V = vocab size, d = d_model, P = max_positions, L = layers, f = d_ff.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.special import erf

from .errors import DataError
from .tokenizer import PAD, TokenSequence

MAGIC = b"CNTC"
FORMAT_VERSION = 1
HEADER_SIZE = 40
N_ARG_CLASSES = 8
LN_EPS = 1e-5
ATTN_NEG = -1e9
HEADS = {"stance": 1, "arguments": N_ARG_CLASSES}


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_positions: int = 128
    vocab_size: int = 2000
    dropout_rate: float = 0.1
    tie_mlm: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DataError("d_model must be divisible by n_heads")
        if self.max_positions < 2:
            raise DataError("max_positions must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError("dropout_rate must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map; also fixes the on-disk order."""
    d, f, v, p = config.d_model, config.d_ff, config.vocab_size, config.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (p, d),
        "emb_ln.g": (d,),
        "emb_ln.b": (d,),
    }
    for i in range(config.n_layers):
        shapes.update(
            {
                f"l{i}.attn.wq": (d, d),
                f"l{i}.attn.bq": (d,),
                f"l{i}.attn.wk": (d, d),
                f"l{i}.attn.bk": (d,),
                f"l{i}.attn.wv": (d, d),
                f"l{i}.attn.bv": (d,),
                f"l{i}.attn.wo": (d, d),
                f"l{i}.attn.bo": (d,),
                f"l{i}.ln1.g": (d,),
                f"l{i}.ln1.b": (d,),
                f"l{i}.ff.w1": (d, f),
                f"l{i}.ff.b1": (f,),
                f"l{i}.ff.w2": (f, d),
                f"l{i}.ff.b2": (d,),
                f"l{i}.ln2.g": (d,),
                f"l{i}.ln2.b": (d,),
            }
        )
    if not config.tie_mlm:
        shapes["mlm.w"] = (d, v)
    shapes["mlm.b"] = (v,)
    shapes["head.stance.w"] = (d, 1)
    shapes["head.stance.b"] = (1,)
    shapes["head.arguments.w"] = (d, N_ARG_CLASSES)
    shapes["head.arguments.b"] = (N_ARG_CLASSES,)
    return shapes


def param_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in tensor_shapes(config).values())


@dataclass
class Parameters:
    """All trainable tensors, keyed by the canonical names."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> Iterator[str]:
        return iter(tensor_shapes(self.config))

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise DataError(f"tensor {name} contains non-finite values")

    def mlm_weight(self) -> np.ndarray:
        # (d, V) projection; the token embedding transposed when tied.
        return self["tok_emb"].T if self.config.tie_mlm else self["mlm.w"]


def init_params(
    config: EncoderConfig, seed: int = 0, dtype=np.float32
) -> Parameters:
    """normal(0, 0.02) weights and embeddings, unit LN gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith((".g",)):
            t = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            t = np.zeros(shape)
        else:
            t = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = t.astype(dtype)
    return Parameters(config=config, tensors=tensors)


def zero_grads(params: Parameters) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------- primitives


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)

def layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m = xhat.shape[-1]
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    del m
    return dx, dg, db


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)

def softmax_backward(dprobs, probs):
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))

def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# ------------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    """Activations cached for backpropagation.

    ``hidden`` is (B, L, d_model); ``pooled`` is the position-0 state; the
    ``attention`` list holds one (B, H, L, L) probability tensor per layer,
    each row summing to 1.
    """

    ids: np.ndarray
    valid: np.ndarray  # (B, L) bool, False at PAD
    hidden: np.ndarray
    pooled: np.ndarray
    attention: list[np.ndarray]
    config: EncoderConfig
    mode: str
    caches: dict = field(repr=False, default_factory=dict)

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


def forward_batch(
    ids: np.ndarray,
    params: Parameters,
    config: EncoderConfig,
    mode: str = "eval",
    seed: int = 0,
) -> ForwardTrace:
    """Encode a padded id batch of shape (B, L)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    ids = np.asarray(ids)
    B, L = ids.shape
    if L > config.max_positions:
        raise DataError(f"sequence length {L} exceeds max_positions {config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DataError("token id out of range for vocab_size")
    dtype = params["tok_emb"].dtype
    valid = ids != PAD
    train = mode == "train" and config.dropout_rate > 0.0
    rng = np.random.default_rng(seed) if train else None
    caches: dict = {"dropout": {}}

    def dropout(x, tag):
        if not train:
            return x
        mask = _dropout_mask(rng, x.shape, config.dropout_rate, dtype)
        caches["dropout"][tag] = mask
        return x * mask

    emb = params["tok_emb"][ids] + params["pos_emb"][:L]
    x, ln_cache = layer_norm(emb, params["emb_ln.g"], params["emb_ln.b"])
    caches["emb_ln"] = ln_cache
    x = dropout(x, "emb")

    H, K = config.n_heads, config.d_head
    scale = 1.0 / np.sqrt(K)
    # additive key mask: large negative at PAD keys
    key_mask = np.where(valid, 0.0, ATTN_NEG).astype(dtype)[:, None, None, :]
    attention = []
    layer_caches = []
    for i in range(config.n_layers):
        p = lambda n: params[f"l{i}.{n}"]
        x_in = x
        q = x @ p("attn.wq") + p("attn.bq")
        k = x @ p("attn.wk") + p("attn.bk")
        v = x @ p("attn.wv") + p("attn.bv")
        # (B, L, d) -> (B, H, L, K)
        qh = q.reshape(B, L, H, K).transpose(0, 2, 1, 3)
        kh = k.reshape(B, L, H, K).transpose(0, 2, 1, 3)
        vh = v.reshape(B, L, H, K).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + key_mask
        probs = softmax(scores)
        ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, L, -1)
        attn_out = ctx @ p("attn.wo") + p("attn.bo")
        attn_out = dropout(attn_out, f"l{i}.attn")
        res1 = x_in + attn_out
        x1, ln1_cache = layer_norm(res1, p("ln1.g"), p("ln1.b"))
        pre = x1 @ p("ff.w1") + p("ff.b1")
        act = gelu(pre)
        ff = act @ p("ff.w2") + p("ff.b2")
        ff = dropout(ff, f"l{i}.ff")
        res2 = x1 + ff
        x, ln2_cache = layer_norm(res2, p("ln2.g"), p("ln2.b"))
        attention.append(probs)
        layer_caches.append(
            {"x_in": x_in, "qh": qh, "kh": kh, "vh": vh, "probs": probs,
             "ctx": ctx, "ln1": ln1_cache, "x1": x1, "pre": pre, "act": act,
             "ln2": ln2_cache}
        )
    caches["layers"] = layer_caches
    if not np.isfinite(x).all():
        raise DataError("non-finite activations in forward pass")
    return ForwardTrace(
        ids=ids, valid=valid, hidden=x, pooled=x[:, 0, :],
        attention=attention, config=config, mode=mode, caches=caches,
    )


def forward(
    seq: TokenSequence,
    params: Parameters,
    config: EncoderConfig,
    mode: str = "eval",
    seed: int = 0,
) -> ForwardTrace:
    """Single-sequence wrapper around :func:`forward_batch`."""
    return forward_batch(
        np.array([seq.ids], dtype=np.int64), params, config, mode=mode, seed=seed
    )


def mlm_logits(trace: ForwardTrace, params: Parameters) -> np.ndarray:
    """One vocabulary-logit row per position: (B, L, V) (squeezed if B=1)."""
    logits = trace.hidden @ params.mlm_weight() + params["mlm.b"]
    return logits[0] if trace.batch == 1 else logits


def classify_logits(
    trace: ForwardTrace, params: Parameters, head: str
) -> np.ndarray:
    """Task logits from the pooled position-0 state: (B, n) or (n,) if B=1."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {sorted(HEADS)}")
    logits = trace.pooled @ params[f"head.{head}.w"] + params[f"head.{head}.b"]
    return logits[0] if trace.batch == 1 else logits


# ------------------------------------------------------------------ backward


def backward(
    trace: ForwardTrace,
    params: Parameters,
    d_hidden: np.ndarray | None = None,
    d_pooled: np.ndarray | None = None,
    d_mlm_logits: np.ndarray | None = None,
    d_head_logits: np.ndarray | None = None,
    head: str | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate upstream gradients through heads and encoder.

    Any subset of the upstream gradients may be supplied; they accumulate.
    Returns a gradient tensor for every parameter tensor (zeros where no
    gradient flows).
    """
    cfg = trace.config
    B, L = trace.ids.shape
    grads = zero_grads(params)
    dx = np.zeros_like(trace.hidden)
    if d_hidden is not None:
        dx = dx + d_hidden.reshape(trace.hidden.shape)

    if d_mlm_logits is not None:
        dlog = d_mlm_logits.reshape(B, L, cfg.vocab_size)
        flat_h = trace.hidden.reshape(-1, cfg.d_model)
        flat_d = dlog.reshape(-1, cfg.vocab_size)
        w_grad = flat_h.T @ flat_d
        if cfg.tie_mlm:
            grads["tok_emb"] += w_grad.T
        else:
            grads["mlm.w"] += w_grad
        grads["mlm.b"] += flat_d.sum(axis=0)
        dx = dx + dlog @ params.mlm_weight().T

    dpool = np.zeros_like(trace.pooled)
    if d_pooled is not None:
        dpool = dpool + d_pooled.reshape(trace.pooled.shape)
    if d_head_logits is not None:
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        dh = d_head_logits.reshape(B, HEADS[head])
        grads[f"head.{head}.w"] += trace.pooled.T @ dh
        grads[f"head.{head}.b"] += dh.sum(axis=0)
        dpool = dpool + dh @ params[f"head.{head}.w"].T
    dx[:, 0, :] += dpool

    caches = trace.caches
    dropout_masks = caches["dropout"]

    def undrop(d, tag):
        mask = dropout_masks.get(tag)
        return d if mask is None else d * mask

    H, K = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(K)
    for i in reversed(range(cfg.n_layers)):
        c = caches["layers"][i]
        p = lambda n: params[f"l{i}.{n}"]
        g = lambda n: grads[f"l{i}.{n}"]

        dres2, dg2, db2 = layer_norm_backward(dx, c["ln2"], p("ln2.g"))
        g("ln2.g")[...] += dg2
        g("ln2.b")[...] += db2
        dff = undrop(dres2, f"l{i}.ff")
        dact = dff @ p("ff.w2").T
        g("ff.w2")[...] += c["act"].reshape(-1, cfg.d_ff).T @ dff.reshape(-1, cfg.d_model)
        g("ff.b2")[...] += dff.sum(axis=(0, 1))
        dpre = dact * gelu_grad(c["pre"])
        g("ff.w1")[...] += c["x1"].reshape(-1, cfg.d_model).T @ dpre.reshape(-1, cfg.d_ff)
        g("ff.b1")[...] += dpre.sum(axis=(0, 1))
        dx1 = dres2 + dpre @ p("ff.w1").T

        dres1, dg1, db1 = layer_norm_backward(dx1, c["ln1"], p("ln1.g"))
        g("ln1.g")[...] += dg1
        g("ln1.b")[...] += db1
        dattn = undrop(dres1, f"l{i}.attn")
        dctx = dattn @ p("attn.wo").T
        g("attn.wo")[...] += c["ctx"].reshape(-1, cfg.d_model).T @ dattn.reshape(-1, cfg.d_model)
        g("attn.bo")[...] += dattn.sum(axis=(0, 1))

        dctx_h = dctx.reshape(B, L, H, K).transpose(0, 2, 1, 3)
        dprobs = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["probs"].transpose(0, 1, 3, 2) @ dctx_h
        dscores = softmax_backward(dprobs, c["probs"]) * scale
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]

        dq = dqh.transpose(0, 2, 1, 3).reshape(B, L, -1)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, L, -1)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, L, -1)
        x_in_flat = c["x_in"].reshape(-1, cfg.d_model)
        g("attn.wq")[...] += x_in_flat.T @ dq.reshape(-1, cfg.d_model)
        g("attn.bq")[...] += dq.sum(axis=(0, 1))
        g("attn.wk")[...] += x_in_flat.T @ dk.reshape(-1, cfg.d_model)
        g("attn.bk")[...] += dk.sum(axis=(0, 1))
        g("attn.wv")[...] += x_in_flat.T @ dv.reshape(-1, cfg.d_model)
        g("attn.bv")[...] += dv.sum(axis=(0, 1))
        dx = (
            dres1
            + dq @ p("attn.wq").T
            + dk @ p("attn.wk").T
            + dv @ p("attn.wv").T
        )

    dx = undrop(dx, "emb")
    demb, dge, dbe = layer_norm_backward(dx, caches["emb_ln"], params["emb_ln.g"])
    grads["emb_ln.g"] += dge
    grads["emb_ln.b"] += dbe
    np.add.at(grads["tok_emb"], trace.ids, demb)
    grads["pos_emb"][:L] += demb.sum(axis=0)
    return grads


# ------------------------------------------------------------- serialization


def save_params(params: Parameters, path: str | Path) -> None:
    """Write the CNTC binary: 40-byte header then float32 LE tensors.

    Header layout: magic "CNTC", u32 version, u32 n_layers, n_heads, d_model,
    d_ff, max_positions, vocab_size, f32 dropout_rate, u8 tie_mlm, 3 pad
    bytes. A JSON sidecar at ``<path>.json`` lists name/shape/offset/nbytes
    for every tensor, in file order.
    """
    path = Path(path)
    cfg = params.config
    header = struct.pack(
        "<4sIIIIIIIfB3x",
        MAGIC,
        FORMAT_VERSION,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_ff,
        cfg.max_positions,
        cfg.vocab_size,
        cfg.dropout_rate,
        int(cfg.tie_mlm),
    )
    assert len(header) == HEADER_SIZE
    sidecar = {"magic": "CNTC", "version": FORMAT_VERSION, "config": asdict(cfg), "tensors": []}
    offset = HEADER_SIZE
    with path.open("wb") as fh:
        fh.write(header)
        for name in tensor_shapes(cfg):
            t = np.ascontiguousarray(params[name], dtype="<f4")
            fh.write(t.tobytes())
            sidecar["tensors"].append(
                {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": t.nbytes}
            )
            offset += t.nbytes
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_params(path: str | Path, dtype=np.float32) -> Parameters:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER_SIZE or blob[:4] != MAGIC:
        raise DataError(f"{path}: not a CNTC parameter file")
    (_, version, n_layers, n_heads, d_model, d_ff, max_pos, vocab, dropout, tie) = (
        struct.unpack("<4sIIIIIIIfB3x", blob[:HEADER_SIZE])
    )
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    cfg = EncoderConfig(
        n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=d_ff,
        max_positions=max_pos, vocab_size=vocab,
        dropout_rate=round(float(dropout), 6), tie_mlm=bool(tie),
    )
    tensors = {}
    offset = HEADER_SIZE
    for name, shape in tensor_shapes(cfg).items():
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[offset : offset + n], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(dtype)
        offset += n
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after tensor data")
    params = Parameters(config=cfg, tensors=tensors)
    params.check_finite()
    return params
