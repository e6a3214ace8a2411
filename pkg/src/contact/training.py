"""MLM pretraining and supervised fine-tuning.

Both procedures share the same machinery: dynamic masking (pretraining only),
padded batches, an adaptive-moment optimizer with decoupled weight decay and
global-norm gradient clipping, and deterministic seeding — (seed, config,
data) fully determine the resulting parameters.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import encoder as enc
from .encoder import Parameters
from .errors import DataError, NumericalError
from .ioutil import write_jsonl
from .labels import ARGUMENT_CLASSES, LabeledPost
from .model import ModelState
from .tokenizer import MASK, N_SPECIALS, TokenSequence, Vocabulary, encode


@dataclass(frozen=True)
class MaskingPolicy:
    """Dynamic-masking knobs: selection rate and the mask/random/keep split."""

    select_prob: float = 0.15
    replace_mask_prob: float = 0.8
    replace_random_prob: float = 0.1
    keep_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        total = self.replace_mask_prob + self.replace_random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9:
            raise DataError("mask/random/keep probabilities must sum to 1")
        if not 0.0 < self.select_prob < 1.0:
            raise DataError("select_prob must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 8
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    validation_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise DataError("learning_rate must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise DataError("validation_fraction must lie in [0, 1)")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_train_config_file(path: str | Path) -> dict:
    """Read ``key = value`` lines; "#" starts a comment; keys as in TrainConfig."""
    known = {f.name for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in known:
            raise DataError(f"{path}:{lineno}: unknown key {key!r}")
        caster = int if key in ("epochs", "batch_size", "seed") else float
        try:
            values[key] = caster(raw)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


def load_train_config(path: str | Path, **overrides) -> TrainConfig:
    return TrainConfig(**{**parse_train_config_file(path), **overrides})


@dataclass
class TrainLog:
    """One record per epoch, emitted as JSON-Lines."""

    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> None:
        for key in ("train_loss", "val_loss"):
            v = rec.get(key)
            if v is not None and (not np.isfinite(v) or v < 0):
                raise NumericalError(f"{key} is not a finite nonnegative number: {v}")
        self.records.append(rec)

    @property
    def train_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def val_losses(self) -> list[float]:
        return [r["val_loss"] for r in self.records if r.get("val_loss") is not None]

    def write(self, path: str | Path) -> None:
        write_jsonl(path, self.records)


# ------------------------------------------------------------------- masking


def apply_masking(
    seq: TokenSequence,
    policy: MaskingPolicy,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
) -> tuple[TokenSequence, list[int], list[int]]:
    """Corrupt a sequence for MLM; returns (corrupted, loss_positions, originals).

    Special ids (PAD/BOS/EOS/UNK/MASK) are never selected. Each other
    position is selected independently with ``select_prob``; selected
    positions become MASK / a uniform random non-special id / stay unchanged
    per the policy's three-way split. Loss is computed only at selected
    positions.
    """
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    ids = list(seq.ids)
    n_vocab = len(vocab)
    loss_positions: list[int] = []
    originals: list[int] = []
    for i, token in enumerate(ids):
        if token < N_SPECIALS:
            continue
        if rng.random() >= policy.select_prob:
            continue
        loss_positions.append(i)
        originals.append(token)
        branch = rng.random()
        if branch < policy.replace_mask_prob:
            ids[i] = MASK
        elif branch < policy.replace_mask_prob + policy.replace_random_prob:
            ids[i] = int(rng.integers(N_SPECIALS, n_vocab))
        # else: keep the original token
    corrupted = TokenSequence(ids=tuple(ids), original_length=seq.original_length)
    return corrupted, loss_positions, originals


# ----------------------------------------------------------------- optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping.

    Weight decay applies only to matrices (ndim >= 2); biases and layer-norm
    parameters are exempt. A step with zero gradients and zero decay leaves
    the parameters bit-identical.
    """

    def __init__(self, params: Parameters, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: Parameters, grads: dict[str, np.ndarray]) -> float:
        cfg = self.cfg
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = 1.0
        if cfg.grad_clip_norm > 0 and norm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / norm
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, tensor in params.tensors.items():
            g = grads[name] * scale
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay > 0 and tensor.ndim >= 2:
                update = update + cfg.weight_decay * tensor
            tensor -= (cfg.learning_rate * update).astype(tensor.dtype)
        return norm


# ------------------------------------------------------------------ batching


def _seed_from(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def pad_batch(seqs: Sequence[TokenSequence]) -> np.ndarray:
    longest = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), longest), dtype=np.int64)  # 0 == PAD
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s.ids
    return out


def _batches(n: int, batch_size: int, order: np.ndarray) -> Iterable[np.ndarray]:
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_loss(loss: float, step: int, ids: np.ndarray) -> None:
    if not np.isfinite(loss):
        sample = ids[0][:16].tolist() if len(ids) else []
        raise NumericalError(
            f"non-finite loss at optimizer step {step}; first batch row ids {sample}"
        )


# --------------------------------------------------------------- MLM pretrain


def _mlm_batch_loss(
    params: Parameters,
    ids: np.ndarray,
    pos_b: np.ndarray,
    pos_l: np.ndarray,
    targets: np.ndarray,
    mode: str,
    dropout_seed: int,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Mean cross-entropy at the loss positions; grads unless eval mode."""
    cfg = params.config
    trace = enc.forward_batch(ids, params, cfg, mode=mode, seed=dropout_seed)
    h_sel = trace.hidden[pos_b, pos_l]  # (N, d)
    w = params.mlm_weight()
    logits = h_sel @ w + params["mlm.b"]  # (N, V)
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    n = len(targets)
    loss = float((lse - logits[np.arange(n), targets]).mean())
    if mode == "eval":
        return loss, None
    dlogits = np.exp(logits - lse[:, None])
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    d_hidden = np.zeros_like(trace.hidden)
    d_hidden[pos_b, pos_l] = dlogits @ w.T
    grads = enc.backward(trace, params, d_hidden=d_hidden)
    w_grad = h_sel.T @ dlogits
    if cfg.tie_mlm:
        grads["tok_emb"] += w_grad.T
    else:
        grads["mlm.w"] += w_grad
    grads["mlm.b"] += dlogits.sum(axis=0)
    return loss, grads


def _corrupt_batch(
    seqs: Sequence[TokenSequence],
    policy: MaskingPolicy,
    vocab: Vocabulary,
    rng: np.random.Generator,
):
    """Mask a batch; returns padded ids plus flat loss-position arrays."""
    corrupted, pos_b, pos_l, targets = [], [], [], []
    for r, seq in enumerate(seqs):
        cor, positions, originals = apply_masking(seq, policy, vocab, rng=rng)
        corrupted.append(cor)
        pos_b.extend([r] * len(positions))
        pos_l.extend(positions)
        targets.extend(originals)
    return (
        pad_batch(corrupted),
        np.array(pos_b, dtype=np.int64),
        np.array(pos_l, dtype=np.int64),
        np.array(targets, dtype=np.int64),
    )


def pretrain(
    model: ModelState,
    docs: Iterable,
    cfg: TrainConfig,
    policy: MaskingPolicy,
) -> tuple[Parameters, TrainLog]:
    """Continue (or start) MLM training of the model on the doc stream.

    Docs may be CleanDocs or plain strings. A ``validation_fraction`` split
    is carved off per document, deterministically under ``cfg.seed``; the
    validation corruption is frozen so that epoch-to-epoch and model-to-model
    comparisons see the identical prediction task.
    """
    texts = [d if isinstance(d, str) else d.text for d in docs]
    if not texts:
        raise DataError("pretraining needs at least one document")
    params = model.params.copy()
    config = params.config
    vocab = model.vocab
    seqs = [encode(t, vocab, config.max_positions) for t in texts]

    split_rng = np.random.default_rng(_seed_from(cfg.seed, 0xD0C5))
    order = split_rng.permutation(len(seqs))
    n_val = int(round(cfg.validation_fraction * len(seqs)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise DataError("validation_fraction leaves no training documents")
    train_seqs = [seqs[i] for i in train_idx]
    val_seqs = [seqs[i] for i in val_idx]

    val_batches = []
    if val_seqs:
        val_rng = np.random.default_rng(_seed_from(policy.seed, 0x7A1))
        for start in range(0, len(val_seqs), cfg.batch_size):
            chunk = val_seqs[start : start + cfg.batch_size]
            val_batches.append(_corrupt_batch(chunk, policy, vocab, val_rng))

    optimizer = AdamW(params, cfg)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng(_seed_from(cfg.seed, 1, epoch))
        epoch_order = shuffle_rng.permutation(len(train_seqs))
        mask_rng = np.random.default_rng(_seed_from(policy.seed, 2, epoch))
        total_loss, total_positions = 0.0, 0
        for batch_idx in _batches(len(train_seqs), cfg.batch_size, epoch_order):
            batch = [train_seqs[i] for i in batch_idx]
            ids, pos_b, pos_l, targets = _corrupt_batch(batch, policy, vocab, mask_rng)
            if len(targets) == 0:
                continue
            loss, grads = _mlm_batch_loss(
                params, ids, pos_b, pos_l, targets, "train",
                _seed_from(cfg.seed, 3, epoch, optimizer.t),
            )
            _check_loss(loss, optimizer.t, ids)
            optimizer.step(params, grads)
            total_loss += loss * len(targets)
            total_positions += len(targets)
        train_loss = total_loss / max(total_positions, 1)
        val_loss = None
        if val_batches:
            v_loss, v_n = 0.0, 0
            for ids, pos_b, pos_l, targets in val_batches:
                if len(targets) == 0:
                    continue
                loss, _ = _mlm_batch_loss(params, ids, pos_b, pos_l, targets, "eval", 0)
                v_loss += loss * len(targets)
                v_n += len(targets)
            val_loss = v_loss / max(v_n, 1)
        log.add(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            wall_clock_s=round(time.perf_counter() - t0, 4),
            seed=cfg.seed,
            config_fingerprint=cfg.fingerprint(),
        )
    return params, log


def mlm_validation_loss(
    model: ModelState, docs: Iterable, policy: MaskingPolicy, batch_size: int = 32
) -> float:
    """Frozen-corruption MLM loss of a model on a held-out doc stream."""
    texts = [d if isinstance(d, str) else d.text for d in docs]
    if not texts:
        raise DataError("validation needs at least one document")
    vocab = model.vocab
    seqs = [encode(t, vocab, model.config.max_positions) for t in texts]
    rng = np.random.default_rng(_seed_from(policy.seed, 0x7A1))
    total, n_total = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        ids, pos_b, pos_l, targets = _corrupt_batch(chunk, policy, vocab, rng)
        if len(targets) == 0:
            continue
        loss, _ = _mlm_batch_loss(model.params, ids, pos_b, pos_l, targets, "eval", 0)
        total += loss * len(targets)
        n_total += len(targets)
    return total / max(n_total, 1)


# ------------------------------------------------------------------ finetune


def _stance_targets(posts: Sequence[LabeledPost]) -> np.ndarray:
    return np.array([1.0 if p.hesitant else 0.0 for p in posts])[:, None]


def _argument_targets(posts: Sequence[LabeledPost]) -> np.ndarray:
    index = {c: j for j, c in enumerate(ARGUMENT_CLASSES)}
    y = np.zeros((len(posts), len(ARGUMENT_CLASSES)))
    for i, post in enumerate(posts):
        for label in post.arguments:
            if label not in index:
                raise DataError(f"unknown argument label {label!r}")
            y[i, index[label]] = 1.0
    return y


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-label binary cross-entropy and its gradient wrt logits."""
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))
    return float(loss.mean()), (sig - y) / z.size


def _finetune(
    model: ModelState,
    data: Sequence[LabeledPost],
    cfg: TrainConfig,
    head: str,
    targets: np.ndarray,
) -> Parameters:
    if not data:
        raise DataError("fine-tuning needs at least one labeled post")
    params = model.params.copy()
    config = params.config
    seqs = [encode(p.text, model.vocab, config.max_positions) for p in data]
    optimizer = AdamW(params, cfg)
    for epoch in range(cfg.epochs):
        shuffle_rng = np.random.default_rng(_seed_from(cfg.seed, 11, epoch))
        order = shuffle_rng.permutation(len(seqs))
        for batch_idx in _batches(len(seqs), cfg.batch_size, order):
            ids = pad_batch([seqs[i] for i in batch_idx])
            trace = enc.forward_batch(
                ids, params, config, mode="train",
                seed=_seed_from(cfg.seed, 13, epoch, optimizer.t),
            )
            z = trace.pooled @ params[f"head.{head}.w"] + params[f"head.{head}.b"]
            loss, dz = _bce_with_logits(z, targets[batch_idx])
            _check_loss(loss, optimizer.t, ids)
            grads = enc.backward(trace, params, d_head_logits=dz, head=head)
            optimizer.step(params, grads)
    return params


def finetune_stance(
    model: ModelState, data: Sequence[LabeledPost], cfg: TrainConfig
) -> Parameters:
    """Binary sigmoid fine-tuning of all parameters on the stance logit."""
    return _finetune(model, data, cfg, "stance", _stance_targets(data))


def finetune_arguments(
    model: ModelState, data: Sequence[LabeledPost], cfg: TrainConfig
) -> Parameters:
    """Multi-label fine-tuning: one independent sigmoid per argument class.

    Posts with empty label sets contribute all-negative targets.
    """
    return _finetune(model, data, cfg, "arguments", _argument_targets(data))


# ------------------------------------------------------------------ predict


def predict_proba(
    params: Parameters,
    vocab: Vocabulary,
    texts: Sequence[str],
    head: str,
    batch_size: int = 64,
) -> np.ndarray:
    """Sigmoid probabilities, shape (N,) for stance or (N, 8) for arguments."""
    config = params.config
    out = []
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        ids = pad_batch([encode(t, vocab, config.max_positions) for t in chunk])
        trace = enc.forward_batch(ids, params, config, mode="eval")
        z = trace.pooled @ params[f"head.{head}.w"] + params[f"head.{head}.b"]
        out.append(1.0 / (1.0 + np.exp(-z)))
    probs = np.concatenate(out, axis=0)
    return probs[:, 0] if head == "stance" else probs
