"""Sequence encoder with a mixture-density head, its losses and its training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..errors import DivergenceError, EmptyBatchError, VocabError
from ..scene_dsl import VOCABULARY, LabeledDescription, SceneDescription, paraphrase, tokenize
from .gmm import DEFAULT_K, GmmParams

log = logging.getLogger(__name__)

PAD_ID = 0
TOKEN_IDS = {tok: i + 1 for i, tok in enumerate(VOCABULARY)}
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PredictorConfig:
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    n_layers: int = 2
    k: int = DEFAULT_K
    max_len: int = 128
    var_floor: float = 1e-6
    dropout: float = 0.0
    norm_first: bool = False


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.05
    xi: float = 20.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.xi >= 0:
            raise ValueError("xi must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-3
    head_lr: float = 3e-3
    lr_end: float = 1e-5
    augment: bool = True  # paraphrase and relabel every item each epoch
    weight_decay: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)


class LayoutPredictor(nn.Module):
    """Token + position embeddings, a small transformer encoder and a GMM head.

    The head maps a pooled encoder state to ``K x (2 mean logits,
    2 log-variances, 1 mixture logit)``.  An object's state is the mean of the
    encoder outputs at every mention of its noun (the introducing mention and
    any later "the <noun>" references), so relation clauses that only refer
    back to an object still reach its mixture directly.
    """

    def __init__(self, cfg: PredictorConfig = PredictorConfig()):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(len(VOCABULARY) + 1, cfg.d_model, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        layer = nn.TransformerEncoderLayer(
            cfg.d_model,
            cfg.n_heads,
            dim_feedforward=cfg.ff_dim,
            dropout=cfg.dropout,
            activation="gelu",
            norm_first=cfg.norm_first,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.k * 5)

    def encode(self, ids: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        return self.norm(self.encoder(x, src_key_padding_mask=pad))

    def mixture(self, states: torch.Tensor):
        """Means in ``[0,1]^2``, floored variances and log-weights for each state row."""
        raw = self.head(states).reshape(*states.shape[:-1], self.cfg.k, 5)
        means = torch.sigmoid(raw[..., 0:2])
        variances = torch.exp(raw[..., 2:4]) + self.cfg.var_floor
        log_w = torch.log_softmax(raw[..., 4], dim=-1)
        return means, variances, log_w

    def forward(self, batch: "EncodedBatch"):
        states = self.encode(batch.ids, batch.pad)
        pooled = torch.einsum("ol,old->od", batch.obj_weights.to(states.dtype), states[batch.obj_item])
        return self.mixture(pooled)


def token_ids(text: str) -> list[int]:
    ids = []
    for tok, offset in tokenize(text):
        if tok not in TOKEN_IDS:
            raise VocabError(f"token {tok!r} at byte {offset} is not in the vocabulary")
        ids.append(TOKEN_IDS[tok])
    return ids


@dataclass
class EncodedBatch:
    ids: torch.Tensor
    pad: torch.Tensor
    obj_item: torch.Tensor
    obj_pos: torch.Tensor
    # (objects, length) averaging weights over each object's noun mentions
    obj_weights: torch.Tensor
    # per item: offset of its first object in the flattened object axis
    obj_offset: list[int]
    targets: Optional[torch.Tensor]
    target_mask: torch.Tensor
    rel_first: torch.Tensor
    rel_second: torch.Tensor
    rel_axis: torch.Tensor


def encode_batch(items: Sequence[LabeledDescription], max_len: int, dtype=torch.float32) -> EncodedBatch:
    if not items:
        raise EmptyBatchError("empty batch")
    seqs = [token_ids(it.description.global_text) for it in items]
    length = max(len(s) for s in seqs)
    if length > max_len:
        raise VocabError(f"description of {length} tokens exceeds the encoder limit {max_len}")
    ids = torch.zeros((len(seqs), length), dtype=torch.long)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = torch.tensor(s)
    pad = ids == PAD_ID
    obj_item, obj_pos, offsets, targets, tmask, weights = [], [], [], [], [], []
    rel_first, rel_second, rel_axis = [], [], []
    for b, it in enumerate(items):
        d = it.description
        offset = len(obj_item)
        offsets.append(offset)
        for i, pos in enumerate(d.mention_positions):
            obj_item.append(b)
            obj_pos.append(pos)
            row = torch.zeros(length)
            hits = [j for j, t in enumerate(seqs[b]) if t == seqs[b][pos]]
            row[hits] = 1.0 / len(hits)
            weights.append(row)
            if it.layout is not None:
                targets.append(it.layout[i])
                tmask.append(True)
            else:
                targets.append((0.0, 0.0))
                tmask.append(False)
        for r in d.relations:
            s, o = offset + r.subject_id - 1, offset + r.object_id - 1
            first, second = (s, o) if r.kind.subject_first else (o, s)
            rel_first.append(first)
            rel_second.append(second)
            rel_axis.append(r.kind.axis)
    as_long = lambda v: torch.tensor(v, dtype=torch.long)
    return EncodedBatch(
        ids=ids,
        pad=pad,
        obj_item=as_long(obj_item),
        obj_pos=as_long(obj_pos),
        obj_weights=torch.stack(weights).to(dtype),
        obj_offset=offsets,
        targets=torch.tensor(targets, dtype=dtype).reshape(-1, 2),
        target_mask=torch.tensor(tmask, dtype=torch.bool),
        rel_first=as_long(rel_first),
        rel_second=as_long(rel_second),
        rel_axis=as_long(rel_axis),
    )


def mixture_nll(points, means, variances, log_w) -> torch.Tensor:
    """Per-row negative log-likelihood of ``points (O,2)`` under ``(O,K,...)`` mixtures."""
    diff2 = (points[:, None, :] - means) ** 2
    log_comp = log_w - LOG_2PI - 0.5 * torch.log(variances).sum(-1) - 0.5 * (diff2 / variances).sum(-1)
    return -torch.logsumexp(log_comp, dim=-1)


def relation_hinge(means, first, second, axis, delta: float) -> torch.Tensor:
    """Per-relation hinge: rightmost (lowest) mean of ``first`` vs leftmost (highest) of ``second``."""
    idx = torch.arange(len(axis))
    a = means[first][idx, :, axis]
    b = means[second][idx, :, axis]
    return torch.clamp(a.max(dim=1).values - b.min(dim=1).values, min=-delta)


def loss_terms(model: LayoutPredictor, batch: EncodedBatch, cfg: LossConfig):
    """Return ``(total, l_abs, l_rel)``; each term averages over its contributors."""
    means, variances, log_w = model(batch)
    zero = means.sum() * 0.0
    if batch.target_mask.any():
        m = batch.target_mask
        l_abs = mixture_nll(batch.targets.to(means.dtype)[m], means[m], variances[m], log_w[m]).mean()
    else:
        l_abs = zero
    if len(batch.rel_axis):
        l_rel = relation_hinge(means, batch.rel_first, batch.rel_second, batch.rel_axis, cfg.delta).mean()
    else:
        l_rel = zero
    return l_abs + cfg.xi * l_rel, l_abs, l_rel


def total_loss(items: Sequence[LabeledDescription], model: LayoutPredictor, cfg: LossConfig = LossConfig()) -> float:
    """``L_abs + xi * L_rel`` on a batch, as a float."""
    dtype = next(model.parameters()).dtype
    batch = encode_batch(items, model.cfg.max_len, dtype)
    with torch.no_grad():
        total, _, _ = loss_terms(model, batch, cfg)
    return float(total)


def predict_gmm(desc: SceneDescription, model: LayoutPredictor) -> list[GmmParams]:
    """One mixture per object, read at each object's first mention."""
    dtype = next(model.parameters()).dtype
    batch = encode_batch([LabeledDescription(desc)], model.cfg.max_len, dtype)
    model.eval()
    with torch.no_grad():
        means, variances, log_w = model(batch)
    weights = torch.softmax(log_w, dim=-1)
    return [
        GmmParams(means[i].double().numpy(), variances[i].double().numpy(), weights[i].double().numpy())
        for i in range(means.shape[0])
    ]


def relation_satisfaction(model: LayoutPredictor, items: Sequence[LabeledDescription]) -> float:
    """Fraction of relations satisfied (strictly) by the argmax-weight component means."""
    ok = total = 0
    for it in items:
        gmms = predict_gmm(it.description, model)
        centers = [g.argmax_mean() for g in gmms]
        for r in it.description.relations:
            total += 1
            ok += r.kind.holds(centers[r.subject_id - 1], centers[r.object_id - 1])
    return ok / total if total else float("nan")


@dataclass
class TrainResult:
    model: LayoutPredictor
    loss_curve: list[float]
    initial_loss: float
    config: TrainConfig


def build_model(cfg: PredictorConfig = PredictorConfig(), seed: int = 0) -> LayoutPredictor:
    torch.manual_seed(seed)
    return LayoutPredictor(cfg)


def train(
    dataset: Sequence[LabeledDescription],
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    model_cfg: PredictorConfig = PredictorConfig(),
    progress=None,
) -> TrainResult:
    """Fit the predictor with Adam on ``L_abs + xi * L_rel``.

    Learning rates decay linearly to ``lr_end`` over the run.  The recorded
    curve holds the mean training loss of every epoch.
    """
    if not dataset:
        raise EmptyBatchError("cannot train on an empty dataset")
    model = build_model(model_cfg, seed)
    rng = np.random.default_rng(seed)
    head_params = list(model.head.parameters())
    head_ids = {id(p) for p in head_params}
    enc_params = [p for p in model.parameters() if id(p) not in head_ids]
    opt = torch.optim.AdamW(
        [{"params": enc_params, "lr": cfg.lr}, {"params": head_params, "lr": cfg.head_lr}],
        weight_decay=cfg.weight_decay,
    )
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * n_batches)
    floor = cfg.lr_end / cfg.lr
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: 1.0 - (1.0 - floor) * min(step, total_steps) / total_steps
    )
    batches = [encode_batch(dataset[i : i + cfg.batch_size], model_cfg.max_len) for i in range(0, len(dataset), cfg.batch_size)]
    model.eval()
    with torch.no_grad():
        initial = float(np.mean([float(loss_terms(model, b, cfg.loss)[0]) for b in batches]))
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), cfg.batch_size):
            chunk = [dataset[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                chunk = [paraphrase(rng, it) for it in chunk]
            batch = encode_batch(chunk, model_cfg.max_len)
            loss, _, _ = loss_terms(model, batch, cfg.loss)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, curve[-1])
    model.eval()
    return TrainResult(model=model, loss_curve=curve, initial_loss=initial, config=cfg)
