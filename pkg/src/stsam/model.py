"""The spatial-temporal self-attention forecaster.

Pipeline per time slot t, for all n regions at once:

1. flow embedding of the last k inflow/outflow values, fused by a correlation layer;
2. spatial (region one-hot) and temporal (time-of-week one-hot) embeddings;
3. additive fusion into region embeddings ``R`` of shape ``[n, d]``;
4. ``n_blocks`` encoder blocks of multi-head self-attention across regions,
   feed-forward network, residual connections and post-norm;
5. a two-layer head predicting next-slot inflow and outflow per region.

All functions accept arbitrary leading batch axes in front of ``[n, ...]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .dataio import DatasetMeta, Sample
from .numerics import Tensor

ATTENTION_NORMS = ("softmax", "exp_denominator")


@dataclass(frozen=True)
class HyperParams:
    d: int = 64
    M: int = 4
    k: int = 5
    ff_dim: int = 128
    n_blocks: int = 1
    dropout_rate: float = 0.1
    time_vocab: int = 336
    n_regions: int = 200
    attention_norm: str = "softmax"
    head_split: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d", "M", "k", "ff_dim", "n_blocks", "time_vocab", "n_regions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.attention_norm not in ATTENTION_NORMS:
            raise ValueError(f"attention_norm must be one of {ATTENTION_NORMS}")
        if self.head_split and self.d % self.M:
            raise ValueError("head_split needs d divisible by M")

    @property
    def head_dim(self) -> int:
        """Width of each head's query/key/value space."""
        return self.d // self.M if self.head_split else self.d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def param_shapes(hp: HyperParams) -> dict[str, tuple]:
    """Declared shape of every learnable tensor, in canonical order."""
    d, dh = hp.d, hp.head_dim
    shapes = {
        "W1": (hp.k, d), "b1": (d,),
        "W2": (hp.k, d), "b2": (d,),
        "W3": (2 * d, d), "b3": (d,),
        "W4": (hp.n_regions, d), "b4": (d,),
        "W5": (hp.time_vocab, d), "b5": (d,),
        "W6": (d, d), "b6": (d,),
    }
    for j in range(hp.n_blocks):
        p = f"block{j}."
        shapes.update({
            p + "WQ": (hp.M, d, dh),
            p + "WK": (hp.M, d, dh),
            p + "W7": (hp.M * dh, d),
            p + "ln1_gamma": (d,), p + "ln1_beta": (d,),
            p + "Wf1": (d, hp.ff_dim), p + "bf1": (hp.ff_dim,),
            p + "Wf2": (hp.ff_dim, d), p + "bf2": (d,),
            p + "ln2_gamma": (d,), p + "ln2_beta": (d,),
        })
    shapes.update({"WP1": (d, d), "bP1": (d,), "WP2": (d, 2), "bP2": (2,)})
    return shapes


def init_params(hp: HyperParams, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in param_shapes(hp).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            value = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("beta"):
            value = np.zeros(shape)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(value.astype(nx.get_default_dtype()), requires_grad=True, name=name)
    return params


def check_params(params: dict[str, Tensor], hp: HyperParams) -> None:
    expected = param_shapes(hp)
    if list(params) != list(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        arr = params[name].data
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite values")


# ---------------------------------------------------------------------------
# Region representation
# ---------------------------------------------------------------------------
def _linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def embed_flows(history_in, history_out, params: dict[str, Tensor]) -> Tensor:
    """Flow embedding ``[..., n, d]`` from ``[..., n, k]`` histories."""
    history_in, history_out = nx.as_tensor(history_in), nx.as_tensor(history_out)
    k = params["W1"].shape[0]
    if history_in.shape[-1] != k or history_out.shape[-1] != k:
        raise ValueError(
            f"history length {history_in.shape[-1]}/{history_out.shape[-1]} does not match k={k}"
        )
    f_in = _linear(history_in, params["W1"], params["b1"])
    f_out = _linear(history_out, params["W2"], params["b2"])
    return _linear(nx.concat([f_in, f_out], axis=-1), params["W3"], params["b3"])


def embed_spatial(region_index, params: dict[str, Tensor]) -> Tensor:
    """Row selection from W4 plus b4; an index array gives ``[len, d]``."""
    n = params["W4"].shape[0]
    idx = np.asarray(region_index)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"region index out of range [0, {n})")
    return nx.add(nx.take_rows(params["W4"], idx), params["b4"])


def time_slot_index(t, meta: Optional[DatasetMeta], time_vocab: int) -> np.ndarray:
    """Map absolute slots to the temporal one-hot position."""
    t = np.asarray(t, dtype=np.int64)
    if meta is not None and time_vocab == meta.slots_per_week:
        return (meta.start_slot_of_week + t) % time_vocab
    return t % time_vocab


def embed_temporal(t, meta: Optional[DatasetMeta], params: dict[str, Tensor]) -> Tensor:
    vocab = params["W5"].shape[0]
    return nx.add(nx.take_rows(params["W5"], time_slot_index(t, meta, vocab)), params["b5"])


def fuse_region(flow_emb: Tensor, spatial: Tensor, temporal: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``(F + S + T) W6 + b6``; ``temporal`` is ``[d]`` or ``[..., d]`` (one per batch item)."""
    d = params["W6"].shape[0]
    for label, t in (("flow", flow_emb), ("spatial", spatial), ("temporal", temporal)):
        if t.shape[-1] != d:
            raise ValueError(f"{label} embedding width {t.shape[-1]} != d={d}")
    if temporal.ndim >= 2:
        temporal = nx.reshape(temporal, temporal.shape[:-1] + (1, d))
    summed = nx.add(nx.add(flow_emb, spatial), temporal)
    return _linear(summed, params["W6"], params["b6"])


# ---------------------------------------------------------------------------
# Self-attention
# ---------------------------------------------------------------------------
def attention_scores(region_emb: Tensor, head: int, params: dict, block: int = 0) -> Tensor:
    """Scaled query-key products ``[..., n, n]`` for one head."""
    wq = nx.index(params[f"block{block}.WQ"], head)
    wk = nx.index(params[f"block{block}.WK"], head)
    scale = 1.0 / math.sqrt(wq.shape[-1])
    q = nx.mul(nx.matmul(region_emb, wq), scale)
    kt = nx.transpose(nx.matmul(region_emb, wk), _swap_last(region_emb.ndim))
    return nx.matmul(q, kt)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def normalize_scores(scores: Tensor, attention_norm: str = "softmax") -> Tensor:
    if attention_norm == "softmax":
        return nx.softmax_rows(scores)
    if attention_norm == "exp_denominator":
        return nx.exp_normalize_rows(scores)
    raise ValueError(f"unknown attention_norm {attention_norm!r}")


def attention_aggregate(
    scores: Tensor,
    values: Tensor,
    attention_norm: str = "softmax",
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Weighted sum of (unprojected) region embeddings by normalized scores."""
    weights = normalize_scores(scores, attention_norm)
    weights = nx.dropout(weights, dropout_rate, training, rng)
    return nx.matmul(weights, values)


def multi_head_combine(heads: Sequence[Tensor], params: dict, block: int = 0) -> Tensor:
    """Concatenate head outputs on the feature axis and project with W7 (no bias)."""
    heads = list(heads)
    if not heads or any(h.shape != heads[0].shape for h in heads):
        raise ValueError(f"head outputs must share a shape, got {[h.shape for h in heads]}")
    return nx.matmul(nx.concat(heads, axis=-1), params[f"block{block}.W7"])


def multi_head_attention(
    region_emb: Tensor,
    params: dict,
    hp: HyperParams,
    block: int = 0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """All heads at once; numerically the per-head path stacked along a head axis."""
    lead = region_emb.shape[:-2]
    n, d = region_emb.shape[-2:]
    M, dh = hp.M, hp.head_dim
    x = nx.reshape(region_emb, lead + (1, n, d))
    q = nx.mul(nx.matmul(x, params[f"block{block}.WQ"]), 1.0 / math.sqrt(dh))
    k = nx.matmul(x, params[f"block{block}.WK"])
    scores = nx.matmul(q, nx.transpose(k, _swap_last(len(lead) + 3)))
    if hp.head_split:
        v = nx.reshape(region_emb, lead + (n, M, dh))
        axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2))
        values = nx.transpose(v, axes)
    else:
        values = x
    heads = attention_aggregate(scores, values, hp.attention_norm, hp.dropout_rate, training, rng)
    axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2))
    merged = nx.reshape(nx.transpose(heads, axes), lead + (n, M * dh))
    return nx.matmul(merged, params[f"block{block}.W7"])


def encoder_block(
    region_emb: Tensor,
    params: dict,
    hp: HyperParams,
    block: int = 0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Attention and feed-forward sublayers, each with residual add then layer norm."""
    p = f"block{block}."
    attn = multi_head_attention(region_emb, params, hp, block, training, rng)
    attn = nx.dropout(attn, hp.dropout_rate, training, rng)
    x1 = nx.layer_norm(
        nx.add(region_emb, attn), params[p + "ln1_gamma"], params[p + "ln1_beta"], hp.ln_eps
    )
    hidden = nx.relu(_linear(x1, params[p + "Wf1"], params[p + "bf1"]))
    ff = _linear(hidden, params[p + "Wf2"], params[p + "bf2"])
    ff = nx.dropout(ff, hp.dropout_rate, training, rng)
    return nx.layer_norm(nx.add(x1, ff), params[p + "ln2_gamma"], params[p + "ln2_beta"], hp.ln_eps)


def forecast(region_emb: Tensor, params: dict) -> Tensor:
    """Next-slot (inflow, outflow) per region, ``[..., n, 2]``; the last layer is linear."""
    hidden = nx.relu(_linear(region_emb, params["WP1"], params["bP1"]))
    return _linear(hidden, params["WP2"], params["bP2"])


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------
@dataclass
class RegionBatch:
    history_in: np.ndarray  # [B, n, k]
    history_out: np.ndarray  # [B, n, k]
    time_index: np.ndarray  # [B]
    target: Optional[np.ndarray] = None  # [B, n, 2]

    @property
    def size(self) -> int:
        return self.history_in.shape[0]


def collate(samples: Sequence[Sample], dtype=None) -> RegionBatch:
    """Stack samples into a batch; all must share n and k."""
    if not samples:
        raise ValueError("cannot collate an empty batch")
    dtype = dtype or nx.get_default_dtype()
    shape = samples[0].history_in.shape
    if any(s.history_in.shape != shape or s.history_out.shape != shape for s in samples):
        raise ValueError("samples in a batch must share n and k")
    return RegionBatch(
        history_in=np.stack([s.history_in for s in samples]).astype(dtype),
        history_out=np.stack([s.history_out for s in samples]).astype(dtype),
        time_index=np.array([s.time_index for s in samples], dtype=np.int64),
        target=np.stack(
            [np.stack([s.target_in, s.target_out], axis=-1) for s in samples]
        ).astype(dtype),
    )


def region_embeddings(
    params: dict, batch: RegionBatch, hp: HyperParams, meta: Optional[DatasetMeta] = None
) -> Tensor:
    n = batch.history_in.shape[-2]
    if n != hp.n_regions or batch.history_in.shape[-1] != hp.k:
        raise ValueError(
            f"batch has n={n}, k={batch.history_in.shape[-1]}; model expects "
            f"n={hp.n_regions}, k={hp.k}"
        )
    flow = embed_flows(batch.history_in, batch.history_out, params)
    spatial = embed_spatial(np.arange(n), params)
    temporal = embed_temporal(batch.time_index, meta, params)
    return fuse_region(flow, spatial, temporal, params)


def forward(
    params: dict,
    batch: RegionBatch,
    hp: HyperParams,
    meta: Optional[DatasetMeta] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Predictions ``[B, n, 2]`` (scaled units) for a batch."""
    x = region_embeddings(params, batch, hp, meta)
    for j in range(hp.n_blocks):
        x = encoder_block(x, params, hp, j, training, rng)
    return forecast(x, params)


def predict(params: dict, batch: RegionBatch, hp: HyperParams, meta=None) -> np.ndarray:
    """Evaluation-mode forward without recording a graph."""
    with nx.no_grad():
        return forward(params, batch, hp, meta, training=False).data
