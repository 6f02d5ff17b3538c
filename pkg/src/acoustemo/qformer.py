"""Learnable-query cross-attention over acoustic frames, local and global.

A Q-Former here is exactly one single-head cross-attention: ``K`` learned
queries attend over the frames of a segment and return ``K`` tokens.  There is
no positional encoding, so the output is invariant to frame order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .segmentation import (
    EmptySegment,
    FrameFeatureSequence,
    UtteranceSpan,
    extract_segments,
    fixed_windows,
)

__all__ = [
    "QFormerParams",
    "MultiScaleAcousticTokens",
    "qformer_forward",
    "encode_dialogue",
    "flatten_tokens",
    "split_tokens",
]

INIT_STD = 0.02


@dataclass
class QFormerParams:
    queries: Tensor  # K x d_model
    w_q: Tensor      # d_model x d_model
    w_k: Tensor      # d x d_model
    w_v: Tensor      # d x d_model

    def __post_init__(self):
        k, dm = self.queries.shape
        if k < 1:
            raise ValueError("need at least one query")
        if self.w_q.shape != (dm, dm):
            raise ad.ShapeMismatch(f"W_Q {self.w_q.dims} for d_model={dm}")
        if self.w_k.shape[1] != dm or self.w_v.shape[1] != dm or self.w_k.shape != self.w_v.shape:
            raise ad.ShapeMismatch(f"W_K {self.w_k.dims} / W_V {self.w_v.dims} for d_model={dm}")

    @classmethod
    def init(cls, n_queries: int, d_in: int, d_model: int, rng: np.random.Generator,
             std: float = INIT_STD) -> "QFormerParams":
        def p(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
        return cls(p(n_queries, d_model), p(d_model, d_model), p(d_in, d_model), p(d_in, d_model))

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def d_model(self) -> int:
        return self.queries.shape[1]

    @property
    def d_in(self) -> int:
        return self.w_k.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.queries": self.queries, f"{prefix}.w_q": self.w_q,
                f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v}

    def parameters(self) -> list[Tensor]:
        return [self.queries, self.w_q, self.w_k, self.w_v]


def qformer_forward(params: QFormerParams, segment, return_attention: bool = False):
    """``softmax((Q W_Q)(S W_K)^T / sqrt(d_k)) (S W_V)`` for one segment ``S`` (M x d)."""
    seg = segment if isinstance(segment, Tensor) else Tensor(segment)
    if seg.data.ndim != 2:
        raise ad.ShapeMismatch(f"segment must be M x d, got {seg.dims}")
    if seg.shape[0] == 0:
        raise EmptySegment("segment has no frames")
    if seg.shape[1] != params.d_in:
        raise ad.ShapeMismatch(f"segment width {seg.shape[1]} != encoder dim {params.d_in}")
    q = params.queries @ params.w_q
    k = seg @ params.w_k
    v = seg @ params.w_v
    scores = ad.scale(q @ k.T, 1.0 / math.sqrt(params.d_k))
    attn = ad.softmax_rows(scores)
    out = attn @ v
    return (out, attn) if return_attention else out


@dataclass
class MultiScaleAcousticTokens:
    global_block: Tensor | None
    local_blocks: list[Tensor] = field(default_factory=list)
    utterance_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.local_blocks) != len(self.utterance_ids):
            raise ValueError("local_blocks and utterance_ids differ in length")
        shapes = {b.shape for b in self.blocks()}
        if len(shapes) > 1:
            raise ad.ShapeMismatch(f"token blocks disagree in shape: {sorted(shapes)}")

    def blocks(self) -> list[Tensor]:
        head = [self.global_block] if self.global_block is not None else []
        return head + list(self.local_blocks)

    @property
    def token_count(self) -> int:
        return sum(b.shape[0] for b in self.blocks())


def encode_dialogue(local_params: QFormerParams | None, global_params: QFormerParams | None,
                    seq: FrameFeatureSequence, spans: list[UtteranceSpan],
                    fixed_window: float | None = None) -> MultiScaleAcousticTokens:
    """Global block over all of ``seq`` plus one local block per utterance.

    Either parameter set may be ``None`` to drop that path (ablations).  With
    ``fixed_window`` the local blocks come from constant-length windows instead
    of the utterance spans; ``utterance_ids`` then holds 1-based window ordinals.
    """
    global_block = None
    if global_params is not None:
        global_block = qformer_forward(global_params, seq.features)
    local_blocks: list[Tensor] = []
    ids: list[int] = []
    if local_params is not None:
        if fixed_window is not None:
            for n, fr in enumerate(fixed_windows(seq, fixed_window), start=1):
                local_blocks.append(qformer_forward(local_params, seq.features[fr.i_start:fr.i_end]))
                ids.append(n)
        else:
            for seg in extract_segments(seq, spans):
                local_blocks.append(qformer_forward(local_params, seg.features))
                ids.append(seg.span.index)
    return MultiScaleAcousticTokens(global_block, local_blocks, ids)


def flatten_tokens(tokens: MultiScaleAcousticTokens) -> Tensor:
    blocks = tokens.blocks()
    if not blocks:
        raise ValueError("no acoustic token blocks")
    return blocks[0] if len(blocks) == 1 else ad.concat_rows(blocks)


def split_tokens(flat, n_queries: int, utterance_ids: list[int],
                 has_global: bool = True) -> MultiScaleAcousticTokens:
    """Inverse of :func:`flatten_tokens` on raw arrays."""
    arr = flat.data if isinstance(flat, Tensor) else np.asarray(flat)
    n_blocks = len(utterance_ids) + int(has_global)
    if arr.shape[0] != n_blocks * n_queries:
        raise ad.ShapeMismatch(f"{arr.shape[0]} rows is not {n_blocks} blocks of {n_queries}")
    blocks = [Tensor(arr[i * n_queries:(i + 1) * n_queries]) for i in range(n_blocks)]
    if has_global:
        return MultiScaleAcousticTokens(blocks[0], blocks[1:], list(utterance_ids))
    return MultiScaleAcousticTokens(None, blocks, list(utterance_ids))
