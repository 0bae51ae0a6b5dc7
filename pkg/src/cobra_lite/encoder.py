"""Slide encoder: embedding MLPs, SSD stack, gated-attention pooling, modes.

The encoder maps a bag of patch embeddings to one patient-level vector in
three stages:

    H_E = embed(bag)        per-extractor MLP into the shared d-dim space
    H_S = encode(H_E)       two residual SSD blocks + linear
    z   = sum_k a_k H_S,k   multi-head gated-attention weighted average

Inference modes share the attention weights (always computed from H_S) but
differ in the aggregated payload:

    encoded      z = sum a_k H_S,k                  (dim d)
    single-FM    z = sum a_k H_raw,k                (dim of the raw extractor)
    combined-FM  H_E is the mean of all extractors' embeddings; payload is
                 one chosen extractor's raw rows    (dim of that extractor)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .ssd import SsdBlock

D_MODEL_DEFAULT = 768
ATTN_HEADS_DEFAULT = 8
ATTN_HIDDEN_DEFAULT = 96

MODE_ENC = "ENC"
MODE_SINGLE_FM = "SINGLE_FM"
MODE_COMBINED_FM = "COMBINED_FM"
MODES = (MODE_ENC, MODE_SINGLE_FM, MODE_COMBINED_FM)


@dataclass
class EncoderConfig:
    """Architecture hyperparameters of the slide encoder."""

    d_model: int = D_MODEL_DEFAULT
    embed_hidden: int | None = None  # None -> d_model
    attn_heads: int = ATTN_HEADS_DEFAULT
    attn_hidden: int = ATTN_HIDDEN_DEFAULT
    ssd_heads: int = 8
    d_state: int = 64
    dropout: float = 0.25

    def validate(self) -> None:
        if self.d_model % self.attn_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by attn_heads {self.attn_heads}"
            )
        if self.attn_hidden <= 0:
            raise ValueError(f"attn_hidden must be > 0, got {self.attn_hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "embed_hidden": self.embed_hidden,
            "attn_heads": self.attn_heads,
            "attn_hidden": self.attn_hidden,
            "ssd_heads": self.ssd_heads,
            "d_state": self.d_state,
            "dropout": self.dropout,
        }


@dataclass
class AttentionWeights:
    """Per-tile pooling weights: the head mean and the per-head rows."""

    a: torch.Tensor  # (N_t,)
    per_head: torch.Tensor  # (M, N_t)

    @property
    def n_tiles(self) -> int:
        return int(self.a.shape[-1])

    def numpy(self) -> np.ndarray:
        return self.a.detach().cpu().numpy()

    def validate(self, atol: float = 1e-6) -> None:
        ph = self.per_head
        if (ph < 0).any():
            raise ValueError("negative attention weight")
        sums = ph.sum(dim=-1)
        if (sums - 1.0).abs().max().item() > atol:
            raise ValueError(f"per-head weights do not sum to 1: {sums}")
        if (self.a - ph.mean(dim=0)).abs().max().item() > atol:
            raise ValueError("mean weights differ from head mean")


class EmbeddingModule(nn.Module):
    """One MLP per registered extractor, all mapping into the shared d-dim space.

    Per extractor: LayerNorm(d_n) -> Linear(d_n, hidden) -> SiLU -> Dropout
    -> Linear(hidden, d). Purely per-tile, hence permutation-equivariant.
    """

    def __init__(self, registry: dict[str, int], d_model: int,
                 hidden: int | None = None, dropout: float = 0.25):
        super().__init__()
        hidden = d_model if hidden is None else hidden
        self.registry = dict(registry)
        self.mlps = nn.ModuleDict()
        for eid, dim in registry.items():
            self.mlps[eid] = nn.Sequential(
                nn.LayerNorm(dim),
                nn.Linear(dim, hidden),
                nn.SiLU(),
                nn.Dropout(dropout),
                nn.Linear(hidden, d_model),
            )

    def forward(self, feats: torch.Tensor, extractor_id: str) -> torch.Tensor:
        if extractor_id not in self.mlps:
            raise KeyError(f"no embedding MLP registered for extractor {extractor_id!r}")
        expect = self.registry[extractor_id]
        if feats.shape[-1] != expect:
            raise ValueError(
                f"extractor {extractor_id!r} expects dim {expect}, "
                f"got {feats.shape[-1]}"
            )
        return self.mlps[extractor_id](feats)


class GatedAttention(nn.Module):
    """Multi-head gated attention pooling weights.

    The d-dim rows are split contiguously into M chunks; head m scores its
    chunk h via  w_m^T (tanh(V_m h) * sigmoid(U_m h))  and the scores are
    softmax-normalized over tiles. The pooling weight is the head mean.
    """

    def __init__(self, d_model: int, n_heads: int = ATTN_HEADS_DEFAULT,
                 hidden: int = ATTN_HIDDEN_DEFAULT, dropout: float = 0.25):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.hidden = hidden
        self.v = nn.Parameter(torch.empty(n_heads, hidden, self.head_dim))
        self.u = nn.Parameter(torch.empty(n_heads, hidden, self.head_dim))
        self.w = nn.Parameter(torch.empty(n_heads, hidden))
        for p in (self.v, self.u, self.w):
            nn.init.normal_(p, std=self.head_dim ** -0.5)
        self.drop = nn.Dropout(dropout)

    def logits(self, h_s: torch.Tensor) -> torch.Tensor:
        """Raw per-head scores. h_s: (..., L, d) -> (..., M, L)."""
        hm = h_s.view(*h_s.shape[:-1], self.n_heads, self.head_dim)
        t = torch.tanh(torch.einsum("...lmd,mpd->...lmp", hm, self.v))
        s = torch.sigmoid(torch.einsum("...lmd,mpd->...lmp", hm, self.u))
        g = self.drop(t * s)
        scores = torch.einsum("...lmp,mp->...lm", g, self.w)
        return scores.transpose(-1, -2)  # (..., M, L)

    def forward(self, h_s: torch.Tensor,
                mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (a, per_head): (..., L) and (..., M, L), each row a simplex."""
        scores = self.logits(h_s)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(-2), float("-inf"))
        per_head = torch.softmax(scores, dim=-1)
        return per_head.mean(dim=-2), per_head


class SequenceEncoder(nn.Module):
    """Two residual SSD blocks followed by a linear map.

    H_S = Lin(SSD2(SSD1(H_E) + H_E) + H_E), each SSD block pre-normed; both
    residual additions re-add H_E.
    """

    def __init__(self, d_model: int, ssd_heads: int = 8, d_state: int = 64):
        super().__init__()
        self.block1 = SsdBlock(d_model, n_heads=ssd_heads, d_state=d_state)
        self.block2 = SsdBlock(d_model, n_heads=ssd_heads, d_state=d_state)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, h_e: torch.Tensor) -> torch.Tensor:
        inner = self.block1(h_e) + h_e
        outer = self.block2(inner) + h_e
        return self.out(outer)


class SlideEncoder(nn.Module):
    """Composite encoder over a registry of extractors."""

    def __init__(self, registry: dict[str, int], cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.cfg.validate()
        self.registry = dict(registry)
        self.embed = EmbeddingModule(
            registry, self.cfg.d_model, hidden=self.cfg.embed_hidden,
            dropout=self.cfg.dropout,
        )
        self.seq = SequenceEncoder(
            self.cfg.d_model, ssd_heads=self.cfg.ssd_heads, d_state=self.cfg.d_state
        )
        self.attn = GatedAttention(
            self.cfg.d_model, n_heads=self.cfg.attn_heads,
            hidden=self.cfg.attn_hidden, dropout=self.cfg.dropout,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.seq.out.weight.dtype

    def _prep(self, feats) -> torch.Tensor:
        if isinstance(feats, np.ndarray):
            feats = torch.from_numpy(feats)
        return feats.to(self.dtype)

    # -- single-sequence paths -------------------------------------------

    def encode_sequence(self, h_e: torch.Tensor) -> torch.Tensor:
        return self.seq(h_e)

    def attention_weights(self, h_s: torch.Tensor) -> AttentionWeights:
        a, per_head = self.attn(h_s)
        return AttentionWeights(a=a, per_head=per_head)

    def hidden_states(self, feats, extractor_id: str) -> torch.Tensor:
        h_e = self.embed(self._prep(feats), extractor_id)
        return self.seq(h_e)

    def forward_view(self, feats, extractor_id: str) -> tuple[torch.Tensor, AttentionWeights]:
        """Encoded (training) path: z = sum_k a_k H_S,k. Differentiable."""
        h_s = self.hidden_states(feats, extractor_id)
        weights = self.attention_weights(h_s)
        z = aggregate_encoded(h_s, weights.a)
        return z, weights

    def single_fm(self, feats, extractor_id: str) -> tuple[torch.Tensor, AttentionWeights]:
        """Weights from encoded features, payload from the raw bag rows."""
        raw = self._prep(feats)
        h_s = self.hidden_states(raw, extractor_id)
        weights = self.attention_weights(h_s)
        z = aggregate_payload(weights.a, raw)
        return z, weights

    def combined(self, bags: dict[str, np.ndarray | torch.Tensor],
                 payload_extractor_id: str | None = None
                 ) -> tuple[torch.Tensor, AttentionWeights]:
        """Average the per-extractor embeddings, then weight one payload.

        Bags must be tile-aligned: same patient, magnification and row
        correspondence across extractors. With ``payload_extractor_id`` None
        the encoded rows themselves are aggregated (dim d); otherwise the
        named extractor's raw rows are (dim d_n).
        """
        if not bags:
            raise ValueError("no bags given")
        tensors = {eid: self._prep(f) for eid, f in bags.items()}
        lengths = {eid: t.shape[0] for eid, t in tensors.items()}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"misaligned tile counts across extractors: {lengths}")
        if payload_extractor_id is not None and payload_extractor_id not in tensors:
            raise KeyError(
                f"payload extractor {payload_extractor_id!r} has no bag; "
                f"got {sorted(tensors)}"
            )
        embeds = [self.embed(t, eid) for eid, t in tensors.items()]
        h_e = torch.stack(embeds, dim=0).mean(dim=0)
        h_s = self.seq(h_e)
        weights = self.attention_weights(h_s)
        if payload_extractor_id is None:
            z = aggregate_encoded(h_s, weights.a)
        else:
            z = aggregate_payload(weights.a, tensors[payload_extractor_id])
        return z, weights

    # -- padded batch path (training) --------------------------------------

    def forward_batch(self, feats_list: list, extractor_ids: list[str]) -> torch.Tensor:
        """Encoded path over a batch of variable-length views; returns (B, d).

        Sequences are padded to a common length; the scan is causal so pad
        rows cannot leak into valid positions, and the attention softmax
        masks them out.
        """
        if not feats_list:
            raise ValueError("empty batch")
        if len(feats_list) != len(extractor_ids):
            raise ValueError("feats_list and extractor_ids length mismatch")
        h_es = [self.embed(self._prep(f), eid)
                for f, eid in zip(feats_list, extractor_ids)]
        lengths = [h.shape[0] for h in h_es]
        max_len = max(lengths)
        batch = h_es[0].new_zeros(len(h_es), max_len, self.cfg.d_model)
        mask = torch.zeros(len(h_es), max_len, dtype=torch.bool)
        for i, h in enumerate(h_es):
            batch[i, : h.shape[0]] = h
            mask[i, : h.shape[0]] = True
        h_s = self.seq(batch)
        a, _ = self.attn(h_s, mask=mask)
        return torch.einsum("bl,bld->bd", a, h_s)


# ---------------------------------------------------------------------------
# Aggregation primitives
# ---------------------------------------------------------------------------


def aggregate_encoded(h_s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """z = sum_k a_k H_S,k over the tile axis."""
    return torch.einsum("l,ld->d", a, h_s)


def aggregate_payload(a: torch.Tensor, payload: torch.Tensor) -> torch.Tensor:
    """Weighted average of raw payload rows using externally computed weights."""
    if a.shape[-1] != payload.shape[0]:
        raise ValueError(
            f"weights cover {a.shape[-1]} tiles but payload has {payload.shape[0]} rows"
        )
    return torch.einsum("l,ld->d", a.to(payload.dtype), payload)
