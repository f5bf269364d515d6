"""Cross-type query mixing.

Self-attention over a mixed query set tends to favor same-type partners,
which starves the cross-modal exchange the heterogeneous initialization was
meant to enable.  The mixing layer here blocks attention between distinct
queries of the same type (diagonals stay open as a fallback), forcing each
query to consolidate evidence from the other two types.  The module also
hosts the type-to-type attention diagnostics and top-link extraction used
by the analysis commands.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import AttentionMask, MhaWeights, layer_norm, multi_head_attention
from .qinit import TYPE_NAMES

NUM_TYPES = len(TYPE_NAMES)


def build_cross_type_mask(types: np.ndarray) -> AttentionMask:
    """Open entry iff same query (diagonal) or differing types."""
    types = np.asarray(types)
    same = types[:, None] == types[None, :]
    blocked = same & ~np.eye(len(types), dtype=bool)
    return AttentionMask(blocked)


@dataclass
class QMixWeights:
    """Masked attention block weights: MHA + layer norm + residual MLP."""

    mha: MhaWeights
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    mlp_w1: np.ndarray   # (4d, d)
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray   # (d, 4d)
    mlp_b2: np.ndarray


def attention_block(q: np.ndarray, mask: AttentionMask, weights: QMixWeights
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Residual masked attention followed by a pre-normalized residual MLP."""
    attn_out, attn = multi_head_attention(q, q, q, mask, weights.mha)
    h = layer_norm(q + attn_out, weights.ln_gamma, weights.ln_beta)
    hidden = np.maximum(h @ weights.mlp_w1.T + weights.mlp_b1, 0.0)
    return h + hidden @ weights.mlp_w2.T + weights.mlp_b2, attn


def qmix_attention(q: np.ndarray, types: np.ndarray, weights: QMixWeights
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Cross-type masked attention update.

    Returns the updated embeddings and the head-averaged attention matrix;
    same-type off-diagonal entries of the latter are exact zeros.
    """
    return attention_block(q, build_cross_type_mask(types), weights)


@dataclass
class TypeAttentionStats:
    """3x3 type-to-type attention summaries (row = source, col = key).

    mass rows sum to 1 for row-stochastic attention; mean_per_key divides
    each entry by the key count of that type (0 when the type is absent).
    """

    mass: np.ndarray
    mean_per_key: np.ndarray
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "types": list(TYPE_NAMES),
            "counts": self.counts.tolist(),
            "mass": self.mass.tolist(),
            "mean_per_key": self.mean_per_key.tolist(),
        }


def attention_type_stats(attn: np.ndarray, types: np.ndarray) -> TypeAttentionStats:
    """Aggregate an attention matrix into per-type mass and per-key means."""
    types = np.asarray(types)
    counts = np.array([(types == t).sum() for t in range(NUM_TYPES)])
    mass = np.zeros((NUM_TYPES, NUM_TYPES))
    for a in range(NUM_TYPES):
        if counts[a] == 0:
            continue
        rows = attn[types == a]
        for b in range(NUM_TYPES):
            if counts[b] == 0:
                continue
            mass[a, b] = rows[:, types == b].sum() / counts[a]
    safe = np.where(counts > 0, counts, 1)
    mean_per_key = np.where(counts[None, :] > 0, mass / safe[None, :], 0.0)
    return TypeAttentionStats(mass, mean_per_key, counts)


@dataclass
class CrossTypeLink:
    """One attention edge between queries of different types."""

    source: int
    target: int
    weight: float
    source_type: str
    target_type: str
    source_confidence: float

    def to_dict(self) -> dict:
        return {
            "source": self.source, "target": self.target, "weight": self.weight,
            "source_type": self.source_type, "target_type": self.target_type,
            "source_confidence": self.source_confidence,
        }


def extract_top_links(attn: np.ndarray, types: np.ndarray,
                      confidences: np.ndarray, conf_threshold: float = 0.1,
                      k: int = 2) -> list[CrossTypeLink]:
    """Top-k cross-type links of every query above the confidence threshold.

    Same-type targets (including self) are excluded explicitly, so the
    extractor is also valid on unmasked self-attention matrices.
    """
    types = np.asarray(types)
    links: list[CrossTypeLink] = []
    for i in np.flatnonzero(np.asarray(confidences) > conf_threshold):
        partners = np.flatnonzero(types != types[i])
        if partners.size == 0:
            continue
        ranked = sorted(partners, key=lambda j: (-attn[i, j], j))[:k]
        links.extend(
            CrossTypeLink(int(i), int(j), float(attn[i, j]),
                          TYPE_NAMES[types[i]], TYPE_NAMES[types[j]],
                          float(confidences[i]))
            for j in ranked
        )
    return links
