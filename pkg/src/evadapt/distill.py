"""Mixed-token student inputs and the weighted multi-layer L1 objective.

The loss compares the student's per-layer token embeddings against the
teacher's, weighting each token by its rolled-out attention significance.
Layer 0 (the patch-embedding output) is always compared unweighted so the
embedding map itself stays unbiased. The teacher side is constant: no
gradient ever reaches teacher parameters, and significance weights are
treated as constants regardless of which network's attention sourced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, where_rows
from .encoder import EmbeddingCapture
from .significance import (SignificanceVector, significance_single_layer,
                           token_significance, transition_stack)

ATTENTION_SOURCES = ("teacher", "student", "teacher_single_layer", "uniform")


@dataclass
class DistillConfig:
    layers: tuple = (0, 3, 6, 9, 12)
    gammas: tuple = (0.1, 0.4, 0.7, 1.0)   # for the nonzero layers, in order
    gamma0: float = 1.0                     # layer-0 weight, always uniform
    beta: float = 0.5
    mixing_ratio: float = 0.1
    attention_source: str = "teacher"
    rollout_horizon: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.attention_source not in ATTENTION_SOURCES:
            raise ValueError(f"unknown attention source: {self.attention_source}")
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ValueError("mixing_ratio must lie in [0, 1]")
        nonzero = [s for s in self.layers if s != 0]
        if len(self.gammas) != len(nonzero):
            raise ValueError(
                f"{len(nonzero)} nonzero layers need {len(nonzero)} gammas, "
                f"got {len(self.gammas)}")

    def gamma_for(self, layer: int) -> float:
        if layer == 0:
            return self.gamma0
        nonzero = [s for s in self.layers if s != 0]
        return self.gammas[nonzero.index(layer)]


@dataclass
class MixedInput:
    tokens: Tensor
    replaced_positions: np.ndarray


def mix_tokens(event_tokens: Tensor, image_tokens: Tensor,
               ratio: float, seed) -> MixedInput:
    """Replace round(ratio * k) event tokens with same-position image tokens.

    Positions are drawn without replacement from a generator seeded by
    `seed` (an int or int sequence), so the replaced set is deterministic.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mixing ratio must lie in [0, 1]")
    if event_tokens.shape != image_tokens.shape:
        raise ValueError("event and image token shapes differ")
    k = event_tokens.shape[0]
    n_rep = int(round(ratio * k))
    rng = np.random.default_rng(seed)
    positions = rng.choice(k, size=n_rep, replace=False)
    positions.sort()
    mask = np.zeros(k, dtype=bool)
    mask[positions] = True
    tokens = where_rows(mask, image_tokens, event_tokens)
    return MixedInput(tokens=tokens, replaced_positions=positions)


def weighted_layer_loss(x_m: Tensor, x_e: Tensor,
                        w: SignificanceVector | np.ndarray | None) -> Tensor:
    """Significance-weighted mean absolute difference of two token matrices.

    Weights broadcast over the channel dimension; the reduction is a mean
    over all k*c elements so magnitudes do not scale with config size.
    """
    if x_m.shape != x_e.shape:
        raise ValueError(f"shape mismatch: {x_m.shape} vs {x_e.shape}")
    diff = (x_m - x_e).abs()
    if w is None:
        return diff.mean()
    values = w.values if isinstance(w, SignificanceVector) else np.asarray(w)
    if values.shape != (x_m.shape[0],):
        raise ValueError("weight length must equal token count")
    return (diff * Tensor(values.reshape(-1, 1))).mean()


def _layer_weights(cfg: DistillConfig,
                   teacher: EmbeddingCapture,
                   student: EmbeddingCapture,
                   layer: int) -> np.ndarray | None:
    if layer == 0 or cfg.attention_source == "uniform":
        return None
    if cfg.attention_source == "teacher_single_layer":
        # layer 0..n-1 indexes attention of the block leaving that layer;
        # the terminal layer falls back to its own incoming attention
        attn = teacher.attentions[min(layer, len(teacher.attentions) - 1)]
        return significance_single_layer(attn, cfg.beta, source_layer=layer).values
    capture = teacher if cfg.attention_source == "teacher" else student
    stack = transition_stack(capture.attentions)
    n = len(stack)
    if layer >= n:
        # rolling out from the terminal layer: empty product, uniform
        return None
    return token_significance(stack, layer + 1, cfg.beta,
                              horizon=cfg.rollout_horizon,
                              attention_source=cfg.attention_source).values


def distill_loss(teacher: EmbeddingCapture, student: EmbeddingCapture,
                 cfg: DistillConfig) -> tuple[Tensor, dict[int, float]]:
    """Total gamma-weighted loss over the configured layer set.

    Returns (total, per-layer breakdown of the unscaled layer losses).
    Teacher embeddings enter as constants.
    """
    n = len(student.embeddings) - 1
    breakdown: dict[int, float] = {}
    total = None
    for layer in cfg.layers:
        if layer > n:
            raise ValueError(f"layer {layer} exceeds encoder depth {n}")
        w = _layer_weights(cfg, teacher, student, layer)
        x_m = Tensor(teacher.embeddings[layer].data)   # constant copy
        term = weighted_layer_loss(x_m, student.embeddings[layer], w)
        breakdown[layer] = term.item()
        term = cfg.gamma_for(layer) * term
        total = term if total is None else total + term
    return total, breakdown


def affinity_loss(teacher: EmbeddingCapture, student: EmbeddingCapture,
                  layers) -> Tensor:
    """Simplified affinity-graph comparator for ablations.

    Per layer: G = row-normalized X X^T; loss is the mean squared
    difference of the teacher and student G, summed over layers.
    """
    total = None
    for layer in layers:
        g_t = _affinity(Tensor(teacher.embeddings[layer].data))
        g_s = _affinity(student.embeddings[layer])
        term = ((g_t - g_s) ** 2).mean()
        total = term if total is None else total + term
    return total


def _affinity(x: Tensor) -> Tensor:
    from .autodiff import matmul
    g = matmul(x, x.T)
    row_norm = ((g * g).sum(axis=1, keepdims=True) + 1e-24) ** 0.5
    return g / row_norm
