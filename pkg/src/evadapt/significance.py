"""Token-significance weighting from rolled-out attention transitions.

The per-layer transition matrix is the TRANSPOSE of the head-averaged
attention: rows index source tokens at layer i, columns index destination
tokens at layer i+1, so each column sums to 1. Rolling the transitions
forward (optionally mixed with the identity residual path) and projecting
onto a final-layer importance vector e (default: ones) yields one
nonnegative weight per source token. With raw row-stochastic attention the
same projection collapses to the uniform vector, which is why the
transpose orientation is load-bearing; the test suite asserts that
degeneracy explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BETA = 0.5


@dataclass
class SignificanceVector:
    values: np.ndarray
    source_layer: int
    beta: float
    attention_source: str = "teacher"


def transition_stack(attentions: list[np.ndarray]) -> list[np.ndarray]:
    """Transpose head-averaged attention matrices into transition matrices."""
    stack = []
    for a in attentions:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"attention matrix must be square, got {a.shape}")
        stack.append(a.T.copy())
    return stack


def _check_range(name, v):
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def transition_exact(stack: list[np.ndarray], s: int,
                     alphas: list[float]) -> np.ndarray:
    """Exact residual-mixed transition product from layer s to the last layer.

    Returns the left-to-right product over i = s..n of
    (alpha_i * P^(i) + (1 - alpha_i) * I).
    """
    n = len(stack)
    if not 1 <= s <= n:
        raise ValueError(f"source layer {s} out of range 1..{n}")
    if len(alphas) != n - s + 1:
        raise ValueError(f"need {n - s + 1} alphas, got {len(alphas)}")
    k = stack[0].shape[0]
    out = np.eye(k)
    for p, a in zip(stack[s - 1:], alphas):
        _check_range("alpha", a)
        out = out @ (a * p + (1.0 - a) * np.eye(k))
    return out


def _product(stack: list[np.ndarray], s: int, horizon: int | None = None) -> np.ndarray:
    mats = stack[s - 1:]
    if horizon is not None:
        mats = mats[:horizon]
    out = np.eye(stack[0].shape[0])
    for p in mats:
        out = out @ p
    return out


def transition_approx(stack: list[np.ndarray], s: int,
                      beta: float = DEFAULT_BETA,
                      horizon: int | None = None) -> np.ndarray:
    """One-term approximation: beta * (P^(s) ... P^(n)) + (1 - beta) * I.

    horizon, when set, truncates the product to that many layers past s.
    """
    n = len(stack)
    if not 1 <= s <= n:
        raise ValueError(f"source layer {s} out of range 1..{n}")
    _check_range("beta", beta)
    k = stack[0].shape[0]
    return beta * _product(stack, s, horizon) + (1.0 - beta) * np.eye(k)


def _project(h: np.ndarray, e: np.ndarray | None) -> np.ndarray:
    k = h.shape[0]
    if e is None:
        e = np.ones(k)
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("importance vector e must be nonnegative")
    if e.shape != (k,):
        raise ValueError(f"e must have length {k}")
    return h @ e


def token_significance(stack: list[np.ndarray], s: int,
                       beta: float = DEFAULT_BETA,
                       e: np.ndarray | None = None,
                       horizon: int | None = None,
                       attention_source: str = "teacher") -> SignificanceVector:
    """Per-token weight of layer-s tokens on the final layer's output."""
    h = transition_approx(stack, s, beta, horizon)
    return SignificanceVector(values=_project(h, e), source_layer=s,
                              beta=beta, attention_source=attention_source)


def significance_single_layer(attn: np.ndarray, beta: float = DEFAULT_BETA,
                              e: np.ndarray | None = None,
                              source_layer: int = 0) -> SignificanceVector:
    """Single-layer variant: only that layer's attention enters the product."""
    stack = transition_stack([attn])
    h = transition_approx(stack, 1, beta)
    return SignificanceVector(values=_project(h, e), source_layer=source_layer,
                              beta=beta, attention_source="teacher_single_layer")


def convergence_diagnostic(stack: list[np.ndarray]) -> np.ndarray:
    """Frobenius gap between each prefix product and the full product.

    Element i is ||P^(1) ... P^(i+1)  -  P^(1) ... P^(n)||_F; the last
    element is exactly 0.
    """
    if not stack:
        raise ValueError("stack must be nonempty")
    full = _product(stack, 1)
    out = np.empty(len(stack))
    prefix = np.eye(stack[0].shape[0])
    for i, p in enumerate(stack):
        prefix = prefix @ p
        out[i] = np.linalg.norm(prefix - full)
    out[-1] = 0.0
    return out
