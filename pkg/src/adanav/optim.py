"""Training objectives and the optimizer: imitation loss, PPO-clip policy
gradient with return-to-go advantages, their convex post-training
combination, finite-difference-checkable gradients, and Adam with global
gradient-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import obs, policy
from .autodiff import Tensor
from .simworld.episodes import EpisodeRecord

Gradients = dict[str, np.ndarray]


class DivergedLoss(RuntimeError):
    """Raised when a loss evaluates to a non-finite value."""


class NoSteps(ValueError):
    """Raised when advantages run on an empty batch."""


@dataclass
class SftItem:
    context: obs.ContextSpec
    gate_label: int  # 0 = off, 1 = on
    expert_action: np.ndarray  # flattened ego waypoints (3n,)


@dataclass
class SftBatch:
    items: list[SftItem]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class RlItem:
    context: obs.ContextSpec
    action: np.ndarray  # (3n,)
    old_log_prob: float
    advantage: float


@dataclass
class RlBatch:
    items: list[RlItem]

    def __len__(self) -> int:
        return len(self.items)


def _ce_term(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a 2-way logit pair against an index label."""
    return ad.add(ad.logsumexp(logits), ad.mul(ad.take(logits, label), -1.0))


def sft_loss(tensors: dict[str, Tensor], batch: SftBatch, alpha: float, d: int, cap: int = 1024) -> Tensor:
    """alpha * MSE(mean trajectory, expert trajectory) + (1 - alpha) *
    CE(gate logits, gate label). The gate is scored on the context as seen
    before reasoning; the trajectory on the context as executed."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if len(batch) == 0:
        raise ValueError("empty SFT batch")
    mse_terms = []
    ce_terms = []
    for item in batch.items:
        pre = item.context.without_cot()
        _, logits, dist = policy.forward_context(tensors, pre, d, cap)
        ce_terms.append(_ce_term(logits, item.gate_label))
        if item.context.cot_text:
            _, _, dist = policy.forward_context(tensors, item.context, d, cap)
        err = ad.add(dist.mu, -np.asarray(item.expert_action, dtype=np.float64))
        mse_terms.append(ad.tmean(ad.square(err)))
    mse = ad.concat([ad.reshape(t, (1,)) for t in mse_terms])
    ce = ad.concat([ad.reshape(t, (1,)) for t in ce_terms])
    return ad.add(ad.mul(ad.tmean(mse), alpha), ad.mul(ad.tmean(ce), 1.0 - alpha))


def rl_loss(tensors: dict[str, Tensor], batch: RlBatch, epsilon: float, d: int, cap: int = 1024) -> Tensor:
    """PPO-clip surrogate: -mean(min(r * A, clip(r, 1-eps, 1+eps) * A)) with
    one likelihood ratio per emitted trajectory."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if len(batch) == 0:
        raise ValueError("empty RL batch")
    terms = []
    for item in batch.items:
        _, _, dist = policy.forward_context(tensors, item.context, d, cap)
        lp = policy.log_prob_tensor(dist, item.action)
        ratio = ad.exp(ad.add(lp, -item.old_log_prob))
        clipped = ad.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
        obj = ad.minimum(ad.mul(ratio, item.advantage), ad.mul(clipped, item.advantage))
        terms.append(ad.reshape(obj, (1,)))
    return ad.mul(ad.tmean(ad.concat(terms)), -1.0)


def post_loss(
    tensors: dict[str, Tensor],
    rl_batch: RlBatch,
    sft_batch: SftBatch,
    lam: float,
    alpha: float,
    epsilon: float,
    d: int,
    cap: int = 1024,
) -> Tensor:
    """lam * L_RL + (1 - lam) * L_SFT. When one batch is unavailable the
    weight renormalizes onto the remaining term."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    has_rl = len(rl_batch) > 0 and lam > 0.0
    has_sft = len(sft_batch) > 0 and lam < 1.0
    if not has_rl and not has_sft:
        raise ValueError("both batches empty")
    if not has_sft:
        return rl_loss(tensors, rl_batch, epsilon, d, cap)
    if not has_rl:
        return sft_loss(tensors, sft_batch, alpha, d, cap)
    return ad.add(
        ad.mul(rl_loss(tensors, rl_batch, epsilon, d, cap), lam),
        ad.mul(sft_loss(tensors, sft_batch, alpha, d, cap), 1.0 - lam),
    )


def grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: policy.PolicyParams) -> tuple[float, Gradients]:
    """Evaluate a loss over fresh parameter tensors and return (value,
    per-parameter gradients). Parameters a loss never touches get zeros."""
    tensors = params.as_tensors(requires_grad=True)
    loss = loss_fn(tensors)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergedLoss(f"loss is not finite: {value}")
    loss.backward()
    return value, {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }


def advantages(episodes: list[EpisodeRecord], gamma: float = 0.99) -> list[np.ndarray]:
    """Return-to-go advantages, normalized over every step of the batch:
    A_t = (R_t - mean) / (std + 1e-8) with population statistics."""
    if not episodes or all(len(ep.steps) == 0 for ep in episodes):
        raise NoSteps("no steps to compute advantages over")
    all_returns = []
    per_episode = []
    for ep in episodes:
        rewards = [s.reward for s in ep.steps]
        returns = np.zeros(len(rewards))
        acc = 0.0
        for i in range(len(rewards) - 1, -1, -1):
            acc = rewards[i] + gamma * acc
            returns[i] = acc
        per_episode.append(returns)
        all_returns.append(returns)
    flat = np.concatenate(all_returns)
    mean, std = float(flat.mean()), float(flat.std())
    return [(r - mean) / (std + 1e-8) for r in per_episode]


def normalize_returns(returns: np.ndarray) -> np.ndarray:
    """Batch normalization used when sampling update batches."""
    returns = np.asarray(returns, dtype=np.float64)
    return (returns - returns.mean()) / (returns.std() + 1e-8)


def clip_global_norm(grads: Gradients, clip_norm: float) -> tuple[Gradients, float]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return grads, total
    scale = clip_norm / total
    return {k: g * scale for k, g in grads.items()}, total


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(params: policy.PolicyParams) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
            t=0,
        )


def adam_step(
    params: policy.PolicyParams,
    grads: Gradients,
    state: AdamState,
    lr: float = 3e-4,
    clip_norm: float = 1.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> policy.PolicyParams:
    """Global-norm clipping followed by one bias-corrected Adam update.
    Returns new params; mutates the moment state."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise policy.DivergedGrad(f"gradient for {name} is not finite")
    grads, _ = clip_global_norm(grads, clip_norm)
    state.t += 1
    t = state.t
    new_arrays = {}
    for name, arr in params.arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**t)
        v_hat = state.v[name] / (1.0 - beta2**t)
        new_arrays[name] = arr - lr * m_hat / (np.sqrt(v_hat) + eps)
    return policy.PolicyParams(new_arrays, params.d, params.c, params.hidden, params.n_waypoints)
