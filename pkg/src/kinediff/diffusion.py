"""DDPM machinery: linear noise schedule, forward noising, the loss
terms, and the literal reverse update a_{k-1} = sqrt(abar_{k-1}) * pred
+ sqrt(1 - abar_{k-1}) * eps.

Steps are indexed k in {1..K}; abar(0) is defined as 1 so the final
reverse step is exact. The denoiser is x0-predicting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import BadLambda, BadRange, BadStep, LengthMismatch, ShapeMismatch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    K: int
    beta: np.ndarray        # (K,), beta[k-1] is the step-k value
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product of alpha

    def abar(self, k: int) -> float:
        """alpha_bar at step k, with abar(0) := 1."""
        if not 0 <= k <= self.K:
            raise BadStep(f"k={k} outside [0, {self.K}]")
        return 1.0 if k == 0 else float(self.alpha_bar[k - 1])


def make_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly spaced betas over K steps."""
    if K < 1:
        raise BadRange(f"K={K} must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise BadRange(f"betas ({beta_start}, {beta_end}) outside (0, 1)")
    beta = np.linspace(beta_start, beta_end, K)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(K=K, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_step(sched: NoiseSchedule, k: int) -> None:
    if not 1 <= k <= sched.K:
        raise BadStep(f"k={k} outside [1, {sched.K}]")


def add_noise(a0: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: a_k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps."""
    _check_step(sched, k)
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ShapeMismatch(f"a0 {a0.shape} vs eps {eps.shape}")
    abar = sched.abar(k)
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps


def denoise_step(a_k: np.ndarray, k: int, pred_a0: np.ndarray,
                 sched: NoiseSchedule, eps_k: np.ndarray) -> np.ndarray:
    """One reverse update; the caller samples eps_k (zero at k = 1)."""
    _check_step(sched, k)
    a_k = np.asarray(a_k, dtype=np.float64)
    pred_a0 = np.asarray(pred_a0, dtype=np.float64)
    eps_k = np.asarray(eps_k, dtype=np.float64)
    if not (a_k.shape == pred_a0.shape == eps_k.shape):
        raise ShapeMismatch(f"{a_k.shape} vs {pred_a0.shape} vs {eps_k.shape}")
    abar_prev = sched.abar(k - 1)
    return np.sqrt(abar_prev) * pred_a0 + np.sqrt(1.0 - abar_prev) * eps_k


def mse(target: np.ndarray, pred: Var) -> Var:
    """Mean squared error of a prediction Var against a constant target."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"target {target.shape} vs pred {pred.shape}")
    return ad.mean(ad.square(pred - pred.tape.const(target)))


def loss_ee(a0_true: np.ndarray, a_k: np.ndarray, k: int, cond: Var, denoiser) -> Var:
    """Pose-chunk loss: MSE between the denoiser's predicted a_0 and the truth.

    ``denoiser(a_k, k, cond) -> Var`` is the conditional x0-predicting
    network; the caller produced a_k with add_noise at a sampled step.
    """
    pred = denoiser(np.asarray(a_k, dtype=np.float64), k, cond)
    return mse(a0_true, pred)


def loss_joint(a_joint_true: np.ndarray, pred_joint: Var) -> Var:
    """Joint-space consistency loss: MSE over the m joint values."""
    a_joint_true = np.asarray(a_joint_true, dtype=np.float64)
    if a_joint_true.shape != pred_joint.shape:
        raise LengthMismatch(f"{a_joint_true.shape} vs {pred_joint.shape}")
    return mse(a_joint_true, pred_joint)


def loss_total(l_ee: Var, l_joint: Var, lam: float = 0.9) -> Var:
    """Trade-off combination lambda * L_ee + (1 - lambda) * L_joint."""
    if not 0.0 <= lam <= 1.0:
        raise BadLambda(f"lambda={lam} outside [0, 1]")
    tape = l_ee.tape
    return l_ee * tape.const(lam) + l_joint * tape.const(1.0 - lam)


def reverse_sample(denoise_fn, sched: NoiseSchedule, width: int,
                   rng: np.random.Generator, reverse_steps: int | None = None) -> np.ndarray:
    """Run the reverse loop from standard-normal noise to a_0.

    ``denoise_fn(a_k, k) -> ndarray`` predicts a_0. With reverse_steps=1
    the loop is a single jump from k = K (the predicted a_0 is returned
    directly, matching abar(0) = 1); otherwise all K steps run, with
    eps_k drawn standard normal except at the final step.
    """
    a = rng.standard_normal(width)
    if reverse_steps == 1:
        return np.asarray(denoise_fn(a, sched.K), dtype=np.float64)
    for k in range(sched.K, 0, -1):
        pred = np.asarray(denoise_fn(a, k), dtype=np.float64)
        eps_k = np.zeros(width) if k == 1 else rng.standard_normal(width)
        a = denoise_step(a, k, pred, sched, eps_k)
    return a
