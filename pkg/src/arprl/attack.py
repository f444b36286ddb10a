"""l-infinity PGD and the worst-case MI perturbation search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mi import Batch, mine_from_rep, mine_objective
from .nn import Mlp, clip_grad_norm, frozen, sgd_step


@dataclass
class AttackConfig:
    epsilon: float = 0.01
    steps: int = 10
    step_fraction: float = 0.1
    objective: str = "task-loss"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epsilon < 0 or not np.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not 0.0 < self.step_fraction <= 1.0:
            raise ValueError(f"step_fraction must lie in (0, 1], got {self.step_fraction}")
        if self.objective not in ("task-loss", "mi-loss"):
            raise ValueError(f"objective must be 'task-loss' or 'mi-loss', got {self.objective!r}")

    @property
    def step_size(self) -> float:
        return self.step_fraction * self.epsilon

    @property
    def ascend(self) -> bool:
        return self.objective == "task-loss"


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip onto the l-inf ball so that |x_adv - x| <= epsilon holds in floating point."""
    out = np.clip(x_adv, x - epsilon, x + epsilon)
    # x + eps can round so that (x + eps) - x > eps; walk those entries inward by ulps
    for _ in range(8):
        d = out - x
        over, under = d > epsilon, d < -epsilon
        if not (over.any() or under.any()):
            break
        out = np.where(over, np.nextafter(out, -np.inf), out)
        out = np.where(under, np.nextafter(out, np.inf), out)
    return out


def loss_and_input_grad(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    xt = Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        loss = loss_fn(xt)
    val = float(loss.data)
    if not np.isfinite(val):
        raise FloatingPointError(f"attack loss is not finite ({val})")
    tape.backward(loss)
    return val, (np.zeros_like(x) if xt.grad is None else xt.grad)


def pgd_attack(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Signed-gradient steps from x, projected onto the epsilon ball after each step.

    Task-loss attacks ascend ``loss_fn``; MI attacks descend it.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    sign = 1.0 if cfg.ascend else -1.0
    x_adv = x.copy()
    for _ in range(cfg.steps):
        _, g = loss_and_input_grad(loss_fn, x_adv)
        x_adv = project(x_adv + sign * cfg.step_size * np.sign(g), x, cfg.epsilon)
    return x_adv


def task_loss_fn(head: Mlp, f: Mlp, y: np.ndarray) -> Callable[[Tensor], Tensor]:
    return lambda xt: ad.cross_entropy(head(f(xt)), y)


def mine_at(t: Mlp, f: Mlp, batch: Batch, x_adv: np.ndarray) -> float:
    return float(mine_objective(t, f, batch, x_adv).data)


def worst_case_mi_search(t: Mlp, f: Mlp, batch: Batch, cfg: AttackConfig, *,
                         critic_steps: int = 0, critic_lr: float = 1e-3, rounds: int = 1,
                         clip: float = 10.0, x_init: np.ndarray | None = None,
                         trace: list | None = None) -> tuple[np.ndarray, float]:
    """Alternate critic ascent on the DV objective with PGD descent on the perturbations.

    Each round runs ``critic_steps`` SGD ascent steps on the critic ``t`` at the
    current perturbed batch, then ``cfg.steps`` PGD steps moving every row
    x'_i inside its own epsilon ball to lower the objective with ``t`` fixed.
    Returns the perturbed inputs and the objective evaluated there.

    ``trace`` (if given) receives ``(objective_before, objective_after)`` for
    each perturbation phase, both measured with the same critic.
    """
    x = batch.x
    x_adv = x.copy() if x_init is None else np.asarray(x_init, dtype=np.float64).copy()
    pgd_cfg = AttackConfig(cfg.epsilon, cfg.steps, cfg.step_fraction, "mi-loss")
    objective = lambda xt: mine_objective(t, f, batch, xt)
    for _ in range(rounds):
        # f is fixed throughout, so its representation of x_adv is a constant here
        z = Tensor(f.predict(x_adv)) if critic_steps else None
        for _ in range(critic_steps):
            with ad.Tape() as tape:
                obj = mine_from_rep(t, x_adv, z, batch)
            if not np.isfinite(obj.data):
                raise FloatingPointError("MINE objective diverged during critic phase")
            tape.backward(obj)
            clip_grad_norm(t.parameters(), clip)
            sgd_step(t, critic_lr, "ascend")
        if cfg.epsilon == 0:
            continue
        best, best_val, before = x_adv, np.inf, None
        cur = x_adv
        for _ in range(pgd_cfg.steps):
            with frozen(t, f):
                val, g = loss_and_input_grad(objective, cur)
            before = val if before is None else before
            # keep the lowest objective seen so a round never ends worse than it began
            if val < best_val:
                best, best_val = cur, val
            cur = project(cur - pgd_cfg.step_size * np.sign(g), x, pgd_cfg.epsilon)
        val = mine_at(t, f, batch, cur)
        if val < best_val:
            best, best_val = cur, val
        x_adv = best
        if trace is not None:
            trace.append((before, best_val))
    for p in t.parameters():
        p.grad = None
    return x_adv, mine_at(t, f, batch, x_adv)
