"""Four-network alternating min-max training of the representation learner."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attack import AttackConfig, worst_case_mi_search
from .autodiff import Tensor
from .data import Dataset
from .mi import Batch, js_from_rep, make_batch, mine_from_rep, privacy_loss_from_rep
from .nn import (ModelBundle, build_default_networks, clip_grad_norm, frozen, init_bundle, save_checkpoint,
                 sgd_step)

logger = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "L1", "L2", "L3", "objective"]


class ConfigError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.0
    beta: float = 0.5
    lam: float = 0.0
    epsilon: float = 0.01
    lr1: float = 1e-3
    lr2: float = 1e-3
    lr3: float = 1e-3
    lr4: float = 1e-3
    lr5: float = 1e-3
    batch_size: int = 100
    epochs: int = 50
    local_steps: int = 10
    outer_rounds: int = 1
    pgd_steps: int = 10
    step_fraction: float = 0.1
    clip: float = 10.0
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError(f"alpha and beta must lie in [0, 1], got {self.alpha}, {self.beta}")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ConfigError(f"alpha + beta must be <= 1, got {self.alpha + self.beta:g}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        for name in ("lr1", "lr2", "lr3", "lr4", "lr5"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "epochs", "local_steps", "outer_rounds", "pgd_steps", "checkpoint_every"):
            v = getattr(self, name)
            if int(v) != v or v < (2 if name == "batch_size" else 1):
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.step_fraction <= 1:
            raise ConfigError(f"step_fraction must lie in (0, 1], got {self.step_fraction}")

    @property
    def utility_weight(self) -> float:
        return max(0.0, 1.0 - self.alpha - self.beta)

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.pgd_steps, self.step_fraction, "mi-loss")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def theta_objective(bundle: ModelBundle, batch: Batch, x_adv: np.ndarray, cfg: TrainConfig):
    """alpha*L1 + beta*L2(x') + (1-alpha-beta)*(L3 + lambda*log q(y|z)), taped by the caller.

    Returns the objective tensor and a dict of the individual terms.
    """
    z = bundle.f(batch.x)
    l1 = privacy_loss_from_rep(bundle.g, z, batch.u)
    l3 = js_from_rep(bundle.h, batch.x, z, batch)
    xa = Tensor(x_adv)
    l2 = mine_from_rep(bundle.t, xa, bundle.f(xa), batch)
    terms = {"L1": l1, "L2": l2, "L3": l3}
    obj = cfg.alpha * l1 + cfg.beta * l2 + cfg.utility_weight * l3
    if cfg.lam > 0 and bundle.q is not None:
        task_ll = ad.neg(ad.cross_entropy(bundle.q(z), batch.y))
        terms["task"] = task_ll
        obj = obj + (cfg.utility_weight * cfg.lam) * task_ll
    return obj, terms


def _check_finite(terms: dict, epoch: int) -> None:
    for name, v in terms.items():
        if not np.isfinite(float(v.data)):
            raise TrainingDivergence(f"{name} became non-finite ({float(v.data)}) at epoch {epoch}")


def _step(net, loss: Tensor, tape: ad.Tape, lr: float, direction: str, clip: float) -> None:
    tape.backward(loss)
    clip_grad_norm(net.parameters(), clip)
    sgd_step(net, lr, direction)


def train_batch(bundle: ModelBundle, batch: Batch, cfg: TrainConfig, epoch: int = 0,
                monitor: Callable[[str, dict], None] | None = None) -> dict[str, float]:
    """One pass of the per-batch schedule; returns the Theta-step loss values."""
    f, g, t, h, q = bundle.f, bundle.g, bundle.t, bundle.h, bundle.q
    J = cfg.local_steps
    atk = cfg.attack if cfg.beta > 0 else AttackConfig(0.0, cfg.pgd_steps, cfg.step_fraction, "mi-loss")

    # robust critic phase (J ascent steps) followed by the worst-case perturbation phase
    trace = [] if monitor is not None else None
    x_adv, _ = worst_case_mi_search(t, f, batch, atk, critic_steps=J, critic_lr=cfg.lr2,
                                    rounds=1, clip=cfg.clip, trace=trace)
    if monitor is not None:
        monitor("perturbation", {"epoch": epoch, "trace": trace,
                                 "max_dev": float(np.max(np.abs(x_adv - batch.x)))})

    z = Tensor(f.predict(batch.x))  # Theta is frozen during the local steps
    l1_before = float(privacy_loss_from_rep(g, z, batch.u).data) if monitor else None
    for _ in range(J):
        with ad.Tape() as tape:
            l1 = privacy_loss_from_rep(g, z, batch.u)
        _step(g, l1, tape, cfg.lr1, "descend", cfg.clip)
        with ad.Tape() as tape:
            l3 = js_from_rep(h, batch.x, z, batch)
        _step(h, l3, tape, cfg.lr3, "ascend", cfg.clip)
        if cfg.lam > 0 and q is not None:
            with ad.Tape() as tape:
                lt = ad.cross_entropy(q(z), batch.y)
            _step(q, lt, tape, cfg.lr5, "descend", cfg.clip)
    if monitor is not None:
        monitor("privacy", {"epoch": epoch, "before": l1_before,
                            "after": float(privacy_loss_from_rep(g, z, batch.u).data)})

    f.zero_grad()
    heads = (g, t, h) + ((q,) if q is not None else ())
    with frozen(*heads):
        with ad.Tape() as tape:
            obj, terms = theta_objective(bundle, batch, x_adv, cfg)
        _check_finite(terms, epoch)
        tape.backward(obj)
    clip_grad_norm(f.parameters(), cfg.clip)
    sgd_step(f, cfg.lr4, "ascend")
    for net in heads:
        net.zero_grad()
    out = {k: float(v.data) for k, v in terms.items()}
    out["objective"] = float(obj.data)
    if monitor is not None:
        monitor("theta", {"epoch": epoch, "terms": out, "batch": batch,
                          "L1_after": float(privacy_loss_from_rep(g, f(batch.x), batch.u).data)})
    return out


def new_bundle(dataset: Dataset, cfg: TrainConfig, kind: str | None = None) -> ModelBundle:
    kind = kind or ("toy" if dataset.kind == "toy" else "tabular")
    bundle = build_default_networks(kind, dataset.dim, dataset.num_attr_values,
                                    dataset.num_classes, with_task_head=cfg.lam > 0)
    init_bundle(bundle, cfg.seed)
    bundle.config = cfg.to_dict()
    return bundle


def write_log(log: list[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: (row[k] if k == "epoch" else repr(row[k])) for k in LOG_FIELDS})


def train(dataset: Dataset, cfg: TrainConfig, *, kind: str | None = None, out_dir=None,
          monitor: Callable[[str, dict], None] | None = None,
          bundle: ModelBundle | None = None) -> tuple[ModelBundle, list[dict]]:
    """Train all four networks; returns the bundle and the per-epoch log.

    With ``out_dir`` the log is written as ``train_log.csv`` and checkpoints
    land every ``checkpoint_every`` epochs plus ``final.ckpt`` at the end.
    """
    cfg.validate()
    if len(dataset.train_idx) < 2:
        raise ValueError("training split needs at least 2 rows")
    if bundle is None:
        bundle = new_bundle(dataset, cfg, kind)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    x, y, u = dataset.split("train")
    n = len(x)
    bs = min(cfg.batch_size, n)
    log: list[dict] = []
    epoch = 0
    for _ in range(cfg.outer_rounds):
        for _ in range(cfg.epochs):
            epoch += 1
            order = rng.permutation(n)
            sums = dict.fromkeys(LOG_FIELDS[1:], 0.0)
            nb = 0
            for start in range(0, n - bs + 1, bs):
                idx = order[start:start + bs]
                batch = make_batch(x[idx], u[idx], y[idx], rng, dataset.num_attr_values)
                vals = train_batch(bundle, batch, cfg, epoch, monitor)
                for k in sums:
                    sums[k] += vals[k]
                nb += 1
            row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
            log.append(row)
            logger.info("epoch %d L1=%.4f L2=%.4f L3=%.4f obj=%.4f", epoch, row["L1"], row["L2"],
                        row["L3"], row["objective"])
            if out is not None and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(bundle, out / f"epoch{epoch:04d}.ckpt")
    if out is not None:
        write_log(log, out / "train_log.csv")
        save_checkpoint(bundle, out / "final.ckpt")
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return bundle, log


# ---- alpha/beta tuning -------------------------------------------------------------

TUNE_FIELDS = ["phase", "alpha", "beta", "test_acc", "robust_acc", "infer_acc", "gap", "score", "feasible"]


def tune_alpha_beta(dataset: Dataset, target_utility: float, *, base: TrainConfig | None = None,
                    total: float = 0.6, refine_steps: int = 2, attack: AttackConfig | None = None,
                    log_path=None, kind: str | None = None) -> tuple[tuple[float, float], list[dict]]:
    """Search (alpha, beta) on the line alpha + beta = ``total``.

    The alpha = beta = 0 run sets the utility ceiling. Three probes (equal,
    privacy-heavy, robustness-heavy) are always evaluated, then the interval
    between the best feasible point and its better neighbour is bisected.
    A point is feasible when its test accuracy reaches ``target_utility``;
    feasible points are ranked by robust accuracy minus the inference gap.
    """
    from .evaluation import evaluate

    base = base or TrainConfig()
    if not 0.0 < total <= 1.0:
        raise ConfigError(f"total must lie in (0, 1], got {total}")
    attack = attack or AttackConfig(base.epsilon, base.pgd_steps, base.step_fraction)
    log: list[dict] = []

    def probe(alpha: float, beta: float, phase: str) -> dict:
        cfg = dataclasses.replace(base, alpha=alpha, beta=beta)
        bundle, _ = train(dataset, cfg, kind=kind)
        m = evaluate(bundle, dataset, attack, seed=cfg.seed).metrics
        row = {"phase": phase, "alpha": alpha, "beta": beta, "test_acc": m.test_acc,
               "robust_acc": m.robust_acc, "infer_acc": m.infer_acc, "gap": m.gap,
               "score": m.robust_acc - max(m.gap, 0.0), "feasible": m.test_acc >= target_utility}
        log.append(row)
        logger.info("probe %s alpha=%.4f beta=%.4f test=%.4f robust=%.4f infer=%.4f", phase, alpha, beta,
                    m.test_acc, m.robust_acc, m.infer_acc)
        return row

    ceiling = probe(0.0, 0.0, "ceiling")
    if target_utility > ceiling["test_acc"]:
        _write_tune_log(log, log_path)
        raise ConfigError(f"target utility {target_utility:g} exceeds the alpha=beta=0 ceiling "
                          f"{ceiling['test_acc']:.4f}")
    line = [probe(f * total, (1 - f) * total, name)
            for f, name in ((0.5, "equal"), (0.75, "privacy-heavy"), (0.25, "robustness-heavy"))]

    def best(rows):
        feas = [r for r in rows if r["feasible"]]
        return max(feas, key=lambda r: (r["score"], -r["alpha"])) if feas else None

    for _ in range(refine_steps):
        line.sort(key=lambda r: r["alpha"])
        top = best(line)
        if top is None:
            # nothing on the line reaches the target: move toward less privacy weight
            lo = line[0]
            a = lo["alpha"] / 2.0
        else:
            i = line.index(top)
            nbrs = [line[j] for j in (i - 1, i + 1) if 0 <= j < len(line)]
            nb = max(nbrs, key=lambda r: (r["feasible"], r["score"]))
            a = (top["alpha"] + nb["alpha"]) / 2.0
        if any(abs(r["alpha"] - a) < 1e-9 for r in line):
            break
        line.append(probe(a, total - a, "bisect"))

    choice = best(line) or ceiling
    if ceiling["feasible"] and choice is not ceiling and ceiling["score"] > choice["score"]:
        choice = ceiling
    _write_tune_log(log, log_path)
    return (choice["alpha"], choice["beta"]), log


def _write_tune_log(log: list[dict], path) -> None:
    if path is None:
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TUNE_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(log)
