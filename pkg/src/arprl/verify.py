"""Oracle suites: finite-difference gradients, exact MI sandwiches, bound enumeration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import mi
from .autodiff import Tensor
from .evaluation import check_bounds_discrete_oracle
from .mi import Batch
from .nn import Mlp, build_default_networks, init_bundle, init_params
from .training import TrainConfig, theta_objective

SUITES = ("gradients", "mi-oracles", "bounds-discrete")
GRAD_TOL = 1e-4


@dataclass
class Result:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}/{self.name}: {self.detail}"


def _pair(rng, shape=(3, 3)):
    return (Tensor(rng.uniform(-3, 3, size=shape), requires_grad=True),
            Tensor(rng.uniform(-3, 3, size=shape), requires_grad=True))


PRIMITIVES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": lambda a, b: ad.tanh(a + b.sum(axis=0)).sum(),
    "sub": lambda a, b: ad.tanh(a - b).sum(),
    "mul": lambda a, b: (a * b * a).sum(),
    "neg": lambda a, b: ad.tanh(ad.neg(a) * b).sum(),
    "matmul": lambda a, b: ad.tanh(a @ b).sum(),
    "relu": lambda a, b: ad.relu(a * b).sum(),
    "sigmoid": lambda a, b: (ad.sigmoid(a) * b).sum(),
    "tanh": lambda a, b: (ad.tanh(a) * b).mean(),
    "softplus": lambda a, b: (ad.softplus(a) * b).sum(),
    "exp": lambda a, b: (ad.exp(a * 0.5) * b).sum(),
    "log": lambda a, b: ad.log(ad.softplus(a) + 0.1).sum(),
    "sum": lambda a, b: (ad.tsum(a * b, axis=1) * ad.tsum(a, axis=1)).sum(),
    "mean": lambda a, b: (ad.mean(a * b, axis=0) * ad.mean(a, axis=0)).sum(),
    "logsumexp": lambda a, b: ad.logsumexp(a * b, axis=1).sum() + ad.logsumexp(a, axis=0).sum(),
    "concat": lambda a, b: (ad.concat([a, b], axis=1) * ad.concat([b, a], axis=1)).sum(),
    "reshape": lambda a, b: (ad.reshape(a, (9,)) * ad.reshape(b, (9,))).sum(),
    "take_rows": lambda a, b: (ad.take_rows(a, [2, 0, 2]) * b).sum(),
    "slice_rows": lambda a, b: (ad.slice_rows(a, 1, 3) * ad.slice_rows(b, 0, 2)).sum(),
    "cross_entropy": lambda a, b: ad.cross_entropy(a * b, np.array([0, 2, 1])),
}


def _loss_instance(name: str, rng: np.random.Generator):
    """A composed loss on random small networks; returns (loss_fn, params)."""
    B, d = 8, 3
    x = rng.normal(size=(B, d))
    u = rng.integers(0, 2, B)
    y = rng.integers(0, 2, B)
    batch = Batch(x, u, y, rng.permutation(B))
    bundle = build_default_networks("toy", d, 2, 2, with_task_head=True)
    # shrink the defaults so finite differences stay cheap
    bundle.t = Mlp([d + 2 + 1, 6, 1])
    bundle.h = Mlp([d + 2 + 1, 6, 1])
    init_bundle(bundle, int(rng.integers(2**31)))
    if name == "L1":
        return (lambda: mi.privacy_loss(bundle.g, bundle.f, batch)), bundle.f.parameters() + bundle.g.parameters()
    if name == "L2":
        xt = Tensor(x + rng.uniform(-0.01, 0.01, size=x.shape), requires_grad=True)
        return (lambda: mi.mine_objective(bundle.t, bundle.f, batch, x=xt)), \
            bundle.f.parameters() + bundle.t.parameters() + [xt]
    if name == "L3":
        return (lambda: mi.js_objective(bundle.h, bundle.f, batch)), bundle.f.parameters() + bundle.h.parameters()
    if name == "theta":
        cfg = TrainConfig(alpha=0.2, beta=0.3, lam=0.5)
        x_adv = x + rng.uniform(-0.01, 0.01, size=x.shape)
        return (lambda: theta_objective(bundle, batch, x_adv, cfg)[0]), bundle.f.parameters()
    raise KeyError(name)


LOSSES = ("L1", "L2", "L3", "theta")


def gradient_suite(instances: int = 20, seed: int = 0) -> list[Result]:
    out = []
    for name in list(PRIMITIVES) + list(LOSSES):
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            if name in PRIMITIVES:
                a, b = _pair(rng)
                fn, params = (lambda: PRIMITIVES[name](a, b)), [a, b]
            else:
                fn, params = _loss_instance(name, rng)
            worst = max(worst, ad.gradcheck(fn, params))
        out.append(Result("gradients", name, worst < GRAD_TOL,
                          f"max rel err {worst:.2e} over {instances} instances (tol {GRAD_TOL:g})"))
    return out


def discrete_mi_suite(joints: int = 100, seed: int = 0) -> list[Result]:
    dv_viol = club_viol = js_viol = 0
    for i in range(joints):
        rng = np.random.default_rng([seed, i])
        na, nb = rng.integers(2, 9, size=2)
        p = mi.random_joint(rng, (int(na), int(nb)), concentration=1.0)
        exact = mi.exact_mi_discrete(p)
        critics = [rng.normal(scale=s, size=p.shape) for s in (0.5, 2.0, 8.0)]
        critics.append(np.log(p / mi.product_of_marginals(p)))
        dv_viol += sum(mi.dv_functional_exact(p, c) > exact + 1e-12 for c in critics)
        js_viol += sum(mi.js_functional_exact(p, c) > mi.js_supremum_exact(p) + 1e-12 for c in critics)
        club_viol += mi.club_upper_bound_exact(p) < exact - 1e-12
    return [
        Result("mi-oracles", "dv<=mi", dv_viol == 0, f"{dv_viol} violations over {joints} joints x 4 critics"),
        Result("mi-oracles", "js<=sup", js_viol == 0, f"{js_viol} violations over {joints} joints x 4 critics"),
        Result("mi-oracles", "mi<=club", club_viol == 0, f"{club_viol} violations over {joints} joints"),
    ]


def gaussian_suite(n: int = 10_000, seed: int = 0, steps: int = 2000) -> list[Result]:
    out = []
    js_scores = []
    for rho in (0.5, 0.9):
        rng = np.random.default_rng([seed, int(rho * 100)])
        a = rng.standard_normal(n)
        b = rho * a + math.sqrt(1 - rho**2) * rng.standard_normal(n)
        truth = mi.gaussian_mi(rho)
        _, est = mi.train_critic(a, b, kind="mine", steps=steps, seed=seed)
        err = abs(est - truth) / truth
        out.append(Result("mi-oracles", f"mine-rho{rho:g}", err <= 0.2,
                          f"estimate {est:.4f} vs {truth:.4f} (rel err {err:.3f}, tol 0.2)"))
        _, js = mi.train_critic(a, b, kind="js", steps=steps, seed=seed)
        js_scores.append(js)
    ok = all(np.isfinite(js_scores)) and js_scores[1] > js_scores[0] and max(js_scores) <= 0.0
    out.append(Result("mi-oracles", "js-monotone", ok,
                      "js scores " + ", ".join(f"{s:.4f}" for s in js_scores) + " for rho 0.5, 0.9"))
    return out


def bounds_suite(joints: int = 100, seed: int = 0) -> list[Result]:
    counts = {"utility-privacy": 0, "utility-privacy-groups": 0, "inference-cap": 0}
    worst = dict.fromkeys(counts, np.inf)
    for i in range(joints):
        rng = np.random.default_rng([seed, i, 5])
        nz = int(rng.integers(2, 9))
        rep = check_bounds_discrete_oracle(mi.random_joint(rng, (nz, 2, 2), concentration=1.0))
        for c in rep.checks:
            counts[c.name] += not c.holds
            worst[c.name] = min(worst[c.name], c.slack)
    return [Result("bounds-discrete", name, counts[name] == 0,
                   f"{joints - counts[name]}/{joints} joints pass (min slack {worst[name]:+.3e})")
            for name in counts]


def run_suite(name: str, seed: int = 0) -> list[Result]:
    if name == "gradients":
        return gradient_suite(seed=seed)
    if name == "mi-oracles":
        return discrete_mi_suite(seed=seed) + gaussian_suite(seed=seed)
    if name == "bounds-discrete":
        return bounds_suite(seed=seed)
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, seed)]
    raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES + ('all',))}")
