"""Variational mutual-information objectives and exact oracles.

Three batch objectives drive training:

* ``privacy_loss``  cross-entropy of the attribute posterior q(u|z); the
  learnable half of the vCLUB upper bound on I(z; u).
* ``mine_objective`` Donsker-Varadhan lower bound on I(x; z | u) with a critic
  t(x, z, u) and shuffled negatives x̄.
* ``js_objective``  Jensen-Shannon style score with softplus terms.

The ``*_exact`` functions evaluate the same functionals by enumeration on
small discrete joints and serve as test oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Mlp, clip_grad_norm, init_params, sgd_step


@dataclass
class Batch:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    perm: np.ndarray
    num_attr_values: int = 2

    def __post_init__(self):
        B = len(self.x)
        if B < 2:
            raise ValueError(f"batch size must be >= 2, got {B}")
        for name in ("u", "y", "perm"):
            if len(getattr(self, name)) != B:
                raise ValueError(f"batch field {name} has length {len(getattr(self, name))}, expected {B}")
        if not np.array_equal(np.sort(self.perm), np.arange(B)):
            raise ValueError("perm must be a permutation of range(B)")

    @property
    def size(self) -> int:
        return len(self.x)

    @property
    def xbar(self) -> np.ndarray:
        return self.x[self.perm]

    @property
    def u_embed(self) -> np.ndarray:
        return embed_attribute(self.u, self.num_attr_values)


def make_batch(x, u, y, rng: np.random.Generator, num_attr_values: int = 2) -> Batch:
    """Batch with negatives drawn by one uniform random permutation (fixed points allowed)."""
    return Batch(np.asarray(x, dtype=np.float64), np.asarray(u), np.asarray(y),
                 rng.permutation(len(x)), num_attr_values)


def embed_attribute(u: np.ndarray, num_values: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.intp)
    if u.size and (u.min() < 0 or u.max() >= num_values):
        raise ValueError(f"attribute index out of range for {num_values} values")
    if num_values == 2:
        return u.astype(np.float64)[:, None]
    return np.eye(num_values)[u]


def critic_scores(critic: Mlp, x, z, u_emb) -> Tensor:
    """Scalar critic output on the concatenation [x, z, u] as a (B,) tensor."""
    out = critic(ad.concat([ad.as_tensor(x), ad.as_tensor(z), ad.as_tensor(u_emb)], axis=1))
    return ad.reshape(out, (out.shape[0],))


def critic_pair_scores(critic: Mlp, x_pos, x_neg, z, u_emb) -> tuple[Tensor, Tensor]:
    """Scores on [x_pos, z, u] and [x_neg, z, u] from one stacked forward pass."""
    z, u_emb = ad.as_tensor(z), ad.as_tensor(u_emb)
    B = z.shape[0]
    stacked = ad.concat([ad.concat([ad.as_tensor(x_pos), z, u_emb], axis=1),
                         ad.concat([ad.as_tensor(x_neg), z, u_emb], axis=1)], axis=0)
    out = ad.reshape(critic(stacked), (2 * B,))
    return ad.slice_rows(out, 0, B), ad.slice_rows(out, B, 2 * B)


# ---- bound functionals on critic scores ------------------------------------------

def dv_bound(pos: Tensor, neg: Tensor) -> Tensor:
    """mean(pos) - log mean exp(neg), with max-shifted log-sum-exp."""
    B = neg.shape[0]
    if B < 2:
        raise ValueError(f"MINE needs at least 2 samples, got {B}")
    return ad.mean(pos) - (ad.logsumexp(neg, axis=0) - np.log(B))


def js_bound(pos: Tensor, neg: Tensor) -> Tensor:
    """mean(-sp(-pos)) - mean(sp(neg))."""
    if neg.shape[0] < 2:
        raise ValueError(f"JS estimator needs at least 2 samples, got {neg.shape[0]}")
    return ad.mean(ad.neg(ad.softplus(ad.neg(pos)))) - ad.mean(ad.softplus(neg))


# ---- batch objectives -------------------------------------------------------------

def privacy_loss_from_rep(g: Mlp, z, u) -> Tensor:
    return ad.cross_entropy(g(z), u)


def privacy_loss(g: Mlp, f: Mlp, batch: Batch) -> Tensor:
    """L1: mean cross-entropy of the privacy network's attribute prediction."""
    if g.out_dim != batch.num_attr_values:
        raise ValueError(f"privacy network width {g.out_dim} != {batch.num_attr_values} attribute values")
    return privacy_loss_from_rep(g, f(batch.x), batch.u)


def mine_from_rep(t: Mlp, x, z, batch: Batch) -> Tensor:
    """DV objective given inputs ``x`` (Tensor or array) and representations ``z``."""
    x = ad.as_tensor(x)
    ue = batch.u_embed
    pos, neg = critic_pair_scores(t, x, ad.take_rows(x, batch.perm), z, ue)
    return dv_bound(pos, neg)


def mine_objective(t: Mlp, f: Mlp, batch: Batch, x=None) -> Tensor:
    """L2 on ``x`` (defaults to the clean batch): z = f(x), negatives are x[perm]."""
    x = ad.as_tensor(batch.x if x is None else x)
    return mine_from_rep(t, x, f(x), batch)


def js_from_rep(h: Mlp, x, z, batch: Batch) -> Tensor:
    ue = batch.u_embed
    pos, neg = critic_pair_scores(h, x, batch.xbar, z, ue)
    return js_bound(pos, neg)


def js_objective(h: Mlp, f: Mlp, batch: Batch) -> Tensor:
    """L3: JS-style utility score of the critic h on (x, f(x), u)."""
    return js_from_rep(h, batch.x, f(batch.x), batch)


# ---- exact oracles --------------------------------------------------------------

def check_joint(joint, tol: float = 1e-12) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim < 2 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("joint must be a finite non-negative table with >= 2 axes")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"joint sums to {p.sum()!r}, not 1")
    return p


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def exact_mi_discrete(joint) -> float:
    """I(a; b) in nats for a 2-D table p[a, b]; 0 log 0 = 0."""
    p = check_joint(joint)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    return _xlogy_ratio(p, pa * pb)


def gaussian_mi(rho: float) -> float:
    if not -1.0 < rho < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    return -0.5 * np.log1p(-rho * rho)


def product_of_marginals(joint) -> np.ndarray:
    p = check_joint(joint)
    return p.sum(axis=1, keepdims=True) * p.sum(axis=0, keepdims=True)


def dv_functional_exact(joint, critic) -> float:
    """E_p[T] - log E_{p(a)p(b)}[exp T] for a critic table T[a, b]."""
    p = check_joint(joint)
    q = product_of_marginals(p)
    T = np.asarray(critic, dtype=np.float64)
    m = T.max()
    return float(np.sum(p * T) - (np.log(np.sum(q * np.exp(T - m))) + m))


def js_functional_exact(joint, critic) -> float:
    p = check_joint(joint)
    q = product_of_marginals(p)
    T = np.asarray(critic, dtype=np.float64)
    return float(np.sum(p * -np.logaddexp(0.0, -T)) - np.sum(q * np.logaddexp(0.0, T)))


def js_supremum_exact(joint) -> float:
    """sup_T of the JS functional: 2 * JSD(p || p_a p_b) - 2 log 2."""
    p = check_joint(joint)
    q = product_of_marginals(p)
    mix = 0.5 * (p + q)
    jsd = 0.5 * _xlogy_ratio(p, mix) + 0.5 * _xlogy_ratio(q, mix)
    return 2.0 * jsd - 2.0 * np.log(2.0)


def club_upper_bound_exact(joint, smoothing: float = 0.0) -> float:
    """vCLUB with the true posterior p(u|z); rows of ``joint`` index z, columns u.

    ``smoothing`` adds a constant to every conditional probability before
    renormalizing, which keeps log q finite where p(u|z) = 0.
    """
    p = check_joint(joint)
    pz = p.sum(axis=1)
    if np.any(pz <= 0):
        raise ValueError(f"zero-probability z row {int(np.argmin(pz))}: conditional undefined")
    pu = p.sum(axis=0)
    cond = p / pz[:, None]
    k = p.shape[1]
    q = (cond + smoothing) / (1.0 + k * smoothing)
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    pos = np.sum(np.where(p > 0, p * logq, 0.0))
    marg = pz[:, None] * pu[None, :]
    if np.any((marg > 0) & (q <= 0)):
        return float("inf")
    neg = np.sum(np.where(marg > 0, marg * logq, 0.0))
    return float(pos - neg)


def random_joint(rng: np.random.Generator, shape, concentration: float = 0.5) -> np.ndarray:
    p = rng.dirichlet(np.full(int(np.prod(shape)), concentration)).reshape(shape)
    return p / p.sum()


# ---- critic training on samples ------------------------------------------------

def estimate_dv(critic: Mlp, x: np.ndarray, z: np.ndarray, u_emb: np.ndarray, perm: np.ndarray) -> float:
    pos = critic_scores(critic, x, z, u_emb)
    neg = critic_scores(critic, x[perm], z, u_emb)
    return float(dv_bound(pos, neg).data)


def estimate_js(critic: Mlp, x, z, u_emb, perm) -> float:
    pos = critic_scores(critic, x, z, u_emb)
    neg = critic_scores(critic, x[perm], z, u_emb)
    return float(js_bound(pos, neg).data)


def train_critic(x: np.ndarray, z: np.ndarray, u: np.ndarray | None = None, *,
                 num_attr_values: int = 2, kind: str = "mine", hidden: int = 64,
                 steps: int = 2000, batch_size: int = 256, lr: float = 0.05,
                 clip: float = 10.0, seed: int = 0) -> tuple[Mlp, float]:
    """Fit a fresh critic by SGD ascent and return it with its full-sample estimate.

    ``u=None`` estimates the unconditional I(x; z). The returned estimate uses
    every sample and one fresh permutation for the negatives.
    """
    if kind not in ("mine", "js"):
        raise ValueError(f"kind must be 'mine' or 'js', got {kind!r}")
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
    n = len(x)
    if u is None:
        u_emb = np.zeros((n, 0))
    else:
        u_emb = embed_attribute(u, num_attr_values)
    rng = np.random.default_rng(seed)
    critic = Mlp([x.shape[1] + z.shape[1] + u_emb.shape[1], hidden, 1], name="critic")
    init_params(critic, int(rng.integers(2**63)))
    bound = dv_bound if kind == "mine" else js_bound
    bs = min(batch_size, n)
    for _ in range(steps):
        idx = rng.choice(n, size=bs, replace=False)
        perm = rng.permutation(bs)
        xb, zb, ub = x[idx], z[idx], u_emb[idx]
        with ad.Tape() as tape:
            obj = bound(critic_scores(critic, xb, zb, ub), critic_scores(critic, xb[perm], zb, ub))
        if not np.isfinite(obj.data):
            raise FloatingPointError("critic objective diverged")
        tape.backward(obj)
        clip_grad_norm(critic.parameters(), clip)
        sgd_step(critic, lr, "ascend")
    perm = rng.permutation(n)
    est = estimate_dv if kind == "mine" else estimate_js
    return critic, est(critic, x, z, u_emb, perm)

