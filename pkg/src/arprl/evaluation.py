"""Post-hoc probes, attack metrics and numeric checks of the tradeoff bounds."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attack import AttackConfig, pgd_attack, task_loss_fn, worst_case_mi_search
from .autodiff import Tensor
from .data import Dataset
from .mi import Batch, check_joint, train_critic
from .nn import Mlp, ModelBundle, init_params, sgd_step

LOG2 = math.log(2.0)


class EvaluationError(ValueError):
    pass


# ---- probes ----------------------------------------------------------------------

def _fold_normalization(head: Mlp, mean: np.ndarray, std: np.ndarray) -> None:
    """Rewrite the first layer so the head accepts unnormalized inputs."""
    w, b = head.weights[0], head.biases[0]
    w_new = w.data / std[:, None]
    b.data = b.data - (mean / std) @ w.data
    w.data = w_new


def fit_probe(z_train: np.ndarray, targets: np.ndarray, num_out: int, *, hidden: int = 16,
              lr: float = 0.1, batch_size: int = 100, max_epochs: int = 200, patience: int = 5,
              tol: float = 1e-5, seed: int = 0) -> Mlp:
    """Train a fresh softmax head on fixed features until the train loss stalls.

    Stops once the epoch loss has improved by less than ``tol`` over the last
    ``patience`` epochs, or after ``max_epochs``.
    """
    targets = np.asarray(targets)
    if len(np.unique(targets)) < 2:
        raise EvaluationError("probe target has a single class; nothing to learn")
    mean = z_train.mean(axis=0)
    std = z_train.std(axis=0)
    std[std < 1e-12] = 1.0
    zn = (z_train - mean) / std
    sizes = [zn.shape[1], hidden, num_out] if hidden else [zn.shape[1], num_out]
    head = Mlp(sizes, output="softmax-logits", name="probe")
    rng = np.random.default_rng(seed)
    init_params(head, int(rng.integers(2**63)))
    n = len(zn)
    bs = min(batch_size, n)
    history: list[float] = []
    for _ in range(max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            with ad.Tape() as tape:
                loss = ad.cross_entropy(head(zn[idx]), targets[idx])
            tape.backward(loss)
            sgd_step(head, lr, "descend")
            total += float(loss.data) * len(idx)
        history.append(total / n)
        if len(history) > patience and history[-patience - 1] - min(history[-patience:]) < tol:
            break
    _fold_normalization(head, mean, std)
    return head


def representations(f: Mlp, x: np.ndarray) -> np.ndarray:
    return f.predict(x)


def fit_probe_classifier(f: Mlp, dataset: Dataset, target: str, seed: int = 0, **kw) -> Mlp:
    """Task classifier (target='label') or attribute adversary (target='attribute') on frozen f."""
    if target not in ("label", "attribute"):
        raise ValueError(f"target must be 'label' or 'attribute', got {target!r}")
    x, y, u = dataset.split("train")
    z = representations(f, x)
    if target == "label":
        return fit_probe(z, y, dataset.num_classes, seed=seed, **kw)
    return fit_probe(z, u, dataset.num_attr_values, seed=seed, **kw)


def predict(head: Mlp, z: np.ndarray) -> np.ndarray:
    return np.argmax(head.predict(z), axis=1)


def accuracy(head: Mlp, z: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(predict(head, z) == targets))


def cross_entropy_bits(head: Mlp, z: np.ndarray, targets: np.ndarray) -> float:
    return float(ad.cross_entropy(Tensor(head.predict(z)), targets).data) / LOG2


# ---- advantage ---------------------------------------------------------------------

def advantage_from_predictions(pred: np.ndarray, u: np.ndarray) -> float:
    """max_a |P(A=a | u=a) - P(A=a | u=1-a)| for binary attribute and predictions."""
    pred, u = np.asarray(pred), np.asarray(u)
    if set(np.unique(u)) - {0, 1} or set(np.unique(pred)) - {0, 1}:
        raise EvaluationError("advantage is defined for binary attributes only")
    best = 0.0
    for a in (0, 1):
        same, other = u == a, u == 1 - a
        if not same.any() or not other.any():
            raise EvaluationError(f"empty conditional slice for u={a if not same.any() else 1 - a}")
        best = max(best, abs(np.mean(pred[same] == a) - np.mean(pred[other] == a)))
    return float(best)


def tv_distance_of_predictions(pred: np.ndarray, u: np.ndarray) -> float:
    """Total-variation distance between the adversary's output histograms given u=0 and u=1."""
    h0 = np.bincount(pred[u == 0], minlength=2) / np.sum(u == 0)
    h1 = np.bincount(pred[u == 1], minlength=2) / np.sum(u == 1)
    return float(0.5 * np.abs(h0 - h1).sum())


def compute_advantage(adversary: Mlp, f: Mlp, dataset: Dataset, perturbed: bool = False,
                      attack: AttackConfig | None = None, task_head: Mlp | None = None) -> float:
    """Advantage on the test split; ``perturbed`` uses z' = f(x') from a task-loss PGD attack."""
    if dataset.num_attr_values != 2:
        raise EvaluationError("advantage requires a binary attribute")
    x, y, u = dataset.split("test")
    if perturbed:
        if attack is None or task_head is None:
            raise EvaluationError("perturbed advantage needs an attack config and a task head")
        x = pgd_attack(task_loss_fn(task_head, f, y), x, attack)
    return advantage_from_predictions(predict(adversary, f.predict(x)), u)


# ---- Lipschitz bound --------------------------------------------------------------

def spectral_norm(w: np.ndarray, iters: int = 100, tol: float = 1e-9) -> float:
    """Largest singular value by power iteration on W^T W.

    Falls back to an exact SVD when the iteration has not settled, so the
    value can be used as an upper bound.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    sigma = 0.0
    converged = False
    for _ in range(iters):
        wv = w @ v
        v_new = w.T @ wv
        norm = np.linalg.norm(v_new)
        if norm == 0.0:
            return float(np.linalg.norm(w, 2))
        v = v_new / norm
        s_new = float(np.linalg.norm(w @ v))
        if abs(s_new - sigma) <= tol * max(1.0, s_new):
            sigma = s_new
            converged = True
            break
        sigma = s_new
    if not converged:
        sigma = float(np.linalg.norm(w, 2))
    return sigma


def estimate_lipschitz(head: Mlp) -> float:
    """Product of per-layer spectral norms; activations count as 1-Lipschitz."""
    out = 1.0
    for w in head.weights:
        out *= spectral_norm(w.data)
    return out


# ---- representation vulnerability ---------------------------------------------------

def estimate_rv(bundle: ModelBundle, dataset: Dataset, attack: AttackConfig, *,
                critic_steps: int = 2000, critic_lr: float = 0.05, seed: int = 0,
                which: str = "test") -> dict:
    """I(x; z|u) - I(x'; z'|u) with fresh MINE critics sharing one seed.

    x' comes from the worst-case MI search against the clean-data critic.
    """
    x, y, u = dataset.split(which)
    k = dataset.num_attr_values
    f = bundle.f
    critic, clean = train_critic(x, f.predict(x), u, num_attr_values=k, steps=critic_steps,
                                 lr=critic_lr, seed=seed)
    rng = np.random.default_rng(seed)
    batch = Batch(x, u, y, rng.permutation(len(x)), k)
    x_adv, _ = worst_case_mi_search(critic, f, batch, attack, critic_steps=0, rounds=1)
    _, pert = train_critic(x_adv, f.predict(x_adv), u, num_attr_values=k, steps=critic_steps,
                           lr=critic_lr, seed=seed)
    rv = clean - pert
    if not np.isfinite(rv):
        raise EvaluationError("MI estimator diverged while estimating RV")
    return {"rv": rv, "mi_clean": clean, "mi_perturbed": pert,
            "max_dev": float(np.max(np.abs(x_adv - x)))}


# ---- bounds ----------------------------------------------------------------------------

def privacy_cap(h_bits: float) -> float:
    """Accuracy cap 1 - H / (2 log2(6 / H)) for conditional entropy H(u|z) in bits."""
    if h_bits < 0:
        raise ValueError("entropy must be non-negative")
    if h_bits == 0:
        return 1.0
    return 1.0 - h_bits / (2.0 * math.log2(6.0 / h_bits))


def label_gap(y: np.ndarray, u: np.ndarray) -> float:
    """|P(y=1|u=0) - P(y=1|u=1)|."""
    return float(abs(np.mean(y[u == 0] == 1) - np.mean(y[u == 1] == 1)))


@dataclass
class TheoremCheck:
    name: str
    lhs: float
    rhs: float
    kind: str  # "lower" : lhs >= rhs ; "upper" : lhs <= rhs
    mode: str  # "estimated" or "exact"
    tol: float = 1e-9

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs if self.kind == "lower" else self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= -self.tol


@dataclass
class BoundReport:
    mi_xz_given_u: float = float("nan")
    rv: float = float("nan")
    delta_y_u: float = float("nan")
    R: float = float("nan")
    C_L: float = float("nan")
    h_u_given_z_bits: float = float("nan")
    risk: float = float("nan")
    adv_risk: float = float("nan")
    advantage: float = float("nan")
    advantage_perturbed: float = float("nan")
    checks: list[TheoremCheck] = field(default_factory=list)

    def check(self, name: str) -> TheoremCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def rows(self) -> list[dict]:
        return [{"theorem": c.name, "lhs": c.lhs, "rhs": c.rhs, "slack": c.slack,
                 "holds": c.holds, "mode": c.mode} for c in self.checks]

    def text(self) -> str:
        lines = [f"I(x;z|u)={self.mi_xz_given_u:.4f}  RV={self.rv:.4f}  Delta_y|u={self.delta_y_u:.4f}  "
                 f"R={self.R:.4f}  C_L={self.C_L:.4f}  H(u|z)={self.h_u_given_z_bits:.4f} bits"]
        for c in self.checks:
            rel = ">=" if c.kind == "lower" else "<="
            lines.append(f"  {c.name:<10} {c.lhs:.4f} {rel} {c.rhs:.4f}  slack={c.slack:+.4f}  "
                         f"{'holds' if c.holds else 'VIOLATED'} [{c.mode}]")
        return "\n".join(lines)


@dataclass
class MetricsReport:
    alpha: float
    beta: float
    seed: int
    epsilon: float
    test_acc: float
    robust_acc: float
    infer_acc: float
    majority: float
    gap: float
    advantage: float = float("nan")
    advantage_perturbed: float = float("nan")
    robust_acc_mi: float = float("nan")

    def row(self) -> dict:
        return asdict(self)

    def text(self) -> str:
        return (f"alpha={self.alpha:g} beta={self.beta:g} seed={self.seed} eps={self.epsilon:g}\n"
                f"  test acc      {self.test_acc:.4f}\n"
                f"  robust acc    {self.robust_acc:.4f} (mi-loss attack {self.robust_acc_mi:.4f})\n"
                f"  inference acc {self.infer_acc:.4f} (gap {self.gap:+.4f} vs majority {self.majority:.4f})\n"
                f"  advantage     {self.advantage:.4f} (perturbed {self.advantage_perturbed:.4f})")


@dataclass
class Evaluation:
    metrics: MetricsReport
    task_head: Mlp
    adversary: Mlp
    x_adv: np.ndarray
    adv_ce_bits: float


def evaluate(bundle: ModelBundle, dataset: Dataset, attack: AttackConfig, seed: int = 0,
             assert_ball: bool = True) -> Evaluation:
    """Fit the task head and attribute adversary on the train split, score on test."""
    cfg = bundle.config or {}
    x, y, u = dataset.split("test")
    ss = np.random.SeedSequence([seed, 7])
    s_task, s_adv = (int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(2))
    task = fit_probe_classifier(bundle.f, dataset, "label", seed=s_task)
    adversary = fit_probe_classifier(bundle.f, dataset, "attribute", seed=s_adv)
    z = bundle.f.predict(x)
    test_acc = accuracy(task, z, y)
    x_adv = pgd_attack(task_loss_fn(task, bundle.f, y), x, attack)
    if assert_ball:
        dev = float(np.max(np.abs(x_adv - x))) if len(x) else 0.0
        if dev > attack.epsilon:
            raise AssertionError(f"attack left the epsilon ball: {dev} > {attack.epsilon}")
    z_adv = bundle.f.predict(x_adv)
    robust_acc = accuracy(task, z_adv, y)
    # the training-time attack: descend the MI estimate with the trained critic
    rob_mi = float("nan")
    if len(x) >= 2:
        mi_atk = AttackConfig(attack.epsilon, attack.steps, attack.step_fraction, "mi-loss")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
        batch = Batch(x, u, y, rng.permutation(len(x)), dataset.num_attr_values)
        x_mi, _ = worst_case_mi_search(bundle.t, bundle.f, batch, mi_atk)
        rob_mi = accuracy(task, bundle.f.predict(x_mi), y)
    infer_acc = accuracy(adversary, z, u)
    majority = dataset.majority_rate("attribute", "test")
    adv = adv_p = float("nan")
    if dataset.num_attr_values == 2:
        adv = advantage_from_predictions(predict(adversary, z), u)
        adv_p = advantage_from_predictions(predict(adversary, z_adv), u)
    m = MetricsReport(float(cfg.get("alpha", float("nan"))), float(cfg.get("beta", float("nan"))),
                      int(cfg.get("seed", seed)), attack.epsilon, test_acc, robust_acc, infer_acc,
                      majority, infer_acc - majority, adv, adv_p, rob_mi)
    return Evaluation(m, task, adversary, x_adv, cross_entropy_bits(adversary, z, u))


def check_theorem_bounds(bundle: ModelBundle, dataset: Dataset, attack: AttackConfig,
                         ev: Evaluation | None = None, *, rv: dict | None = None,
                         critic_steps: int = 2000, seed: int = 0) -> BoundReport:
    """Measure both sides of the four bounds on a trained bundle (estimator mode)."""
    if dataset.num_attr_values != 2 or dataset.num_classes != 2:
        raise EvaluationError("bound checks require a binary label and a binary attribute")
    ev = ev or evaluate(bundle, dataset, attack, seed)
    x, y, u = dataset.split("test")
    z = bundle.f.predict(x)
    z_adv = bundle.f.predict(ev.x_adv)
    rv = rv or estimate_rv(bundle, dataset, attack, critic_steps=critic_steps, seed=seed)
    m = ev.metrics
    rep = BoundReport(
        mi_xz_given_u=rv["mi_clean"], rv=rv["rv"], delta_y_u=label_gap(y, u),
        R=float(max(np.linalg.norm(z, axis=1).max(), np.linalg.norm(z_adv, axis=1).max())),
        C_L=estimate_lipschitz(ev.task_head), h_u_given_z_bits=min(ev.adv_ce_bits, 1.0),
        risk=1.0 - m.test_acc, adv_risk=1.0 - m.robust_acc,
        advantage=m.advantage, advantage_perturbed=m.advantage_perturbed)
    scale = 2.0 * rep.R * rep.C_L
    rep.checks = [
        TheoremCheck("robustness-vulnerability", rep.adv_risk, (rep.rv - rep.mi_xz_given_u) / LOG2,
                     "lower", "estimated"),
        TheoremCheck("utility-privacy", rep.risk, rep.delta_y_u - scale * rep.advantage, "lower", "estimated"),
        TheoremCheck("robustness-privacy", rep.adv_risk, rep.delta_y_u - scale * rep.advantage_perturbed,
                     "lower", "estimated"),
        TheoremCheck("inference-cap", m.infer_acc, privacy_cap(rep.h_u_given_z_bits), "upper", "estimated"),
    ]
    return rep


# ---- exact discrete oracle --------------------------------------------------------

def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def conditional_entropy_bits(p_zu: np.ndarray) -> float:
    """H(u|z) in bits for a table p[z, u]."""
    pz = p_zu.sum(axis=1)
    return float(sum(pz[i] * _entropy_bits(p_zu[i] / pz[i]) for i in range(len(pz)) if pz[i] > 0))


def check_bounds_discrete_oracle(joint, embedding: np.ndarray | None = None) -> BoundReport:
    """Exact check of the utility-privacy and leakage bounds on p[z, y, u].

    Every map A: Z -> {0,1} and C: Z -> {0,1} is enumerated (|Z| <= 8), so the
    adversary is Bayes optimal and Adv is the exact total variation. The
    representation alphabet sits at the rows of ``embedding`` (default: one-hot
    vectors), which fixes R and each classifier's Lipschitz constant.

    ``utility-privacy`` is checked as stated (overall risk). ``utility-privacy-groups`` checks
    the form the triangle-inequality argument yields, with the per-attribute
    risks summed.
    """
    p = check_joint(joint)
    if p.ndim != 3 or p.shape[1:] != (2, 2):
        raise EvaluationError(f"joint must have shape (|Z|, 2, 2) over (z, y, u), got {p.shape}")
    nz = p.shape[0]
    if nz > 8:
        raise EvaluationError(f"representation alphabet too large for enumeration: {nz} > 8")
    emb = np.eye(nz) if embedding is None else np.asarray(embedding, dtype=np.float64)
    if emb.shape[0] != nz:
        raise EvaluationError("embedding needs one row per representation symbol")
    p_zu = p.sum(axis=1)
    p_zy = p.sum(axis=2)
    pu = p_zu.sum(axis=0)
    if np.any(pu <= 0):
        raise EvaluationError("both attribute values need positive probability")
    p_z_given_u = p_zu / pu[None, :]
    p_yu = p.sum(axis=0)
    delta = abs(p_yu[1, 0] / pu[0] - p_yu[1, 1] / pu[1])
    R = float(np.linalg.norm(emb, axis=1).max())
    dists = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=2)

    maps = np.array(list(itertools.product((0, 1), repeat=nz)), dtype=np.intp)
    rows = np.arange(nz)
    best_acc, adv = 0.0, 0.0
    for a in maps:
        best_acc = max(best_acc, float(p_zu[rows, a].sum()))
        adv = max(adv, abs(float(p_z_given_u[a == 1, 1].sum() - p_z_given_u[a == 1, 0].sum())))
    h = conditional_entropy_bits(p_zu)

    worst_plain = worst_group = np.inf
    plain_pair = group_pair = (0.0, 0.0)
    for c in maps:
        diff = np.abs(c[:, None] - c[None, :])
        off = dists > 0
        lip = float((diff[off] / dists[off]).max()) if off.any() else 0.0
        rhs = delta - 2.0 * R * lip * adv
        risk = 1.0 - float(p_zy[rows, c].sum())
        wrong = p[rows, 1 - c, :]  # mass where y != C(z), by u
        group_risk = float(wrong[:, 0].sum() / pu[0] + wrong[:, 1].sum() / pu[1])
        if risk - rhs < worst_plain:
            worst_plain, plain_pair = risk - rhs, (risk, rhs)
        if group_risk - rhs < worst_group:
            worst_group, group_pair = group_risk - rhs, (group_risk, rhs)

    rep = BoundReport(delta_y_u=delta, R=R, h_u_given_z_bits=h, advantage=adv,
                      risk=plain_pair[0], C_L=float("nan"))
    rep.checks = [
        TheoremCheck("utility-privacy", plain_pair[0], plain_pair[1], "lower", "exact", tol=1e-12),
        TheoremCheck("utility-privacy-groups", group_pair[0], group_pair[1], "lower", "exact", tol=1e-12),
        TheoremCheck("inference-cap", best_acc, privacy_cap(h), "upper", "exact", tol=1e-12),
    ]
    return rep


# ---- exports ------------------------------------------------------------------------

def pca_2d(z: np.ndarray) -> np.ndarray:
    """Project onto the top two principal components (zero-padded below rank 2)."""
    zc = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(zc, full_matrices=False)
    proj = zc @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(z), 2 - proj.shape[1]))])
    return proj


def export_projection(bundle: ModelBundle, dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``pc1,pc2,y,u`` for the test split plus the full representation table."""
    path = Path(path)
    x, y, u = dataset.split("test")
    z = bundle.f.predict(x)
    proj = pca_2d(z)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc1", "pc2", "y", "u"])
        for (a, b), yi, ui in zip(proj, y, u):
            w.writerow([repr(float(a)), repr(float(b)), int(yi), int(ui)])
    rep_path = path.with_name(path.stem + "_rep.csv")
    with rep_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{i}" for i in range(z.shape[1])] + ["y", "u"])
        for zi, yi, ui in zip(z, y, u):
            w.writerow([repr(float(v)) for v in zi] + [int(yi), int(ui)])
    return path, rep_path
