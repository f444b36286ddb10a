"""MLPs, initialization, SGD updates and the plain-text checkpoint format."""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid")
OUTPUT_ACTIVATIONS = ("none", "sigmoid", "softmax-logits")

CKPT_HEADER = "arprl-ckpt v1"


class MissingGradError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Mlp:
    """Fully connected network; weight i has shape (sizes[i], sizes[i+1])."""

    def __init__(self, sizes, hidden: str = "relu", output: str = "none", name: str = ""):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1 and at least two entries, got {sizes}")
        if hidden not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {hidden!r}")
        if output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = sizes
        self.hidden = hidden
        self.output = output
        self.name = name
        self.weights = [Tensor(np.zeros((a, b)), requires_grad=True)
                        for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in sizes[1:]]

    def __repr__(self) -> str:
        return f"Mlp({self.name or 'net'}: {'->'.join(map(str, self.sizes))})"

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ad.ShapeError(f"{self!r} expects (B, {self.in_dim}) input, got {h.shape}")
        act = getattr(ad, self.hidden)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = act(h)
        if self.output == "sigmoid":
            h = ad.sigmoid(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Untaped forward pass on raw arrays."""
        return self(Tensor(x)).data

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        for p, a in zip(self.parameters(), arrays):
            if p.data.shape != np.shape(a):
                raise ad.ShapeError(f"state shape {np.shape(a)} does not match {p.data.shape}")
            p.data = np.array(a, dtype=np.float64)

    def clone(self) -> "Mlp":
        other = Mlp(self.sizes, self.hidden, self.output, self.name)
        other.load_state(self.state())
        return other


@contextmanager
def frozen(*nets: Mlp):
    """Treat the nets' parameters as constants: no taping, no gradient accumulation.

    Call ``backward`` inside the block; leaf flags are read again at that point.
    """
    params = [p for net in nets for p in net.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def init_params(net: Mlp, seed: int) -> None:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    for w, b in zip(net.weights, net.biases):
        fan_in, fan_out = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w.data = rng.uniform(-bound, bound, size=w.shape)
        b.data = np.zeros(b.shape)
        w.grad = b.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale grads in place so their global l2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def sgd_step(net: Mlp, lr: float, direction: str = "descend") -> None:
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    params = net.parameters()
    if any(p.grad is None for p in params):
        raise MissingGradError(f"{net!r} has parameters without gradients; run backward first")
    for p in params:
        if direction == "descend":
            p.data = p.data - lr * p.grad
        else:
            p.data = p.data + lr * p.grad
        p.grad = np.zeros_like(p.data)


# ---- default architectures ---------------------------------------------------

ARCHITECTURES = {
    # kind: (representation hidden, representation dim, privacy hidden, critic hidden)
    "toy": (10, 2, 5, 64),
    "tabular": (12, 3, 16, 64),
}


def attribute_width(num_attr_values: int) -> int:
    """Width of the attribute embedding fed to the critics."""
    return 1 if num_attr_values == 2 else num_attr_values


@dataclass
class ModelBundle:
    f: Mlp
    g: Mlp
    t: Mlp
    h: Mlp
    q: Mlp | None = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def networks(self) -> dict[str, Mlp]:
        nets = {"f": self.f, "g": self.g, "t": self.t, "h": self.h}
        if self.q is not None:
            nets["q"] = self.q
        return nets

    @property
    def rep_dim(self) -> int:
        return self.f.out_dim


def build_default_networks(kind: str, input_dim: int, num_attr_values: int,
                           num_classes: int, with_task_head: bool = False) -> ModelBundle:
    if kind not in ARCHITECTURES:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(ARCHITECTURES)}")
    if min(input_dim, num_attr_values, num_classes) < 1:
        raise ValueError("dimensions must be >= 1")
    rep_hidden, rep_dim, priv_hidden, critic_hidden = ARCHITECTURES[kind]
    critic_in = input_dim + rep_dim + attribute_width(num_attr_values)
    bundle = ModelBundle(
        f=Mlp([input_dim, rep_hidden, rep_dim], name="f"),
        g=Mlp([rep_dim, priv_hidden, num_attr_values], output="softmax-logits", name="g"),
        # scalar critic output; Table-style widths 2/3 are read as hidden sizes
        t=Mlp([critic_in, critic_hidden, 1], name="t"),
        h=Mlp([critic_in, critic_hidden, 1], name="h"),
        q=Mlp([rep_dim, num_classes], output="softmax-logits", name="q") if with_task_head else None,
        meta={"kind": kind, "input_dim": input_dim, "num_attr_values": num_attr_values,
              "num_classes": num_classes},
    )
    return bundle


def init_bundle(bundle: ModelBundle, seed: int) -> None:
    ss = np.random.SeedSequence(seed)
    for net, child in zip(bundle.networks().values(), ss.spawn(len(bundle.networks()))):
        init_params(net, int(child.generate_state(1, dtype=np.uint64)[0]))


# ---- checkpoint io -------------------------------------------------------------

def _fmt(arr: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in arr.reshape(-1))


def save_checkpoint(bundle: ModelBundle, path) -> None:
    lines = [CKPT_HEADER,
             "config " + json.dumps(bundle.config, sort_keys=True),
             "meta " + json.dumps(bundle.meta, sort_keys=True)]
    for name, net in bundle.networks().items():
        lines.append(f"net {name} {net.hidden} {net.output} " + " ".join(map(str, net.sizes)))
        for p in net.parameters():
            lines.append(_fmt(p.data))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CKPT_HEADER:
        raise CheckpointError(f"{path}: missing '{CKPT_HEADER}' header")
    config, meta, nets = {}, {}, {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        if key == "config":
            config = json.loads(rest)
        elif key == "meta":
            meta = json.loads(rest)
        elif key == "net":
            parts = rest.split()
            name, hidden, output, sizes = parts[0], parts[1], parts[2], [int(s) for s in parts[3:]]
            net = Mlp(sizes, hidden, output, name)
            arrays = []
            for p in net.parameters():
                vals = np.array([float(v) for v in lines[i].split()], dtype=np.float64)
                i += 1
                if vals.size != p.data.size:
                    raise CheckpointError(f"{path}: net {name} expected {p.data.size} values, got {vals.size}")
                arrays.append(vals.reshape(p.data.shape))
            net.load_state(arrays)
            nets[name] = net
        else:
            raise CheckpointError(f"{path}: unexpected line {line[:40]!r}")
    missing = {"f", "g", "t", "h"} - set(nets)
    if missing:
        raise CheckpointError(f"{path}: missing networks {sorted(missing)}")
    return ModelBundle(nets["f"], nets["g"], nets["t"], nets["h"], nets.get("q"), config, meta)
