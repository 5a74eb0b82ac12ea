"""Small MLPs on top of the autodiff core, SGD with momentum, and a text
checkpoint format that round-trips float64 weights exactly."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass
class MlpParams:
    layer_dims: list[int]
    activation: str
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_dims) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError(f"expected {n} weight/bias pairs")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[k], self.layer_dims[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ValueError(f"layer {k}: weight {w.shape} / bias {b.shape} do not match {want}")

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            self.activation,
            [w.detach() for w in self.weights],
            [b.detach() for b in self.biases],
        )

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


def init_mlp(layer_dims: Sequence[int], activation: str, rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(Tensor(rng.uniform(-bound, bound, size=fan_out)))
    return MlpParams(list(layer_dims), activation, weights, biases)


def zero_mlp(layer_dims: Sequence[int], activation: str = "tanh") -> MlpParams:
    dims = list(layer_dims)
    return MlpParams(
        dims,
        activation,
        [Tensor(np.zeros((a, b))) for a, b in zip(dims[:-1], dims[1:])],
        [Tensor(np.zeros(b)) for b in dims[1:]],
    )


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    """Raw logits; the last layer has no activation."""
    if x.value.ndim != 2 or x.shape[1] != params.in_dim:
        raise ad.AutodiffError("mlp_forward", f"input shape {x.shape} does not match width {params.in_dim}")
    act = ACTIVATIONS[params.activation]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if k < last:
            h = act(h)
    return h


@dataclass
class SGD:
    """w <- w - lr * v,  v <- momentum * v + grad.  Velocities persist across steps."""

    params: list[Tensor]
    lr: float
    momentum: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.velocity:
            self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Mapping[Tensor, np.ndarray] | Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if isinstance(grads, Mapping):
            grads = [grads.get(p, np.zeros_like(p.value)) for p in self.params]
        for p, v, g in zip(self.params, self.velocity, grads):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient passed to SGD")
            v *= self.momentum
            v += g
            p.value -= lr * v


def sgd_step(params: MlpParams, grads, lr: float, momentum: float = 0.0, state: SGD | None = None) -> SGD:
    """One SGD step on ``params``.  Pass the returned optimizer back in to keep
    momentum across calls."""
    opt = state or SGD(params.parameters(), lr, momentum)
    opt.step(grads, lr)
    return opt


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(a * a) for a in arrays])))


# -- checkpoints ---------------------------------------------------------------


def _fmt_row(row: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in row)


def dumps_mlp(params: MlpParams) -> str:
    lines = [
        "layer_dims " + " ".join(str(d) for d in params.layer_dims),
        f"activation {params.activation}",
    ]
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines.append(f"weight {k} {w.shape[0]} {w.shape[1]}")
        lines += [_fmt_row(r) for r in w.value]
        lines.append(f"bias {k} {b.shape[0]}")
        lines.append(_fmt_row(b.value))
    return "\n".join(lines) + "\n"


def loads_mlp(text: str) -> MlpParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    it = iter(lines)
    head = next(it).split()
    if head[0] != "layer_dims":
        raise ValueError("checkpoint must start with layer_dims")
    dims = [int(v) for v in head[1:]]
    act = next(it).split()[1]
    weights, biases = [], []
    for k in range(len(dims) - 1):
        tag, idx, rows, cols = next(it).split()
        if tag != "weight" or int(idx) != k:
            raise ValueError(f"expected weight block {k}")
        w = np.array([[float(v) for v in next(it).split()] for _ in range(int(rows))]).reshape(int(rows), int(cols))
        tag, idx, n = next(it).split()
        if tag != "bias" or int(idx) != k:
            raise ValueError(f"expected bias block {k}")
        b = np.array([float(v) for v in next(it).split()]).reshape(int(n))
        weights.append(Tensor(w))
        biases.append(Tensor(b))
    return MlpParams(dims, act, weights, biases)


# -- gradient-check suite ------------------------------------------------------


def random_mlp_grad_checks(trials: int = 50, seed: int = 0, eps: float = 1e-5) -> list[ad.GradCheckReport]:
    """Finite-difference checks of a mean-squared MLP loss on random small networks."""
    from .rng import substream

    rng = substream(seed, "init")
    reports = []
    for _ in range(trials):
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(1, 5, size=depth + 1)]
        act = ("tanh", "relu")[int(rng.integers(0, 2))]
        params = init_mlp(dims, act, rng)
        x = rng.normal(size=(3, dims[0]))
        y = rng.normal(size=(3, dims[-1]))

        def loss(ts, dims=dims, act=act, x=x, y=y):
            n = len(ts) // 2
            p = MlpParams(dims, act, ts[0::2][:n], ts[1::2][:n])
            r = ad.add(mlp_forward(p, Tensor(x)), Tensor(-y))
            return ad.mean(ad.mul(r, r))

        reports.append(ad.grad_check(loss, [t.value for t in params.parameters()], eps))
    return reports
