"""Domain-adversarial training with smoothed environment labels, plus the
diagnostic experiments built on it (gradient norms, bound checks, label-noise
and partial-label sweeps)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError, Tape, Tensor
from .data import DomainDataset, partial_labels, random_partition
from .nn import ACTIVATIONS, SGD, MlpParams, dumps_mlp, global_norm, init_mlp, loads_mlp, mlp_forward
from .rng import substream
from .smoothing import (
    InfeasibleSmoothing,
    NoiseModel,
    SmoothingSpec,
    anneal_gamma,
    els_discriminator_loss,
    flip_labels,
    optimal_gamma_under_noise,
)

SCHEDULES = ("alternating", "grl")
PROBE_POINTS = 256
METRIC_KEYS = (
    "step",
    "gamma",
    "cls_loss",
    "adv_loss",
    "encoder_adv_grad_norm",
    "source_acc",
    "target_acc",
    "domain_acc",
    "diverged",
)


class EmptyDomainWarning(UserWarning):
    """A requested domain has no points and was left out of the accuracy map."""


# -- model ---------------------------------------------------------------------


@dataclass
class Model:
    """Encoder g, class head and domain discriminator, both reading g's features."""

    encoder: MlpParams
    classifier: MlpParams
    discriminator: MlpParams

    def __post_init__(self):
        f = self.encoder.out_dim
        if self.classifier.in_dim != f or self.discriminator.in_dim != f:
            raise ValueError("classifier and discriminator must read the encoder's output width")

    @property
    def num_domains(self) -> int:
        return self.discriminator.out_dim

    def features(self, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.encoder.activation](mlp_forward(self.encoder, x))

    def class_logits(self, x) -> np.ndarray:
        return mlp_forward(self.classifier, self.features(Tensor(x))).value

    def predict_class(self, x) -> np.ndarray:
        return np.argmax(self.class_logits(x), axis=1)

    def domain_probs(self, x) -> np.ndarray:
        return ad.softmax_rows(mlp_forward(self.discriminator, self.features(Tensor(x)))).value

    def dumps(self) -> str:
        parts = []
        for name in ("encoder", "classifier", "discriminator"):
            parts.append(f"[{name}]\n" + dumps_mlp(getattr(self, name)))
        return "".join(parts)

    @classmethod
    def loads(cls, text: str) -> "Model":
        blocks, name = {}, None
        for line in text.splitlines():
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1]
                blocks[name] = []
            elif name is not None:
                blocks[name].append(line)
        return cls(**{k: loads_mlp("\n".join(v)) for k, v in blocks.items()})


def build_model(in_dim, num_classes, num_domains, hidden=32, feature_dim=16, disc_hidden=32, activation="tanh", seed=0):
    rng = substream(seed, "init")
    enc = init_mlp([in_dim, hidden, feature_dim], activation, rng)
    clf = init_mlp([feature_dim, num_classes], activation, rng)
    disc_dims = [feature_dim, disc_hidden, num_domains] if disc_hidden else [feature_dim, num_domains]
    disc = init_mlp(disc_dims, activation, rng)
    return Model(enc, clf, disc)


# -- losses and gradients --------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ad.scale(ad.sum(ad.mul(Tensor(onehot), ad.log_softmax_rows(logits))), -1.0 / len(labels))


def _grads(tape: Tape, loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    g = tape.backward(loss)
    return [g.get(p, np.zeros_like(p.value)) for p in params]


def adversarial_encoder_grads(model: Model, x, env, spec: SmoothingSpec, lam: float, reverse: bool = False):
    """Gradients of lam * els_loss w.r.t. (encoder params, discriminator params).

    With ``reverse`` the loss is routed through a gradient-reversal layer, so
    the encoder part comes back negated; otherwise it is the plain gradient.
    Also returns the unweighted loss value.
    """
    enc_p, disc_p = model.encoder.parameters(), model.discriminator.parameters()
    with Tape() as tape:
        z = model.features(Tensor(x))
        if reverse:
            z = ad.gradient_reversal(z, 1.0)
        loss = els_discriminator_loss(mlp_forward(model.discriminator, z), env, spec)
        weighted = ad.scale(loss, lam)
    grads = _grads(tape, weighted, enc_p + disc_p)
    return grads[: len(enc_p)], grads[len(enc_p) :], loss.item()


def adv_grad_norm(model: Model, x, env, spec: SmoothingSpec, lam: float) -> float:
    """L2 norm of d(lam * els_loss)/d(encoder params) on one batch."""
    if len(x) == 0:
        raise ValueError("batch must be nonempty")
    if lam == 0:
        return 0.0
    enc, _, _ = adversarial_encoder_grads(model, x, env, spec, lam)
    norm = global_norm(enc)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite adversarial gradient")
    return norm


# -- configuration and logging ------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    schedule: str = "grl"
    n_d: int = 1
    n_e: int = 1
    lam: float = 1.0
    lr: float = 0.02
    momentum: float = 0.9
    steps: int = 3000
    batch_size: int = 64
    seed: int = 0
    smoothing: SmoothingSpec = SmoothingSpec()
    eval_every: int = 100
    hidden: int = 32
    feature_dim: int = 16
    disc_hidden: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.n_d < 1 or self.n_e < 1:
            raise ValueError("n_d and n_e must be at least 1")
        if self.steps < 1 or self.eval_every < 1:
            raise ValueError("steps and eval_every must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def gamma_at(self, t: int):
        s = self.smoothing
        if s.mode == "none":
            return 1
        if s.anneal:
            return anneal_gamma(t, self.steps, s.num_domains)
        return s.gamma

    def spec_at(self, t: int) -> SmoothingSpec:
        s = self.smoothing
        return s if s.mode == "none" or not s.anneal else s.with_gamma(self.gamma_at(t))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["smoothing"] = self.smoothing.to_dict()
        return d


@dataclass
class MetricLog:
    records: list[dict] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)  # one per training step
    gammas: list[float] = field(default_factory=list)  # gamma(t) for t = 0..T
    diverged: bool = False

    def add(self, **rec) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("metric steps must increase")
        self.records.append({k: rec.get(k) for k in METRIC_KEYS})

    def last(self) -> dict:
        return self.records[-1]

    def to_jsonl(self) -> str:
        # strict JSON: losses not yet computed (or non-finite) become null
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return "".join(json.dumps({k: clean(v) for k, v in r.items()}, allow_nan=False) + "\n" for r in self.records)

    def series_csv(self) -> str:
        lines = ["step,gamma,encoder_adv_grad_norm"]
        for t, g in enumerate(self.gammas):
            n = self.grad_norms[t] if t < len(self.grad_norms) else ""
            lines.append(f"{t},{float(g)!r},{n!r}" if n != "" else f"{t},{float(g)!r},")
        return "\n".join(lines) + "\n"


# -- batching and evaluation ------------------------------------------------------------


class BalancedSampler:
    """Draws equal counts from every group on each call."""

    def __init__(self, groups: np.ndarray, keys, per_group: int, rng: np.random.Generator):
        self.index = [np.flatnonzero(groups == k) for k in keys]
        self.index = [ix for ix in self.index if len(ix)]
        if not self.index:
            raise ValueError("no nonempty group to sample from")
        self.per_group = max(1, per_group)
        self.rng = rng

    def draw(self) -> np.ndarray:
        return np.concatenate([ix[self.rng.integers(0, len(ix), self.per_group)] for ix in self.index])


def evaluate(model, ds: DomainDataset, domains) -> dict[int, float]:
    """Per-domain class accuracy; empty domains are skipped with a warning."""
    out = {}
    pred = model.predict_class(ds.x) if len(ds) else np.zeros(0, dtype=np.int64)
    for d in domains:
        m = ds.env_true == d
        if not m.any():
            warnings.warn(f"domain {d} has no points; excluded", EmptyDomainWarning, stacklevel=2)
            continue
        out[int(d)] = float(np.mean(pred[m] == ds.y[m]))
    return out


def _mean(acc: dict) -> float:
    return float(np.mean(list(acc.values()))) if acc else float("nan")


# -- training ----------------------------------------------------------------------------


def train_dat(ds: DomainDataset, config: TrainConfig, model: Model | None = None) -> tuple[Model, MetricLog]:
    """Train encoder, classifier and discriminator on ``ds``.

    The class loss uses labelled source points; the discriminator sees every
    point with its observed environment label.
    """
    spec = config.smoothing
    if spec.num_domains != ds.num_domains:
        raise ValueError(f"smoothing has M = {spec.num_domains} but the dataset has {ds.num_domains} environments")
    num_classes = int(ds.y.max()) + 1 if len(ds) else 2
    num_classes = max(num_classes, 2)
    if model is None:
        model = build_model(
            ds.dim, num_classes, ds.num_domains, config.hidden, config.feature_dim, config.disc_hidden, config.activation, config.seed
        )
    elif not all(np.isfinite(p.value).all() for net in (model.encoder, model.classifier, model.discriminator) for p in net.parameters()):
        raise ValueError("initial model has non-finite parameters")
    rng = substream(config.seed, "batch")
    m = ds.num_domains
    disc_sampler = BalancedSampler(ds.env_observed, range(m), config.batch_size // m, rng)
    src = ds.source_domains
    cls_sampler = BalancedSampler(ds.env_true, src, config.batch_size // len(src), rng)

    enc_p, clf_p, disc_p = model.encoder.parameters(), model.classifier.parameters(), model.discriminator.parameters()
    opt_enc = SGD(enc_p + clf_p, config.lr, config.momentum)
    opt_disc = SGD(disc_p, config.lr, config.momentum)
    log = MetricLog()
    lam = config.lam
    cls_loss = adv_loss = float("nan")

    def record(t, spec_t):
        src_acc = evaluate(model, ds, src)
        tgt_acc = evaluate(model, ds, ds.target_domains)
        log.add(
            step=t,
            gamma=float(config.gamma_at(t)),
            cls_loss=cls_loss,
            adv_loss=adv_loss,
            encoder_adv_grad_norm=log.grad_norms[-1] if log.grad_norms else None,
            source_acc=_mean(src_acc),
            target_acc=_mean(tgt_acc),
            domain_acc={str(k): v for k, v in {**src_acc, **tgt_acc}.items()},
            diverged=log.diverged,
        )

    def class_grads():
        ib = cls_sampler.draw()
        with Tape() as tape:
            loss = cross_entropy(mlp_forward(model.classifier, model.features(Tensor(ds.x[ib]))), ds.y[ib])
        return _grads(tape, loss, enc_p + clf_p), loss.item()

    record(0, config.spec_at(0))
    try:
        for t in range(config.steps):
            spec_t = config.spec_at(t)
            log.gammas.append(config.gamma_at(t))
            if config.schedule == "alternating":
                for _ in range(config.n_d):
                    ib = disc_sampler.draw()
                    z = model.features(Tensor(ds.x[ib])).detach()  # no path back into the encoder
                    with Tape() as tape:
                        loss = els_discriminator_loss(mlp_forward(model.discriminator, z), ds.env_observed[ib], spec_t)
                    opt_disc.step(_grads(tape, loss, disc_p))
                for _ in range(config.n_e):
                    g_cls, cls_loss = class_grads()
                    ib = disc_sampler.draw()
                    g_adv, _, adv_loss = adversarial_encoder_grads(model, ds.x[ib], ds.env_observed[ib], spec_t, lam)
                    # encoder ascends the discriminator loss: cls - lam * els
                    step = [g - a for g, a in zip(g_cls, g_adv)] + g_cls[len(enc_p) :]
                    opt_enc.step(step)
            else:
                g_cls, cls_loss = class_grads()
                ib = disc_sampler.draw()
                g_adv, g_disc, adv_loss = adversarial_encoder_grads(
                    model, ds.x[ib], ds.env_observed[ib], spec_t, lam, reverse=True
                )
                step = [g + a for g, a in zip(g_cls, g_adv)] + g_cls[len(enc_p) :]
                opt_enc.step(step)
                opt_disc.step(g_disc)
            log.grad_norms.append(global_norm(g_adv))
            if not (math.isfinite(cls_loss) and math.isfinite(adv_loss) and math.isfinite(log.grad_norms[-1])):
                raise FloatingPointError("non-finite loss")
            if (t + 1) % config.eval_every == 0 and t + 1 < config.steps:
                record(t + 1, spec_t)
    except (AutodiffError, FloatingPointError):
        log.diverged = True
    if not log.diverged:
        log.gammas.append(config.gamma_at(config.steps))
        record(config.steps, config.spec_at(config.steps))
    else:
        log.records.append({**log.records[-1], "diverged": True, "step": log.records[-1]["step"] + 1})
    return model, log


# -- gradient-vanishing diagnostics ----------------------------------------------------------


@dataclass
class GradientBoundReport:
    gamma: float
    disc_accuracy: float
    measured_grad_norm: float
    C_hat: float
    bound: float
    inconclusive: bool = False

    @property
    def within_bound(self) -> bool:
        return self.measured_grad_norm <= self.bound

    def to_dict(self) -> dict:
        d = asdict(self)
        d["within_bound"] = self.within_bound
        return d


def encoder_jacobian_norm(encoder: MlpParams, x: np.ndarray, iters: int = 20, seed: int = 0) -> float:
    """Spectral norm of d g(theta; x) / d theta for one input via power iteration on J J^T.

    J^T v comes from one backward pass of <g(x), v>; the rows of J come from
    one backward pass per feature coordinate.
    """
    params = encoder.parameters()
    act = ACTIVATIONS[encoder.activation]
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    f = encoder.out_dim

    def vjp(v):
        with Tape() as tape:
            out = ad.sum(ad.mul(act(mlp_forward(encoder, Tensor(x))), Tensor(v.reshape(1, f))))
        return np.concatenate([g.ravel() for g in _grads(tape, out, params)])

    rows = np.stack([vjp(np.eye(f)[k]) for k in range(f)])  # J, shape (f, n_params)
    v = substream(seed, "init").standard_normal(f)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = rows @ (rows.T @ v)  # J J^T v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return math.sqrt(lam)


def estimate_C(encoder: MlpParams, xs: np.ndarray, iters: int = 20) -> float:
    return max(encoder_jacobian_norm(encoder, xi, iters) for xi in xs)


def gradient_bound_check(
    ds: DomainDataset,
    gammas,
    budget: int = 5000,
    seed: int = 0,
    lr: float = 2.0,
    hidden: int = 16,
    feature_dim: int = 4,
    n_probe: int = 1000,
    activation: str = "tanh",
) -> list[GradientBoundReport]:
    """Freeze a random encoder, train a linear discriminator per gamma, then
    measure the encoder's adversarial gradient against the (1 - gamma) bound.

    The discriminator head is zero-initialised, so at gamma = 1/M (uniform
    targets) it never leaves the uniform prediction.  The adversarial term is
    the sum over domains of the per-domain mean loss.
    """
    m = ds.num_domains
    enc = init_mlp([ds.dim, hidden, feature_dim], activation, substream(seed, "init"))
    model = Model(enc, init_mlp([feature_dim, 2], activation, substream(seed, "init")), _zero_linear(feature_dim, m))
    z = model.features(Tensor(ds.x)).value
    idx = substream(seed, "batch").permutation(len(ds))[:n_probe]
    c_hat = estimate_C(enc, ds.x[idx])
    reports = []
    for gamma in gammas:
        spec = SmoothingSpec(gamma, "two_sided", False, m)
        disc = _zero_linear(feature_dim, m)
        opt = SGD(disc.parameters(), lr, 0.9)
        for _ in range(budget):
            with Tape() as tape:
                loss = els_discriminator_loss(mlp_forward(disc, Tensor(z)), ds.env_observed, spec)
            opt.step(_grads(tape, loss, disc.parameters()))
        model.discriminator = disc
        probs = model.domain_probs(ds.x)
        acc = float(np.mean(np.argmax(probs, axis=1) == ds.env_observed))
        enc_g, _, _ = adversarial_encoder_grads(model, ds.x, ds.env_observed, spec, float(m))
        measured = global_norm(enc_g)
        reports.append(
            GradientBoundReport(
                gamma=float(gamma),
                disc_accuracy=acc,
                measured_grad_norm=measured,
                C_hat=c_hat,
                bound=(2 if m == 2 else m) * (1 - float(gamma)) * c_hat,
                # the accuracy gate only applies when there is a preferred domain to predict
                inconclusive=bool(gamma > 1 / m and acc < 0.99),
            )
        )
    return reports


def _zero_linear(in_dim: int, out_dim: int) -> MlpParams:
    return MlpParams([in_dim, out_dim], "tanh", [Tensor(np.zeros((in_dim, out_dim)))], [Tensor(np.zeros(out_dim))])


# -- label-noise sweep -------------------------------------------------------------------------


@dataclass
class NoiseCell:
    e: float
    variant: str  # "hard" (gamma = 1), "corrected" (optimal gamma), "target" (gamma*)
    gamma: float | None
    seed: int
    distance: float | None
    infeasible: bool = False


def _train_probe_discriminator(x, env, gamma, steps, lr, hidden, seed, probe) -> np.ndarray:
    disc = init_mlp([x.shape[1], hidden, 2], "tanh", substream(seed, "init"))
    opt = SGD(disc.parameters(), lr, 0.9)
    spec = SmoothingSpec(gamma, "two_sided", False, 2)
    for _ in range(steps):
        with Tape() as tape:
            loss = els_discriminator_loss(mlp_forward(disc, Tensor(x)), env, spec)
        opt.step(_grads(tape, loss, disc.parameters()))
    return ad.softmax_rows(mlp_forward(disc, Tensor(probe))).value[:, 0]


def noise_sweep(ds: DomainDataset, gamma_star: float, e_grid, seeds=(0, 1, 2), steps=1500, lr=0.5, hidden=8) -> list[NoiseCell]:
    """Train discriminators on flipped environment labels and measure their
    probe-grid L2 distance to a clean reference trained at gamma*.

    The discriminator reads raw inputs.  The probe grid spans the data range of
    the first coordinate (other coordinates held at their mean).
    """
    if ds.num_domains != 2:
        raise ValueError("noise_sweep needs binary environment labels")
    lo, hi = float(ds.x[:, 0].min()), float(ds.x[:, 0].max())
    probe = np.tile(ds.x.mean(axis=0), (PROBE_POINTS, 1))
    probe[:, 0] = np.linspace(lo, hi, PROBE_POINTS)
    cells = []
    for seed in seeds:
        ref = _train_probe_discriminator(ds.x, ds.env_observed, gamma_star, steps, lr, hidden, seed, probe)
        for e in e_grid:
            noisy = flip_labels(ds.env_observed, NoiseModel(e, seed))
            try:
                g_opt = optimal_gamma_under_noise(gamma_star, e)
            except InfeasibleSmoothing:
                g_opt = None
            for variant, gamma in (("hard", 1.0), ("corrected", g_opt), ("target", gamma_star)):
                if gamma is None:
                    cells.append(NoiseCell(float(e), variant, None, seed, None, infeasible=True))
                    continue
                f = _train_probe_discriminator(ds.x, noisy, gamma, steps, lr, hidden, seed, probe)
                cells.append(NoiseCell(float(e), variant, float(gamma), seed, float(np.linalg.norm(f - ref))))
    return cells


def median_distance(cells, e: float, variant: str) -> float:
    vals = [c.distance for c in cells if c.e == e and c.variant == variant and c.distance is not None]
    return float(np.median(vals)) if vals else float("nan")


# -- partial labels -------------------------------------------------------------------------------


@dataclass
class AccuracyRow:
    setting: str  # "fraction=<f>" or "partition=<M'>"
    config: str
    mean: float
    std: float
    accs: list[float]


def partial_label_experiment(
    ds: DomainDataset, fractions, configs: dict[str, TrainConfig], seeds=(0, 1, 2), m_prime: int = 2
) -> list[AccuracyRow]:
    """Target accuracy for each (label corruption, config) pair over seeds.

    One row per fraction per config plus a random-partition row per config.
    Smoothing specs are resized to the number of observed environments.
    """
    for f in fractions:
        if not 0 <= f <= 1:
            raise ValueError("fractions must lie in [0, 1]")
    settings = [(f"fraction={f:g}", lambda s, f=f: partial_labels(ds, f, s)) for f in fractions]
    settings.append((f"partition={m_prime}", lambda s: random_partition(ds, m_prime, s)))
    rows = []
    for name, corrupt in settings:
        for cname, cfg in configs.items():
            accs = []
            for s in seeds:
                data = corrupt(s)
                spec = _resize_spec(cfg.smoothing, data.num_domains)
                _, log = train_dat(data, replace(cfg, seed=s, smoothing=spec))
                accs.append(log.last()["target_acc"])
            rows.append(AccuracyRow(name, cname, float(np.mean(accs)), float(np.std(accs)), accs))
    return rows


def _resize_spec(spec: SmoothingSpec, m: int) -> SmoothingSpec:
    if spec.num_domains == m:
        return spec
    gamma = spec.gamma if spec.mode == "none" or spec.anneal else max(spec.gamma, 1 / m)
    return SmoothingSpec(gamma, spec.mode, spec.anneal, m)


def grad_norm_variance(series, tail: float = 0.5) -> float:
    """Variance of successive differences of a gradient-norm series over its last ``tail`` share."""
    s = np.asarray(series, dtype=np.float64)
    s = s[int(len(s) * (1 - tail)) :]
    if len(s) < 3:
        raise ValueError("need at least three points in the tail")
    return float(np.var(np.diff(s)))
