"""Command-line experiment runner.

Every subcommand takes flat ``key=value`` settings from an optional config file,
overridden by flags, and writes a ``resolved-config.txt`` next to its outputs.
Exit codes: 0 success, 1 validation or usage error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import convergence as cv
from . import divergence as dv
from . import trainer as tr
from .autodiff import grad_check
from .data import (
    CircleConfig,
    gen_circle,
    gen_disjoint_support,
    gen_two_gaussians,
    partial_labels,
    random_partition,
)
from .nn import random_mlp_grad_checks
from .rng import substream
from .smoothing import NoiseModel, SmoothingSpec, els_discriminator_loss, flip_labels

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
RESOLVED = "resolved-config.txt"


class UsageError(Exception):
    pass


# -- value parsers ----------------------------------------------------------------


def _floats(s: str) -> list[float]:
    return [float(v) for v in str(s).split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in str(s).split(",") if v.strip()]


def _gamma(s):
    return "anneal" if str(s).strip() == "anneal" else float(s)


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- option tables ----------------------------------------------------------------------

COMMON = {
    "seed": (int, 0, "root seed for every random stream"),
    "out": (str, "out", "output directory"),
}

DATA = {
    "dataset": (str, "circle", "circle | gaussians | disjoint"),
    "n_domains": (int, 30, "circle: number of domains"),
    "points_per_domain": (int, 100, "circle: points per domain (even)"),
    "ring_radius": (float, 1.0, "circle: ring radius r"),
    "radial_noise": (float, 0.05, "circle: radial noise sigma_r"),
    "label_margin": (float, 0.2, "circle: class margin m"),
    "n_source": (int, 6, "circle: number of source domains"),
    "mu_s": (_floats, [-1.0], "gaussians: source mean"),
    "mu_t": (_floats, [1.0], "gaussians: target mean"),
    "sigma": (float, 1.0, "gaussians: standard deviation"),
    "n_per_domain": (int, 500, "gaussians/disjoint: points per domain"),
    "offset": (float, 1.0, "disjoint: gap between supports"),
    "fraction_known": (float, 1.0, "share of points keeping their true environment"),
    "partition": (int, 0, "if >= 2, replace environments by a random partition"),
    "noise_rate": (float, 0.0, "binary environment flip probability"),
}

TRAIN = {
    "gamma": (_gamma, 1.0, "smoothing gamma, or 'anneal'"),
    "mode": (str, "two_sided", "two_sided | one_sided | none"),
    "schedule": (str, "grl", "alternating | grl"),
    "lam": (float, 1.0, "adversarial weight lambda"),
    "lr": (float, 0.02, "learning rate"),
    "momentum": (float, 0.9, "SGD momentum"),
    "steps": (int, 3000, "training steps T"),
    "batch_size": (int, 64, "batch size"),
    "nd": (int, 1, "discriminator steps per round"),
    "ne": (int, 1, "encoder steps per round"),
    "eval_every": (int, 100, "metric interval"),
    "hidden": (int, 32, "encoder hidden width"),
    "feature_dim": (int, 16, "feature width"),
    "disc_hidden": (int, 32, "discriminator hidden width (0 for linear)"),
}

COMMANDS = {
    "gen": ("write a synthetic dataset as CSV", {**DATA}),
    "oracle": (
        "divergence identities at the closed-form optimal discriminator",
        {
            "gamma": (_floats, [1.0], "comma-separated gammas"),
            "mode": (str, "two_sided", "two_sided | one_sided | multi"),
            "mus": (_floats, [0.0, 1.0], "Gaussian means (one per domain)"),
            "sigma": (float, 1.0, "Gaussian standard deviation"),
            "lo": (float, -8.0, "grid lower end"),
            "hi": (float, 9.0, "grid upper end"),
            "n": (int, 4096, "grid cells"),
        },
    ),
    "converge": (
        "two-parameter Dirac game: Jacobian spectrum and trajectory",
        {
            "xs": (float, 1.0, "source point"),
            "xt": (float, -1.0, "target point"),
            "eta": (float, 0.1, "step size"),
            "nd": (int, 1, "discriminator steps per round"),
            "ne": (int, 1, "encoder steps per round"),
            "gamma": (float, 1.0, "smoothing gamma in (0.5, 1]"),
            "scheme": (str, "alternating", "alternating | simultaneous"),
            "order": (str, "disc_first", "alternating order for the trajectory"),
            "steps": (int, 1000, "rounds to simulate"),
            "init_e": (float, 0.01, "initial encoder parameter"),
            "init_d": (float, 0.01, "initial discriminator parameter"),
        },
    ),
    "train": ("domain-adversarial training", {**DATA, **TRAIN}),
    "noise-sweep": (
        "discriminators under flipped environment labels",
        {
            "gamma_star": (float, 0.7, "clean-label smoothing target"),
            "e_grid": (_floats, [0.0, 0.1, 0.2], "noise rates"),
            "seeds": (_ints, [0, 1, 2], "seeds"),
            "steps": (int, 1500, "training steps per discriminator"),
            "lr": (float, 0.5, "learning rate"),
            "hidden": (int, 8, "discriminator hidden width"),
            "mu_s": (_floats, [-1.0], "source mean"),
            "mu_t": (_floats, [1.0], "target mean"),
            "sigma": (float, 1.0, "standard deviation"),
            "n_per_domain": (int, 1000, "points per domain"),
        },
    ),
    "partial-labels": (
        "target accuracy under partial environment labels and random partitions",
        {
            **{k: v for k, v in DATA.items() if k not in ("fraction_known", "partition", "noise_rate")},
            **{k: v for k, v in TRAIN.items() if k not in ("gamma", "mode")},
            "fractions": (_floats, [1.0, 0.2], "known fractions"),
            "seeds": (_ints, [0, 1, 2], "training seeds"),
            "m_prime": (int, 2, "groups for the random-partition row"),
            "els_gamma": (_gamma, "anneal", "gamma of the smoothed config"),
        },
    ),
    "gradcheck": (
        "autodiff versus central differences",
        {
            "trials": (int, 50, "random networks (and loss instances)"),
            "eps": (float, 1e-5, "finite-difference step"),
            "tol": (float, 1e-6, "relative error tolerance"),
        },
    ),
    "bound-check": (
        "encoder adversarial gradient against the (1 - gamma) bound",
        {
            "gammas": (_floats, [1.0, 0.9, 0.5], "gammas"),
            "offset": (float, 1.0, "gap between supports"),
            "n_per_domain": (int, 500, "points per domain"),
            "budget": (int, 5000, "discriminator training steps"),
            "lr": (float, 2.0, "discriminator learning rate"),
            "n_probe": (int, 1000, "points for the Jacobian sup"),
        },
    ),
}


# -- argument handling ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elslab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (help_text, table) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="flat key=value file; flags override it")
        for key, (_, default, h) in {**COMMON, **table}.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=f"{h} (default: {_fmt(default)})")
    return p


def read_config(path: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict:
    table = {**COMMON, **COMMANDS[command][1]}
    raw = read_config(ns.config) if ns.config else {}
    unknown = sorted(set(raw) - set(table))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for k in table:
        if getattr(ns, k, None) is not None:
            raw[k] = getattr(ns, k)
    cfg = {}
    for k, (conv, default, _) in table.items():
        try:
            cfg[k] = conv(raw[k]) if k in raw else default
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {exc}") from None
    return cfg


def write_resolved(command: str, cfg: dict, out: Path) -> None:
    lines = [f"# elslab {command}"] + [f"{k}={_fmt(v)}" for k, v in cfg.items()]
    (out / RESOLVED).write_text("\n".join(lines) + "\n")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


# -- subcommands -------------------------------------------------------------------------


def make_dataset(cfg: dict):
    seed = cfg["seed"]
    kind = cfg["dataset"]
    if kind == "circle":
        ds = gen_circle(
            CircleConfig(
                cfg["n_domains"],
                cfg["points_per_domain"],
                cfg["ring_radius"],
                cfg["radial_noise"],
                cfg["label_margin"],
                cfg["n_source"],
                seed,
            )
        )
    elif kind == "gaussians":
        ds = gen_two_gaussians(cfg["mu_s"], cfg["mu_t"], cfg["sigma"], cfg["n_per_domain"], seed)
    elif kind == "disjoint":
        ds = gen_disjoint_support(cfg["offset"], cfg["n_per_domain"], seed)
    else:
        raise ValueError(f"unknown dataset {kind!r}")
    if cfg.get("fraction_known", 1.0) < 1.0:
        ds = partial_labels(ds, cfg["fraction_known"], seed)
    if cfg.get("partition", 0):
        ds = random_partition(ds, cfg["partition"], seed)
    if cfg.get("noise_rate", 0.0) > 0:
        ds = replace(ds, env_observed=flip_labels(ds.env_observed, NoiseModel(cfg["noise_rate"], seed)))
    return ds


def cmd_gen(cfg, out: Path) -> int:
    (out / "data.csv").write_text(make_dataset(cfg).to_csv())
    return EXIT_OK


def cmd_oracle(cfg, out: Path) -> int:
    grid = dict(lo=cfg["lo"], hi=cfg["hi"], n=cfg["n"])
    dens = [dv.GridDensity.gaussian(mu, cfg["sigma"], **grid) for mu in cfg["mus"]]
    rows = []
    for g in cfg["gamma"]:
        if cfg["mode"] == "multi":
            r = dv.multi_objective_at_optimum(dens, g)
            rows.append((g, "multi", r.objective, r.kl_sum, r.residual))
        else:
            if len(dens) != 2:
                raise ValueError("two-domain modes need exactly two means")
            r = dv.smoothed_objective_at_optimum(dens[0], dens[1], g, cfg["mode"])
            rows.append((g, r.mode, r.objective, r.identity_value, r.residual))
    text = _csv(rows, ["gamma", "mode", "objective", "identity_value", "residual"])
    (out / "oracle.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_converge(cfg, out: Path) -> int:
    game = cv.DiracGame(cfg["xs"], cfg["xt"])
    scheme = cv.GdScheme(cfg["scheme"], cfg["eta"], cfg["nd"], cfg["ne"], cfg["gamma"])
    order = cfg["order"]
    report = cv.eigen_report(game, scheme, order)
    traj = cv.simulate_training(game, scheme, cfg["steps"], (cfg["init_e"], cfg["init_d"]), order)
    doc = {**report.to_dict(), "scheme": cv.scheme_dict(scheme), "order": order, "diverged": traj.diverged}
    doc["final_over_initial"] = float(traj.distance[-1] / traj.distance[0]) if traj.distance[0] else None
    (out / "eigen.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "trajectory.csv").write_text(_csv(traj.rows(), ["step", "theta_e", "theta_d", "distance"]))
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    return EXIT_DIVERGED if traj.diverged else EXIT_OK


def _train_config(cfg, num_domains: int, gamma, seed) -> tr.TrainConfig:
    anneal = gamma == "anneal"
    g = 1.0 if anneal else gamma
    return tr.TrainConfig(
        schedule=cfg["schedule"],
        n_d=cfg["nd"],
        n_e=cfg["ne"],
        lam=cfg["lam"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        seed=seed,
        smoothing=SmoothingSpec(g, cfg.get("mode", "two_sided"), anneal, num_domains),
        eval_every=cfg["eval_every"],
        hidden=cfg["hidden"],
        feature_dim=cfg["feature_dim"],
        disc_hidden=cfg["disc_hidden"],
    )


def cmd_train(cfg, out: Path) -> int:
    ds = make_dataset(cfg)
    model, log = tr.train_dat(ds, _train_config(cfg, ds.num_domains, cfg["gamma"], cfg["seed"]))
    (out / "metrics.jsonl").write_text(log.to_jsonl())
    (out / "series.csv").write_text(log.series_csv())
    (out / "model.ckpt").write_text(model.dumps())
    last = log.last()
    summary = [(last["step"], last["source_acc"], last["target_acc"], last["cls_loss"], last["adv_loss"], log.diverged)]
    (out / "summary.csv").write_text(_csv(summary, ["step", "source_acc", "target_acc", "cls_loss", "adv_loss", "diverged"]))
    print(f"source_acc={last['source_acc']:.4f} target_acc={last['target_acc']:.4f} diverged={log.diverged}")
    return EXIT_DIVERGED if log.diverged else EXIT_OK


def cmd_noise_sweep(cfg, out: Path) -> int:
    ds = gen_two_gaussians(cfg["mu_s"], cfg["mu_t"], cfg["sigma"], cfg["n_per_domain"], cfg["seed"])
    cells = tr.noise_sweep(ds, cfg["gamma_star"], cfg["e_grid"], cfg["seeds"], cfg["steps"], cfg["lr"], cfg["hidden"])
    rows = [(c.e, c.variant, c.gamma, c.seed, c.distance, c.infeasible) for c in cells]
    (out / "noise_sweep.csv").write_text(_csv(rows, ["e", "variant", "gamma", "seed", "distance", "infeasible"]))
    summary = [(e, v, tr.median_distance(cells, e, v)) for e in cfg["e_grid"] for v in ("hard", "corrected", "target")]
    text = _csv(summary, ["e", "variant", "median_distance"])
    (out / "noise_summary.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_partial_labels(cfg, out: Path) -> int:
    ds = make_dataset(cfg)
    m = ds.num_domains
    configs = {
        "dann": _train_config({**cfg, "mode": "two_sided"}, m, 1.0, cfg["seed"]),
        "els": _train_config({**cfg, "mode": "two_sided"}, m, cfg["els_gamma"], cfg["seed"]),
    }
    rows = tr.partial_label_experiment(ds, cfg["fractions"], configs, cfg["seeds"], cfg["m_prime"])
    text = _csv([(r.setting, r.config, r.mean, r.std) for r in rows], ["setting", "config", "mean_target_acc", "std"])
    (out / "partial_labels.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def els_grad_checks(trials: int, seed: int, eps: float):
    rng = substream(seed, "init")
    reports = []
    for _ in range(trials):
        m = int(rng.integers(2, 6))
        n = int(rng.integers(1, 6))
        spec = SmoothingSpec(float(rng.uniform(1 / m, 1)), "two_sided", False, m)
        labels = rng.integers(0, m, size=n)
        reports.append(grad_check(lambda ts: els_discriminator_loss(ts[0], labels, spec), [rng.normal(size=(n, m))], eps))
    return reports


def cmd_gradcheck(cfg, out: Path) -> int:
    rows = []
    for kind, reps in (
        ("mlp", random_mlp_grad_checks(cfg["trials"], cfg["seed"], cfg["eps"])),
        ("els_loss", els_grad_checks(cfg["trials"], cfg["seed"], cfg["eps"])),
    ):
        rows += [(kind, i, r.max_rel_error, r.passed(cfg["tol"])) for i, r in enumerate(reps)]
    (out / "gradcheck.csv").write_text(_csv(rows, ["kind", "trial", "max_rel_error", "passed"]))
    worst = max(r[2] for r in rows)
    ok = all(r[3] for r in rows)
    print(f"max_rel_error={worst:.3e} passed={ok}")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_bound_check(cfg, out: Path) -> int:
    ds = gen_disjoint_support(cfg["offset"], cfg["n_per_domain"], cfg["seed"])
    reps = tr.gradient_bound_check(ds, cfg["gammas"], cfg["budget"], cfg["seed"], cfg["lr"], n_probe=cfg["n_probe"])
    cols = ["gamma", "disc_accuracy", "measured_grad_norm", "C_hat", "bound", "within_bound", "inconclusive"]
    text = _csv([[r.to_dict()[c] for c in cols] for r in reps], cols)
    (out / "bound_check.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "oracle": cmd_oracle,
    "converge": cmd_converge,
    "train": cmd_train,
    "noise-sweep": cmd_noise_sweep,
    "partial-labels": cmd_partial_labels,
    "gradcheck": cmd_gradcheck,
    "bound-check": cmd_bound_check,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if ns.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nelslab: error: a subcommand is required")
        cfg = resolve(ns.command, ns)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_INVALID
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(ns.command, cfg, out)
        return HANDLERS[ns.command](cfg, out)
    except (ValueError, IndexError) as exc:
        print(f"elslab {ns.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"elslab {ns.command}: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
