"""Command-line entry point: config parsing, experiment execution, CSV and figures.

Instances are named either by preset or by family plus parameters; every flag
can also be given in a plain-text config file of ``key = value`` lines with
``#`` comments (explicit flags win over the file).  The report path writes a
deterministic CSV of the mean regret curve with reference rates, a per-seed
summary CSV, and a rendered figure next to them.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import rewards
from .harness import DEFAULT_CHECKPOINT_RATIO, ExperimentResult, run_experiment
from .rewards import InstanceSpec, NoiseModel, RewardModelError, make_instance

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "build_instance",
    "emit_csv",
    "render_figure",
    "main",
]

CSV_HEADER = (
    "t,avg_regret,ref_lower,ref_upper,"
    "log10_t,log10_avg_regret,log10_ref_lower,log10_ref_upper"
)
SUMMARY_HEADER = "seed,final_avg_regret,loglog_slope"

PRESET_NAMES = (
    "appendix-e-beta2",
    "c-alpha",
    "linear-gap",
    "lower-bound-pair",
    "quadratic-k4",
)
FAMILY_NAMES = ("quadratic", "c-alpha", "linear")
ALGORITHMS = ("k2", "tree", "sgd", "all")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run description; round-trips through canonical_text."""

    algorithm: str = "k2"
    preset: str | None = None
    family: str | None = None
    k: int = 2
    horizon: int = 10000
    delta: float | None = None  # None means the default 2 / T^2
    noise: str = "uniform"
    sigma: float = 1.0
    seeds: int = 1
    seed: int = 0
    out: str | None = None
    checkpoint_ratio: float = DEFAULT_CHECKPOINT_RATIO
    figure: bool = True
    sgd_step: float = 1.0
    beta: float = 1.5
    alpha: float = 3.0
    a: float = 1.0
    b: float = 2.0
    slope: float = 1.0
    gap: float = 0.5
    theta: float = -1.0
    gamma: float = 1.0
    variant: str = "base"
    threads: int = 1

    def canonical_text(self) -> str:
        """Stable ``key = value`` form; parsing it reproduces this config."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown key: {key}")
    text = raw.strip()
    if text.lower() == "none":
        return None
    kind = _FIELD_TYPES[key]
    try:
        if kind.startswith("bool"):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from exc
    return text


def _read_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    return parse_config_text(text)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (with # comments) into a field mapping."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = _coerce(key, raw)
    return out


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="alloc-dichotomy",
        description="Sequential budget allocation with adaptive binary searches.",
    )
    p.add_argument("--config", help="plain-text config file (key = value lines)")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--family", choices=FAMILY_NAMES)
    p.add_argument("--k", type=int, help="number of resources for family instances")
    p.add_argument("--horizon", "-T", type=int, dest="horizon")
    p.add_argument("--delta", type=float, help="confidence (default 2 / T^2)")
    p.add_argument("--noise", choices=("uniform", "rademacher", "zero"))
    p.add_argument("--sigma", type=float, help="noise half-width in [0, 1]")
    p.add_argument("--seeds", type=int, help="number of replications")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", help="CSV output path; summary and figure sit next to it")
    p.add_argument("--checkpoint-ratio", type=float, dest="checkpoint_ratio")
    p.add_argument("--figure", dest="figure", action="store_true", default=None)
    p.add_argument("--no-figure", dest="figure", action="store_false", default=None)
    p.add_argument("--sgd-step", type=float, dest="sgd_step")
    p.add_argument("--beta", type=float, help="sharpness exponent (lower-bound preset, references)")
    p.add_argument("--alpha", type=float, help="power of the c-alpha families")
    p.add_argument("--a", type=float, help="quadratic curvature")
    p.add_argument("--b", type=float, help="quadratic slope at 0")
    p.add_argument("--slope", type=float, help="linear family slope")
    p.add_argument("--gap", type=float, help="slope gap of the linear-gap preset")
    p.add_argument("--theta", type=float, help="c-alpha family theta (<= 0)")
    p.add_argument("--gamma", type=float, help="c-alpha family gamma (>= 1)")
    p.add_argument("--variant", choices=("base", "tilde"))
    p.add_argument("--threads", type=int, help="worker cap (also ALLOC_DICHOTOMY_THREADS)")
    return p


def _validate(config: RunConfig) -> RunConfig:
    if config.horizon < 2:
        raise ConfigError("horizon must be >= 2")
    if config.delta is not None and not 0.0 < config.delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if not 0.0 <= config.sigma <= 1.0:
        raise ConfigError("sigma must lie in [0, 1]")
    if config.seeds < 1:
        raise ConfigError("seeds must be >= 1")
    if config.beta < 1.0:
        raise ConfigError("beta must be >= 1")
    if config.alpha <= 1.0:
        raise ConfigError("alpha must be > 1")
    if config.k < 2:
        raise ConfigError("k must be >= 2")
    if config.checkpoint_ratio <= 1.0:
        raise ConfigError("checkpoint_ratio must exceed 1")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    if config.preset is None and config.family is None:
        raise ConfigError("missing required field: preset or family")
    if config.preset is not None and config.family is not None:
        raise ConfigError("preset and family are mutually exclusive")
    return config


def parse_config(argv=None) -> RunConfig:
    """Parse flags (and an optional config file) into a validated RunConfig."""
    parser = _build_parser()
    ns = parser.parse_args(argv)
    values = {}
    if ns.config:
        values.update(_read_config_file(ns.config))
    for f in fields(RunConfig):
        flag = getattr(ns, f.name, None)
        if flag is not None:
            values[f.name] = flag
    config = replace(RunConfig(), **values)
    return _validate(config)


def build_instance(config: RunConfig) -> tuple[InstanceSpec, float, str]:
    """Materialize the configured instance; returns (instance, beta_ref, label)."""
    noise = NoiseModel(kind=config.noise, half_width=config.sigma if config.noise != "zero" else 0.0)
    common = dict(
        horizon=config.horizon,
        noise=noise,
        confidence=config.delta,
        seed=config.seed,
    )
    if config.preset == "appendix-e-beta2":
        return rewards.make_appendix_beta2_instance(**common), 2.0, config.preset
    if config.preset == "c-alpha":
        inst = rewards.make_calpha_experiment_instance(alpha=config.alpha, **common)
        return inst, config.alpha / (config.alpha - 1.0), config.preset
    if config.preset == "linear-gap":
        return rewards.make_linear_gap_instance(gap=config.gap, **common), math.inf, config.preset
    if config.preset == "lower-bound-pair":
        if not 1.0 < config.beta <= 2.0:
            raise ConfigError("beta must lie in (1, 2] for the lower-bound pair")
        inst = rewards.make_lower_bound_pair_instance(
            beta=config.beta, variant=config.variant, **common
        )
        return inst, config.beta, config.preset
    if config.preset == "quadratic-k4":
        inst = rewards.make_quadratic_k4_instance(a=config.a, b=config.b, k=config.k if config.k != 2 else 4, **common)
        return inst, 2.0 if config.a > 0 else math.inf, config.preset
    # family instances: k identical copies
    try:
        if config.family == "quadratic":
            f = rewards.make_quadratic(config.a, config.b)
        elif config.family == "c-alpha":
            f = rewards.make_c_alpha(config.theta, config.gamma, config.alpha)
        elif config.family == "linear":
            f = rewards.make_linear(config.slope)
        else:
            raise ConfigError(f"unknown family: {config.family}")
    except RewardModelError as exc:
        raise ConfigError(str(exc)) from exc
    functions = tuple(f for _ in range(config.k))
    inst = make_instance(functions, **common)
    beta_ref = f.known_beta if f.known_beta is not None else math.inf
    return inst, float(beta_ref), f"{config.family}-k{config.k}"


def _fmt(value: float) -> str:
    """12 significant digits, stable across runs."""
    if value != value:  # nan
        return "nan"
    if value == math.inf:
        return "inf"
    if value == -math.inf:
        return "-inf"
    return f"{value:.12g}"


def _log10(value: float) -> float:
    if value != value or value < 0.0:
        return math.nan
    if value == 0.0:
        return -math.inf
    return math.log10(value)


def emit_csv(result: ExperimentResult, path: str | Path) -> None:
    """Write the mean-curve CSV and the per-seed summary next to it."""
    path = Path(path)
    rows = [CSV_HEADER]
    for i, t in enumerate(result.checkpoint_ts):
        r = float(result.mean_avg_regret[i])
        lo = float(result.ref_lower[i])
        hi = float(result.ref_upper[i])
        rows.append(
            f"{int(t)},{_fmt(r)},{_fmt(lo)},{_fmt(hi)},"
            f"{_fmt(_log10(float(t)))},{_fmt(_log10(r))},"
            f"{_fmt(_log10(lo))},{_fmt(_log10(hi))}"
        )
    try:
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        summary = [SUMMARY_HEADER]
        for seed in result.seeds:
            if seed not in result.per_seed_final:
                continue
            summary.append(
                f"{seed},{_fmt(result.per_seed_final[seed])},"
                f"{_fmt(result.per_seed_slope.get(seed, math.nan))}"
            )
        Path(f"{path}.summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write output at {path}: {exc}") from exc


def render_figure(result: ExperimentResult, path: str | Path) -> None:
    """Render the regret curve with its reference rates to an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = np.asarray(result.checkpoint_ts, dtype=float)
    fig, (ax_lin, ax_log) = plt.subplots(1, 2, figsize=(11.0, 4.2))
    for ax in (ax_lin, ax_log):
        ax.plot(ts, result.ref_upper, color="tab:red", lw=1.4, label="upper reference")
        ax.plot(ts, result.mean_avg_regret, color="tab:blue", lw=1.6, label="mean R(t)")
        ax.plot(ts, result.ref_lower, color="tab:green", lw=1.4, label="lower reference")
        ax.set_xlabel("t")
    ax_lin.set_ylabel("average regret")
    top = max(float(np.max(result.mean_avg_regret)), 1e-12) * 1.5
    ax_lin.set_ylim(0.0, top)
    ax_log.set_xscale("log")
    ax_log.set_yscale("log")
    ax_lin.legend(loc="upper right", fontsize=8)
    slope_txt = "n/a" if result.slope != result.slope else f"{result.slope:.3f}"
    fig.suptitle(
        f"{result.label} [{result.algorithm}] K={result.k} T={result.horizon} "
        f"seeds={len(result.seeds)} slope={slope_txt}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def _algorithms_for(config: RunConfig, instance: InstanceSpec) -> list[str]:
    if config.algorithm != "all":
        return [config.algorithm]
    allocator = "k2" if instance.k == 2 else "tree"
    return [allocator, "sgd"]


def main(argv=None) -> int:
    """CLI driver; returns the process exit code."""
    try:
        config = parse_config(argv)
        instance, beta_ref, label = build_instance(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    os.environ.setdefault("ALLOC_DICHOTOMY_THREADS", str(config.threads))
    if config.algorithm == "k2" and instance.k > 2:
        print("error: k2 requires exactly two resources (use tree or all)", file=sys.stderr)
        return 2
    failed = False
    for algo in _algorithms_for(config, instance):
        runner = algo
        result = run_experiment(
            instance,
            algorithm=runner,
            replications=config.seeds,
            beta=beta_ref,
            checkpoint_ratio=config.checkpoint_ratio,
            step_scale=config.sgd_step,
            label=label,
        )
        print(
            f"{label} [{runner}] T={config.horizon} seeds={config.seeds} "
            f"mean R(T)={_fmt(result.mean_final)} (std {_fmt(result.std_final)}) "
            f"slope={_fmt(result.slope)}"
        )
        for seed, message in sorted(result.errors.items()):
            failed = True
            print(f"  seed {seed} failed: {message}", file=sys.stderr)
        if config.out:
            out = Path(config.out)
            if len(_algorithms_for(config, instance)) > 1:
                out = out.with_name(f"{out.stem}__{runner}{out.suffix or '.csv'}")
            try:
                emit_csv(result, out)
                if config.figure:
                    render_figure(result, out.with_suffix(".png"))
            except ConfigError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            print(f"  wrote {out} (+ summary{' + figure' if config.figure else ''})")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
