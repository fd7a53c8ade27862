"""Tree-structured Parzen estimator for hyperparameter search.

Per-parameter independent densities: numeric parameters get Gaussian KDEs
over the good/bad trial values (Scott bandwidth with a floor), categorical
parameters add-one-smoothed frequencies; candidates are drawn from the good
density and ranked by the good/bad density ratio.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

UNIFORM = "uniform"
LOG_UNIFORM = "log-uniform"
INTEGER_RANGE = "integer-range"
CATEGORICAL = "categorical"


class EmptySpace(ValueError):
    pass


class AllTrialsFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    choices: tuple[Any, ...] = ()

    def __post_init__(self):
        if self.kind not in (UNIFORM, LOG_UNIFORM, INTEGER_RANGE, CATEGORICAL):
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if len(self.choices) < 1:
                raise ValueError(f"{self.name}: categorical needs at least one choice")
        else:
            if self.low is None or self.high is None:
                raise ValueError(f"{self.name}: bounds required")
            if not (math.isfinite(self.low) and math.isfinite(self.high)):
                raise ValueError(f"{self.name}: bounds must be finite")
            if self.low >= self.high:
                raise ValueError(f"{self.name}: low must be < high")
            if self.kind == LOG_UNIFORM and self.low <= 0:
                raise ValueError(f"{self.name}: log-uniform requires low > 0")

    def contains(self, value) -> bool:
        if self.kind == CATEGORICAL:
            return value in self.choices
        if self.kind == INTEGER_RANGE:
            return float(value).is_integer() and self.low <= value <= self.high
        return self.low <= value <= self.high


@dataclass(frozen=True)
class Trial:
    config: dict[str, Any]
    objective: float
    trial_index: int
    failed: bool = False

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "objective": None if self.failed else self.objective,
            "trial_index": self.trial_index,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trial":
        failed = bool(d.get("failed", False))
        obj = d.get("objective")
        return cls(
            config=dict(d["config"]),
            objective=math.inf if failed or obj is None else float(obj),
            trial_index=int(d["trial_index"]),
            failed=failed,
        )


@dataclass(frozen=True)
class TpeConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    bandwidth_floor: float = 1e-3  # fraction of the parameter range
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.n_startup < 1 or self.n_candidates < 1:
            raise ValueError("n_startup and n_candidates must be >= 1")


def _to_sampling_space(spec: ParamSpec, value) -> float:
    return math.log(float(value)) if spec.kind == LOG_UNIFORM else float(value)


def _from_sampling_space(spec: ParamSpec, x: float):
    if spec.kind == LOG_UNIFORM:
        return float(np.clip(math.exp(x), spec.low, spec.high))
    if spec.kind == INTEGER_RANGE:
        return int(np.clip(round(x), spec.low, spec.high))
    return float(np.clip(x, spec.low, spec.high))


def _bounds(spec: ParamSpec) -> tuple[float, float]:
    if spec.kind == LOG_UNIFORM:
        return math.log(spec.low), math.log(spec.high)
    return float(spec.low), float(spec.high)


def _uniform_sample(spec: ParamSpec, rng: np.random.Generator):
    if spec.kind == CATEGORICAL:
        return spec.choices[int(rng.integers(len(spec.choices)))]
    if spec.kind == INTEGER_RANGE:
        return int(rng.integers(int(spec.low), int(spec.high) + 1))
    lo, hi = _bounds(spec)
    return _from_sampling_space(spec, float(rng.uniform(lo, hi)))


def _parzen_mixture(
    values: np.ndarray, lo: float, hi: float, floor_frac: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian mixture over observed values plus one range-wide prior component.

    Per-point bandwidths follow the adaptive-Parzen rule (distance to the
    nearest neighbors, clipped to [floor, range]); a global sample-std
    bandwidth collapses once trials concentrate and stalls the search.
    """
    prior_mu = 0.5 * (lo + hi)
    span = hi - lo
    centers = np.sort(values.astype(np.float64))
    n = centers.size
    if n == 0:
        return np.array([prior_mu]), np.array([span]), np.array([1.0])
    if n == 1:
        bws = np.array([span])
    else:
        left = np.diff(centers, prepend=centers[0])
        right = np.diff(centers, append=centers[-1])
        bws = np.maximum(left, right)
        bws[0] = centers[1] - centers[0]
        bws[-1] = centers[-1] - centers[-2]
    bw_min = max(floor_frac * span, span / min(100.0, 1.0 + n))
    bws = np.clip(bws, bw_min, span)
    mix_centers = np.concatenate([[prior_mu], centers])
    mix_bws = np.concatenate([[span], bws])
    weights = np.full(n + 1, 1.0 / (n + 1))
    return mix_centers, mix_bws, weights


def _mixture_logpdf(x: float, centers: np.ndarray, bws: np.ndarray, weights: np.ndarray) -> float:
    z = (x - centers) / bws
    comps = np.log(weights) - 0.5 * math.log(2 * math.pi) - np.log(bws) - 0.5 * z * z
    m = float(np.max(comps))
    return m + math.log(float(np.sum(np.exp(comps - m))))


def _categorical_logprob(value, observed: list, choices: Sequence) -> float:
    counts = {c: 1 for c in choices}  # add-one smoothing
    for v in observed:
        counts[v] = counts.get(v, 0) + 1
    total = sum(counts.values())
    return math.log(counts[value] / total)


def suggest(
    space: Sequence[ParamSpec], history: Sequence[Trial], cfg: TpeConfig
) -> dict[str, Any]:
    """Next configuration to try: uniform during startup, otherwise the
    candidate maximizing the good/bad density ratio. Deterministic given the
    seed and inputs."""
    if not space:
        raise EmptySpace("search space has no parameters")
    rng = np.random.default_rng([cfg.seed, len(history)])

    if len(history) < cfg.n_startup:
        return {spec.name: _uniform_sample(spec, rng) for spec in space}

    finite = [t for t in history if not t.failed and math.isfinite(t.objective)]
    n_good = math.ceil(cfg.gamma * len(history))
    ranked = sorted(finite, key=lambda t: (t.objective, t.trial_index))
    good = ranked[:n_good]
    good_idx = {t.trial_index for t in good}
    bad = [t for t in history if t.trial_index not in good_idx]
    if not good:
        return {spec.name: _uniform_sample(spec, rng) for spec in space}

    candidates: list[dict[str, Any]] = [dict() for _ in range(cfg.n_candidates)]
    scores = np.zeros(cfg.n_candidates)

    for spec in space:
        good_vals = [t.config[spec.name] for t in good if spec.name in t.config]
        bad_vals = [t.config[spec.name] for t in bad if spec.name in t.config]

        if spec.kind == CATEGORICAL:
            # sample candidates from the smoothed good distribution
            probs = np.array(
                [math.exp(_categorical_logprob(c, good_vals, spec.choices)) for c in spec.choices]
            )
            probs = probs / probs.sum()
            draws = rng.choice(len(spec.choices), size=cfg.n_candidates, p=probs)
            for j, d in enumerate(draws):
                value = spec.choices[int(d)]
                candidates[j][spec.name] = value
                scores[j] += _categorical_logprob(value, good_vals, spec.choices)
                scores[j] -= _categorical_logprob(value, bad_vals, spec.choices)
            continue

        lo, hi = _bounds(spec)
        g_centers = np.array([_to_sampling_space(spec, v) for v in good_vals])
        b_centers = np.array([_to_sampling_space(spec, v) for v in bad_vals])
        gc, gb, gw = _parzen_mixture(g_centers, lo, hi, cfg.bandwidth_floor)
        bc, bb, bw_ = _parzen_mixture(b_centers, lo, hi, cfg.bandwidth_floor)

        comp = rng.choice(len(gc), size=cfg.n_candidates, p=gw)
        noise = rng.normal(0.0, 1.0, size=cfg.n_candidates)
        for j in range(cfg.n_candidates):
            x = float(np.clip(gc[comp[j]] + noise[j] * gb[comp[j]], lo, hi))
            value = _from_sampling_space(spec, x)
            candidates[j][spec.name] = value
            x_eff = _to_sampling_space(spec, value) if spec.kind == INTEGER_RANGE else x
            scores[j] += _mixture_logpdf(x_eff, gc, gb, gw)
            scores[j] -= _mixture_logpdf(x_eff, bc, bb, bw_)

    return candidates[int(np.argmax(scores))]


def optimize(
    objective: Callable[[dict[str, Any]], float],
    space: Sequence[ParamSpec],
    n_trials: int,
    cfg: TpeConfig,
) -> tuple[Trial, list[Trial]]:
    """Sequential suggest/evaluate/record loop; failed evaluations are kept in
    the history with objective +inf and excluded from the good set."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    history: list[Trial] = []
    for i in range(n_trials):
        config = suggest(space, history, cfg)
        try:
            value = float(objective(config))
            failed = not math.isfinite(value)
        except Exception:
            value, failed = math.inf, True
        history.append(
            Trial(config=config, objective=math.inf if failed else value, trial_index=i, failed=failed)
        )
    finite = [t for t in history if not t.failed]
    if not finite:
        raise AllTrialsFailed(f"all {n_trials} trials failed")
    best = min(finite, key=lambda t: (t.objective, t.trial_index))
    return best, history


def save_history(history: Sequence[Trial], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in history:
            fh.write(json.dumps(t.to_dict(), sort_keys=True))
            fh.write("\n")


def load_history(path: str) -> list[Trial]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Trial.from_dict(json.loads(line)))
    return out


def default_search_space() -> list[ParamSpec]:
    """The training-config space searched by the CLI's --hpo flag."""
    return [
        ParamSpec("learning_rate", LOG_UNIFORM, low=1e-3, high=0.5),
        ParamSpec("d_proj", CATEGORICAL, choices=(32, 64)),
        ParamSpec("dropout", UNIFORM, low=0.0, high=0.3),
        ParamSpec("batch_size", CATEGORICAL, choices=(16, 32, 64)),
    ]
