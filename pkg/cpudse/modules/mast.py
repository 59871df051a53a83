"""Metric-space search: sweep the metric constraint through an M-mode model until its ranks settle."""

import math
from typing import Callable, Optional, Sequence

import numpy as np

from cpudse import config
from cpudse.errors import SearchError
from cpudse.modules.trace_models import MODE_M, PredictorModel, encode_chunks, predict_pooled, round_ranks
from cpudse.schemas import Configuration, CriticalReport, MastResult, MastSpec, MastStep

Oracle = Callable[[Configuration], float]


def default_step(metric_values: Sequence[float], steps: int = config.MAST_STEPS_PER_RANGE) -> float:
    """Metric range / steps (a small positive step when the range is empty)."""
    values = np.asarray(metric_values, dtype=np.float64)
    if not len(values):
        raise SearchError("need metric values to derive a step")
    spread = float(values.max() - values.min())
    if spread > 0:
        return spread / steps
    return max(abs(float(values.max())), 1.0) * 1e-3


def default_spec(metric_values: Sequence[float], **overrides) -> MastSpec:
    """Sweep starting at the smallest observed metric with the default step."""
    settings = dict(c_i=float(np.min(metric_values)), c_s=default_step(metric_values),
                    patience=config.MAST_PATIENCE, max_iter=config.MAST_MAX_ITER, delta=config.MAST_DELTA)
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return MastSpec(**settings)


def mast_search(model: PredictorModel, tokens_list: Sequence[np.ndarray], spec: MastSpec,
                oracle: Optional[Oracle] = None) -> MastResult:
    """
    Sweep c_k = c_i + k * c_s, predicting ranks for every chunk at each step.

    Per step the raw ranks are averaged over chunks and rounded. The sweep
    stops once the rounded configuration has been identical for `patience`
    consecutive steps, or after max_iter steps (unconverged). The oracle, when
    given, only annotates the trajectory after the sweep.
    """
    if model.mode != MODE_M:
        raise SearchError("metric-space search needs an M-mode model")
    if not len(tokens_list):
        raise SearchError("metric-space search needs at least one chunk")
    if not spec.c_s > 0:
        raise SearchError(f"constraint step must be positive, got {spec.c_s}")

    subset = model.space
    pooled = encode_chunks(model, tokens_list)

    trajectory: list[MastStep] = []
    previous: Optional[Configuration] = None
    streak = 0
    converged = False
    for k in range(spec.max_iter):
        constraint = spec.c_i + k * spec.c_s
        raw = predict_pooled(model, pooled, constraint)
        current = round_ranks(raw.mean(axis=0), subset)
        trajectory.append(MastStep(step=k, constraint=constraint, ranks=current.ranks))

        streak = streak + 1 if current == previous else 1
        previous = current
        if streak >= spec.patience:
            converged = True
            break

    if oracle is not None:
        trajectory = annotate(trajectory, oracle)

    n = trajectory[-1].step
    report = critical_parameters(trajectory, spec.delta, subset.names)
    start = report.p if report.p is not None else n - streak + 1
    near: list[Configuration] = []
    for step in trajectory[start:]:
        cfg = Configuration(ranks=step.ranks)
        if cfg not in near:
            near.append(cfg)

    return MastResult(
        converged=converged,
        config=previous,
        n=n,
        param_names=subset.names,
        trajectory=trajectory,
        near_optimal_set=near if converged else [],
        report=report,
    )


def annotate(trajectory: Sequence[MastStep], oracle: Oracle) -> list[MastStep]:
    """Attach the oracle objective to every step (each distinct configuration evaluated once)."""
    cache: dict[tuple[int, ...], float] = {}
    out = []
    for step in trajectory:
        if step.ranks not in cache:
            cache[step.ranks] = float(oracle(Configuration(ranks=step.ranks)))
        out.append(step.model_copy(update={"objective": cache[step.ranks]}))
    return out


def _relative_change(a: float, b: float) -> float:
    return abs(b - a) / max(abs(a), 1e-12)


def critical_parameters(trajectory: Sequence[MastStep], delta: float,
                        param_names: Sequence[str]) -> CriticalReport:
    """
    p is the latest step whose objective moved by more than delta (relative)
    from the step before; parameters whose rank changed at p are critical,
    parameters that still vary after p are flexible.
    """
    if len(trajectory) < 2 or any(s.objective is None for s in trajectory):
        return CriticalReport()

    p_index = 0
    for i in range(len(trajectory) - 1, 0, -1):
        change = _relative_change(trajectory[i - 1].objective, trajectory[i].objective)
        if not math.isinf(delta) and change > delta:
            p_index = i
            break

    critical: list[str] = []
    if p_index > 0:
        before, at = trajectory[p_index - 1].ranks, trajectory[p_index].ranks
        critical = [name for name, a, b in zip(param_names, before, at) if a != b]

    tail = trajectory[p_index:]
    flexible = [
        name for j, name in enumerate(param_names)
        if name not in critical and len({s.ranks[j] for s in tail}) > 1
    ]
    return CriticalReport(p=trajectory[p_index].step, critical=critical, flexible=flexible)
