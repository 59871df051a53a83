"""
Subsystem agents: four M-mode models that each predict one subsystem's
parameters, fine-tuned together.

The joint loss is the sum of the agents' supervised rank losses minus
lambda times a shared reward (the oracle objective of the joint
configuration). The reward is not differentiable, so its gradient is a
score-function estimate: a Gaussian sample around the batch-mean raw ranks,
weighted by the reward advantage over a running baseline.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from cpudse import config
from cpudse.console import warn
from cpudse.errors import ConfigurationError, ModelError, SimulationError
from cpudse.modules.design_space import dump_design_space, merge_configs, parse_design_space, subsystem_subset
from cpudse.modules.neural import AdamState, Tensor, adam_step
from cpudse.modules.trace import TokenDict
from cpudse.modules.trace_models import (
    MODE_M,
    Examples,
    PredictorModel,
    batch_plan,
    batched_inference,
    gradients,
    init_model,
    load_model,
    make_examples,
    param_tensors,
    rank_mse,
    round_ranks,
    save_model,
    supervised_loss,
)
from cpudse.schemas import (
    Configuration,
    Dataset,
    DesignSpace,
    FinetuneRecord,
    ModelConfig,
    Subsystem,
    TrainSpec,
)

# Joint configuration + chunk ids of the batch -> reward
Perf = Callable[[Configuration, Sequence[int]], float]

ENSEMBLE_MANIFEST = "ensemble.json"


@dataclass
class AgentEnsemble:
    space: DesignSpace
    agents: dict[str, PredictorModel]
    lam: float = config.SMART_LAMBDA
    baseline: Optional[float] = None
    optimizers: dict[str, AdamState] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam}")
        check_partition(self)


def check_partition(ensemble: AgentEnsemble) -> None:
    """Agent subsets must cover the space with every parameter owned once."""
    owners: dict[str, str] = {}
    for tag, agent in ensemble.agents.items():
        if agent.mode != MODE_M:
            raise ModelError(f"agent {tag} is not an M-mode model")
        for name in agent.space.names:
            if name in owners:
                raise ConfigurationError(f"'{name}' is predicted by both {owners[name]} and {tag}")
            owners[name] = tag
    missing = [n for n in ensemble.space.names if n not in owners]
    if missing:
        raise ConfigurationError(f"no agent predicts '{missing[0]}'")


def build_ensemble(space: DesignSpace, dictionary: TokenDict, model_config: Optional[ModelConfig] = None,
                   metric: str = "objective", lam: float = config.SMART_LAMBDA, seed: int = 0) -> AgentEnsemble:
    """One fresh agent per subsystem present in `space`."""
    agents = {}
    for i, tag in enumerate(Subsystem):
        subset = subsystem_subset(space, tag)
        if len(subset):
            agents[tag.value] = init_model(MODE_M, subset, dictionary, model_config, metric, seed=seed + i)
    return AgentEnsemble(space=space, agents=agents, lam=lam)


def joint_predict(ensemble: AgentEnsemble, tokens_list: Sequence[np.ndarray], metric: float) -> Configuration:
    """Each agent predicts its own subset (chunk-mean raw ranks, rounded); parts merge in catalog order."""
    parts = []
    for agent in ensemble.agents.values():
        raw = batched_inference(agent, tokens_list, metric)
        parts.append((agent.space, round_ranks(raw.mean(axis=0), agent.space)))
    return merge_configs(parts, ensemble.space)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def _agent_examples(ensemble: AgentEnsemble, dataset: Dataset) -> dict[str, Examples]:
    names = dataset.header.param_names
    return {tag: make_examples(agent, dataset.rows, names) for tag, agent in ensemble.agents.items()}


def _optimizer(ensemble: AgentEnsemble, tag: str, spec: TrainSpec) -> AdamState:
    state = ensemble.optimizers.get(tag)
    if state is None:
        state = ensemble.optimizers[tag] = AdamState(lr=spec.learning_rate)
    return state


def smart_finetune(ensemble: AgentEnsemble, dataset: Dataset, tokens_by_chunk: Mapping[int, np.ndarray],
                   perf: Optional[Perf], epochs: int = 1, spec: TrainSpec = TrainSpec(),
                   sigma: float = config.SMART_SIGMA,
                   momentum: float = config.SMART_BASELINE_MOMENTUM) -> tuple[AgentEnsemble, list[FinetuneRecord]]:
    """
    Jointly fine-tune the agents for `epochs` passes over `dataset`.

    Every batch takes one Adam step per agent on its supervised rank loss plus,
    when lambda > 0, the reward term. A batch whose reward evaluation fails is
    skipped and recorded as such.
    """
    if not dataset.rows:
        raise ModelError("cannot fine-tune on an empty dataset")
    if ensemble.lam > 0 and perf is None:
        raise ModelError("a reward function is needed when lambda > 0")
    if sigma <= 0:
        raise ModelError(f"sampling std must be positive, got {sigma}")

    examples = _agent_examples(ensemble, dataset)
    first = next(iter(examples.values()))
    batch_rng = np.random.default_rng(spec.seed)
    sample_rng = np.random.default_rng([spec.seed, 1])
    history: list[FinetuneRecord] = []

    for epoch in range(1, epochs + 1):
        for b, index in enumerate(batch_plan(first, spec.batch_size, batch_rng)):
            tensors, losses, preds = {}, {}, {}
            for tag, agent in ensemble.agents.items():
                t = param_tensors(agent, True)
                loss, pred, _ = supervised_loss(agent, t, examples[tag].take(index), tokens_by_chunk)
                tensors[tag], losses[tag], preds[tag] = t, loss, pred
            total_loss = float(sum(loss.item() for loss in losses.values()))

            reward = None
            if ensemble.lam > 0:
                chunk_ids = sorted({int(c) for c in first.chunk_ids[index]})
                sampled, noise = _sample_joint(ensemble, preds, sigma, sample_rng)
                try:
                    reward = float(perf(sampled, chunk_ids))
                except SimulationError as e:
                    warn(f"epoch {epoch} batch {b}: reward evaluation failed, batch skipped ({e})")
                    history.append(FinetuneRecord(epoch=epoch, batch=b, loss=total_loss, skipped=True))
                    continue
                if ensemble.baseline is None:
                    ensemble.baseline = reward
                advantage = reward - ensemble.baseline
                ensemble.baseline += momentum * (reward - ensemble.baseline)
                for tag, agent in ensemble.agents.items():
                    pred = preds[tag]
                    # d(-lam * adv * log N(a; mean, sigma^2)) / d(pred rows), raw ranks = pred * rank_scale
                    coef = -ensemble.lam * advantage * noise[tag] / sigma * agent.rank_scale / pred.shape[0]
                    losses[tag] = losses[tag] + (pred * np.broadcast_to(coef, pred.shape)).sum()

            for tag, agent in ensemble.agents.items():
                losses[tag].backward()
                adam_step(agent.params, gradients(tensors[tag]), _optimizer(ensemble, tag, spec))
            history.append(FinetuneRecord(epoch=epoch, batch=b, loss=total_loss, reward=reward))

    return ensemble, history


def _sample_joint(ensemble: AgentEnsemble, preds: Mapping[str, Tensor], sigma: float,
                  rng: np.random.Generator) -> tuple[Configuration, dict[str, np.ndarray]]:
    """Gaussian sample around each agent's batch-mean raw ranks; returns the joint config and unit noise."""
    parts, noise = [], {}
    for tag, agent in ensemble.agents.items():
        mean = preds[tag].data.mean(axis=0) * agent.rank_scale
        eps = rng.standard_normal(mean.shape)
        noise[tag] = eps
        parts.append((agent.space, round_ranks(mean + sigma * eps, agent.space)))
    return merge_configs(parts, ensemble.space), noise


def independent_finetune(ensemble: AgentEnsemble, dataset: Dataset, tokens_by_chunk: Mapping[int, np.ndarray],
                         epochs: int = 1, spec: TrainSpec = TrainSpec()) -> tuple[AgentEnsemble, list[FinetuneRecord]]:
    """Per-agent supervised fine-tuning with no shared reward (the lambda = 0 reference)."""
    if not dataset.rows:
        raise ModelError("cannot fine-tune on an empty dataset")
    examples = _agent_examples(ensemble, dataset)
    losses: dict[tuple[int, int], float] = {}

    for tag, agent in ensemble.agents.items():
        rng = np.random.default_rng(spec.seed)
        state = _optimizer(ensemble, tag, spec)
        for epoch in range(1, epochs + 1):
            for b, index in enumerate(batch_plan(examples[tag], spec.batch_size, rng)):
                t = param_tensors(agent, True)
                loss, _, _ = supervised_loss(agent, t, examples[tag].take(index), tokens_by_chunk)
                loss.backward()
                adam_step(agent.params, gradients(t), state)
                losses[(epoch, b)] = losses.get((epoch, b), 0.0) + loss.item()

    history = [FinetuneRecord(epoch=e, batch=b, loss=v) for (e, b), v in sorted(losses.items())]
    return ensemble, history


def ensemble_rank_mse(ensemble: AgentEnsemble, dataset: Dataset, tokens_by_chunk: Mapping[int, np.ndarray]) -> float:
    """Scaled-rank MSE over all parameters (agents weighted by subset size)."""
    total = sum(rank_mse(a, dataset, tokens_by_chunk) * len(a.space) for a in ensemble.agents.values())
    return total / len(ensemble.space)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_ensemble(ensemble: AgentEnsemble, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for tag, agent in ensemble.agents.items():
        files[tag] = f"{tag.lower()}.ckpt"
        save_model(agent, directory / files[tag])
    manifest = {
        "agents": files,
        "lambda": ensemble.lam,
        "baseline": ensemble.baseline,
        "space": dump_design_space(ensemble.space),
    }
    (directory / ENSEMBLE_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def load_ensemble(directory: Path) -> AgentEnsemble:
    directory = Path(directory)
    path = directory / ENSEMBLE_MANIFEST
    if not path.exists():
        raise ModelError(f"Ensemble manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        agents = {tag: load_model(directory / name) for tag, name in manifest["agents"].items()}
        return AgentEnsemble(space=parse_design_space(manifest["space"]), agents=agents,
                             lam=manifest["lambda"], baseline=manifest["baseline"])
    except (json.JSONDecodeError, KeyError) as e:
        raise ModelError(f"Unreadable ensemble manifest {path}: {e}")
