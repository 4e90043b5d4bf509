"""
Desk-scale simulation of the two-stage RL loop

Each step oversamples prompts, rolls the toy policy out, scores with the
reward chain, filters groups without reward variance and updates the
policy on the clipped sequence-level objective. Refined steps also run
refinement and replay bookkeeping and mix those queries into the batch.
"""

from __future__ import annotations

import collections
import dataclasses
import logging
import math
import pathlib
from typing import TYPE_CHECKING, Any, Callable, Deque, Sequence

import numpy as np

from proofpipe.backends import ToyProofJudge
from proofpipe.buffers import (
    BatchPlan,
    BufferConfig,
    RefinementBuffer,
    ReplayBuffer,
    assemble_batch,
    batch_slots,
    refinement_enqueue,
)
from proofpipe.core import (
    Prompt,
    PromptKind,
    RolloutGroup,
    Trajectory,
    build_prompt_pool,
    group_stats,
    named_rng,
)
from proofpipe.exceptions import ConfigValidationError, ProofPipeError
from proofpipe.objective import (
    ClipConfig,
    MixConfig,
    augment_group,
    refined_gradient,
    refined_policy_objective,
)
from proofpipe.records import write_jsonl, write_trajectories
from proofpipe.rewards import RewardMode, Verdict, cached_scorer
from proofpipe.sampler import (
    OversampleOutcome,
    PartialRollout,
    SamplerConfig,
    dynamic_filter,
    plan_oversample,
    rollout,
    settle_oversample,
    split_generations,
)
from proofpipe.simpolicy import ToyPolicy, sgd_update

if TYPE_CHECKING:
    from proofpipe.config import PipelineConfig

logger = logging.getLogger(__name__)

Scorer = Callable[[Prompt, str], Verdict]


@dataclasses.dataclass(frozen=True)
class TaskConfig:
    """
    The target-string task: reward 1 iff the response equals ``target``
    """

    vocab_size: int = 6
    target: tuple[int, ...] = (1, 2, 3, 4)
    verifiable_prompts: int = 192
    nonverifiable_prompts: int = 64

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigValidationError("vocab_size", "must be at least 2")
        if not self.target:
            raise ConfigValidationError("target", "must be non-empty")
        if not all(0 <= int(token) < self.vocab_size for token in self.target):
            raise ConfigValidationError("target", "tokens must be inside the vocabulary")
        if self.verifiable_prompts < 1:
            raise ConfigValidationError("verifiable_prompts", "must be at least 1")
        if self.nonverifiable_prompts < 0:
            raise ConfigValidationError("nonverifiable_prompts", "must be non-negative")

    @property
    def response_length(self) -> int:
        """
        Tokens per response
        """
        return len(self.target)

    @property
    def reference_answer(self) -> str:
        """
        The target as it appears inside a final-answer box
        """
        return " ".join(str(token) for token in self.target)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """
    Training schedule; ``round_token_budget`` of 0 disables partial rollouts
    """

    coarse_steps: int = 96
    refined_steps: int = 104
    updates_per_rollout: int = 4
    learning_rate: float = 0.5
    round_token_budget: int = 0

    def __post_init__(self) -> None:
        if self.coarse_steps < 0:
            raise ConfigValidationError("coarse_steps", "must be non-negative")
        if self.refined_steps < 0:
            raise ConfigValidationError("refined_steps", "must be non-negative")
        if self.updates_per_rollout < 1:
            raise ConfigValidationError("updates_per_rollout", "must be at least 1")
        if self.learning_rate < 0:
            raise ConfigValidationError("learning_rate", "must be non-negative")
        if self.round_token_budget < 0:
            raise ConfigValidationError("round_token_budget", "must be non-negative")

    @property
    def total_steps(self) -> int:
        """
        Coarse plus refined steps
        """
        return self.coarse_steps + self.refined_steps


@dataclasses.dataclass(frozen=True)
class SeedConfig:
    """
    Master seed every random stream derives from
    """

    master: int = 0

    def __post_init__(self) -> None:
        if self.master < 0:
            raise ConfigValidationError("master", "must be non-negative")


@dataclasses.dataclass(frozen=True)
class StepRecord:
    """
    Summary of one training step; step 0 is the initial state
    """

    step: int
    stage: str
    snapshot: int
    target_probability: float
    mean_reward: float | None = None
    surrogate_before: float | None = None
    surrogate_after: float | None = None
    drawn: int = 0
    trained: int = 0
    requeued: int = 0
    dropped: int = 0
    in_flight: int = 0
    displaced: int = 0
    n_refinement: int = 0
    n_replay: int = 0
    replay_size: int = 0
    refinement_size: int = 0

    def to_record(self) -> dict[str, Any]:
        """
        Trace record
        """
        return {"type": "step", **dataclasses.asdict(self)}


@dataclasses.dataclass
class TrainReport:
    """
    Every step record of a run and the final policy
    """

    seed: int
    steps: list[StepRecord]
    policy: ToyPolicy

    @property
    def final(self) -> StepRecord:
        """
        The last step record
        """
        return self.steps[-1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainReport):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.steps == other.steps
            and np.array_equal(self.policy.params, other.policy.params)
        )


def build_task_pool(task: TaskConfig) -> list[Prompt]:
    """
    Verifiable prompts carrying the target as reference, then open prompts
    """
    prompts = [
        Prompt(
            id=f"verifiable-{index:04d}",
            text=f"Emit the target sequence (variant {index}).",
            kind=PromptKind.VERIFIABLE,
            reference_answer=task.reference_answer,
            tokens=(index % task.vocab_size,),
        )
        for index in range(task.verifiable_prompts)
    ]
    prompts.extend(
        Prompt(
            id=f"open-{index:04d}",
            text=f"Prove that the target sequence is correct (variant {index}).",
            kind=PromptKind.NONVERIFIABLE,
            tokens=(index % task.vocab_size,),
        )
        for index in range(task.nonverifiable_prompts)
    )
    return list(build_prompt_pool(prompts).values())


def target_probability(policy: ToyPolicy, task: TaskConfig) -> float:
    """
    Exact probability that one sample equals the target
    """
    return math.exp(math.fsum(policy.logprob((), task.target)))


def _refill(
    queue: Deque[Prompt], pool: Sequence[Prompt], size: int, rng: np.random.Generator
) -> None:
    """
    Append shuffled epochs of ``pool`` until a full draw is available

    A prompt already waiting in the queue is not added again.
    """
    while len(queue) < size:
        waiting = {prompt.id for prompt in queue}
        epoch = [pool[index] for index in rng.permutation(len(pool))]
        fresh = [prompt for prompt in epoch if prompt.id not in waiting]
        if not fresh:
            break
        queue.extend(fresh)


def _score(prompt: Prompt, generations: Sequence[Trajectory], scorer: Scorer) -> RolloutGroup:
    return group_stats(
        [member.with_reward(scorer(prompt, member.text).reward) for member in generations]
    )


class _Simulation:
    """
    Mutable state of one training run
    """

    def __init__(self, cfg: PipelineConfig, seed: int) -> None:
        self.cfg = cfg
        self.seed = seed
        self.task = cfg.task
        self.sampler: SamplerConfig = cfg.sampler
        self.buffer_cfg: BufferConfig = cfg.buffers
        self.clip: ClipConfig = cfg.clip
        self.mix: MixConfig = cfg.mix
        self.pool = build_task_pool(cfg.task)
        self.by_id = {prompt.id: prompt for prompt in self.pool}
        self.policy = ToyPolicy.uniform(cfg.task.vocab_size)
        self.sample_rng = named_rng(seed, "rollout")
        self.shuffle_rng = named_rng(seed, "shuffle")
        self.queue: Deque[Prompt] = collections.deque()
        self.replay = ReplayBuffer()
        self.refinement = RefinementBuffer()
        self.seeds: dict[str, list[PartialRollout]] = {}
        self.ready: dict[str, RolloutGroup] = {}
        self.keep_trajectories = False
        self.trajectories: list[Trajectory] = []
        self.judge = ToyProofJudge(reference=cfg.task.reference_answer)
        self.scorers = {
            mode: cached_scorer(dataclasses.replace(cfg.rewards, mode=mode.value), self.judge)
            for mode in RewardMode
        }
        self.stage = ""

    @property
    def max_new_tokens(self) -> int | None:
        return self.cfg.train.round_token_budget or None

    def record(self, step: int, **values: Any) -> StepRecord:
        return StepRecord(
            step=step,
            stage=self.stage or "initial",
            snapshot=self.policy.snapshot.step_index,
            target_probability=target_probability(self.policy, self.task),
            replay_size=len(self.replay),
            refinement_size=len(self.refinement),
            **values,
        )

    def enter_stage(self, stage: str) -> None:
        if stage == self.stage:
            return
        self.stage = stage
        self.queue.clear()
        self.seeds.clear()
        self.ready.clear()
        logger.info(
            "[proofpipe] Entering %s stage at snapshot %d",
            stage,
            self.policy.snapshot.step_index,
        )

    def stage_pool(self) -> list[Prompt]:
        if self.stage == "coarse":
            return [prompt for prompt in self.pool if prompt.is_verifiable]
        return self.pool

    def scorer(self) -> Scorer:
        mode = RewardMode.ANSWER if self.stage == "coarse" else RewardMode.PROOF
        return self.scorers[mode]

    def generate(
        self, prompts: Sequence[Prompt], use_seeds: bool = False
    ) -> list[list[Trajectory]]:
        seeds = None
        if use_seeds:
            seeds = {
                prompt.id: self.seeds.pop(prompt.id)
                for prompt in prompts
                if prompt.id in self.seeds
            }
        return rollout(
            self.policy,
            prompts,
            self.sampler,
            max_len=self.task.response_length,
            rng=self.sample_rng,
            seeds=seeds,
            max_new_tokens=self.max_new_tokens if use_seeds else None,
        )

    def update(
        self, fresh: list[RolloutGroup], replay: list[RolloutGroup]
    ) -> tuple[float | None, float | None]:
        """
        ``updates_per_rollout`` ascent steps against frozen sampling log-probabilities
        """
        if not fresh and not replay:
            return None, None
        before = refined_policy_objective(self.policy, fresh, replay, self.mix, self.clip)
        learning_rate = self.cfg.train.learning_rate * (len(fresh) + len(replay))
        for _ in range(self.cfg.train.updates_per_rollout):
            gradient = refined_gradient(self.policy, fresh, replay, self.mix, self.clip)
            self.policy = sgd_update(self.policy, gradient, learning_rate)
        after = refined_policy_objective(self.policy, fresh, replay, self.mix, self.clip)
        return before, after

    def score(
        self, prompt: Prompt, generations: Sequence[Trajectory], scorer: Scorer
    ) -> RolloutGroup:
        group = _score(prompt, generations, scorer)
        if self.keep_trajectories:
            self.trajectories.extend(group.members)
        return group

    def step(self, step: int) -> StepRecord:
        _refill(self.queue, self.stage_pool(), self.sampler.oversample_batch, self.shuffle_rng)
        draw = plan_oversample(self.queue, self.sampler)
        scorer = self.scorer()
        ready = {
            prompt.id: self.ready.pop(prompt.id)
            for prompt in draw.prompts
            if prompt.id in self.ready
        }
        pending = [prompt for prompt in draw.prompts if prompt.id not in ready]
        generations = dict(
            zip([prompt.id for prompt in pending], self.generate(pending, use_seeds=True))
        )
        scored: list[tuple[Prompt, RolloutGroup]] = []
        new_groups: list[tuple[Prompt, RolloutGroup]] = []
        in_flight: list[Prompt] = []
        for prompt in draw.prompts:
            if prompt.id in ready:
                scored.append((prompt, ready[prompt.id]))
                continue
            members = generations[prompt.id]
            if self.max_new_tokens is not None:
                round_seeds = split_generations(self.policy, members, self.task.response_length)
                if round_seeds.partials:
                    self.seeds[prompt.id] = round_seeds.partials
                    in_flight.append(prompt)
                    continue
            group = self.score(prompt, members, scorer)
            scored.append((prompt, group))
            new_groups.append((prompt, group))
        self.queue.extend(in_flight)
        mean_reward = (
            math.fsum(group.mean_reward for _, group in scored) / len(scored) if scored else None
        )
        if self.stage == "coarse":
            outcome = self.settle(scored)
            before, after = self.update([group for _, group in outcome.trained], [])
            return self.record(
                step,
                mean_reward=mean_reward,
                surrogate_before=before,
                surrogate_after=after,
                drawn=len(draw.prompts),
                trained=len(outcome.trained),
                requeued=len(outcome.requeued),
                dropped=len(outcome.dropped),
                in_flight=len(in_flight),
            )
        for prompt, group in new_groups:
            refinement_enqueue(
                self.refinement, group, prompt, self.buffer_cfg, self.policy.snapshot
            )
            self.replay.admit(group, self.policy, self.buffer_cfg)
        _, _, n_fresh = batch_slots(
            self.refinement, self.replay, self.sampler.prompt_batch, self.buffer_cfg
        )
        outcome = self.settle(scored, target=n_fresh)
        fresh_groups, replay_groups, plan = self.mix_batch(outcome.trained, scorer)
        before, after = self.update(fresh_groups, replay_groups)
        survivors = len(outcome.trained) + len(outcome.requeued)
        return self.record(
            step,
            mean_reward=mean_reward,
            surrogate_before=before,
            surrogate_after=after,
            drawn=len(draw.prompts),
            trained=len(outcome.trained),
            requeued=len(outcome.requeued),
            dropped=len(outcome.dropped),
            in_flight=len(in_flight),
            displaced=min(survivors, self.sampler.prompt_batch) - len(outcome.trained),
            n_refinement=len(plan.refinement) if plan else 0,
            n_replay=len(replay_groups),
        )

    def settle(
        self, scored: Sequence[tuple[Prompt, RolloutGroup]], target: int | None = None
    ) -> OversampleOutcome:
        """
        Settle a scored draw, keeping the groups of requeued prompts for their next draw
        """
        outcome = settle_oversample(scored, self.queue, self.sampler, target=target)
        groups = {prompt.id: group for prompt, group in scored}
        for prompt in outcome.requeued:
            self.ready[prompt.id] = groups[prompt.id]
        return outcome

    def mix_batch(
        self, trained: Sequence[tuple[Prompt, RolloutGroup]], scorer: Scorer
    ) -> tuple[list[RolloutGroup], list[RolloutGroup], BatchPlan | None]:
        """
        Compose refinement, replay and fresh groups for the update

        ``trained`` already fits the fresh slots left by the refinement and
        replay buffers.
        """
        if not trained:
            return [], [], None
        groups = {prompt.id: group for prompt, group in trained}
        plan = assemble_batch(
            collections.deque(prompt for prompt, _ in trained),
            self.refinement,
            self.replay,
            self.sampler.prompt_batch,
            self.buffer_cfg,
        )
        fresh = [groups[prompt.id] for prompt in plan.fresh]
        refinement_prompts = [item.to_prompt() for item in plan.refinement]
        if refinement_prompts:
            for prompt, members in zip(refinement_prompts, self.generate(refinement_prompts)):
                fresh.extend(dynamic_filter([self.score(prompt, members, scorer)]))
        replay: list[RolloutGroup] = []
        replay_prompts = [self.by_id[prompt_id] for prompt_id in plan.replay]
        if replay_prompts:
            for prompt, members in zip(replay_prompts, self.generate(replay_prompts)):
                group = self.score(prompt, members, scorer)
                replayed = self.replay.select(prompt.id, self.policy, self.buffer_cfg)
                replay.append(augment_group(group, replayed))
                self.replay.retire(
                    prompt.id, group.success_count, self.buffer_cfg, group_size=len(group)
                )
        return fresh, replay, plan


def train_sim(
    cfg: PipelineConfig,
    seed: int | None = None,
    trace_path: pathlib.Path | None = None,
    trajectories_path: pathlib.Path | None = None,
) -> TrainReport:
    """
    Run ``coarse_steps`` then ``refined_steps`` on the target-string task

    Fully deterministic for a given config and seed. Module errors are
    logged with the failing step and stage, then propagate unchanged.

    Parameters
    ----------
    cfg : PipelineConfig
        Component settings; ``cfg.seeds.master`` is the default seed
    seed : int | None
        Overrides the master seed
    trace_path : pathlib.Path | None
        When set, one JSONL record per step is written here
    trajectories_path : pathlib.Path | None
        When set, every scored trajectory is written here in generation order

    Returns
    -------
    TrainReport
        The initial state followed by one record per step
    """
    seed = cfg.seeds.master if seed is None else seed
    simulation = _Simulation(cfg, seed)
    simulation.keep_trajectories = trajectories_path is not None
    steps = [simulation.record(0)]
    schedule = ["coarse"] * cfg.train.coarse_steps + ["refined"] * cfg.train.refined_steps
    for index, stage in enumerate(schedule, start=1):
        simulation.enter_stage(stage)
        try:
            record = simulation.step(index)
        except ProofPipeError as e:
            logger.error("[proofpipe] Training failed at %s step %d: %s", stage, index, e)
            raise
        steps.append(record)
        logger.info(
            "[proofpipe] Step %d (%s): mean reward %s, %d trained, %d dropped, "
            "replay %d, refinement %d",
            index,
            stage,
            "n/a" if record.mean_reward is None else f"{record.mean_reward:.3f}",
            record.trained,
            record.dropped,
            record.replay_size,
            record.refinement_size,
        )
    report = TrainReport(seed=seed, steps=steps, policy=simulation.policy)
    if trace_path is not None:
        write_jsonl(trace_path, [record.to_record() for record in steps])
    if trajectories_path is not None:
        write_trajectories(trajectories_path, simulation.trajectories)
    return report
