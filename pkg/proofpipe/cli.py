"""
proofpipe CLI
"""

from __future__ import annotations

import dataclasses
import glob
import json
import logging
import pathlib
from typing import Any, Sequence

import click
import rich.console
import rich.markup
import rich.table
import rich.traceback
from rich.logging import RichHandler

from proofpipe.__about__ import __application__, __version__
from proofpipe.backends import UnavailableVerifier, backend_from_spec, verifier_from_spec
from proofpipe.config import CONFIG_ENVVAR, PipelineConfig, load_config, resolve_config_path
from proofpipe.core import Prompt, PromptKind, named_rng
from proofpipe.curriculum import (
    CurriculumOrder,
    ScoredExample,
    order_curriculum,
    score_examples,
    sft_train,
)
from proofpipe.exceptions import (
    AllRunsExhaustedError,
    BackendError,
    ConfigParseError,
    ConfigValidationError,
    ProofPipeError,
)
from proofpipe.records import iter_jsonl, write_jsonl
from proofpipe.reporting import emit_stats, emit_train_report
from proofpipe.rewards import RewardMode, score_rollout
from proofpipe.simpolicy import ToyPolicy, load_policy, save_policy
from proofpipe.training import train_sim
from proofpipe.tts import (
    ActionKind,
    ActionStats,
    TtsOutcome,
    read_traces,
    run_problem,
    trace_stats,
    write_traces,
)

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_INVALID_CONFIG = 2
EXIT_BACKEND = 3
PREFIX = "[bold green]proofpipe[/bold green]"

PathOption = click.Path(dir_okay=False, path_type=pathlib.Path)
ExistingPath = click.Path(exists=True, dir_okay=False, path_type=pathlib.Path)


def exit_code(error: ProofPipeError) -> int:
    """
    Process exit code for a pipeline error
    """
    if isinstance(error, (ConfigParseError, ConfigValidationError)):
        return EXIT_INVALID_CONFIG
    if isinstance(error, (BackendError, AllRunsExhaustedError)):
        return EXIT_BACKEND
    return EXIT_FAILURE


class ProofPipeGroup(click.Group):
    """
    Click group turning pipeline errors into exit codes
    """

    def invoke(self, ctx: click.Context) -> Any:
        """
        Invoke the subcommand, reporting a :class:`ProofPipeError` on stderr
        """
        try:
            return super().invoke(ctx)
        except ProofPipeError as e:
            rich.console.Console(stderr=True).print(
                f"[bold red]proofpipe[/bold red]: {type(e).__name__}: {rich.markup.escape(str(e))}"
            )
            raise click.exceptions.Exit(exit_code(e)) from e


def configure_logging(verbosity: int) -> None:
    """
    Route log records through rich; ``-v`` shows INFO and ``-vv`` DEBUG
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False, console=rich.console.Console(stderr=True))],
        force=True,
    )


@dataclasses.dataclass
class PipelineContext:
    """
    State shared by every subcommand
    """

    config_path: pathlib.Path | None = None

    console: rich.console.Console = dataclasses.field(init=False)
    _config: PipelineConfig | None = dataclasses.field(init=False, default=None)

    def __post_init__(self) -> None:
        """
        Initialize the console
        """
        self.console = rich.console.Console()
        rich.traceback.install(show_locals=False, console=self.console)

    @property
    def config(self) -> PipelineConfig:
        """
        The pipeline config, loaded on first use
        """
        if self._config is None:
            self._config = load_config(self.config_path)
        return self._config

    def say(self, message: str) -> None:
        """
        Print a progress message
        """
        self.console.print(f"{PREFIX}: {message}")


@click.group(cls=ProofPipeGroup)
@click.version_option(version=__version__, prog_name=__application__)
@click.option(
    "-c",
    "--config",
    "config_path",
    type=PathOption,
    envvar=CONFIG_ENVVAR,
    default=None,
    help=f"TOML config file, defaults to ${CONFIG_ENVVAR}",
)
@click.option("-v", "--verbose", "verbosity", count=True, help="-v for INFO, -vv for DEBUG logs")
@click.pass_context
def cli(ctx: click.Context, config_path: pathlib.Path | None, verbosity: int) -> None:
    """
    Desk-scale reasoning post-training pipeline
    """
    configure_logging(verbosity)
    ctx.obj = PipelineContext(config_path=resolve_config_path(config_path))


@cli.group()
def curriculum() -> None:
    """
    Perplexity-ordered SFT curricula
    """


@curriculum.command("sort")
@click.option(
    "--in", "--input", "input_path", type=ExistingPath, required=True, help="Examples JSONL"
)
@click.option(
    "--out", "--output", "output_path", type=PathOption, required=True, help="Ordered JSONL"
)
@click.option(
    "--policy",
    "policy_path",
    type=ExistingPath,
    default=None,
    help="Initial policy JSON, uniform over the task vocabulary when omitted",
)
@click.option(
    "--order",
    type=click.Choice([order.value for order in CurriculumOrder]),
    default=None,
    help="Overrides curriculum.order",
)
@click.option(
    "--sft-out",
    type=PathOption,
    default=None,
    help="Train the toy policy on the ordered examples and save it here",
)
@click.pass_obj
def curriculum_sort(
    context: PipelineContext,
    input_path: pathlib.Path,
    output_path: pathlib.Path,
    policy_path: pathlib.Path | None,
    order: str | None,
    sft_out: pathlib.Path | None,
) -> None:
    """
    Score examples by initial-policy perplexity and write them in curriculum order
    """
    cfg = context.config
    policy = (
        load_policy(policy_path)
        if policy_path is not None
        else ToyPolicy.uniform(cfg.task.vocab_size)
    )
    order = order or cfg.curriculum.order
    examples = [ScoredExample.from_record(record) for record in iter_jsonl(input_path)]
    ordered = order_curriculum(
        score_examples(policy, examples),
        order,
        rng=named_rng(cfg.seeds.master, "curriculum"),
    )
    count = write_jsonl(output_path, (example.to_record() for example in ordered))
    context.say(f"Wrote {count} examples in {order} order to {output_path}")
    if sft_out is not None:
        trained, losses = sft_train(policy, ordered, cfg.sft)
        save_policy(trained, sft_out)
        context.say(f"Saved SFT policy to {sft_out} (final mean NLL {losses[-1]:.6f})")


@cli.group()
def train() -> None:
    """
    Training simulations on the toy policy
    """


@train.command("sim")
@click.option("--seed", type=int, default=None, help="Overrides seeds.master")
@click.option("--coarse-steps", type=int, default=None, help="Overrides train.coarse_steps")
@click.option("--refined-steps", type=int, default=None, help="Overrides train.refined_steps")
@click.option("--trace", "trace_path", type=PathOption, default=None, help="Step trace JSONL")
@click.option(
    "--trajectories",
    "trajectories_path",
    type=PathOption,
    default=None,
    help="Scored trajectory JSONL",
)
@click.option("--report", "report_path", type=PathOption, default=None, help="CSV or JSON summary")
@click.option("--policy-out", type=PathOption, default=None, help="Save the final policy JSON")
@click.pass_obj
def train_sim_command(
    context: PipelineContext,
    seed: int | None,
    coarse_steps: int | None,
    refined_steps: int | None,
    trace_path: pathlib.Path | None,
    trajectories_path: pathlib.Path | None,
    report_path: pathlib.Path | None,
    policy_out: pathlib.Path | None,
) -> None:
    """
    Run coarse then refined RL on the target-string task
    """
    cfg = context.config
    overrides = {
        key: value
        for key, value in {"coarse_steps": coarse_steps, "refined_steps": refined_steps}.items()
        if value is not None
    }
    if overrides:
        try:
            schedule = dataclasses.replace(cfg.train, **overrides)
        except ConfigValidationError as e:
            raise e.with_prefix("train") from e
        cfg = dataclasses.replace(cfg, train=schedule)
    context.say(
        f"Training {cfg.train.coarse_steps} coarse and {cfg.train.refined_steps} refined steps"
    )
    report = train_sim(
        cfg, seed=seed, trace_path=trace_path, trajectories_path=trajectories_path
    )
    if report_path is not None:
        emit_train_report(report, report_path)
    if policy_out is not None:
        save_policy(report.policy, policy_out)
    table = rich.table.Table("step", "stage", "mean reward", "P(target)", "replay", "refinement")
    for record in (report.steps[0], report.final):
        table.add_row(
            str(record.step),
            record.stage,
            "-" if record.mean_reward is None else f"{record.mean_reward:.3f}",
            f"{record.target_probability:.4f}",
            str(record.replay_size),
            str(record.refinement_size),
        )
    context.console.print(table)


@cli.group()
def reward() -> None:
    """
    Reward chain
    """


@reward.command("check")
@click.option("--ref", "reference", default=None, help="Reference answer, omit for proofs")
@click.option("--response-file", type=ExistingPath, required=True, help="Response text file")
@click.option("--problem", default="", help="Problem statement shown to the verifier")
@click.option(
    "--verifier",
    "verifier_spec",
    default=None,
    help="mock:<scenario.json> or http(s)://... generative verifier",
)
@click.option(
    "--mode",
    type=click.Choice([mode.value for mode in RewardMode]),
    default=None,
    help="Overrides rewards.mode",
)
@click.pass_obj
def reward_check(
    context: PipelineContext,
    reference: str | None,
    response_file: pathlib.Path,
    problem: str,
    verifier_spec: str | None,
    mode: str | None,
) -> None:
    """
    Score one response and print the verdict as JSON
    """
    cfg = context.config.rewards
    if mode is not None:
        cfg = dataclasses.replace(cfg, mode=mode)
    verifier = (
        verifier_from_spec(verifier_spec) if verifier_spec is not None else UnavailableVerifier()
    )
    prompt = Prompt(
        id="cli",
        text=problem,
        kind=PromptKind.VERIFIABLE if reference is not None else PromptKind.NONVERIFIABLE,
        reference_answer=reference,
    )
    response = response_file.read_text(encoding="utf-8")
    with verifier:
        verdict = score_rollout(cfg, prompt, response, verifier)
    click.echo(json.dumps(verdict.to_dict(), sort_keys=True))


@cli.group()
def tts() -> None:
    """
    Test-time solve, verify and refine
    """


@tts.command("run")
@click.option("--problem", "problem_file", type=ExistingPath, default=None, help="Problem file")
@click.option("--problem-text", default=None, help="Problem statement given inline")
@click.option(
    "--backend", "backend_spec", required=True, help="mock:<scenario.json> or http(s)://..."
)
@click.option("--trace", "trace_path", type=PathOption, default=None, help="Trace JSONL output")
@click.option("--parallel-runs", type=int, default=None, help="Overrides tts.parallel_runs")
@click.pass_obj
def tts_run(
    context: PipelineContext,
    problem_file: pathlib.Path | None,
    problem_text: str | None,
    backend_spec: str,
    trace_path: pathlib.Path | None,
    parallel_runs: int | None,
) -> None:
    """
    Solve one problem, printing the first accepted candidate
    """
    if (problem_text is None) == (problem_file is None):
        msg = "Pass exactly one of --problem or --problem-text"
        raise click.UsageError(msg)
    problem = (
        problem_file.read_text(encoding="utf-8") if problem_file is not None else problem_text
    )
    cfg = context.config.tts
    if parallel_runs is not None:
        try:
            cfg = dataclasses.replace(cfg, parallel_runs=parallel_runs)
        except ConfigValidationError as e:
            raise e.with_prefix("tts") from e
    try:
        with backend_from_spec(backend_spec) as backend:
            outcome = run_problem(str(problem), backend, cfg)
    except AllRunsExhaustedError as e:
        if trace_path is not None and isinstance(e.report, TtsOutcome):
            write_traces(trace_path, e.report)
        raise
    if trace_path is not None:
        write_traces(trace_path, outcome)
    context.say(f"Accepted after {len(outcome.runs)} run(s)")
    click.echo(outcome.candidate)


def _trace_files(patterns: Sequence[str]) -> list[pathlib.Path]:
    files: list[pathlib.Path] = []
    for pattern in patterns:
        matches = sorted(glob.glob(pattern))
        if not matches:
            msg = f"No trace files match {pattern}"
            raise click.BadParameter(msg, param_hint="--traces")
        files.extend(pathlib.Path(match) for match in matches)
    return files


def _stats_table(stats: dict[ActionKind, ActionStats]) -> rich.table.Table:
    table = rich.table.Table("action", "count", "median", "p25", "p75", "max")
    for kind, row in stats.items():
        table.add_row(
            kind.value,
            str(row.count),
            f"{row.median:g}",
            f"{row.p25:g}",
            f"{row.p75:g}",
            f"{row.max:g}",
        )
    return table


@tts.command("stats")
@click.option(
    "--traces",
    "patterns",
    multiple=True,
    required=True,
    help="Trace JSONL file or glob; may be used more than once",
)
@click.option("--out", "out_path", type=PathOption, default=None, help="CSV or JSON output")
@click.pass_obj
def tts_stats(
    context: PipelineContext, patterns: Sequence[str], out_path: pathlib.Path | None
) -> None:
    """
    Generated-token statistics per action kind
    """
    runs = [run for path in _trace_files(patterns) for run in read_traces(path)]
    stats = emit_stats(runs, out_path) if out_path is not None else trace_stats(runs)
    context.console.print(_stats_table(stats))
    if out_path is not None:
        context.say(f"Wrote statistics to {out_path}")


if __name__ == "__main__":
    cli()
