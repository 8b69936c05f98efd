"""CLI for fvworkbench"""

import dataclasses
import logging
import typing as t

import click

from fvworkbench import __version__
from fvworkbench.config import Budgets, RunConfig, load_config
from fvworkbench.debug import _set_debug
from fvworkbench.errors import WorkbenchError
from fvworkbench.workbench import CommandResult, Workbench

# help text for each budget, shown by --help next to its default
BUDGET_HELP = {
    "activation_prompts": "successful demonstration prompts averaged into the mean head activations",
    "prompts_per_instruction": "successful prompts per top instruction for the instruction mean activations",
    "cie_prompts": "shuffled-label prompts used to score heads for demonstrations",
    "cie_prompts_per_instruction": "baseline prompts per top instruction used to score heads",
    "top_instructions": "instructions kept per task and length after ranking",
    "top_heads": "heads in each selected head set",
    "shots": "demonstration pairs per in-context prompt",
    "min_successes": "successful train prompts a kept instruction needs",
    "generation_rounds": "requests sent to the instruction generator per task and length",
    "instructions_per_round": "instructions asked for in each request",
    "short_instruction_max_tokens": "longest short instruction, in subject model tokens",
    "baseline_candidates": "candidate set size when matching corpus or other-task baselines",
    "baselines_per_instruction": "uninformative baselines made for each top instruction",
    "corpus_cache_target": "corpus prefixes to score for the corpus cache",
    "corpus_max_tokens": "longest corpus prefix, in tokens",
    "equiprobable_t0": "initial log-probability band for equiprobable sampling",
    "equiprobable_dt": "band step for equiprobable sampling",
    "open_generation_chance": "chance accuracy of tasks without a label set",
    "train_fraction": "fraction of each task's pairs in the train split",
}


class BudgetHelpCommand(click.Command):
    """Custom click.Command that overrides get_help() to list every budget and its default"""

    def get_help(self, ctx):
        help_text = super().get_help(ctx)
        formatter = click.HelpFormatter()

        budget_tuples = [("Budget", "Default; description")]
        for field in dataclasses.fields(Budgets):
            budget_tuples.append((field.name, f"{field.default}; {BUDGET_HELP[field.name]}"))

        formatter.write("\n\n")
        formatter.write_text(
            "Protocol budgets: set them in the [budgets] table of the config file. "
            + "Values are resolved as built-in defaults, then the config file, "
            + "then command line options; the last one given wins."
        )
        formatter.write("\n")
        formatter.write_text("For example, in run.toml:  [budgets] top_heads = 10")
        formatter.write_text("or on the command line:   --top-heads 10")
        formatter.write("\n")
        formatter.write_dl(budget_tuples)
        help_text += formatter.getvalue()
        return help_text


# All the command line options defined here
CONFIG_OPTION = click.option(
    "--config",
    "-c",
    "config_path",
    metavar="CONFIG_FILE",
    help="Run configuration file (.toml or .json).",
    type=click.Path(exists=True, dir_okay=False),
    required=False,
)
TOY_OPTION = click.option(
    "--toy",
    is_flag=True,
    default=False,
    help="Use the bundled toy run: the fine-tuned miniature model on the three toy key-value tasks.",
)
FORCE_OPTION = click.option(
    "--force",
    is_flag=True,
    default=False,
    help="Accept artifacts written under a different configuration hash.",
)
DEBUG_OPTION = click.option(
    "--debug", required=False, is_flag=True, default=False, hidden=True
)
SEED_OPTION = click.option(
    "--seed", type=int, metavar="SEED", help="Seed for every random choice.", required=False
)
MODEL_OPTION = click.option(
    "--model",
    "-m",
    "models",
    metavar="MODEL_ID",
    help="Model to run; may be repeated. Replaces model_ids of the config.",
    multiple=True,
    required=False,
)
TASKS_OPTION = click.option(
    "--tasks",
    "-t",
    metavar="PATH",
    help="Task file or directory, or 'bundled' / 'toy'; may be repeated. Replaces task_paths of the config.",
    multiple=True,
    required=False,
)
OUTPUT_ROOT_OPTION = click.option(
    "--output-root",
    "-o",
    metavar="DIR",
    help="Directory all artifacts are written under.",
    type=click.Path(file_okay=False),
    required=False,
)
TOP_HEADS_OPTION = click.option(
    "--top-heads", type=int, metavar="N", help="Heads per selected head set.", required=False
)
MAX_QUERIES_OPTION = click.option(
    "--max-queries",
    type=int,
    metavar="N",
    help="Evaluate only the first N test queries of each task.",
    required=False,
)
ROUNDS_OPTION = click.option(
    "--rounds",
    type=int,
    metavar="N",
    help="Generation rounds per task and length; default from the config.",
    required=False,
)
SWEEP_OPTION = click.option(
    "--sweep-layers",
    is_flag=True,
    default=False,
    help="Also evaluate every function vector after every layer.",
)
SOURCE_OPTION = click.option(
    "--source",
    metavar="MODEL_ID",
    help="Model the function vectors were extracted from; default steer_source_model_id.",
    required=False,
)
TARGET_OPTION = click.option(
    "--target",
    "targets",
    metavar="MODEL_ID",
    help="Model to steer; may be repeated. Default: steer_target_model_ids, "
    "else every model of the config other than the source.",
    multiple=True,
    required=False,
)


def common_options(fn):
    """Options shared by every command"""
    for option in reversed(
        [
            DEBUG_OPTION,
            CONFIG_OPTION,
            TOY_OPTION,
            FORCE_OPTION,
            SEED_OPTION,
            MODEL_OPTION,
            TASKS_OPTION,
            OUTPUT_ROOT_OPTION,
            TOP_HEADS_OPTION,
        ]
    ):
        fn = option(fn)
    return fn


def load_run_config(
    config_path: t.Optional[str],
    toy: bool,
    models: t.Sequence[str] = (),
    tasks: t.Sequence[str] = (),
    **overrides,
) -> RunConfig:
    """Resolve the run configuration: defaults, then config file, then command line"""
    if config_path:
        config = load_config(config_path)
    elif toy:
        config = RunConfig.toy()
    else:
        config = RunConfig()
    if models:
        overrides["model_ids"] = list(models)
    if tasks:
        overrides["task_paths"] = list(tasks)
    return config.with_overrides(**overrides)


def echo_result(result: CommandResult):
    """Print what a command did and which tasks it skipped"""
    click.echo(f"Wrote {len(result.written)} artifacts, reused {result.reused} completed cells")
    if result.skipped:
        click.echo(f"Skipped {len(result.skipped)} task(s):", err=True)
        for key, reason in sorted(result.skipped.items()):
            click.echo(f"  {key}: {reason}", err=True)


def run_workbench(
    ctx,
    debug: bool,
    config_path: t.Optional[str],
    toy: bool,
    force: bool,
    action: t.Callable[[Workbench], CommandResult],
    **overrides,
) -> t.Optional[CommandResult]:
    """Build the Workbench, run action, and turn WorkbenchError into an exit code"""
    if debug:
        _set_debug(True)

    if config_path and toy:
        click.echo("--config and --toy cannot be used together", err=True)
        ctx.exit(1)

    try:
        config = load_run_config(config_path, toy, **overrides)
        logging.debug(f"config hash {config.config_hash()}")
        result = action(Workbench(config, force=force))
    except WorkbenchError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(e.exit_code)
    return result


@click.group()
@click.version_option(__version__, "--version", "-v")
def cli():
    """Extract, localize and evaluate function vectors of demonstrations and instructions."""


@cli.command(name="generate-instructions", cls=BudgetHelpCommand)
@common_options
@ROUNDS_OPTION
@click.pass_context
def generate_instructions(ctx, debug, config_path, toy, force, rounds, **overrides):
    """Generate candidate instructions for every task and length."""
    result = run_workbench(
        ctx,
        debug,
        config_path,
        toy,
        force,
        lambda workbench: workbench.generate_instructions(rounds=rounds),
        **overrides,
    )
    echo_result(result)


@cli.command(name="build-cache", cls=BudgetHelpCommand)
@common_options
@click.pass_context
def build_cache(ctx, debug, config_path, toy, force, **overrides):
    """Score corpus prefixes for corpus-text baselines."""
    result = run_workbench(ctx, debug, config_path, toy, force, Workbench.build_cache, **overrides)
    echo_result(result)


@cli.command(cls=BudgetHelpCommand)
@common_options
@click.pass_context
def train(ctx, debug, config_path, toy, force, **overrides):
    """Select instructions, build baselines, and compute mean activations and causal scores."""
    result = run_workbench(ctx, debug, config_path, toy, force, Workbench.train, **overrides)
    echo_result(result)


@cli.command(name="select-heads", cls=BudgetHelpCommand)
@common_options
@click.pass_context
def select_heads(ctx, debug, config_path, toy, force, **overrides):
    """Select head sets from aggregated causal scores and build function vectors."""
    result = run_workbench(ctx, debug, config_path, toy, force, Workbench.select_heads, **overrides)
    echo_result(result)


@cli.command(cls=BudgetHelpCommand)
@common_options
@MAX_QUERIES_OPTION
@SWEEP_OPTION
@click.pass_context
def evaluate(ctx, debug, config_path, toy, force, max_queries, sweep_layers, **overrides):
    """Evaluate baselines, function vectors, controls and skylines on the test split."""
    result = run_workbench(
        ctx,
        debug,
        config_path,
        toy,
        force,
        Workbench.evaluate,
        max_eval_queries=max_queries,
        sweep_layers=sweep_layers or None,
        **overrides,
    )
    echo_result(result)


@cli.command(cls=BudgetHelpCommand)
@common_options
@MAX_QUERIES_OPTION
@SOURCE_OPTION
@TARGET_OPTION
@click.pass_context
def steer(ctx, debug, config_path, toy, force, max_queries, source, targets, **overrides):
    """Apply one model's function vectors to other models of the same shape."""
    result = run_workbench(
        ctx,
        debug,
        config_path,
        toy,
        force,
        lambda workbench: workbench.steer(source, targets or None),
        max_eval_queries=max_queries,
        **overrides,
    )
    echo_result(result)


@cli.command(cls=BudgetHelpCommand)
@common_options
@click.pass_context
def analyze(ctx, debug, config_path, toy, force, **overrides):
    """Write tables, figures and an index page from the stored artifacts."""
    result = run_workbench(ctx, debug, config_path, toy, force, Workbench.analyze, **overrides)
    echo_result(result)
    click.echo(f"Index page: {result.written[-1]}")


@cli.command(cls=BudgetHelpCommand)
@common_options
@MAX_QUERIES_OPTION
@click.pass_context
def run(ctx, debug, config_path, toy, force, max_queries, **overrides):
    """Run every command in order, from instruction generation to analysis."""
    result = run_workbench(
        ctx,
        debug,
        config_path,
        toy,
        force,
        Workbench.run_all,
        max_eval_queries=max_queries,
        **overrides,
    )
    echo_result(result)
    click.echo(f"Index page: {result.written[-1]}")


if __name__ == "__main__":
    cli()  # pylint: disable=no-value-for-parameter
