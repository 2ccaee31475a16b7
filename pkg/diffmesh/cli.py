""" Command line interface for the diffmesh program. """

import functools
import logging
import os
import sys
import typing as t

import click

from diffmesh import __version__
from diffmesh.config import ConfigSection, check_known_keys, merge_settings
from diffmesh.data import SyntheticSpec, checksum, generate_dataset, read_dataset, write_dataset
from diffmesh.diffusion import sample_hypotheses
from diffmesh.errors import (
    ConfigError,
    ExitCodeException,
    FormatError,
    ShapeError,
    errorhandler,
)
from diffmesh.geometry import write_obj
from diffmesh.model import Denoiser, ModelConfig, describe, load_model, save_model
from diffmesh.numcore import Rng
from diffmesh.params import OverrideType, SettingsFile
from diffmesh.parsers import Settings, transaction
from diffmesh.trainer import (
    EVAL_STREAM,
    TrainConfig,
    TrainingLog,
    ablation_run,
    evaluate,
    finetune_depth,
    format_table,
    pa_mpvpe_target,
    predict_vertices,
    recorded_settings,
    schedule_for,
    train,
    write_metrics_csv,
)


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"
SEED_ENVVAR = "DIFFMESH_SEED"

# Model flags per --ablation choice: (use_diffusion, use_cross_modality_decoder)
ABLATIONS = {
    "none": (True, True),
    "no-diffusion": (False, True),
    "no-decoder": (True, False),
    "baseline": (False, False),
}


def config_options(decorated: t.Callable) -> t.Callable:
    """Add the `--config`, `--set` and `--seed` options to a subcommand."""

    @click.option(
        "--config",
        "config_file",
        type=SettingsFile(),
        help="""
            Read settings from the given `key = value` file. Values are
            evaluated as sandboxed Python-like expressions, so for example
            `bend_max = radians(80)` and `betas = 0.9, 0.999` both work.
        """,
    )
    @click.option(
        "--set",
        "overrides",
        multiple=True,
        type=OverrideType(),
        help="""
            Override a single setting, e.g. `--set epochs=2`. Takes precedence
            over the config file and may be given several times.
        """,
    )
    @click.option(
        "--seed",
        type=int,
        envvar=SEED_ENVVAR,
        help=f"""
            Seed of every random stream. Overrides all config values and can
            also be given in the {SEED_ENVVAR} environment variable.
        """,
    )
    @functools.wraps(decorated)
    def wrapper(*args, **kwargs):
        return decorated(*args, **kwargs)

    return wrapper


def effective_settings(opt: t.Mapping) -> Settings:
    """Merge the config file and `--set` overrides, refusing unknown keys."""
    settings = merge_settings(opt.get("config_file"), *opt.get("overrides", ()))
    check_known_keys(settings)
    return settings


def load_section(
    section_cls: t.Type[ConfigSection], settings: Settings, opt: t.Mapping, **overrides
) -> ConfigSection:
    """
    Build one config section from `settings`, with `overrides` and the
    `--seed` flag on top, and echo the result.
    """
    if "seed" in section_cls.keys() and opt.get("seed") is not None:
        overrides["seed"] = opt["seed"]
    section = section_cls.from_settings(settings, **overrides)
    click.echo(f"# {section_cls.section}", err=True)
    click.echo(section.to_settings().dumps(), err=True, nl=False)
    return section


def check_compatible(model: Denoiser, spec: SyntheticSpec):
    for key in ("vertex_count", "image_size"):
        if getattr(model.config, key) != getattr(spec, key):
            raise ShapeError(
                f"Model has {key} = {getattr(model.config, key)} but the dataset has "
                f"{getattr(spec, key)}"
            )


def check_index(dataset: t.Sized, index: int):
    if not 0 <= index < len(dataset):
        raise ConfigError(f"Sample index {index} outside 0..{len(dataset) - 1}")


@click.group()
@click.version_option(__version__)
@click.option("--verbose", "-v", is_flag=True, help="Log debug messages.")
@click.option("--quiet", "-q", is_flag=True, help="Log warnings and errors only.")
def main(verbose: bool, quiet: bool):
    """
    Mesh recovery from images with a diffusion model over vertex sets:
    generate synthetic data, train, sample, evaluate and ablate.
    """
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


@main.command("gen-data")
@config_options
@click.option(
    "--out",
    "-o",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory to write the manifest and records into.",
)
@click.option("--force", is_flag=True, help="Overwrite an existing dataset directory.")
@errorhandler
def gen_data(out: str, force: bool, **opt: t.Any):
    """
    Generate the synthetic dataset described by the `data` settings.
    """
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise ExitCodeException(
            f"Refusing to overwrite non-empty directory {out} without --force",
            FormatError.exit_code,
        )
    spec = load_section(SyntheticSpec, effective_settings(opt), opt)
    dataset = generate_dataset(spec)
    write_dataset(out, dataset)
    click.echo(f"Samples: {len(dataset)} ({dataset.train_count} train)")
    click.echo(f"Checksum: {checksum(out)}")


@main.command("train")
@config_options
@click.option(
    "--data", "-d", required=True, type=click.Path(exists=True, file_okay=False)
)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
@click.option(
    "--ablation",
    type=click.Choice(list(ABLATIONS)),
    default="none",
    show_default=True,
    help="""
        Train a variant without the diffusion model (`no-diffusion`: decode a
        learned query set in one pass), without the cross-modality decoder
        (`no-decoder`: plain self-attention) or without either (`baseline`).
    """,
)
@click.option(
    "--depth",
    is_flag=True,
    help="""
        After training, attach the zero-initialized depth branch and finetune
        it for `finetune_epochs`.
    """,
)
@click.option("--epochs", type=int, help="Override the number of training epochs.")
@click.option("--samples", type=int, help="Train on the first SAMPLES training samples.")
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False),
    help="Continue training a saved model, keeping its step counter.",
)
@click.option(
    "--loss-csv",
    type=click.Path(dir_okay=False),
    help="Where to write the per-step losses. Defaults to OUT with a .loss.csv suffix.",
)
@errorhandler
def train_cmd(
    data: str,
    out: str,
    ablation: str,
    depth: bool,
    epochs: t.Optional[int],
    samples: t.Optional[int],
    resume: t.Optional[str],
    loss_csv: t.Optional[str],
    **opt: t.Any,
):
    """
    Train a model on a generated dataset.
    """
    settings = effective_settings(opt)
    config = load_section(TrainConfig, settings, opt, epochs=epochs, max_samples=samples)
    dataset = read_dataset(data)
    if resume:
        model = load_model(resume)
        check_compatible(model, dataset.spec)
        logger.info("Resuming %s at step %d", describe(model), model.store.step)
    else:
        use_diffusion, use_decoder = ABLATIONS[ablation]
        overrides = dict(
            vertex_count=dataset.spec.vertex_count, image_size=dataset.spec.image_size
        )
        if ablation != "none":
            overrides.update(
                use_diffusion=use_diffusion, use_cross_modality_decoder=use_decoder
            )
        model = Denoiser(load_section(ModelConfig, settings, opt, **overrides), config.seed)
    logger.info("Model: %s", describe(model))
    log = TrainingLog()
    train(model, dataset, config, log=log)
    if (depth or config.depth_condition) and model.depth_branch is None:
        finetune_depth(model, dataset, config, log=log)
    save_model(out, model)
    with transaction(loss_csv or f"{out}.loss.csv", "w") as fh:
        log.write_csv(fh)
    click.echo(f"Trained to step {model.store.step}: {describe(model)}")
    if log.averages:
        click.echo(f"Final average loss: {log.averages[-1]:.6g}")


@main.command("sample")
@config_options
@click.option(
    "--model",
    "-m",
    "model_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("--data", "-d", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--index", "-i", type=int, default=0, show_default=True)
@click.option("--steps", "-k", type=int, help="DDIM steps (default: inference_steps, 10).")
@click.option(
    "--hypotheses",
    type=int,
    default=1,
    show_default=True,
    help="""
        Run this many independent sampling chains, write their mean mesh and
        log the mean per-vertex spread between them.
    """,
)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
@errorhandler
def sample_cmd(
    model_path: str,
    data: str,
    index: int,
    steps: t.Optional[int],
    hypotheses: int,
    out: str,
    **opt: t.Any,
):
    """
    Predict the mesh of one dataset sample and write it as an OBJ file.
    """
    config = load_section(TrainConfig, effective_settings(opt), opt)
    steps = steps or config.inference_steps
    model = load_model(model_path)
    config = recorded_settings(model, config)
    dataset = read_dataset(data)
    check_compatible(model, dataset.spec)
    check_index(dataset, index)
    sample = dataset.samples[index]
    if hypotheses > 1:
        if not model.config.use_diffusion:
            raise ConfigError("Multiple hypotheses need a model with diffusion")
        cond = model.condition(sample.image, sample.depth if model.depth_branch else None)
        mean, spread = sample_hypotheses(
            model.predict,
            cond,
            steps,
            model.config.vertex_count,
            schedule_for(model, config),
            Rng(config.seed, stream=EVAL_STREAM).substream(index),
            hypotheses,
            eta=config.eta,
            x0_clip=config.x0_clip,
            objective=config.objective,
        )
        verts = dataset.denormalize(mean, sample.root)
        logger.info(
            "Mean spread over %d hypotheses: %.6g", hypotheses, float(spread.mean()) * dataset.scale
        )
    else:
        verts = predict_vertices(
            model, sample, dataset, steps, schedule_for(model, config), config
        )
    write_obj(out, verts, dataset.template.topology)
    click.echo(f"Wrote {out}: {len(verts)} vertices, {len(dataset.template.topology)} faces")


@main.command("eval")
@config_options
@click.option(
    "--model",
    "-m",
    "model_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("--data", "-d", required=True, type=click.Path(exists=True, file_okay=False))
@click.option(
    "--steps",
    "-k",
    type=int,
    multiple=True,
    help="DDIM step counts to evaluate, one row each (default: inference_steps).",
)
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Write the metrics as CSV.")
@errorhandler
def eval_cmd(
    model_path: str,
    data: str,
    steps: t.Tuple[int, ...],
    out: t.Optional[str],
    **opt: t.Any,
):
    """
    Evaluate a model on the test split, in milli-units.
    """
    config = load_section(TrainConfig, effective_settings(opt), opt)
    model = load_model(model_path)
    dataset = read_dataset(data)
    check_compatible(model, dataset.spec)
    rows = evaluate(model, dataset, config, steps=steps or None)
    rows = [(f"steps={count}", means) for count, means in rows]
    click.echo(format_table(rows))
    if dataset.test():
        click.echo(f"E_PV target: {pa_mpvpe_target(dataset.test()):.3f}")
    if out:
        with transaction(out, "w") as fh:
            write_metrics_csv(fh, rows)


@main.command("ablate")
@config_options
@click.option("--data", "-d", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Write the table as CSV.")
@click.option("--epochs", type=int, help="Override the number of training epochs.")
@click.option("--samples", type=int, help="Train on the first SAMPLES training samples.")
@errorhandler
def ablate(
    data: str,
    out: t.Optional[str],
    epochs: t.Optional[int],
    samples: t.Optional[int],
    **opt: t.Any,
):
    """
    Train and evaluate the four diffusion / decoder variants.
    """
    settings = effective_settings(opt)
    config = load_section(TrainConfig, settings, opt, epochs=epochs, max_samples=samples)
    dataset = read_dataset(data)
    model_config = load_section(
        ModelConfig,
        settings,
        opt,
        vertex_count=dataset.spec.vertex_count,
        image_size=dataset.spec.image_size,
    )
    rows = ablation_run(dataset, model_config, config)
    click.echo(format_table(rows))
    if out:
        with transaction(out, "w") as fh:
            write_metrics_csv(fh, rows)


@main.command("export-obj")
@click.option("--data", "-d", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--index", "-i", type=int, default=0, show_default=True)
@click.option("--template", is_flag=True, help="Export the canonical template instead.")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
@errorhandler
def export_obj(data: str, index: int, template: bool, out: str):
    """
    Write the ground-truth mesh of a dataset sample as an OBJ file.
    """
    dataset = read_dataset(data)
    if template:
        verts = dataset.template.verts
    else:
        check_index(dataset, index)
        verts = dataset.samples[index].verts
    write_obj(out, verts, dataset.template.topology)
    click.echo(f"Wrote {out}: {len(verts)} vertices, {len(dataset.template.topology)} faces")
