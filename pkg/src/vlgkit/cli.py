"""Command-line entry point.

Subcommands: synth, pretrain, finetune, generate, gradcheck, ablate, filter,
stats. Exit codes: 0 success, 1 contract/validation error, 2 usage error.
Every run prints the resolved config digest; outputs are written atomically.
"""

from __future__ import annotations

import os
import sys

import click
import torch

from . import ckpt, decode, leafpipe, train
from .errors import VlgError
from .model import VLGModel, prompt_elements
from .seqcore import ModelConfig, load_config, read_corpus, write_corpus

VARIANT_CHOICES = click.Choice(["shared", "moe", "lateral"])
JUDGE_ENV = "VLGKIT_JUDGE_ENDPOINT"


def _resolve_config(config_path: str | None, seed: int | None,
                    variant: str | None) -> ModelConfig:
    cfg = load_config(config_path) if config_path else ModelConfig()
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if variant is not None:
        updates["adapter_variant"] = variant
    if updates:
        from dataclasses import replace
        cfg = replace(cfg, **updates)
    click.echo(f"config digest: {cfg.digest()}", err=True)
    return cfg


def _opt_config(lr: float, steps: int, batch_size: int, seed: int) -> train.OptimizerConfig:
    return train.OptimizerConfig(learning_rate=lr, steps=steps,
                                 batch_size=batch_size, seed=seed)


@click.group()
@click.option("--threads", type=int, default=None, help="Cap torch worker threads.")
def main(threads):
    if threads is not None:
        torch.set_num_threads(threads)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--n-instances", default=16, show_default=True)
@click.option("--grammar", type=click.Choice(["copy", "count"]), default="copy")
@click.option("--images-per-instance", default=1, show_default=True)
@click.option("--noise-sigma", default=0.0, show_default=True)
@click.option("--seed", type=int, default=0)
def synth(config_path, out, n_instances, grammar, images_per_instance, noise_sigma, seed):
    """Generate a synthetic corpus with local-2D image structure."""
    cfg = _resolve_config(config_path, seed, None)
    spec = train.SynthSpec(grammar=grammar, n_instances=n_instances,
                           images_per_instance=(1, images_per_instance),
                           noise_sigma=noise_sigma, seed=seed)
    instances = train.synth_corpus(spec, cfg)
    write_corpus(out, instances)
    click.echo(f"wrote {len(instances)} instances to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--metrics", "metrics_path", type=click.Path())
@click.option("--steps", default=200, show_default=True)
@click.option("--lr", default=3e-3, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--seed", type=int, default=0)
def pretrain(config_path, corpus_path, out, metrics_path, steps, lr, batch_size, seed):
    """Train all base parameters on a corpus and write a model checkpoint."""
    cfg = _resolve_config(config_path, seed, None)
    corpus = read_corpus(corpus_path)
    model = VLGModel(cfg)
    rows = train.pretrain_base(model, corpus, _opt_config(lr, steps, batch_size, seed))
    ckpt.save_model_checkpoint(model, out)
    if metrics_path:
        train.write_metrics(metrics_path, rows)
    click.echo(f"pretrained {steps} steps; final total loss {rows[-1].total:.6f}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--variant", type=VARIANT_CHOICES, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--metrics", "metrics_path", type=click.Path())
@click.option("--steps", default=500, show_default=True)
@click.option("--lr", default=5e-3, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--seed", type=int, default=0)
def finetune(config_path, base_path, corpus_path, variant, out, metrics_path,
             steps, lr, batch_size, seed):
    """Fine-tune zero-initialized adapters on a frozen base checkpoint."""
    model = ckpt.load_model_checkpoint(base_path)
    variant = variant or model.config.adapter_variant
    click.echo(f"config digest: {model.config.digest()}", err=True)
    corpus = read_corpus(corpus_path)
    rows = train.finetune_adapters(model, corpus,
                                   _opt_config(lr, steps, batch_size, seed), variant)
    ckpt.save_adapter_checkpoint(model, out)
    if metrics_path:
        train.write_metrics(metrics_path, rows)
    click.echo(f"finetuned {variant} {steps} steps; final total loss {rows[-1].total:.6f}")


@main.command()
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--adapters", "adapters_path", type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--index", default=0, show_default=True, help="Prompt instance index.")
@click.option("--out", type=click.Path(), help="Write the generated sequence as a corpus file.")
@click.option("--max-steps", default=256, show_default=True)
@click.option("--sampling", type=click.Choice(["greedy", "temperature"]), default="greedy")
@click.option("--temperature", default=1.0, show_default=True)
@click.option("--seed", type=int, default=0)
def generate(base_path, adapters_path, corpus_path, index, out, max_steps,
             sampling, temperature, seed):
    """Generate an interleaved response for a corpus instance's prompt."""
    model = ckpt.load_model_checkpoint(base_path)
    if adapters_path:
        ckpt.load_adapter_checkpoint(model, adapters_path)
    click.echo(f"config digest: {model.config.digest()}", err=True)
    corpus = read_corpus(corpus_path)
    if not 0 <= index < len(corpus):
        raise VlgError(f"instance index {index} out of range")
    inst = corpus[index]
    gcfg = decode.GenerationConfig(max_total_steps=max_steps, sampling=sampling,
                                   temperature=temperature, seed=seed)
    result = decode.generate(model, prompt_elements(inst, model.config), gcfg)
    click.echo(decode.transcript(result.sequence))
    if result.truncated:
        click.echo("[truncated]", err=True)
    if out:
        from .seqcore import DatasetInstance
        write_corpus(out, [DatasetInstance(inst.instruction, inst.context,
                                           result.sequence,
                                           {"generated": True})])


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--base", "base_path", type=click.Path(exists=True),
              help="Optional model checkpoint; a fresh model is used otherwise.")
@click.option("--variant", type=VARIANT_CHOICES, default=None)
@click.option("--seed", type=int, default=0)
def gradcheck(config_path, base_path, variant, seed):
    """Finite-difference check of adapter gradients. Exits 1 on failure."""
    if base_path:
        model = ckpt.load_model_checkpoint(base_path)
        cfg = model.config
        click.echo(f"config digest: {cfg.digest()}", err=True)
    else:
        cfg = _resolve_config(config_path, seed, variant)
        model = VLGModel(cfg)
    model.init_adapters(variant or cfg.adapter_variant, seed=seed)
    model.freeze_base()
    spec = train.SynthSpec(n_instances=1, seed=seed)
    instance = train.synth_corpus(spec, cfg)[0]
    report = train.grad_check(model, instance, seed=seed)
    click.echo(f"max relative error {report.max_rel_error:.3e} "
               f"(worst: {report.worst_parameter})")
    click.echo("PASS" if report.passed else "FAIL")
    if not report.passed:
        sys.exit(1)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=300, show_default=True)
@click.option("--lr", default=5e-3, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
def ablate(config_path, base_path, corpus_path, out, steps, lr, batch_size, seeds):
    """Compare shared/moe/lateral adapters across seeds; write a CSV table."""
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    corpus = read_corpus(corpus_path)
    factory = lambda: ckpt.load_model_checkpoint(base_path)
    click.echo(f"config digest: {factory().config.digest()}", err=True)
    rows = train.ablation_compare(factory, corpus,
                                  _opt_config(lr, steps, batch_size, 0), seed_list)
    train.write_ablation(out, rows)
    click.echo(f"wrote {len(rows)} rows to {out}")


@main.command("filter")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="Raw corpus in the standard corpus format (targets hold the raw content).")
@click.option("--out", required=True, type=click.Path())
@click.option("--verdicts", "verdicts_path", type=click.Path())
@click.option("--min-images", default=3, show_default=True)
@click.option("--max-images", default=6, show_default=True)
@click.option("--max-sentences", default=12, show_default=True)
@click.option("--dup-threshold", default=0.6, show_default=True)
@click.option("--judge-endpoint", default=None,
              help=f"Remote judge URL; defaults to ${JUDGE_ENV} or the built-in heuristic.")
def filter_cmd(corpus_path, out, verdicts_path, min_images, max_images,
               max_sentences, dup_threshold, judge_endpoint):
    """Run the curation pipeline over a raw corpus."""
    cfg = leafpipe.PipelineConfig(min_images=min_images, max_images=max_images,
                                  max_sentences=max_sentences,
                                  dup_threshold=dup_threshold)
    endpoint = judge_endpoint or os.environ.get(JUDGE_ENV)
    backend = leafpipe.RemoteJudge(endpoint) if endpoint else leafpipe.BuiltInHeuristic()
    raw = [_raw_from_instance(inst, i) for i, inst in enumerate(read_corpus(corpus_path))]
    accepted, verdicts = leafpipe.run_pipeline(raw, cfg, backend)
    write_corpus(out, accepted)
    if verdicts_path:
        from .seqcore import atomic_write_text
        atomic_write_text(verdicts_path, leafpipe.verdicts_csv(verdicts))
    click.echo(f"accepted {len(accepted)} of {len(raw)} instances")


def _raw_from_instance(inst, index: int) -> leafpipe.RawInstance:
    """Treat an instance's target as raw source content (one sentence per token run)."""
    parts: list[str | object] = []
    if inst.instruction:
        parts.append(inst.instruction)
    from .seqcore import TextSegment
    for seg in inst.context.segments + inst.target.segments:
        if isinstance(seg, TextSegment):
            parts.append(" ".join(f"t{t}" for t in seg.tokens))
        else:
            parts.append(seg.grid)
    return leafpipe.RawInstance(tuple(parts), source_id=str(index))


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path())
def stats(corpus_path, out):
    """Aggregate corpus statistics as CSV."""
    corpus = read_corpus(corpus_path)
    report = leafpipe.stats_report(corpus)
    if out:
        from .seqcore import atomic_write_text
        atomic_write_text(out, report)
    else:
        click.echo(report, nl=False)


def entrypoint(argv=None) -> int:
    """Programmatic entry returning an exit code (0 ok, 1 domain error, 2 usage)."""
    try:
        main.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 2
    except click.exceptions.Exit as e:
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)
    except VlgError as e:
        click.echo(f"error: {e}", err=True)
        return 1


def run() -> None:
    sys.exit(entrypoint())


if __name__ == "__main__":
    run()
