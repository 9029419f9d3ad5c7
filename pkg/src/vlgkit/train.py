"""Training: base pretraining, adapter fine-tuning, gradient verification,
synthetic corpus generation, and the variant comparison experiment.

The synthetic corpus gives images a designed local-2D structure: each patch is
a fixed linear function of its top and left neighbours plus optional noise,
with seed-fixed virtual boundary rows/columns. Text targets follow a simple
deterministic grammar (copy or count) keyed off the instruction tokens.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, TrainingDivergedError, VlgError
from .model import FlatBatch, LossBreakdown, VLGModel, build_training_example
from .seqcore import (
    DatasetInstance,
    ImageSegment,
    InterleavedSequence,
    ModelConfig,
    N_SPECIAL,
    PatchGrid,
    TextSegment,
    atomic_write_text,
)

# Full-scale reference values (not used by desk-scale runs).
PAPER_LEARNING_RATE = 2e-5
PAPER_BATCH_SIZE = 1
PAPER_GRAD_ACCUM_STEPS = 16
PAPER_EPOCHS = 1

METRICS_COLUMNS = ("step", "ce_text", "mse_image", "total", "lr", "variant", "seed")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    grad_accum_steps: int = 1
    steps: int = 200
    weight_decay: float = 0.0
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 1:
            raise ContractError("optimizer config values must be positive")
        if self.grad_accum_steps < 1:
            raise ContractError("grad_accum_steps must be >= 1")


@dataclass
class MetricsRow:
    step: int
    ce_text: float
    mse_image: float
    total: float
    lr: float
    variant: str
    seed: int


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow([r.step, repr(r.ce_text), repr(r.mse_image), repr(r.total),
                    repr(r.lr), r.variant, r.seed])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass(frozen=True)
class SynthSpec:
    grammar: str = "copy"            # "copy" | "count"
    n_instances: int = 16
    images_per_instance: tuple[int, int] = (1, 1)
    text_len: tuple[int, int] = (3, 5)
    noise_sigma: float = 0.0
    patch_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.grammar not in ("copy", "count"):
            raise ContractError(f"unknown grammar {self.grammar!r}")
        if self.n_instances < 1:
            raise ContractError("n_instances must be >= 1")
        lo, hi = self.images_per_instance
        if not 1 <= lo <= hi:
            raise ContractError("images_per_instance must be a valid range")


# Fixed local recurrence: patch(r, c) = CT * top + CL * left + noise.
RECURRENCE_TOP = 0.55
RECURRENCE_LEFT = 0.40


def synth_image(rng: np.random.Generator, config: ModelConfig,
                sigma: float, scale: float) -> PatchGrid:
    """Grid whose every patch is the fixed linear function of its top/left
    neighbours; boundary neighbours come from seed-fixed virtual row/column."""
    hp, wp, c = config.grid_height, config.grid_width, config.patch_channels
    init_row = rng.normal(0.0, scale, size=(wp, c))
    init_col = rng.normal(0.0, scale, size=(hp, c))
    grid = np.zeros((hp, wp, c))
    for r in range(hp):
        for col in range(wp):
            top = grid[r - 1, col] if r > 0 else init_row[col]
            left = grid[r, col - 1] if col > 0 else init_col[r]
            grid[r, col] = RECURRENCE_TOP * top + RECURRENCE_LEFT * left
            if sigma > 0:
                grid[r, col] += rng.normal(0.0, sigma, size=c)
    return PatchGrid(hp, wp, c, grid.reshape(hp * wp, c))


def _grammar_tokens(grammar: str, instr_tokens: tuple[int, ...], length: int,
                    vocab_size: int) -> tuple[int, ...]:
    n_regular = vocab_size - N_SPECIAL
    if grammar == "copy":
        return tuple(instr_tokens[i % len(instr_tokens)] for i in range(length))
    start = instr_tokens[0]
    return tuple(N_SPECIAL + (start - N_SPECIAL + i) % n_regular for i in range(length))


def synth_corpus(spec: SynthSpec, config: ModelConfig) -> list[DatasetInstance]:
    """Deterministic synthetic instances; text per grammar, images per recurrence."""
    rng = np.random.default_rng(spec.seed)
    instances = []
    for i in range(spec.n_instances):
        text_len = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
        n_images = int(rng.integers(spec.images_per_instance[0],
                                    spec.images_per_instance[1] + 1))
        instruction = f"task {spec.grammar} id{i} len{text_len}"
        from .seqcore import encode_text
        instr_tokens = encode_text(instruction, config.vocab_size)
        segments = []
        for j in range(n_images):
            tokens = _grammar_tokens(spec.grammar, instr_tokens, text_len,
                                     config.vocab_size)
            segments.append(TextSegment(tokens))
            segments.append(ImageSegment(
                synth_image(rng, config, spec.noise_sigma, spec.patch_scale)))
        target = InterleavedSequence(tuple(segments))
        instances.append(DatasetInstance(
            instruction=instruction,
            context=InterleavedSequence(),
            target=target,
            metadata={"source": "synth", "grammar": spec.grammar, "index": i},
        ))
    return instances


# ---------------------------------------------------------------------------
# Training loops

def _make_optimizer(params, opt: OptimizerConfig) -> torch.optim.Optimizer:
    # Plain Adam with fixed betas; constant learning rate.
    return torch.optim.Adam(params, lr=opt.learning_rate, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=opt.weight_decay)


def evaluate_loss(model: VLGModel, batches: list[FlatBatch]) -> LossBreakdown:
    """Mean loss over a list of prepared examples, eval mode, no grads."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            parts = [model.loss(model(b), b) for b in batches]
    finally:
        if was_training:
            model.train()
    ce = torch.stack([p.ce_text for p in parts]).mean()
    mse = torch.stack([p.mse_image for p in parts]).mean()
    total = ce + model.config.loss_weight_mse * mse
    return LossBreakdown(ce, mse, total,
                         sum(p.n_text_positions for p in parts),
                         sum(p.n_image_positions for p in parts))


def _train_loop(model: VLGModel, params: list[torch.nn.Parameter],
                batches: list[FlatBatch], opt: OptimizerConfig,
                variant: str, metrics: list[MetricsRow]) -> None:
    optimizer = _make_optimizer(params, opt)
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    model.train()
    for step in range(opt.steps):
        optimizer.zero_grad()
        ce_acc = mse_acc = total_acc = 0.0
        n_micro = opt.batch_size * opt.grad_accum_steps
        idx = rng.integers(0, len(batches), size=n_micro)
        for i in idx:
            breakdown = model.loss(model(batches[int(i)]), batches[int(i)])
            (breakdown.total / n_micro).backward()
            ce, mse, total = breakdown.scalars()
            ce_acc += ce / n_micro
            mse_acc += mse / n_micro
            total_acc += total / n_micro
        if not math.isfinite(total_acc):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: ce={ce_acc} mse={mse_acc}")
        if opt.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(params, opt.clip_norm)
        optimizer.step()
        metrics.append(MetricsRow(step, ce_acc, mse_acc, total_acc,
                                  opt.learning_rate, variant, opt.seed))
    model.eval()


def pretrain_base(model: VLGModel, corpus: list[DatasetInstance],
                  opt: OptimizerConfig) -> list[MetricsRow]:
    """Train all base parameters (adapters, if any, are left untouched)."""
    if not corpus:
        raise ContractError("empty corpus")
    batches = [build_training_example(inst, model.config) for inst in corpus]
    metrics: list[MetricsRow] = []
    params = [p for p in model.base_parameters()]
    for p in params:
        p.requires_grad_(True)
    _train_loop(model, params, batches, opt, "base", metrics)
    return metrics


def finetune_adapters(model: VLGModel, corpus: list[DatasetInstance],
                      opt: OptimizerConfig, variant: str | None = None,
                      reinit: bool = True) -> list[MetricsRow]:
    """Freeze the base, zero-init adapters (unless reinit=False), train them.

    Raises if any frozen parameter changes during training.
    """
    if not corpus:
        raise ContractError("empty corpus")
    variant = variant or model.config.adapter_variant
    if reinit:
        model.init_adapters(variant, seed=opt.seed)
    model.freeze_base()
    digest_before = model.base_digest()
    batches = [build_training_example(inst, model.config) for inst in corpus]
    metrics: list[MetricsRow] = []
    params = [p for p in model.adapter_parameters()]
    _train_loop(model, params, batches, opt, variant, metrics)
    if model.base_digest() != digest_before:
        raise VlgError("frozen base parameters changed during fine-tuning")
    return metrics


# ---------------------------------------------------------------------------
# Gradient verification

GRADCHECK_SUBSAMPLE_THRESHOLD = 512
GRADCHECK_SUBSAMPLE_COUNT = 128
GRADCHECK_FD_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
# Floor on the relative-error denominator: below this magnitude the central
# difference itself carries ~1e-9 absolute noise.
GRADCHECK_DENOM_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    per_parameter: dict[str, float] = field(default_factory=dict)
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(model: VLGModel, instance: DatasetInstance,
               tolerance: float = GRADCHECK_TOLERANCE,
               fd_step: float = GRADCHECK_FD_STEP,
               seed: int = 0) -> GradCheckReport:
    """Central finite differences vs. backward-pass gradients over every
    trainable parameter (seed-fixed subsample for large ones), eval mode."""
    model.eval()
    batch = build_training_example(instance, model.config)

    def total_loss() -> torch.Tensor:
        return model.loss(model(batch), batch).total

    loss = total_loss()
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not trainable:
        raise ContractError("no trainable parameters")
    grads = torch.autograd.grad(loss, [p for _, p in trainable], allow_unused=True)
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for (name, p), g in zip(trainable, grads):
        analytic = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(analytic)):
            raise VlgError(f"non-finite analytic gradient in {name}")
        flat = p.detach().view(-1)
        n = flat.numel()
        if n > GRADCHECK_SUBSAMPLE_THRESHOLD:
            indices = rng.choice(n, size=GRADCHECK_SUBSAMPLE_COUNT, replace=False)
        else:
            indices = np.arange(n)
        worst_here = 0.0
        a_flat = analytic.view(-1)
        with torch.no_grad():
            for i in indices:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + fd_step
                f_plus = float(total_loss())
                flat[i] = orig - fd_step
                f_minus = float(total_loss())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * fd_step)
                a = float(a_flat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), GRADCHECK_DENOM_FLOOR)
                worst_here = max(worst_here, rel)
        per_param[name] = worst_here
        if worst_here >= worst[1]:
            worst = (name, worst_here)
    return GradCheckReport(worst[1], worst[0], per_param, tolerance)


# ---------------------------------------------------------------------------
# Variant comparison

ABLATION_COLUMNS = ("variant", "seed", "final_ce_text", "final_mse_image", "steps")


@dataclass
class AblationRow:
    variant: str
    seed: int
    final_ce_text: float
    final_mse_image: float
    steps: int


def ablation_compare(base_model_factory, corpus: list[DatasetInstance],
                     opt: OptimizerConfig, seeds: list[int],
                     variants: tuple[str, ...] = ("shared", "moe", "lateral"),
                     ) -> list[AblationRow]:
    """Fine-tune each variant from the same base at each seed; report final
    losses evaluated on the corpus in eval mode."""
    if len(seeds) < 3:
        raise ContractError("ablation requires at least 3 seeds")
    rows = []
    for seed in seeds:
        for variant in variants:
            model = base_model_factory()
            run_opt = OptimizerConfig(
                learning_rate=opt.learning_rate, batch_size=opt.batch_size,
                grad_accum_steps=opt.grad_accum_steps, steps=opt.steps,
                weight_decay=opt.weight_decay, clip_norm=opt.clip_norm, seed=seed)
            finetune_adapters(model, corpus, run_opt, variant)
            batches = [build_training_example(i, model.config) for i in corpus]
            final = evaluate_loss(model, batches)
            ce, mse, _ = final.scalars()
            rows.append(AblationRow(variant, seed, ce, mse, opt.steps))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r.variant, r.seed, repr(r.final_ce_text),
                    repr(r.final_mse_image), r.steps])
    return buf.getvalue()


def write_metrics(path: str, rows: list[MetricsRow]) -> None:
    atomic_write_text(path, metrics_csv(rows))


def write_ablation(path: str, rows: list[AblationRow]) -> None:
    atomic_write_text(path, ablation_csv(rows))
