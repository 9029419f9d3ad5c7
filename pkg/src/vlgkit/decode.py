"""Interleaved inference state machine.

Generation alternates between text mode and image mode. Text tokens are
sampled from the language head; emitting <IMG> switches to image mode, where
exactly Hp*Wp patch embeddings are regressed one at a time (the <IMG> hidden
state predicts the first patch), after which </IMG> is appended
deterministically and text mode resumes. </s> terminates generation. While an
image is partially generated, its conv grid is zero-padded to full size; conv
causality makes the emitted prefix independent of the padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError
from .model import FlatBatch, VLGModel, make_flat_batch
from .seqcore import (
    FlatElement,
    InterleavedSequence,
    Modality,
    SpecialToken,
    unflatten,
)


@dataclass(frozen=True)
class GenerationConfig:
    max_total_steps: int = 256
    max_text_run: int = 64
    sampling: str = "greedy"          # "greedy" | "temperature"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_total_steps < 1 or self.max_text_run < 1:
            raise ContractError("step limits must be positive")
        if self.sampling not in ("greedy", "temperature"):
            raise ContractError(f"unknown sampling mode {self.sampling!r}")
        if self.sampling == "temperature" and self.temperature <= 0:
            raise ContractError("temperature must be > 0")


@dataclass
class GenerationState:
    mode: Modality = Modality.TEXT
    elements: list[FlatElement] = field(default_factory=list)
    prompt_length: int = 0
    patches_emitted: int = 0
    image_start_index: int = -1  # index of the open image's <IMG> element
    text_run: int = 0
    steps_taken: int = 0
    finished: bool = False
    truncated: bool = False


@dataclass
class StepTrace:
    """Per-step prediction record, used to certify incremental == full."""

    position: int                       # context position whose output was used
    logits: torch.Tensor | None = None
    patch: torch.Tensor | None = None


@dataclass
class GenerationResult:
    sequence: InterleavedSequence       # generated part only, structurally valid
    elements: list[FlatElement]         # full context incl. prompt
    prompt_length: int
    truncated: bool
    steps_taken: int
    traces: list[StepTrace] = field(default_factory=list)


def _forward_last(model: VLGModel, state: GenerationState) -> tuple[torch.Tensor, torch.Tensor, FlatBatch]:
    tail = Modality.IMAGE if state.mode is Modality.IMAGE else Modality.TEXT
    batch = make_flat_batch(state.elements, model.config, tail=tail)
    out = model(batch)
    p = batch.length - 1
    return out.logits[p], out.patch_preds[p], batch


def _sample(logits: torch.Tensor, cfg: GenerationConfig,
            rng: torch.Generator | None) -> int:
    # PAD and </IMG> are never valid free-text emissions: </IMG> is only ever
    # appended deterministically after the final patch
    masked = logits.clone()
    masked[SpecialToken.PAD] = float("-inf")
    masked[SpecialToken.IMG_END] = float("-inf")
    if cfg.sampling == "greedy":
        return int(torch.argmax(masked).item())
    probs = torch.softmax(masked / cfg.temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=rng).item())


def step_text(model: VLGModel, state: GenerationState, cfg: GenerationConfig,
              rng: torch.Generator | None = None) -> tuple[int, StepTrace]:
    """Emit one text token; may switch to image mode or finish."""
    if state.mode is not Modality.TEXT:
        raise ContractError("step_text called outside text mode")
    if state.finished:
        raise ContractError("generation already finished")
    if state.text_run >= cfg.max_text_run:
        state.elements.append(FlatElement.from_token(SpecialToken.END_OF_SEQ))
        state.finished = True
        state.truncated = True
        state.steps_taken += 1
        return int(SpecialToken.END_OF_SEQ), StepTrace(len(state.elements) - 2)
    logits, _, _ = _forward_last(model, state)
    token = _sample(logits, cfg, rng)
    trace = StepTrace(len(state.elements) - 1, logits=logits.detach())
    state.elements.append(FlatElement.from_token(token))
    state.steps_taken += 1
    state.text_run += 1
    if token == SpecialToken.IMG_START:
        state.mode = Modality.IMAGE
        state.patches_emitted = 0
        state.image_start_index = len(state.elements) - 1
        state.text_run = 0
    elif token == SpecialToken.END_OF_SEQ:
        state.finished = True
    return token, trace


def step_image(model: VLGModel, state: GenerationState) -> tuple[np.ndarray, StepTrace]:
    """Regress one patch embedding; append </IMG> after the Hp*Wp-th patch."""
    if state.mode is not Modality.IMAGE:
        raise ContractError("step_image called outside image mode")
    n_patches = model.config.n_patches
    if state.patches_emitted >= n_patches:
        raise ContractError("image already complete")
    _, patch_pred, _ = _forward_last(model, state)
    trace = StepTrace(len(state.elements) - 1, patch=patch_pred.detach())
    patch = patch_pred.detach().numpy().astype(np.float64)
    state.elements.append(FlatElement.from_patch(patch))
    state.patches_emitted += 1
    state.steps_taken += 1
    if state.patches_emitted == n_patches:
        state.elements.append(FlatElement.from_token(SpecialToken.IMG_END))
        state.mode = Modality.TEXT
        state.patches_emitted = 0
        state.image_start_index = -1
        state.text_run = 0
    return patch, trace


def generate(model: VLGModel, prompt: list[FlatElement],
             cfg: GenerationConfig) -> GenerationResult:
    """Run the state machine until </s>, step exhaustion, or length limit."""
    was_training = model.training
    model.eval()
    try:
        state = GenerationState(elements=list(prompt), prompt_length=len(prompt))
        rng = None
        if cfg.sampling == "temperature":
            rng = torch.Generator().manual_seed(cfg.seed)
        traces: list[StepTrace] = []
        with torch.no_grad():
            while not state.finished:
                # reserve room for this step's element plus a closing </s>
                if (state.steps_taken >= cfg.max_total_steps
                        or len(state.elements) + 2 > model.config.max_seq_len):
                    _truncate(state)
                    break
                if state.mode is Modality.TEXT:
                    _, trace = step_text(model, state, cfg, rng)
                else:
                    _, trace = step_image(model, state)
                traces.append(trace)
        generated = state.elements[state.prompt_length:]
        seq = unflatten(generated, model.config.grid_height,
                        model.config.grid_width, model.config.patch_channels)
        return GenerationResult(seq, state.elements, state.prompt_length,
                                state.truncated, state.steps_taken, traces)
    finally:
        if was_training:
            model.train()


def _truncate(state: GenerationState) -> None:
    """Close the sequence on step exhaustion; discard any partial image."""
    if state.mode is Modality.IMAGE and state.image_start_index >= 0:
        del state.elements[state.image_start_index:]
        state.mode = Modality.TEXT
        state.patches_emitted = 0
    if not (state.elements and not state.elements[-1].is_patch
            and state.elements[-1].token == SpecialToken.END_OF_SEQ):
        state.elements.append(FlatElement.from_token(SpecialToken.END_OF_SEQ))
    state.finished = True
    state.truncated = True


def transcript(seq: InterleavedSequence) -> str:
    """Human-readable rendering with <IMG>/</IMG> markers."""
    parts = []
    for seg in seq.segments:
        if hasattr(seg, "tokens"):
            parts.append(" ".join(_token_text(t) for t in seg.tokens))
        else:
            parts.append(f"<IMG> [{seg.grid.height}x{seg.grid.width} patches] </IMG>")
    return "\n".join(parts)


def _token_text(token: int) -> str:
    try:
        from .seqcore import SPECIAL_TOKEN_TEXT
        return SPECIAL_TOKEN_TEXT[SpecialToken(token)]
    except ValueError:
        return f"t{token}"
