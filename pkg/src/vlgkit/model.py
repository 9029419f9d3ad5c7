"""Toy frozen decoder-only transformer wrapped with routed adapters.

Embeds interleaved token/patch elements, runs pre-norm causal self-attention
blocks whose designated linear sublayers are RoutedLinear wrappers, and emits
text logits plus predicted patch embeddings at every position. The combined
objective is mean cross-entropy over text-target positions plus a weighted
mean squared error over image-target positions, both restricted to response
positions (next-element prediction with targets shifted by one).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import DTYPE, RoutedLinear, RoutingPlan
from .errors import ContractError, StructureError
from .seqcore import (
    DatasetInstance,
    FlatElement,
    Modality,
    ModelConfig,
    SpecialToken,
    encode_text,
    flatten,
    image_spans,
    target_mask,
)


@dataclass
class FlatBatch:
    """One flattened sequence prepared for the model."""

    token_ids: torch.Tensor      # (N,) long; PAD at patch positions
    patches: torch.Tensor        # (N, C) float64; zeros at token positions
    is_patch: torch.Tensor       # (N,) bool
    plan: RoutingPlan
    loss_mask: torch.Tensor | None = None  # (N,) bool over positions p (targets at p+1)
    elements: list[FlatElement] = field(default_factory=list)

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])


def make_flat_batch(elements: list[FlatElement], config: ModelConfig,
                    tail: Modality = Modality.TEXT,
                    loss_start: int | None = None) -> FlatBatch:
    """Build model inputs from flat elements.

    tail: target modality of the final position (Image while a trailing image
    is being generated). loss_start: first element index that counts as
    response content; positions predicting elements >= loss_start bear loss.
    """
    n = len(elements)
    if n == 0:
        raise StructureError("empty sequence")
    if n > config.max_seq_len:
        raise StructureError(f"sequence length {n} exceeds max_seq_len {config.max_seq_len}")
    token_ids = torch.full((n,), int(SpecialToken.PAD), dtype=torch.long)
    patches = torch.zeros(n, config.patch_channels, dtype=DTYPE)
    is_patch = torch.zeros(n, dtype=torch.bool)
    for i, el in enumerate(elements):
        if el.is_patch:
            if el.patch.shape != (config.patch_channels,):
                raise StructureError(f"patch at {i} has shape {el.patch.shape}")
            patches[i] = torch.from_numpy(np.ascontiguousarray(el.patch))
            is_patch[i] = True
        else:
            if not 0 <= el.token < config.vocab_size:
                raise StructureError(f"token id {el.token} out of vocabulary")
            token_ids[i] = el.token
    mask = target_mask(elements, tail=tail)
    spans = image_spans(elements, tail_open=(tail is Modality.IMAGE))
    plan = RoutingPlan(mask, spans, config.grid_height, config.grid_width)
    plan.validate(n)
    loss_mask = None
    if loss_start is not None:
        loss_mask = torch.zeros(n, dtype=torch.bool)
        for p in range(n - 1):
            if p + 1 >= loss_start:
                loss_mask[p] = True
    return FlatBatch(token_ids, patches, is_patch, plan, loss_mask, list(elements))


def build_training_example(inst: DatasetInstance, config: ModelConfig) -> FlatBatch:
    """instruction tokens + context + target + </s>, loss over the target part."""
    instr = [FlatElement.from_token(t)
             for t in encode_text(inst.instruction, config.vocab_size)]
    ctx, _ = flatten(inst.context)
    tgt, _ = flatten(inst.target)
    elements = instr + ctx + tgt + [FlatElement.from_token(SpecialToken.END_OF_SEQ)]
    loss_start = len(instr) if config.loss_on_context else len(instr) + len(ctx)
    return make_flat_batch(elements, config, loss_start=loss_start)


def prompt_elements(inst: DatasetInstance, config: ModelConfig) -> list[FlatElement]:
    instr = [FlatElement.from_token(t)
             for t in encode_text(inst.instruction, config.vocab_size)]
    ctx, _ = flatten(inst.context)
    return instr + ctx


@dataclass
class ForwardOutput:
    logits: torch.Tensor       # (N, vocab)
    patch_preds: torch.Tensor  # (N, C)
    hidden: torch.Tensor       # (N, d_model)


@dataclass
class LossBreakdown:
    ce_text: torch.Tensor
    mse_image: torch.Tensor
    total: torch.Tensor
    n_text_positions: int
    n_image_positions: int

    def scalars(self) -> tuple[float, float, float]:
        return (float(self.ce_text.detach()), float(self.mse_image.detach()),
                float(self.total.detach()))


class Block(nn.Module):
    """Pre-norm causal self-attention + feed-forward, with wrappable linears."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.d_model, config.n_heads
        self.n_heads = h
        self.head_dim = d // h
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn_q = RoutedLinear(d, d)
        self.attn_k = RoutedLinear(d, d)
        self.attn_v = RoutedLinear(d, d)
        self.attn_o = RoutedLinear(d, d)
        self.ff_in = RoutedLinear(d, config.d_ff)
        self.ff_out = RoutedLinear(config.d_ff, d)

    def forward(self, x: torch.Tensor, plan: RoutingPlan) -> torch.Tensor:
        n, d = x.shape
        a = self.ln1(x)
        q = self.attn_q(a, plan).view(n, self.n_heads, self.head_dim).transpose(0, 1)
        k = self.attn_k(a, plan).view(n, self.n_heads, self.head_dim).transpose(0, 1)
        v = self.attn_v(a, plan).view(n, self.n_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(0, 1).reshape(n, d)
        x = x + self.attn_o(ctx, plan)
        f = self.ln2(x)
        x = x + self.ff_out(F.gelu(self.ff_in(f, plan)), plan)
        return x


class VLGModel(nn.Module):
    """Token/patch embedding, transformer blocks, text and image heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        gen = torch.Generator().manual_seed(config.seed)
        self.token_embedding = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.position_embedding = nn.Embedding(config.max_seq_len, d, dtype=DTYPE)
        self.image_projector = nn.Linear(config.patch_channels, d, bias=False, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_final = nn.LayerNorm(d, dtype=DTYPE)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=True, dtype=DTYPE)
        self.image_head = nn.Linear(d, config.patch_channels, bias=False, dtype=DTYPE)
        self._init_base_weights(gen)
        self._adapter_module_names: list[str] = []

    def _init_base_weights(self, gen: torch.Generator) -> None:
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.dim() >= 2:
                    nn.init.normal_(p, mean=0.0, std=0.05, generator=gen)
                elif name.endswith(".weight"):  # LayerNorm gains
                    p.fill_(1.0)
                else:
                    p.zero_()

    # -- parameter partitioning ---------------------------------------------

    def wrapped_linears(self) -> list[tuple[str, RoutedLinear]]:
        out = []
        for li, block in enumerate(self.blocks):
            for name in self.config.wrapped_layers:
                out.append((f"blocks.{li}.{name}", getattr(block, name)))
        return out

    def init_adapters(self, variant: str | None = None, seed: int | None = None) -> None:
        """Zero-initialize adapters on every wrapped linear (B = 0 exactly)."""
        variant = variant or self.config.adapter_variant
        seed = self.config.seed if seed is None else seed
        gen = torch.Generator().manual_seed(seed * 1000003 + 17)
        for _, layer in self.wrapped_linears():
            layer.init_adapters(variant, self.config, gen)

    def adapter_parameters(self):
        for _, layer in self.wrapped_linears():
            yield from layer.adapter_parameters()

    def named_adapter_parameters(self):
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        for name, p in self.named_parameters():
            if id(p) in adapter_ids:
                yield name, p

    def base_parameters(self):
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        for p in self.parameters():
            if id(p) not in adapter_ids:
                yield p

    def freeze_base(self) -> None:
        for p in self.base_parameters():
            p.requires_grad_(False)
        for p in self.adapter_parameters():
            p.requires_grad_(True)

    def base_digest(self) -> str:
        """SHA-256 over all frozen (non-adapter) parameter bytes."""
        h = hashlib.sha256()
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if id(p) not in adapter_ids:
                h.update(name.encode())
                h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    # -- forward / loss ------------------------------------------------------

    def embed(self, batch: FlatBatch) -> torch.Tensor:
        n = batch.length
        tok = self.token_embedding(batch.token_ids)
        proj = self.image_projector(batch.patches)
        x = torch.where(batch.is_patch.unsqueeze(1), proj, tok)
        pos = self.position_embedding(torch.arange(n, dtype=torch.long))
        return x + pos

    def forward(self, batch: FlatBatch) -> ForwardOutput:
        x = self.embed(batch)
        for block in self.blocks:
            x = block(x, batch.plan)
        x = self.ln_final(x)
        return ForwardOutput(self.lm_head(x), self.image_head(x), x)

    def loss(self, out: ForwardOutput, batch: FlatBatch) -> LossBreakdown:
        """Next-element CE over text targets and MSE over patch targets,
        restricted to the batch loss mask."""
        if batch.loss_mask is None or not bool(batch.loss_mask.any()):
            raise ContractError("loss requires a non-empty loss mask")
        n = batch.length
        zero = torch.zeros((), dtype=DTYPE)
        text_pos, image_pos = [], []
        for p in range(n - 1):
            if not batch.loss_mask[p]:
                continue
            if batch.is_patch[p + 1]:
                image_pos.append(p)
            else:
                text_pos.append(p)
        if text_pos:
            idx = torch.tensor(text_pos, dtype=torch.long)
            targets = batch.token_ids[idx + 1]
            ce = F.cross_entropy(out.logits[idx], targets)
        else:
            ce = zero
        if image_pos:
            idx = torch.tensor(image_pos, dtype=torch.long)
            targets = batch.patches[idx + 1]
            mse = F.mse_loss(out.patch_preds[idx], targets)
        else:
            mse = zero
        total = ce + self.config.loss_weight_mse * mse
        return LossBreakdown(ce, mse, total, len(text_pos), len(image_pos))
