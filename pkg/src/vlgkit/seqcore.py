"""Interleaved sequence data model: segments, flattening, modality targets, corpus IO.

A flattened sequence is a list of elements, each either a text token id or a
continuous patch embedding. Image segments contribute ``<IMG>``, Hp*Wp patches,
``</IMG>``. Each position carries a target modality: Image iff the *next*
element is a patch embedding, Text otherwise. Under this rule the ``<IMG>``
position routes to the image path (it predicts the first patch) and the last
patch of an image routes to the text path (it predicts ``</IMG>``), so every
image owns exactly Hp*Wp image-target positions.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .errors import ConfigError, CorpusDecodeError, StructureError

CORPUS_MAGIC = "#vlgkit-corpus v1"


class SpecialToken(enum.IntEnum):
    PAD = 0
    IMG_START = 1  # <IMG>
    IMG_END = 2    # </IMG>
    END_OF_SEQ = 3  # </s>


SPECIAL_TOKEN_TEXT = {
    SpecialToken.PAD: "<pad>",
    SpecialToken.IMG_START: "<IMG>",
    SpecialToken.IMG_END: "</IMG>",
    SpecialToken.END_OF_SEQ: "</s>",
}
N_SPECIAL = len(SpecialToken)


class Modality(enum.Enum):
    TEXT = "text"
    IMAGE = "image"


class ElementKind(enum.Enum):
    TOKEN = "token"
    PATCH = "patch"


@dataclass(frozen=True)
class FlatElement:
    kind: ElementKind
    token: int | None = None
    patch: np.ndarray | None = None  # shape (C,)

    @staticmethod
    def from_token(token: int) -> "FlatElement":
        return FlatElement(ElementKind.TOKEN, token=int(token))

    @staticmethod
    def from_patch(patch: np.ndarray) -> "FlatElement":
        return FlatElement(ElementKind.PATCH, patch=np.asarray(patch, dtype=np.float64))

    @property
    def is_patch(self) -> bool:
        return self.kind is ElementKind.PATCH


@dataclass(frozen=True)
class PatchGrid:
    """An Hp x Wp raster of C-dimensional patch embeddings, row-major."""

    height: int
    width: int
    channels: int
    data: np.ndarray  # shape (Hp*Wp, C), float64

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.shape != (self.height * self.width, self.channels):
            raise StructureError(
                f"patch grid data shape {data.shape} != "
                f"({self.height * self.width}, {self.channels})"
            )
        if not np.all(np.isfinite(data)):
            raise StructureError("patch grid contains non-finite values")

    @property
    def n_patches(self) -> int:
        return self.height * self.width

    def raster_to_rowcol(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.n_patches:
            raise StructureError(f"raster index {i} out of range")
        return i // self.width, i % self.width

    def rowcol_to_raster(self, row: int, col: int) -> int:
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise StructureError(f"(row, col) ({row}, {col}) out of range")
        return row * self.width + col

    def as_2d(self) -> np.ndarray:
        """Reshape to (Hp, Wp, C)."""
        return self.data.reshape(self.height, self.width, self.channels)


@dataclass(frozen=True)
class TextSegment:
    tokens: tuple[int, ...]

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not tokens:
            raise StructureError("text segment must be non-empty")


@dataclass(frozen=True)
class ImageSegment:
    grid: PatchGrid


Segment = TextSegment | ImageSegment


@dataclass(frozen=True)
class InterleavedSequence:
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def is_empty(self) -> bool:
        return not self.segments

    def flat_length(self) -> int:
        n = 0
        for seg in self.segments:
            if isinstance(seg, TextSegment):
                n += len(seg.tokens)
            else:
                n += 2 + seg.grid.n_patches
        return n

    def images(self) -> list[PatchGrid]:
        return [s.grid for s in self.segments if isinstance(s, ImageSegment)]


def flatten(seq: InterleavedSequence) -> tuple[list[FlatElement], list[Modality]]:
    """Flatten a sequence to elements plus the per-position target-modality mask."""
    elements: list[FlatElement] = []
    for seg in seq.segments:
        if isinstance(seg, TextSegment):
            elements.extend(FlatElement.from_token(t) for t in seg.tokens)
        elif isinstance(seg, ImageSegment):
            elements.append(FlatElement.from_token(SpecialToken.IMG_START))
            for p in seg.grid.data:
                elements.append(FlatElement.from_patch(p))
            elements.append(FlatElement.from_token(SpecialToken.IMG_END))
        else:
            raise StructureError(f"unknown segment type {type(seg)!r}")
    return elements, target_mask(elements)


def target_mask(elements: list[FlatElement], tail: Modality = Modality.TEXT) -> list[Modality]:
    """Target modality per position: Image iff the next element is a patch.

    ``tail`` sets the modality of the final position, whose successor is not
    part of the element list (during decoding it is the element about to be
    generated).
    """
    mask = []
    for i, _ in enumerate(elements):
        if i + 1 < len(elements):
            mask.append(Modality.IMAGE if elements[i + 1].is_patch else Modality.TEXT)
        else:
            mask.append(tail)
    return mask


def image_spans(elements: list[FlatElement], tail_open: bool = False) -> list[tuple[int, int]]:
    """Per-image (start, length) spans of conv-routed positions.

    A complete image with Hp*Wp patches yields a span starting at its <IMG>
    position of length Hp*Wp (the <IMG> position plus the first Hp*Wp - 1
    patches). With ``tail_open`` the trailing image may be unterminated; its
    span covers <IMG> plus every patch emitted so far.
    """
    spans: list[tuple[int, int]] = []
    i = 0
    n = len(elements)
    while i < n:
        el = elements[i]
        if el.is_patch:
            raise StructureError(f"patch at position {i} outside <IMG>...</IMG>")
        if el.token == SpecialToken.IMG_START:
            j = i + 1
            while j < n and elements[j].is_patch:
                j += 1
            n_patches = j - i - 1
            if j < n and elements[j].token == SpecialToken.IMG_END:
                spans.append((i, n_patches))
                i = j + 1
            elif j == n and tail_open:
                spans.append((i, n_patches + 1))
                i = j
            else:
                raise StructureError(f"image starting at {i} not closed by </IMG>")
        else:
            i += 1
    return spans


def unflatten(elements: list[FlatElement], grid_height: int, grid_width: int,
              channels: int) -> InterleavedSequence:
    """Parse flat elements back into segments; inverse of flatten for valid input."""
    n_patches = grid_height * grid_width
    segments: list[Segment] = []
    text_run: list[int] = []
    i = 0
    n = len(elements)
    while i < n:
        el = elements[i]
        if el.is_patch:
            raise StructureError(f"patch at position {i} outside <IMG>...</IMG>")
        if el.token == SpecialToken.IMG_START:
            if text_run:
                segments.append(TextSegment(tuple(text_run)))
                text_run = []
            patches = []
            j = i + 1
            while j < n and elements[j].is_patch:
                patches.append(elements[j].patch)
                j += 1
            if j >= n or elements[j].token != SpecialToken.IMG_END:
                raise StructureError(f"image starting at {i} not closed by </IMG>")
            if len(patches) != n_patches:
                raise StructureError(
                    f"image starting at {i} has {len(patches)} patches, "
                    f"expected {n_patches}")
            grid = PatchGrid(grid_height, grid_width, channels, np.stack(patches))
            segments.append(ImageSegment(grid))
            i = j + 1
        elif el.token == SpecialToken.IMG_END:
            raise StructureError(f"</IMG> at position {i} without matching <IMG>")
        else:
            text_run.append(el.token)
            i += 1
    if text_run:
        segments.append(TextSegment(tuple(text_run)))
    return InterleavedSequence(tuple(segments))


ADAPTER_VARIANTS = ("shared", "moe", "lateral")
WRAPPABLE_LAYERS = ("attn_q", "attn_k", "attn_v", "attn_o", "ff_in", "ff_out")


@dataclass(frozen=True)
class ModelConfig:
    """Toy-scale model/adapter configuration (see paper_preset for full-scale values)."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 64
    patch_channels: int = 16
    grid_height: int = 5
    grid_width: int = 5
    lora_rank: int = 8
    lora_alpha: float = 16.0
    conv_kernel: int = 2
    conv_stride: int = 1
    dropout_p: float = 0.05
    adapter_variant: str = "lateral"
    wrapped_layers: tuple[str, ...] = WRAPPABLE_LAYERS
    max_seq_len: int = 512
    loss_weight_mse: float = 1.0
    loss_on_context: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "wrapped_layers", tuple(self.wrapped_layers))
        self.validate()

    @property
    def n_patches(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError(f"vocab_size must exceed {N_SPECIAL} special tokens")
        min_dim = min(self.d_model, self.d_ff)
        if not 1 <= self.lora_rank < min_dim:
            raise ConfigError("lora_rank must satisfy 1 <= r < min wrapped dim")
        if self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        if self.conv_kernel < 1:
            raise ConfigError("conv_kernel must be >= 1")
        if self.conv_stride != 1:
            raise ConfigError("conv_stride must be 1")
        if self.conv_kernel > self.grid_height + 1 or self.conv_kernel > self.grid_width + 1:
            raise ConfigError("conv_kernel exceeds padded grid extent")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.adapter_variant not in ADAPTER_VARIANTS:
            raise ConfigError(f"adapter_variant must be one of {ADAPTER_VARIANTS}")
        for name in self.wrapped_layers:
            if name not in WRAPPABLE_LAYERS:
                raise ConfigError(f"unknown wrapped layer {name!r}")
        if self.max_seq_len < 1 or self.grid_height < 1 or self.grid_width < 1:
            raise ConfigError("sizes must be positive")
        if self.patch_channels < 1:
            raise ConfigError("patch_channels must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def paper_preset(**overrides) -> ModelConfig:
    """Full-scale adapter hyperparameters (rank 128, alpha 256, dropout 0.05, k=2)."""
    base = dict(lora_rank=128, lora_alpha=256.0, conv_kernel=2, conv_stride=1,
                dropout_p=0.05, d_model=512, n_heads=8, max_seq_len=2048)
    base.update(overrides)
    return ModelConfig(**base)


def load_config(path: str) -> ModelConfig:
    """Load a ModelConfig from a JSON file; unknown keys are rejected."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    known = set(ModelConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    if "wrapped_layers" in raw:
        raw["wrapped_layers"] = tuple(raw["wrapped_layers"])
    return ModelConfig(**raw)


def save_config(config: ModelConfig, path: str) -> None:
    atomic_write_text(path, json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")


def encode_text(text: str, vocab_size: int) -> tuple[int, ...]:
    """Deterministically map whitespace-separated words to opaque token ids."""
    n_regular = vocab_size - N_SPECIAL
    ids = []
    for word in text.split():
        h = hashlib.md5(word.encode("utf-8")).digest()
        ids.append(N_SPECIAL + int.from_bytes(h[:8], "little") % n_regular)
    return tuple(ids)


@dataclass(frozen=True)
class DatasetInstance:
    instruction: str
    context: InterleavedSequence
    target: InterleavedSequence
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target.is_empty:
            raise StructureError("dataset instance target must be non-empty")


# ---------------------------------------------------------------------------
# Corpus (de)serialization: one JSON object per line after a magic header.
# Floats survive JSON round-trips bit-exactly (repr-based encoding).

def _segment_to_json(seg: Segment) -> dict:
    if isinstance(seg, TextSegment):
        return {"text": list(seg.tokens)}
    g = seg.grid
    return {"image": {"h": g.height, "w": g.width, "c": g.channels,
                      "data": g.data.reshape(-1).tolist()}}


def _segment_from_json(obj: dict) -> Segment:
    if "text" in obj:
        return TextSegment(tuple(obj["text"]))
    if "image" in obj:
        im = obj["image"]
        data = np.asarray(im["data"], dtype=np.float64).reshape(im["h"] * im["w"], im["c"])
        return ImageSegment(PatchGrid(im["h"], im["w"], im["c"], data))
    raise CorpusDecodeError(f"unknown segment object {sorted(obj)}")


def _sequence_to_json(seq: InterleavedSequence) -> list:
    return [_segment_to_json(s) for s in seq.segments]


def _sequence_from_json(obj: list) -> InterleavedSequence:
    return InterleavedSequence(tuple(_segment_from_json(s) for s in obj))


def serialize_instance(inst: DatasetInstance) -> str:
    return json.dumps({
        "instruction": inst.instruction,
        "context": _sequence_to_json(inst.context),
        "target": _sequence_to_json(inst.target),
        "metadata": inst.metadata,
    })


def deserialize_instance(line: str) -> DatasetInstance:
    try:
        obj = json.loads(line)
        return DatasetInstance(
            instruction=obj["instruction"],
            context=_sequence_from_json(obj["context"]),
            target=_sequence_from_json(obj["target"]),
            metadata=obj.get("metadata", {}),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, StructureError) as e:
        raise CorpusDecodeError(f"bad corpus line: {e}") from e


def write_corpus(path: str, instances: list[DatasetInstance]) -> None:
    lines = [CORPUS_MAGIC]
    lines.extend(serialize_instance(inst) for inst in instances)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_corpus(path: str) -> list[DatasetInstance]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != CORPUS_MAGIC:
            raise CorpusDecodeError(
                f"{path}: bad corpus header {header!r}, expected {CORPUS_MAGIC!r}")
        instances = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                instances.append(deserialize_instance(line))
            except CorpusDecodeError as e:
                raise CorpusDecodeError(f"{path}:{lineno}: {e}") from e
    return instances


def atomic_write_text(path: str, text: str) -> None:
    """Write via temp-then-rename so failures never leave partial output."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
