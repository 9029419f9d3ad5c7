"""Instruction-data curation pipeline.

Stages run in a fixed order per instance: image count and text length (plus an
optional coherence gate), text quality, duplicate images, then instruction
annotation for survivors. The duplicate filter rejects an instance iff any
image pair's perceptual distance is strictly greater than the threshold
(default 0.6). Scorer backends are pluggable: a deterministic built-in
heuristic, or a remote judge endpoint speaking {"prompt": str} ->
{"text": str} JSON over HTTP.
"""

from __future__ import annotations

import csv
import enum
import importlib.resources
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .seqcore import (
    DatasetInstance,
    ImageSegment,
    InterleavedSequence,
    PatchGrid,
    TextSegment,
    atomic_write_text,
    encode_text,
)


def load_prompt(name: str) -> str:
    """Load a prompt template resource ('text_quality' or 'instruction_annotation')."""
    ref = importlib.resources.files("vlgkit.prompts").joinpath(f"{name}.txt")
    return ref.read_text(encoding="utf-8").strip()


class Stage(enum.Enum):
    IMAGE_COUNT = "ImageCount"
    TEXT_LENGTH = "TextLength"
    COHERENCE = "Coherence"
    TEXT_QUALITY = "TextQuality"
    DUPLICATE = "Duplicate"
    NONE = "None"


@dataclass(frozen=True)
class RawInstance:
    """Sentence-segmented text interleaved with images, in source order."""

    parts: tuple[str | PatchGrid, ...]
    source_id: str = ""
    domain: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ContractError("raw instance must have text or images")

    @property
    def sentences(self) -> list[str]:
        return [p for p in self.parts if isinstance(p, str)]

    @property
    def images(self) -> list[PatchGrid]:
        return [p for p in self.parts if isinstance(p, PatchGrid)]

    @property
    def text(self) -> str:
        return " ".join(self.sentences)


@dataclass(frozen=True)
class PipelineConfig:
    min_images: int = 3
    max_images: int = 6
    max_sentences: int = 12
    dup_threshold: float = 0.6     # strictly-greater rejects
    coherence_threshold: float | None = None  # disabled by default
    invert_dup_rule: bool = False  # reject low distances instead of high ones

    def __post_init__(self):
        if self.min_images > self.max_images:
            raise ContractError("min_images must be <= max_images")
        if not 0 <= self.dup_threshold:
            raise ContractError("dup_threshold must be non-negative")
        if self.max_sentences < 1:
            raise ContractError("max_sentences must be positive")


@dataclass
class FilterVerdict:
    accepted: bool
    first_rejecting_stage: Stage
    indeterminate: bool = False
    scores: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Scorer backends

class BuiltInHeuristic:
    """Deterministic scorers needing no external service."""

    def text_quality(self, text: str) -> bool:
        """Crude fluency proxy: enough words and a reasonable type-token ratio."""
        words = text.lower().split()
        if len(words) < 3:
            return False
        ttr = len(set(words)) / len(words)
        return ttr >= 0.3

    def perceptual_distance(self, a: PatchGrid, b: PatchGrid) -> float:
        """Mean absolute embedding difference squashed to [0, 1); 0 iff identical."""
        raw = float(np.mean(np.abs(a.data - b.data)))
        return raw / (1.0 + raw)

    def coherence(self, instance: RawInstance) -> float:
        """Mean pairwise image similarity = 1 - mean pairwise distance."""
        images = instance.images
        if len(images) < 2:
            return 1.0
        dists = [self.perceptual_distance(a, b)
                 for a, b in itertools.combinations(images, 2)]
        return 1.0 - float(np.mean(dists))

    def annotate(self, instance: RawInstance) -> str:
        n_img = len(instance.images)
        n_sent = len(instance.sentences)
        return (f"Generate an interleaved response with {n_sent} sentences "
                f"and {n_img} images continuing: {instance.sentences[0] if n_sent else ''}"
                ).strip()


class JudgeError(Exception):
    """Remote judge unreachable or returned an unparseable response."""


class RemoteJudge:
    """Client for an HTTP judge endpoint: POST {"prompt": str} -> {"text": str}."""

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.quality_prompt = load_prompt("text_quality")
        self.annotation_prompt = load_prompt("instruction_annotation")

    def _ask(self, prompt: str) -> str:
        import requests

        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.endpoint, json={"prompt": prompt},
                                     timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["text"]
            except Exception as e:  # noqa: BLE001 - any transport failure retries
                last = e
        raise JudgeError(f"judge at {self.endpoint} unreachable: {last}")

    def text_quality(self, text: str) -> bool:
        answer = self._ask(self.quality_prompt.replace("{TEXT}", text)).strip()
        if answer == "1":
            return True
        if answer == "0":
            return False
        raise JudgeError(f"quality filter expected '0' or '1', got {answer!r}")

    def annotate(self, instance: RawInstance) -> str:
        answer = self._ask(self.annotation_prompt.replace("{TEXT}", instance.text)).strip()
        if not answer:
            raise JudgeError("empty annotation response")
        return answer


# ---------------------------------------------------------------------------
# Pipeline

def duplicate_filter(images: list[PatchGrid], threshold: float,
                     distance_fn, invert: bool = False) -> tuple[bool, float]:
    """Accept unless some pair's distance is strictly greater than threshold
    (strictly lower with invert). Returns (accepted, worst score)."""
    if len(images) < 2:
        return True, 0.0
    inf = float("inf")
    worst = -inf if not invert else inf
    for a, b in itertools.combinations(images, 2):
        d = distance_fn(a, b)
        worst = max(worst, d) if not invert else min(worst, d)
        if (not invert and d > threshold) or (invert and d < threshold):
            return False, d
    return True, worst


def check_instance(instance: RawInstance, cfg: PipelineConfig,
                   backend) -> FilterVerdict:
    """Run the filter stages (not annotation) on one instance."""
    scores: dict[str, float] = {}
    n_images = len(instance.images)
    scores["n_images"] = float(n_images)
    if not cfg.min_images <= n_images <= cfg.max_images:
        return FilterVerdict(False, Stage.IMAGE_COUNT, scores=scores)
    n_sentences = len(instance.sentences)
    scores["n_sentences"] = float(n_sentences)
    if n_sentences > cfg.max_sentences:
        return FilterVerdict(False, Stage.TEXT_LENGTH, scores=scores)
    if cfg.coherence_threshold is not None:
        heuristic = backend if hasattr(backend, "coherence") else BuiltInHeuristic()
        coherence = heuristic.coherence(instance)
        scores["coherence"] = coherence
        if coherence < cfg.coherence_threshold:
            return FilterVerdict(False, Stage.COHERENCE, scores=scores)
    try:
        good = backend.text_quality(instance.text)
    except JudgeError:
        return FilterVerdict(False, Stage.TEXT_QUALITY, indeterminate=True,
                             scores=scores)
    scores["text_quality"] = float(good)
    if not good:
        return FilterVerdict(False, Stage.TEXT_QUALITY, scores=scores)
    distance_fn = (backend.perceptual_distance
                   if hasattr(backend, "perceptual_distance")
                   else BuiltInHeuristic().perceptual_distance)
    ok, score = duplicate_filter(instance.images, cfg.dup_threshold,
                                 distance_fn, cfg.invert_dup_rule)
    scores["dup_worst"] = score
    if not ok:
        return FilterVerdict(False, Stage.DUPLICATE, scores=scores)
    return FilterVerdict(True, Stage.NONE, scores=scores)


def to_dataset_instance(instance: RawInstance, instruction: str,
                        vocab_size: int) -> DatasetInstance:
    """Re-emit an accepted raw instance as a training instance."""
    segments = []
    text_run: list[int] = []
    for part in instance.parts:
        if isinstance(part, str):
            text_run.extend(encode_text(part, vocab_size))
        else:
            if text_run:
                segments.append(TextSegment(tuple(text_run)))
                text_run = []
            segments.append(ImageSegment(part))
    if text_run:
        segments.append(TextSegment(tuple(text_run)))
    return DatasetInstance(
        instruction=instruction,
        context=InterleavedSequence(),
        target=InterleavedSequence(tuple(segments)),
        metadata={"source": instance.source_id, "domain": instance.domain},
    )


def run_pipeline(instances: list[RawInstance], cfg: PipelineConfig, backend,
                 vocab_size: int = 64,
                 ) -> tuple[list[DatasetInstance], list[FilterVerdict]]:
    """Filter all instances in input order and annotate the survivors."""
    accepted: list[DatasetInstance] = []
    verdicts: list[FilterVerdict] = []
    for inst in instances:
        verdict = check_instance(inst, cfg, backend)
        if verdict.accepted:
            try:
                instruction = backend.annotate(inst)
            except JudgeError:
                verdict = FilterVerdict(False, Stage.TEXT_QUALITY,
                                        indeterminate=True, scores=verdict.scores)
                verdicts.append(verdict)
                continue
            accepted.append(to_dataset_instance(inst, instruction, vocab_size))
        verdicts.append(verdict)
    return accepted, verdicts


def verdicts_csv(verdicts: list[FilterVerdict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["index", "accepted", "first_rejecting_stage", "indeterminate"])
    for i, v in enumerate(verdicts):
        w.writerow([i, int(v.accepted), v.first_rejecting_stage.value,
                    int(v.indeterminate)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Corpus statistics

def stats_report(corpus: list[DatasetInstance]) -> str:
    """CSV of counts, image-count histogram, and text-length histogram."""
    image_hist: dict[int, int] = {}
    sentence_hist: dict[int, int] = {}
    domains: dict[str, int] = {}
    for inst in corpus:
        n_img = len(inst.target.images()) + len(inst.context.images())
        image_hist[n_img] = image_hist.get(n_img, 0) + 1
        n_tokens = sum(len(s.tokens) for s in inst.target.segments
                       if isinstance(s, TextSegment))
        sentence_hist[n_tokens] = sentence_hist.get(n_tokens, 0) + 1
        domain = inst.metadata.get("domain")
        if domain:
            domains[domain] = domains.get(domain, 0) + 1
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "key", "value"])
    w.writerow(["instances", "", len(corpus)])
    for k in sorted(image_hist):
        w.writerow(["image_count", k, image_hist[k]])
    for k in sorted(sentence_hist):
        w.writerow(["text_tokens", k, sentence_hist[k]])
    for k in sorted(domains):
        w.writerow(["domain", k, domains[k]])
    return buf.getvalue()


def write_stats(path: str, corpus: list[DatasetInstance]) -> None:
    atomic_write_text(path, stats_report(corpus))
