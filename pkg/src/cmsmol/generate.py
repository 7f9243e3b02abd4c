"""Controllable generation: prompt construction, TopPK sampling, span
decoding with a key/value cache and reintegration into the source."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._util import derive_rng
from .corpus import L_MAX, Span
from .model import Decoder, ModelConfig, Params, SequenceTooLong
from .smiles import is_valid
from .tokenizer import S2S_CLOSE, Vocabulary, mask_text, s2s_open_text


class GenerateError(ValueError):
    pass


class SpecInfeasible(GenerateError):
    pass


class SpanCountMismatch(GenerateError):
    pass


class BudgetExceeded(GenerateError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


ARCHETYPES = ("insert", "modify", "s2s-contract", "s2s-expand", "mask+s2s", "two-masks")


@dataclass(frozen=True)
class PromptSpec:
    """Markers for one prompt.  Mask markers use ``target_length`` as the
    size hint; ``masked_length`` 0 means insertion."""
    archetype: str
    spans: tuple[Span, ...]

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise SpecInfeasible(f"unknown archetype {self.archetype!r}")
        if self.archetype == "insert" and any(s.masked_length for s in self.spans):
            raise SpecInfeasible("insert markers must have masked_length 0")
        if self.archetype.startswith("s2s") and not any(s.kind == "s2s" for s in self.spans):
            raise SpecInfeasible("s2s archetypes need a seq2seq marker")

    @property
    def tail_order(self) -> list[Span]:
        masks = sorted((s for s in self.spans if s.kind == "mask"), key=lambda s: s.index)
        return masks + [s for s in self.spans if s.kind == "s2s"]

    def check(self, source: str) -> None:
        prev_end = 0
        for s in sorted(self.spans, key=lambda s: s.start):
            if s.start < 0 or s.end > len(source):
                raise SpecInfeasible(f"marker {s} outside source of length {len(source)}")
            if s.start < prev_end:
                raise SpecInfeasible("markers overlap")
            if not 1 <= s.target_length:
                raise SpecInfeasible("size hints must be positive")
            if s.kind == "s2s" and s.masked_length == 0:
                raise SpecInfeasible("seq2seq markers condition on at least one character")
            prev_end = s.end
        idx = sorted(s.index for s in self.spans if s.kind == "mask")
        if idx != list(range(1, len(idx) + 1)):
            raise SpecInfeasible("mask indices must be 1..n")

    def to_list(self) -> list:
        return [s.as_list() for s in self.spans]


def trailing_construct(source: str, span: Span) -> str:
    if span.kind == "mask":
        return mask_text(span.index, span.target_length)
    return s2s_open_text(span.target_length, span.index) + source[span.start:span.end] + S2S_CLOSE


def build_prompt(source: str, spec: PromptSpec) -> str:
    """Body with every marker rendered in place, then the trailing constructs
    (masks by index, seq2seq last).  No [BOS]."""
    spec.check(source)
    out, pos = [], 0
    for s in sorted(spec.spans, key=lambda s: s.start):
        out.append(source[pos:s.start])
        out.append(trailing_construct(source, s))
        pos = s.end
    out.append(source[pos:])
    out.extend(trailing_construct(source, s) for s in spec.tail_order)
    return "".join(out)


def decoding_prefix(source: str, spec: PromptSpec) -> str:
    """Body plus only the first trailing construct: the text a model
    continues when decoding spans one marker at a time."""
    full = build_prompt(source, spec)
    rest = "".join(trailing_construct(source, s) for s in spec.tail_order[1:])
    return full[: len(full) - len(rest)]


def reintegrate(source: str, spec: PromptSpec, spans: Sequence[str]) -> str:
    """Splice generated text into the markers (given in tail order)."""
    order = spec.tail_order
    if len(spans) != len(order):
        raise SpanCountMismatch(f"{len(spans)} spans for {len(order)} markers")
    text = source
    for marker, span in sorted(zip(order, spans), key=lambda t: t[0].start, reverse=True):
        text = text[:marker.start] + span + text[marker.end:]
    return text


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class SamplerConfig:
    top_k: int = 10
    top_p: float = 0.9
    temperature: float = 1.0

    def __post_init__(self):
        if isinstance(self.top_k, bool) or not isinstance(self.top_k, (int, np.integer)) or self.top_k < 1:
            raise ValueError("top_k must be an integer >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


GREEDY = SamplerConfig(top_k=1, top_p=1.0)


def kept_set(logits: np.ndarray, config: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Token ids kept by TopPK and their renormalized probabilities.

    Ties in probability are broken by lower token id.
    """
    z = np.asarray(logits, dtype=np.float64) / config.temperature
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    # smallest prefix with cumulative mass >= top_p (tiny slack for round-off)
    n_nucleus = int(np.searchsorted(cum, config.top_p - 1e-12, side="left")) + 1
    n_keep = max(1, min(config.top_k, n_nucleus, len(probs)))
    keep = order[:n_keep]
    p = probs[keep]
    return keep, p / p.sum()


def sample_toppk(logits: np.ndarray, config: SamplerConfig, rng: np.random.Generator) -> int:
    keep, p = kept_set(logits, config)
    if len(keep) == 1:
        return int(keep[0])
    u = rng.random()
    i = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return int(keep[min(i, len(keep) - 1)])


# ---------------------------------------------------------------------------
# model wrapper

@dataclass
class TextModel:
    params: Params
    config: ModelConfig
    vocab: Vocabulary

    @classmethod
    def from_checkpoint(cls, ckpt, vocab: Vocabulary) -> "TextModel":
        return cls(ckpt.params, ckpt.config, vocab)

    def decoder(self) -> Decoder:
        return Decoder(self.params, self.config.n_heads)

    def complete(self, prompt: str, max_chars: int, sampler: SamplerConfig,
                 rng: np.random.Generator) -> str:
        """Sample after ``prompt`` until a sentinel/EOS or ``max_chars`` characters."""
        dec = self.decoder()
        logits = dec.feed(self.vocab.encode(prompt))
        text = ""
        while len(text) < max_chars:
            tok = sample_toppk(logits, sampler, rng)
            if self.vocab.is_sentinel(tok):
                break
            text += self.vocab.token_text(tok)
            if len(text) >= max_chars:
                break
            try:
                logits = dec.feed([tok])
            except SequenceTooLong:
                break
        return text[:max_chars]


@dataclass
class GeneratedSpans:
    spans: list[str]
    flags: list[str] = field(default_factory=list)
    tokens: int = 0


def generate_spans(model: TextModel, prompt_ids: Sequence[int], spec: PromptSpec, source: str,
                   sampler: SamplerConfig, rng: np.random.Generator, *, strict: bool = False) -> GeneratedSpans:
    """Decode one span per marker.

    ``prompt_ids`` must end with the first trailing construct.  A span ends
    at any sentinel or EOS; the next marker's construct is then fed.
    Decoding is capped at 2 * sum(hints) + 8 sampled tokens.
    """
    order = spec.tail_order
    budget = 2 * sum(s.target_length for s in order) + 8
    vocab = model.vocab
    dec = model.decoder()
    result = GeneratedSpans([])
    try:
        logits = dec.feed(prompt_ids)
    except SequenceTooLong:
        result.flags.append("ContextExhausted")
        result.spans = [""] * len(order)
        return result
    for j in range(len(order)):
        pieces = []
        while True:
            if result.tokens >= budget:
                result.flags.append("BudgetExceeded")
                break
            tok = sample_toppk(logits, sampler, rng)
            result.tokens += 1
            if vocab.is_sentinel(tok):
                break
            pieces.append(vocab.token_text(tok))
            try:
                logits = dec.feed([tok])
            except SequenceTooLong:
                result.flags.append("ContextExhausted")
                break
        result.spans.append("".join(pieces))
        if result.flags:
            break
        if j + 1 < len(order):
            nxt = vocab.encode(trailing_construct(source, order[j + 1]))
            try:
                logits = dec.feed(nxt)
            except SequenceTooLong:
                result.flags.append("ContextExhausted")
                break
    result.spans += [""] * (len(order) - len(result.spans))
    if strict and "BudgetExceeded" in result.flags:
        raise BudgetExceeded("decoding budget exhausted", partial=result)
    return result


# ---------------------------------------------------------------------------
# batch generation

@dataclass(frozen=True)
class GenerationSettings:
    mask_s2s_prob: float = 0.5
    max_masked: int = 12
    max_masked_fraction: float = 1 / 3
    max_generated: int = L_MAX
    top_k_grid: tuple[int, ...] = (10, 15, 20)
    top_p_grid: tuple[float, ...] = (0.85, 0.9, 0.95)
    temperature: float = 1.0
    placement_retries: int = 64


@dataclass
class Candidate:
    index: int
    source: str
    setting: str
    prompt: str
    spec: PromptSpec | None
    sampler: SamplerConfig | None
    spans: list[str]
    generated: str
    valid: bool
    reason: str
    flags: list[str] = field(default_factory=list)
    scores: dict | None = None

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "source": self.source,
            "setting": self.setting,
            "prompt": self.prompt,
            "markers": self.spec.to_list() if self.spec else [],
            "sampler": asdict(self.sampler) if self.sampler else None,
            "spans": self.spans,
            "generated": self.generated,
            "valid": self.valid,
            "reason": self.reason,
            "flags": self.flags,
            "scores": self.scores,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Candidate":
        markers = tuple(Span.from_list(m) for m in rec["markers"])
        archetype = "mask+s2s" if rec["setting"] == "mask+s2s" else "two-masks"
        spec = PromptSpec(archetype, markers) if markers else None
        sampler = SamplerConfig(**rec["sampler"]) if rec.get("sampler") else None
        return cls(rec["index"], rec["source"], rec["setting"], rec["prompt"], spec, sampler,
                   rec["spans"], rec["generated"], rec["valid"], rec["reason"], rec.get("flags", []),
                   rec.get("scores"))


def draw_spec(source: str, setting: str, settings: GenerationSettings,
              rng: np.random.Generator) -> PromptSpec:
    """Draw the six per-instance variables (start, masked length and
    generated length for each of two markers)."""
    n = len(source)
    hi_m = min(settings.max_masked, int(n * settings.max_masked_fraction))
    if hi_m < 1:
        raise SpecInfeasible(f"source of length {n} too short for a marker")
    kinds = ("mask", "s2s") if setting == "mask+s2s" else ("mask", "mask")
    for _ in range(settings.placement_retries):
        placed = []
        for kind in kinds:
            m = int(rng.integers(1, hi_m + 1))
            t = int(rng.integers(1, settings.max_generated + 1))
            # at least one untouched character between markers
            starts = [s for s in range(0, n - m + 1)
                      if all(s + m < o.start or s > o.end for o in placed)]
            if not starts:
                break
            placed.append(Span(kind, starts[int(rng.integers(len(starts)))], m, t, 1))
        else:
            placed.sort(key=lambda s: s.start)
            i, spans = 0, []
            for s in placed:
                if s.kind == "mask":
                    i += 1
                    s = Span("mask", s.start, s.masked_length, s.target_length, i)
                spans.append(s)
            return PromptSpec("mask+s2s" if setting == "mask+s2s" else "two-masks", tuple(spans))
    raise SpecInfeasible("could not place markers")


def generate_one(model: TextModel, source: str, index: int, seed: int,
                 settings: GenerationSettings) -> Candidate:
    rng = derive_rng(seed, index)
    setting = "mask+s2s" if rng.random() < settings.mask_s2s_prob else "two-masks"
    sampler = SamplerConfig(int(rng.choice(settings.top_k_grid)), float(rng.choice(settings.top_p_grid)),
                            settings.temperature)
    try:
        spec = draw_spec(source, setting, settings, rng)
    except SpecInfeasible as exc:
        return Candidate(index, source, setting, "", None, sampler, [], "", False, str(exc), ["SpecInfeasible"])
    prompt = build_prompt(source, spec)
    ids = model.vocab.encode("[BOS]" + decoding_prefix(source, spec))
    out = generate_spans(model, ids, spec, source, sampler, rng)
    generated = reintegrate(source, spec, out.spans)
    validity = is_valid(generated)
    return Candidate(index, source, setting, prompt, spec, sampler, out.spans, generated,
                     validity.valid, validity.reason, out.flags)


_WORKER_MODEL: TextModel | None = None


def _init_worker(model: TextModel):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _run_chunk(args):
    source, indices, seed, settings = args
    return [generate_one(_WORKER_MODEL, source, i, seed, settings) for i in indices]


def batch_generate(model: TextModel, source: str, n_samples: int, seed: int,
                   settings: GenerationSettings = GenerationSettings(), *, workers: int = 1) -> list[Candidate]:
    """``n_samples`` candidates; candidate i uses the generator derived from
    ``(seed, i)`` so the result does not depend on ``workers``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if workers <= 1:
        return [generate_one(model, source, i, seed, settings) for i in range(n_samples)]
    bounds = np.linspace(0, n_samples, workers + 1).astype(int)
    jobs = [(source, range(a, b), seed, settings) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model,)) as pool:
        chunks = list(pool.map(_run_chunk, jobs))
    return [c for chunk in chunks for c in chunk]


def hint_compliance(candidates: Iterable[Candidate]) -> float:
    """Fraction of generated spans whose length equals their size hint."""
    hit = total = 0
    for c in candidates:
        if c.spec is None:
            continue
        for marker, span in zip(c.spec.tail_order, c.spans):
            total += 1
            hit += len(span) == marker.target_length
    return hit / total if total else float("nan")


def write_candidates(path, candidates: Iterable[Candidate]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in candidates:
            fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")


def read_candidates(path) -> list[Candidate]:
    with open(path, encoding="utf-8") as fh:
        return [Candidate.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class ValidityProfile:
    """Validity counts per (masked length, generated-length hint), one entry per marker."""
    counts: dict[tuple[int, int], list[int]]

    def rate(self, masked: int, generated: int) -> float:
        n, v = self.counts.get((masked, generated), (0, 0))
        return v / n if n else float("nan")

    def matrix(self) -> tuple[list[int], list[int], np.ndarray]:
        ms = sorted({k[0] for k in self.counts})
        gs = sorted({k[1] for k in self.counts})
        mat = np.full((len(ms), len(gs)), np.nan)
        for (m, g) in self.counts:
            mat[ms.index(m), gs.index(g)] = self.rate(m, g)
        return ms, gs, mat

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["masked_length", "generated_length", "n", "valid", "validity_rate"])
        for (m, g), (n, v) in sorted(self.counts.items()):
            w.writerow([m, g, n, v, f"{v / n:.6f}"])
        return buf.getvalue()


def length_validity_profile(candidates: Iterable[Candidate]) -> ValidityProfile:
    counts: dict[tuple[int, int], list[int]] = {}
    for c in candidates:
        if c.spec is None:
            continue
        for marker in c.spec.spans:
            cell = counts.setdefault((marker.masked_length, marker.target_length), [0, 0])
            cell[0] += 1
            cell[1] += int(c.valid)
    return ValidityProfile(counts)
