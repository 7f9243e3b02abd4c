"""Training-example construction: plain causal sequences (CLM), causally
masked sequences with size-hinted sentinels (CM), and CM plus one
seq2seq rewrite span (CMS).

Spans are measured in characters of the raw SMILES string.  A CM example
for ``ABCDEFG`` with one span at 2..5 reads::

    [BOS]AB<mask_1:3>FG<mask_1:3>CDE[EOS]

A CMS example appends, after the mask tails, the seq2seq construct and the
rewritten target::

    ...<s2s_1_t:xyz>...<mask_1:n>...<s2s_1_t:xyz>TARGET[EOS]
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._util import derive_rng
from .tokenizer import S2S_CLOSE, Vocabulary, mask_text, s2s_open_text
from .validation import check_fraction, check_text_list

logger = logging.getLogger(__name__)

L_MAX = 32
MAX_PLAN_RETRIES = 64

CLM, CM, CMS = "CLM", "CM", "CMS"
PHASE_OF = {1: CLM, 2: CM, 3: CMS}

# phase-3 configurations and their default draw probabilities
CMS_CONFIGS = ("1m", "2m", "1m+s2s", "2m+s2s")
CMS_MIX = (0.1, 0.1, 0.4, 0.4)


class CorpusError(ValueError):
    pass


class SourceTooShort(CorpusError):
    pass


class PlanInfeasible(CorpusError):
    pass


class PlanMismatch(CorpusError):
    pass


class CorruptExample(CorpusError):
    pass


@dataclass(frozen=True)
class Span:
    kind: str  # "mask" or "s2s"
    start: int
    masked_length: int
    target_length: int
    index: int = 1

    @property
    def end(self) -> int:
        return self.start + self.masked_length

    def as_list(self) -> list:
        return [self.kind, self.start, self.masked_length, self.target_length, self.index]

    @classmethod
    def from_list(cls, values) -> "Span":
        kind, start, masked, target, index = values
        return cls(str(kind), int(start), int(masked), int(target), int(index))


@dataclass(frozen=True)
class MaskPlan:
    spans: tuple[Span, ...]
    source_length: int
    mask_fraction: float = 0.0

    @property
    def mask_spans(self) -> tuple[Span, ...]:
        return tuple(s for s in self.spans if s.kind == "mask")

    @property
    def s2s_span(self) -> Span | None:
        found = [s for s in self.spans if s.kind == "s2s"]
        return found[0] if found else None

    @property
    def configuration(self) -> str:
        n = len(self.mask_spans)
        label = f"{n}m" if n else ""
        if self.s2s_span is not None:
            label = f"{label}+s2s" if label else "s2s"
        return label or "none"

    def check(self, source: str, *, n_max: int = 2, l_max: int = L_MAX) -> None:
        """Raise :class:`PlanMismatch` unless the plan fits ``source``."""
        if self.source_length != len(source):
            raise PlanMismatch(f"plan built for length {self.source_length}, source has {len(source)}")
        prev_end = 0
        for s in self.spans:
            if s.start < prev_end:
                raise PlanMismatch("spans overlap or are not sorted by start")
            if s.start < 0 or s.end > len(source) or (s.masked_length > 0 and s.start >= len(source)):
                raise PlanMismatch(f"span {s} leaves the source")
            if not 1 <= s.target_length <= l_max:
                raise PlanMismatch(f"target length {s.target_length} outside [1, {l_max}]")
            prev_end = s.end
        if len(self.mask_spans) > n_max or sum(s.kind == "s2s" for s in self.spans) > 1:
            raise PlanMismatch("too many spans")


@dataclass
class TrainingExample:
    phase: str
    surface: str
    source: str
    plan: MaskPlan | None
    ids: tuple[int, ...] | None = None
    target: str | None = None
    key: tuple[int, int] = (0, 0)  # (epoch seed, example index)
    warning: bool = False

    def to_record(self) -> dict:
        return {
            "phase": self.phase,
            "source": self.source,
            "surface": self.surface,
            "plan": [s.as_list() for s in self.plan.spans] if self.plan else [],
            "mask_fraction": self.plan.mask_fraction if self.plan else 0.0,
            "target": self.target,
            "seed": list(self.key),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrainingExample":
        spans = tuple(Span.from_list(s) for s in rec["plan"])
        plan = MaskPlan(spans, len(rec["source"]), rec.get("mask_fraction", 0.0)) if spans else None
        return cls(rec["phase"], rec["surface"], rec["source"], plan,
                   target=rec.get("target"), key=tuple(rec["seed"]))


# ---------------------------------------------------------------------------
# planning

def mask_budget(length: int, p: float) -> int:
    return int(np.floor(length * p))


def plan_masks(source: str, p: float, n: int, rng: np.random.Generator, *,
               l_max: int = L_MAX) -> MaskPlan:
    """Draw ``n`` (1 or 2) non-overlapping mask spans whose lengths sum to
    floor(len(source) * p).

    n=1: start uniform in [0, l - M - 1].  n=2: first length uniform in
    [1, M - 1], first start uniform in [0, l - M - 1], second start uniform
    in [start1 + m1 + 1, l - m2 - 1]; the first start is redrawn when that
    interval is empty.
    """
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    length = len(source)
    budget = mask_budget(length, p)
    if budget < n or length < n + budget or budget > l_max:
        raise SourceTooShort(f"length {length} with p={p} cannot hold {n} span(s) (budget {budget})")
    hi = length - budget - 1
    if n == 1:
        start = int(rng.integers(0, hi + 1))
        return MaskPlan((Span("mask", start, budget, budget, 1),), length, p)
    m1 = int(rng.integers(1, budget))
    m2 = budget - m1
    for _ in range(MAX_PLAN_RETRIES):
        idx1 = int(rng.integers(0, hi + 1))
        lo2, hi2 = idx1 + m1 + 1, length - m2 - 1
        if lo2 <= hi2:
            idx2 = int(rng.integers(lo2, hi2 + 1))
            return MaskPlan((Span("mask", idx1, m1, m1, 1), Span("mask", idx2, m2, m2, 2)), length, p)
    raise PlanInfeasible(f"no feasible second start after {MAX_PLAN_RETRIES} retries")


def plan_s2s(source: str, existing: MaskPlan, s2s_masked_length: int, target_length: int,
             rng: np.random.Generator, *, l_max: int = L_MAX) -> MaskPlan:
    """Add one seq2seq span placed uniformly among positions that avoid every existing span."""
    if not 1 <= target_length <= l_max:
        raise PlanInfeasible(f"target length {target_length} outside [1, {l_max}]")
    length = len(source)
    L = s2s_masked_length
    if L < 1:
        raise PlanInfeasible("seq2seq span needs at least one character")
    feasible = [s for s in range(0, length - L + 1)
                if all(s + L <= sp.start or s >= sp.end for sp in existing.spans)]
    if not feasible:
        raise PlanInfeasible("no position for the seq2seq span")
    start = feasible[int(rng.integers(0, len(feasible)))]
    spans = sorted(existing.spans + (Span("s2s", start, L, target_length, 1),), key=lambda s: s.start)
    return MaskPlan(tuple(spans), length, existing.mask_fraction)


# ---------------------------------------------------------------------------
# surfaces

def apply_cm(source: str, plan: MaskPlan) -> str:
    """Replace each mask span by its sentinel and append sentinel + span in order."""
    if plan.s2s_span is not None:
        raise PlanMismatch("apply_cm takes mask spans only")
    plan.check(source)
    body, tail, pos = [], [], 0
    for s in plan.spans:
        if s.masked_length == 0:
            raise PlanMismatch("training mask spans cannot be empty")
        sentinel = mask_text(s.index, s.masked_length)
        body.append(source[pos:s.start])
        body.append(sentinel)
        tail.append(sentinel + source[s.start:s.end])
        pos = s.end
    body.append(source[pos:])
    return "".join(body) + "".join(tail)


def apply_cms(source: str, plan: MaskPlan, target: str) -> str:
    """CM rendering plus the seq2seq construct in the body and, after the
    mask tails, the construct followed by ``target``."""
    s2s = plan.s2s_span
    if s2s is None:
        raise PlanMismatch("apply_cms needs exactly one seq2seq span")
    plan.check(source)
    body, tails, pos = [], [], 0
    for s in plan.spans:
        body.append(source[pos:s.start])
        original = source[s.start:s.end]
        if s.kind == "mask":
            sentinel = mask_text(s.index, s.masked_length)
            body.append(sentinel)
            tails.append(sentinel + original)
        else:
            body.append(s2s_open_text(s.target_length, s.index) + original + S2S_CLOSE)
        pos = s.end
    body.append(source[pos:])
    tails.append(s2s_open_text(s2s.target_length, s2s.index) + source[s2s.start:s2s.end] + S2S_CLOSE + target)
    return "".join(body) + "".join(tails)


def render_s2s_prompt(source: str, plan: MaskPlan) -> str:
    """Prompt used to synthesize a seq2seq target with the CM model: only
    the seq2seq span is masked (hint = target length) and the sentinel is
    repeated at the end."""
    s2s = plan.s2s_span
    if s2s is None or sum(sp.kind == "s2s" for sp in plan.spans) != 1:
        raise PlanMismatch("plan must contain exactly one seq2seq span")
    plan.check(source)
    sentinel = mask_text(1, s2s.target_length)
    return source[:s2s.start] + sentinel + source[s2s.end:] + sentinel


def wrap(surface: str) -> str:
    return "[BOS]" + surface + "[EOS]"


_MASK_RE = re.compile(r"<mask_([1-9]\d*):([1-9]\d*)>")


def demask(example: TrainingExample) -> str:
    """Splice every tail span back into its body sentinel (inverse of :func:`apply_cm`)."""
    if example.phase != CM:
        raise CorruptExample(f"demask needs a CM example, got {example.phase}")
    text = example.surface
    if text.startswith("[BOS]"):
        text = text[5:]
    if text.endswith("[EOS]"):
        text = text[:-5]
    matches = list(_MASK_RE.finditer(text))
    if not matches or len(matches) % 2:
        raise CorruptExample("mask sentinels must appear once in the body and once in the tail")
    k = len(matches) // 2
    body_m, tail_m = matches[:k], matches[k:]
    if [m.group(0) for m in body_m] != [m.group(0) for m in tail_m]:
        raise CorruptExample("body and tail sentinels disagree")
    pieces = []
    for j, m in enumerate(tail_m):
        end = tail_m[j + 1].start() if j + 1 < k else len(text)
        span = text[m.end():end]
        if len(span) != int(m.group(2)):
            raise CorruptExample(f"span {span!r} does not match hint {m.group(2)}")
        pieces.append(span)
    out, pos = [], 0
    for m, span in zip(body_m, pieces):
        out.append(text[pos:m.start()])
        out.append(span)
        pos = m.end()
    out.append(text[pos:tail_m[0].start()])
    return "".join(out)


def splice_reference(source: str, plan: MaskPlan, target: str | None = None) -> str:
    """The molecule an example encodes: mask spans keep their original
    characters, the seq2seq span is replaced by ``target``."""
    out, pos = [], 0
    for s in plan.spans:
        out.append(source[pos:s.start])
        out.append(target if s.kind == "s2s" else source[s.start:s.end])
        pos = s.end
    out.append(source[pos:])
    return "".join(out)


# ---------------------------------------------------------------------------
# seq2seq targets

class S2STarget(NamedTuple):
    text: str
    warning: bool
    attempts: int


def generate_s2s_target(cm_model, source: str, plan: MaskPlan, sampler, rng: np.random.Generator,
                        *, retries: int = 8) -> S2STarget:
    """Sample a target of exactly ``target_length`` characters from a CM model.

    ``cm_model`` must provide ``complete(prompt, max_chars, sampler, rng)``
    (see :class:`cmsmol.generate.TextModel`).  After ``retries`` misses the
    closest-length sample is returned with ``warning=True``.
    """
    s2s = plan.s2s_span
    t = s2s.target_length
    prompt = "[BOS]" + render_s2s_prompt(source, plan)
    best = None
    for attempt in range(1, retries + 1):
        try:
            text = cm_model.complete(prompt, t, sampler, rng)
        except Exception as exc:  # surface model faults with context
            from .model import ModelError
            raise ModelError(f"target generation failed: {exc}") from exc
        if len(text) == t:
            return S2STarget(text, False, attempt)
        if best is None or abs(len(text) - t) < abs(len(best) - t):
            best = text
    return S2STarget(best or "", True, retries)


def s2s_lengths(source: str, p: float, rng: np.random.Generator, l_max: int = L_MAX) -> tuple[int, int]:
    """Seq2seq span length uniform in [1, max(2, floor(l*p))] and target
    length uniform in [1, min(l_max, 2 * span length)]."""
    hi = min(l_max, max(2, mask_budget(len(source), p)))
    span = int(rng.integers(1, hi + 1))
    target = int(rng.integers(1, min(l_max, 2 * span) + 1))
    return span, target


# ---------------------------------------------------------------------------
# epochs

class Epoch(NamedTuple):
    examples: list[TrainingExample]
    skipped: dict[str, int]


TargetFn = Callable[[str, MaskPlan, np.random.Generator], S2STarget]


def draw_configuration(rng: np.random.Generator, mix: Sequence[float] = CMS_MIX) -> str:
    u = rng.random()
    acc = 0.0
    for name, prob in zip(CMS_CONFIGS, mix):
        acc += prob
        if u < acc:
            return name
    return CMS_CONFIGS[-1]


def make_example(source: str, phase: str, p: float, rng: np.random.Generator, *,
                 two_mask_prob: float = 0.5, mix: Sequence[float] = CMS_MIX,
                 target_fn: TargetFn | None = None, l_max: int = L_MAX,
                 key: tuple[int, int] = (0, 0)) -> TrainingExample:
    """Build one example; raises :class:`CorpusError` when the draw does not fit."""
    if phase == CLM:
        return TrainingExample(CLM, wrap(source), source, None, key=key)
    if phase == CM:
        n = 2 if rng.random() < two_mask_prob else 1
        plan = plan_masks(source, p, n, rng, l_max=l_max)
        return TrainingExample(CM, wrap(apply_cm(source, plan)), source, plan, key=key)
    if phase != CMS:
        raise ValueError(f"unknown phase {phase!r}")
    config = draw_configuration(rng, mix)
    n = 2 if config.startswith("2m") else 1
    plan = plan_masks(source, p, n, rng, l_max=l_max)
    if not config.endswith("s2s"):
        return TrainingExample(CMS, wrap(apply_cm(source, plan)), source, plan, key=key)
    span_len, target_len = s2s_lengths(source, p, rng, l_max)
    plan = plan_s2s(source, plan, span_len, target_len, rng, l_max=l_max)
    if target_fn is None:
        raise CorpusError("CMS examples with a seq2seq span need a target generator")
    result = target_fn(source, plan, rng)
    target = result.text
    if not target:
        raise CorpusError("target generator produced an empty span")
    if len(target) != target_len:
        # keep the hint truthful: it always equals the target's character count
        s2s = plan.s2s_span
        fixed = Span("s2s", s2s.start, s2s.masked_length, min(len(target), l_max), s2s.index)
        target = target[:fixed.target_length]
        plan = MaskPlan(tuple(fixed if sp.kind == "s2s" else sp for sp in plan.spans),
                        plan.source_length, plan.mask_fraction)
    surface = wrap(apply_cms(source, plan, target))
    return TrainingExample(CMS, surface, source, plan, target=target, key=key, warning=result.warning)


def build_epoch(dataset: Iterable[str], phase: str, p: float, epoch_seed: int, *,
                vocab: Vocabulary | None = None, two_mask_prob: float = 0.5,
                mix: Sequence[float] = CMS_MIX, target_fn: TargetFn | None = None,
                l_max: int = L_MAX) -> Epoch:
    """One epoch of freshly drawn examples.

    Each example's generator derives from ``(epoch_seed, index)``, so the
    output does not depend on how the dataset is sharded.  Strings that
    cannot hold the drawn plan are skipped and counted.
    """
    phase = PHASE_OF.get(phase, phase)
    if phase != CLM:
        check_fraction(p, "p")
    if abs(sum(mix) - 1.0) > 1e-9:
        raise ValueError("mix probabilities must sum to 1")
    examples: list[TrainingExample] = []
    skipped: dict[str, int] = {}
    for index, source in enumerate(dataset):
        rng = derive_rng(epoch_seed, index)
        try:
            ex = make_example(source, phase, p, rng, two_mask_prob=two_mask_prob, mix=mix,
                              target_fn=target_fn, l_max=l_max, key=(epoch_seed, index))
        except CorpusError as exc:
            reason = type(exc).__name__
            skipped[reason] = skipped.get(reason, 0) + 1
            continue
        if vocab is not None:
            ex.ids = tuple(vocab.encode(ex.surface))
        examples.append(ex)
    if skipped:
        logger.info("epoch %d (%s): skipped %s", epoch_seed, phase, skipped)
    return Epoch(examples, skipped)


# ---------------------------------------------------------------------------
# corpus files

CORPUS_FORMAT = "cmscorpus"
CORPUS_VERSION = 1


def write_corpus(path, examples: Iterable[TrainingExample], *, tokenizer_sha256: str,
                 meta: dict | None = None) -> None:
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "tokenizer_sha256": tokenizer_sha256}
    if meta:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def read_corpus(path) -> tuple[dict, list[TrainingExample]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != CORPUS_FORMAT or header.get("version") != CORPUS_VERSION:
        raise CorpusError(f"unsupported corpus header {header}")
    return header, [TrainingExample.from_record(json.loads(line)) for line in lines[1:] if line]


class CMSCorruptor(BaseEstimator, TransformerMixin):
    """Estimator view of :func:`build_epoch`: ``transform`` maps SMILES to
    corrupted surface strings for one epoch.

    Strings that cannot hold the drawn plan come back unchanged as CLM
    surfaces so the output stays aligned with the input.
    """

    def __init__(self, phase="CM", mask_fraction=0.15, two_mask_prob=0.5, mix=CMS_MIX,
                 epoch_seed=0, l_max=L_MAX):
        self.phase = phase
        self.mask_fraction = mask_fraction
        self.two_mask_prob = two_mask_prob
        self.mix = mix
        self.epoch_seed = epoch_seed
        self.l_max = l_max

    def fit(self, X, y=None, target_fn: TargetFn | None = None):
        check_text_list(X)
        check_fraction(self.mask_fraction, "mask_fraction")
        self.target_fn_ = target_fn
        return self

    def transform(self, X):
        X = check_text_list(X)
        out = []
        phase = PHASE_OF.get(self.phase, self.phase)
        for index, source in enumerate(X):
            rng = derive_rng(self.epoch_seed, index)
            try:
                ex = make_example(source, phase, self.mask_fraction, rng,
                                  two_mask_prob=self.two_mask_prob, mix=self.mix,
                                  target_fn=getattr(self, "target_fn_", None), l_max=self.l_max,
                                  key=(self.epoch_seed, index))
                out.append(ex.surface)
            except CorpusError:
                out.append(wrap(source))
        return out
