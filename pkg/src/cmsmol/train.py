"""Three-phase pretraining (CLM, then CM, then CMS) with Adam.

Every epoch regenerates its examples from a seed derived as
seed -> phase -> epoch, and the shuffle order from seed -> phase -> epoch -> 1,
so a run resumed from a checkpoint replays exactly what an uninterrupted
run would have done.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._util import derive_rng, derive_seed, sha256_bytes, sha256_file
from .corpus import CMS_MIX, L_MAX, PHASE_OF, build_epoch, generate_s2s_target
from .generate import SamplerConfig, TextModel
from .model import ModelConfig, Params, backward, forward, init, loss
from .tokenizer import Vocabulary, train_bpe
from .validation import check_text_list

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = {1: 10, 2: 50, 3: 20}


class TrainError(RuntimeError):
    pass


class PhaseOrderViolation(TrainError):
    pass


class TokenizerMismatch(TrainError):
    pass


class CheckpointError(TrainError):
    pass


class IoError(CheckpointError, OSError):
    pass


class VersionMismatch(CheckpointError):
    pass


class HashMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class PhaseSchedule:
    phase: int
    epochs: int | None = None
    single_mask_epochs: int = 10
    mix: tuple[float, ...] = CMS_MIX
    lr: float = 5e-5
    batch_size: int = 24
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    mask_fraction: float = 0.15
    grad_clip: float | None = 1.0
    cosine_decay: bool = False
    s2s_retries: int = 8
    s2s_top_k: int = 10
    s2s_top_p: float = 0.9
    l_max: int = L_MAX

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError("phase must be 1, 2 or 3")
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.phase])
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if abs(sum(self.mix) - 1.0) > 1e-9 or len(self.mix) != 4:
            raise ValueError("phase-3 mix must hold four probabilities summing to 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"], d["betas"] = list(self.mix), list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSchedule":
        d = dict(d)
        d["mix"], d["betas"] = tuple(d["mix"]), tuple(d["betas"])
        return cls(**d)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    m: Params
    v: Params
    step: int
    phase: int
    epoch: int  # epochs completed within ``phase``
    tokenizer_sha256: str
    seed: int
    schedule: dict | None = None
    cm_params: Params | None = None
    history: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.schedule is not None and self.epoch >= self.schedule["epochs"]

    @property
    def rng_state(self) -> dict:
        return {"seed": self.seed, "phase": self.phase, "next_epoch": self.epoch}


# ---------------------------------------------------------------------------
# optimizer

def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adam_step(params: Params, grads: Params, m: Params, v: Params, step: int, lr: float,
              betas=(0.9, 0.999), eps=1e-8, clip: float | None = 1.0) -> float:
    """In-place Adam update; ``step`` is 1-based.  Returns the pre-clip gradient norm."""
    norm = global_norm(grads)
    scale = clip / norm if clip is not None and norm > clip else 1.0
    b1, b2 = betas
    c1, c2 = 1 - b1 ** step, 1 - b2 ** step
    for k, p in params.items():
        g = grads[k] * scale if scale != 1.0 else grads[k]
        m[k] *= b1
        m[k] += (1 - b1) * g
        v[k] *= b2
        v[k] += (1 - b2) * g * g
        p -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    return norm


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and shifted targets, right-padded with ``pad_id``."""
    T = max(len(s) for s in seqs) - 1
    x = np.full((len(seqs), T), pad_id, dtype=np.int64)
    y = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        x[i, : len(s) - 1] = s[:-1]
        y[i, : len(s) - 1] = s[1:]
    return x, y


# ---------------------------------------------------------------------------
# phases

def _check_resume(phase: int, resume: Checkpoint | None, vocab: Vocabulary) -> bool:
    """Validate phase order; returns True when ``resume`` continues the same phase."""
    if resume is not None and resume.tokenizer_sha256 != vocab.sha256:
        raise TokenizerMismatch("vocabulary hash differs from the checkpoint's")
    if phase == 1:
        if resume is not None and resume.phase != 1:
            raise PhaseOrderViolation(f"phase 1 cannot continue a phase-{resume.phase} checkpoint")
        return resume is not None
    if resume is None:
        raise PhaseOrderViolation(f"phase {phase} needs a phase-{phase - 1} checkpoint")
    if resume.phase == phase:
        return True
    if resume.phase != phase - 1:
        raise PhaseOrderViolation(f"phase {phase} needs a phase-{phase - 1} checkpoint, got phase {resume.phase}")
    return False


def _copy(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def train_phase(schedule: PhaseSchedule, dataset: Sequence[str], vocab: Vocabulary,
                resume: Checkpoint | None = None, *, config: ModelConfig | None = None,
                metrics_path=None, checkpoint_path=None, stop_after: int | None = None,
                progress: Callable[[dict], None] | None = None) -> Checkpoint:
    """Run (or continue) one phase and return its checkpoint.

    A fresh phase-1 run needs ``config``.  ``stop_after`` ends the call after
    that many epochs, leaving a mid-phase checkpoint that can be resumed.
    """
    dataset = check_text_list(dataset, name="dataset")
    phase = schedule.phase
    continuing = _check_resume(phase, resume, vocab)
    if resume is None:
        if config is None:
            raise ValueError("a fresh run needs a ModelConfig")
        if config.vocab_size != vocab.size:
            raise TokenizerMismatch(f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}")
        params = init(config, derive_seed(schedule.seed, 0))
        ckpt = Checkpoint(config, params, _zeros(params), _zeros(params), 0, phase, 0,
                          vocab.sha256, schedule.seed, schedule.to_dict())
    elif continuing:
        ckpt = Checkpoint(resume.config, _copy(resume.params), _copy(resume.m), _copy(resume.v),
                          resume.step, phase, resume.epoch, resume.tokenizer_sha256, resume.seed,
                          schedule.to_dict(), resume.cm_params, list(resume.history))
    else:
        params = _copy(resume.params)
        ckpt = Checkpoint(resume.config, params, _zeros(params), _zeros(params), 0, phase, 0,
                          resume.tokenizer_sha256, resume.seed, schedule.to_dict(),
                          _copy(resume.params) if phase == 3 else None, list(resume.history))
    cfg = ckpt.config
    seed = ckpt.seed

    target_fn = None
    if phase == 3:
        cm = TextModel(ckpt.cm_params, cfg, vocab)
        sampler = SamplerConfig(schedule.s2s_top_k, schedule.s2s_top_p)

        def target_fn(source, plan, rng):
            return generate_s2s_target(cm, source, plan, sampler, rng, retries=schedule.s2s_retries)

    end = schedule.epochs if stop_after is None else min(schedule.epochs, ckpt.epoch + stop_after)
    examples_seen = sum(h.get("examples", 0) for h in ckpt.history if h.get("phase") == phase)
    while ckpt.epoch < end:
        e = ckpt.epoch
        two_mask_prob = 0.0 if e < schedule.single_mask_epochs else 0.5
        epoch = build_epoch(dataset, PHASE_OF[phase], schedule.mask_fraction,
                            derive_seed(seed, phase, e), vocab=vocab, two_mask_prob=two_mask_prob,
                            mix=schedule.mix, target_fn=target_fn, l_max=schedule.l_max)
        seqs = [ex.ids for ex in epoch.examples if len(ex.ids) - 1 <= cfg.context_length]
        too_long = len(epoch.examples) - len(seqs)
        if not seqs:
            raise TrainError(f"epoch {e} of phase {phase} produced no usable examples")
        order = derive_rng(seed, phase, e, 1).permutation(len(seqs))
        drop_rng = derive_rng(seed, phase, e, 2) if cfg.dropout > 0 else None
        lr = schedule.lr
        if schedule.cosine_decay:
            lr = schedule.lr * 0.5 * (1 + math.cos(math.pi * e / schedule.epochs))
        mean_loss = _run_epoch(ckpt, [seqs[i] for i in order], lr, schedule.batch_size, schedule.betas,
                               schedule.eps, schedule.grad_clip, vocab.pad_id, drop_rng)
        examples_seen += len(seqs)
        ckpt.epoch += 1
        record = {"phase": phase, "epoch": e, "step": ckpt.step, "loss": mean_loss,
                  "examples_seen": examples_seen, "examples": len(seqs),
                  "skipped": dict(epoch.skipped, too_long=too_long)}
        ckpt.history.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)
        if progress is not None:
            progress(record)
        logger.info("phase %d epoch %d loss %.5f", phase, e, record["loss"])
    return ckpt


def _run_epoch(ckpt: Checkpoint, seqs, lr, batch_size, betas, eps, clip, pad_id, drop_rng=None) -> float:
    """One pass over ``seqs`` in the given order; returns the token-weighted mean loss."""
    cfg = ckpt.config
    total, weight = 0.0, 0
    for b in range(0, len(seqs), batch_size):
        x, y = pad_batch(seqs[b:b + batch_size], pad_id)
        value, grads = backward(ckpt.params, x, y, n_heads=cfg.n_heads, dropout=cfg.dropout, rng=drop_rng)
        ckpt.step += 1
        adam_step(ckpt.params, grads, ckpt.m, ckpt.v, ckpt.step, lr, betas, eps, clip)
        n_tok = int((y != pad_id).sum())
        total += value * n_tok
        weight += n_tok
    return total / weight


def train_on_sequences(ckpt: Checkpoint, seqs: Sequence[Sequence[int]], *, epochs: int, lr: float,
                       batch_size: int = 24, seed: int = 0, grad_clip: float | None = 1.0,
                       pad_id: int = 0, betas=(0.9, 0.999), eps: float = 1e-8) -> list[float]:
    """Train in place on a fixed set of encoded sequences (no regeneration).

    Used for memorization experiments; returns the per-epoch mean losses.
    """
    losses = []
    for e in range(epochs):
        order = derive_rng(seed, 7, e).permutation(len(seqs))
        losses.append(_run_epoch(ckpt, [seqs[i] for i in order], lr, batch_size, betas, eps,
                                 grad_clip, pad_id))
    return losses


def _zeros(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def evaluate_loss(params: Params, cfg: ModelConfig, seqs: Sequence[Sequence[int]], pad_id: int = 0) -> float:
    """Token-weighted mean cross-entropy over ``seqs`` (no update)."""
    x, y = pad_batch(seqs, pad_id)
    return loss(forward(params, x, n_heads=cfg.n_heads), y)


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"CMSCKPT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def _tensor_groups(ckpt: Checkpoint):
    yield "param/", ckpt.params
    yield "adam_m/", ckpt.m
    yield "adam_v/", ckpt.v
    if ckpt.cm_params is not None:
        yield "cm/", ckpt.cm_params


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, version, manifest length, JSON manifest,
    then little-endian float64 tensors.  A sidecar ``<path>.manifest.txt``
    records the config and hashes."""
    path = Path(path)
    blobs, tensors, offset = [], [], 0
    for prefix, group in _tensor_groups(ckpt):
        for name, arr in group.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": prefix + name, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    manifest = {
        "format": "cmsckpt", "version": FORMAT_VERSION, "dtype": "<f8",
        "config": ckpt.config.to_dict(), "step": ckpt.step, "phase": ckpt.phase, "epoch": ckpt.epoch,
        "tokenizer_sha256": ckpt.tokenizer_sha256, "seed": ckpt.seed, "rng_state": ckpt.rng_state,
        "schedule": ckpt.schedule, "history": ckpt.history, "tensors": tensors,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = _HEADER.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)
    sidecar = [f"format=cmsckpt", f"version={FORMAT_VERSION}"]
    sidecar += [f"config.{k}={v}" for k, v in ckpt.config.to_dict().items()]
    sidecar += [f"phase={ckpt.phase}", f"epoch={ckpt.epoch}", f"step={ckpt.step}", f"seed={ckpt.seed}",
                f"tokenizer_sha256={ckpt.tokenizer_sha256}", f"container_sha256={sha256_bytes(payload)}",
                f"tensors={len(tensors)}"]
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        tmp.replace(path)
        Path(str(path) + ".manifest.txt").write_text("\n".join(sidecar) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def read_sidecar(path) -> dict[str, str]:
    side = Path(str(path) + ".manifest.txt")
    out = {}
    for line in side.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def load_checkpoint(path, *, expected_tokenizer_sha256: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(payload) < _HEADER.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, n = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    if Path(str(path) + ".manifest.txt").exists():
        recorded = read_sidecar(path).get("container_sha256")
        if recorded is not None and recorded != sha256_bytes(payload):
            raise HashMismatch("checkpoint bytes do not match the sidecar manifest")
    manifest = json.loads(payload[_HEADER.size:_HEADER.size + n].decode("utf-8"))
    if expected_tokenizer_sha256 is not None and manifest["tokenizer_sha256"] != expected_tokenizer_sha256:
        raise HashMismatch("checkpoint was trained with a different vocabulary")
    base = _HEADER.size + n
    cfg = ModelConfig.from_dict(manifest["config"])
    groups: dict[str, Params] = {}
    for t in manifest["tensors"]:
        prefix, name = t["name"].split("/", 1)
        raw = payload[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(cfg.dtype)
        groups.setdefault(prefix, {})[name] = arr
    return Checkpoint(cfg, groups["param"], groups["adam_m"], groups["adam_v"], manifest["step"],
                      manifest["phase"], manifest["epoch"], manifest["tokenizer_sha256"], manifest["seed"],
                      manifest["schedule"], groups.get("cm"), manifest.get("history", []))


# ---------------------------------------------------------------------------
# estimator

class CMSLanguageModel(BaseEstimator):
    """Tokenizer plus the three pretraining phases behind ``fit``.

    ``epochs`` gives the per-phase epoch counts; phase 2 spends
    ``single_mask_epochs`` of its budget on single-mask examples.
    """

    def __init__(self, n_layers=2, n_heads=4, d_model=64, d_ff=256, context_length=160,
                 target_vocab_size=1024, epochs=(10, 50, 20), single_mask_epochs=10, lr=5e-5,
                 batch_size=24, mask_fraction=0.15, seed=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.context_length = context_length
        self.target_vocab_size = target_vocab_size
        self.epochs = epochs
        self.single_mask_epochs = single_mask_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.mask_fraction = mask_fraction
        self.seed = seed

    def fit(self, X, y=None):
        X = check_text_list(X)
        self.vocab_ = train_bpe(X, self.target_vocab_size)
        cfg = ModelConfig(self.vocab_.size, self.n_layers, self.n_heads, self.d_model, self.d_ff,
                          self.context_length)
        ckpt = None
        for phase, n_epochs in zip((1, 2, 3), self.epochs):
            sched = PhaseSchedule(phase, n_epochs, single_mask_epochs=self.single_mask_epochs,
                                  lr=self.lr, batch_size=self.batch_size,
                                  mask_fraction=self.mask_fraction, seed=self.seed)
            ckpt = train_phase(sched, X, self.vocab_, ckpt, config=cfg)
        self.checkpoint_ = ckpt
        self.history_ = ckpt.history
        return self

    def text_model(self) -> TextModel:
        return TextModel(self.checkpoint_.params, self.checkpoint_.config, self.vocab_)

    def score(self, X, y=None) -> float:
        """Negative mean causal cross-entropy of the plain sequences."""
        X = check_text_list(X)
        seqs = [self.vocab_.encode("[BOS]" + s + "[EOS]") for s in X]
        return -evaluate_loss(self.checkpoint_.params, self.checkpoint_.config, seqs, self.vocab_.pad_id)
