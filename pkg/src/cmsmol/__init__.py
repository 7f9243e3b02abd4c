"""Causally masked seq2seq language modeling for controllable molecule editing.

Submodules: ``smiles`` (parsing, validity, fingerprints), ``tokenizer`` (BPE
with size-hinted sentinels), ``corpus`` (CLM/CM/CMS example construction),
``model`` (numpy transformer), ``train`` (three-phase pretraining),
``generate`` (prompting and decoding), ``score`` (critics and rewards) and
``cli``.
"""
from .corpus import CMSCorruptor, MaskPlan, Span, apply_cm, apply_cms, build_epoch, demask, plan_masks
from .generate import PromptSpec, SamplerConfig, TextModel, batch_generate, build_prompt, reintegrate
from .model import ModelConfig
from .score import MoleculeScorer, NormBounds, ScoreVector, normalized_reward
from .smiles import fingerprint, is_valid, parse, tanimoto
from .tokenizer import BPETokenizer, Vocabulary, load_vocab, train_bpe
from .train import CMSLanguageModel, PhaseSchedule, load_checkpoint, save_checkpoint, train_phase

__version__ = "0.1.0"

__all__ = [
    "BPETokenizer", "CMSCorruptor", "CMSLanguageModel", "MaskPlan", "ModelConfig", "MoleculeScorer",
    "NormBounds", "PhaseSchedule", "PromptSpec", "SamplerConfig", "ScoreVector", "Span", "TextModel",
    "Vocabulary", "apply_cm", "apply_cms", "batch_generate", "build_epoch", "build_prompt", "demask",
    "fingerprint", "is_valid", "load_checkpoint", "load_vocab", "normalized_reward", "parse",
    "plan_masks", "reintegrate", "save_checkpoint", "tanimoto", "train_bpe", "train_phase",
]
