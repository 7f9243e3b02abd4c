"""``cmsmol`` command line.

Subcommands: train-tokenizer, build-corpus, pretrain, generate, score,
report, selfcheck.  Every command writes ``resolved_config.txt`` into its
output directory.  Failures print one JSON line on stderr and exit 2.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import minicorpus
from ._util import derive_rng, derive_seed, sha256_file
from .config import ConfigError, RunConfig, load_config
from .corpus import PHASE_OF, build_epoch, demask, generate_s2s_target, plan_masks, apply_cm, TrainingExample, wrap, write_corpus
from .generate import (GenerationSettings, SamplerConfig, TextModel, batch_generate, hint_compliance,
                       kept_set, length_validity_profile, read_candidates, sample_toppk, write_candidates)
from .model import ModelConfig, grad_check
from .score import (CRITICS, MoleculeResult, NormBounds, Scorers, external_scores, load_crippen_table,
                    load_proxy_config, report, report_csv, score_molecule)
from .tokenizer import load_vocab, save_vocab, train_bpe
from .train import PhaseSchedule, load_checkpoint, save_checkpoint, train_phase


class CliError(RuntimeError):
    pass


class SelfcheckRequired(CliError):
    pass


def _corpus(cfg: RunConfig) -> list[str]:
    data = minicorpus.load(cfg.corpus or None)
    return data[: cfg.train_limit] if cfg.train_limit else data


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.snapshot(), encoding="utf-8")
    return out


def _schedule(cfg: RunConfig, phase: int) -> PhaseSchedule:
    return PhaseSchedule(phase, cfg.epochs[phase - 1], single_mask_epochs=cfg.single_mask_epochs,
                         mix=tuple(cfg.phase3_mix), lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
                         mask_fraction=cfg.mask_fraction, grad_clip=cfg.grad_clip or None,
                         cosine_decay=cfg.cosine_decay)


def _bounds(cfg: RunConfig) -> NormBounds:
    base = load_proxy_config()
    bounds = {c: tuple(v) for c, v in base["bounds"].items()}
    bounds["docking"] = (cfg.docking_bounds[0], cfg.docking_bounds[1], "min")
    bounds["solubility"] = (cfg.solubility_bounds[0], cfg.solubility_bounds[1], "max")
    return NormBounds(bounds, dict(zip(CRITICS, cfg.weights)))


def code_fingerprint() -> str:
    """sha256 over the package sources and bundled data (sorted by name)."""
    h = hashlib.sha256()
    root = resources.files("cmsmol")
    for sub in ("", "data"):
        base = root.joinpath(sub) if sub else root
        for entry in sorted(base.iterdir(), key=lambda p: p.name):
            if entry.is_file() and entry.name.endswith((".py", ".tsv", ".json")):
                h.update(f"{sub}/{entry.name}".encode())
                h.update(entry.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands

def cmd_train_tokenizer(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    vocab = train_bpe(_corpus(cfg), cfg.vocab_size)
    path = cfg.vocab_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, path)
    return {"vocab": str(path), "size": vocab.size, "sha256": vocab.sha256, "out": str(out)}


def cmd_build_corpus(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    vocab = load_vocab(cfg.vocab_path)
    phase = args.phase or 2
    target_fn = None
    if phase == 3:
        ckpt = load_checkpoint(cfg.checkpoint_dir / "phase2.ckpt", expected_tokenizer_sha256=vocab.sha256)
        cm = TextModel(ckpt.params, ckpt.config, vocab)
        sampler = SamplerConfig(10, 0.9)
        target_fn = lambda s, plan, rng: generate_s2s_target(cm, s, plan, sampler, rng)
    seed = derive_seed(cfg.seed, phase, args.epoch)
    two = 0.0 if phase == 2 and args.epoch < cfg.single_mask_epochs else 0.5
    epoch = build_epoch(_corpus(cfg), PHASE_OF[phase], cfg.mask_fraction, seed, vocab=vocab,
                        two_mask_prob=two, mix=tuple(cfg.phase3_mix), target_fn=target_fn)
    path = out / f"corpus_phase{phase}_epoch{args.epoch}.jsonl"
    write_corpus(path, epoch.examples, tokenizer_sha256=vocab.sha256,
                 meta={"phase": phase, "epoch": args.epoch, "epoch_seed": seed, "skipped": epoch.skipped})
    return {"corpus": str(path), "examples": len(epoch.examples), "skipped": epoch.skipped}


def cmd_pretrain(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    phase = args.phase
    if phase not in (1, 2, 3):
        raise CliError("--phase must be 1, 2 or 3")
    vocab = load_vocab(cfg.vocab_path)
    ckdir = cfg.checkpoint_dir
    ckdir.mkdir(parents=True, exist_ok=True)
    if phase == 3:
        _require_selfcheck(cfg, vocab.sha256)
    current = ckdir / f"phase{phase}.ckpt"
    previous = ckdir / f"phase{phase - 1}.ckpt"
    resume = None
    if current.exists():
        resume = load_checkpoint(current, expected_tokenizer_sha256=vocab.sha256)
    elif phase > 1:
        if not previous.exists():
            from .train import PhaseOrderViolation
            raise PhaseOrderViolation(f"phase {phase} needs {previous}")
        resume = load_checkpoint(previous, expected_tokenizer_sha256=vocab.sha256)
    config = ModelConfig(vocab.size, cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff,
                         cfg.context_length, cfg.dropout, cfg.precision)
    ckpt = train_phase(_schedule(cfg, phase), _corpus(cfg), vocab, resume, config=config,
                       metrics_path=out / "metrics.jsonl", checkpoint_path=current)
    save_checkpoint(ckpt, current)
    last = ckpt.history[-1] if ckpt.history else {}
    return {"checkpoint": str(current), "phase": phase, "epochs": ckpt.epoch, "loss": last.get("loss")}


def _require_selfcheck(cfg: RunConfig, vocab_sha: str) -> None:
    record = cfg.out_dir / "selfcheck.json"
    if not record.exists():
        raise SelfcheckRequired("run `cmsmol selfcheck` before phase 3")
    data = json.loads(record.read_text(encoding="utf-8"))
    if data.get("status") != "pass" or data.get("code_sha256") != code_fingerprint() \
            or data.get("vocab_sha256") != vocab_sha:
        raise SelfcheckRequired("selfcheck record is stale or failing; rerun `cmsmol selfcheck`")


def _settings(cfg: RunConfig) -> GenerationSettings:
    return GenerationSettings(max_masked=cfg.max_masked, max_generated=cfg.max_generated,
                              top_k_grid=tuple(cfg.top_k), top_p_grid=tuple(cfg.top_p),
                              temperature=cfg.temperature)


def _load_model(cfg: RunConfig, path: str | None) -> TextModel:
    vocab = load_vocab(cfg.vocab_path)
    ckpt_path = Path(path) if path else cfg.checkpoint_dir / "phase3.ckpt"
    ckpt = load_checkpoint(ckpt_path, expected_tokenizer_sha256=vocab.sha256)
    return TextModel(ckpt.params, ckpt.config, vocab)


def cmd_generate(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    if args.source:
        sources = [args.source]
    elif args.sources:
        sources = [l.strip() for l in Path(args.sources).read_text(encoding="utf-8").splitlines() if l.strip()]
    else:
        raise CliError("give --source SMILES or --sources FILE")
    model = _load_model(cfg, args.checkpoint)
    n = args.n_samples or cfg.n_samples
    settings = _settings(cfg)
    all_cands, summary = [], []
    t0 = time.perf_counter()
    for si, source in enumerate(sources):
        cands = batch_generate(model, source, n, derive_seed(cfg.seed, 4, si), settings, workers=cfg.workers)
        all_cands.extend(cands)
        summary.append({"source": source, "n": len(cands),
                        "validity": sum(c.valid for c in cands) / len(cands),
                        "hint_compliance": hint_compliance(cands)})
    path = out / "candidates.jsonl"
    write_candidates(path, all_cands)
    (out / "length_validity.csv").write_text(length_validity_profile(all_cands).to_csv(), encoding="utf-8")
    return {"candidates": str(path), "sources": summary, "seconds": round(time.perf_counter() - t0, 3)}


def cmd_score(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    files = args.inputs or [str(cfg.out_dir / "candidates.jsonl")]
    ext = external_scores(cfg.external_scores) if cfg.external_scores else None
    scorers = Scorers(ext)
    bounds = _bounds(cfg)
    by_source: dict[str, list[str]] = {}
    for f in files:
        for c in read_candidates(f):
            by_source.setdefault(c.source, []).append(c.generated)
    results = [score_molecule(src, cands, scorers, bounds, cfg.top_n) for src, cands in by_source.items()]
    path = out / "results.jsonl"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    return {"results": str(path), "molecules": len(results),
            "rewards": {r.source: (None if r.reward != r.reward else r.reward) for r in results}}


def cmd_report(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    files = args.inputs or [str(cfg.out_dir / "results.jsonl")]
    results = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            results.extend(MoleculeResult.from_record(json.loads(l)) for l in fh if l.strip())
    table = report_csv([report(results, target=args.target, algorithm=args.algorithm)])
    path = out / "report.csv"
    path.write_text(table, encoding="utf-8")
    produced = {"report": str(path)}
    cand_files = args.candidates or ([str(cfg.out_dir / "candidates.jsonl")]
                                     if (cfg.out_dir / "candidates.jsonl").exists() else [])
    if cand_files:
        cands = [c for f in cand_files for c in read_candidates(f)]
        heat = out / "length_validity.csv"
        heat.write_text(length_validity_profile(cands).to_csv(), encoding="utf-8")
        produced["heatmap"] = str(heat)
    sys.stdout.write(table)
    return produced


def _check(name: str, fn) -> dict:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return {"check": name, "pass": bool(ok), "detail": detail, "seconds": round(time.perf_counter() - t0, 3)}


def cmd_selfcheck(cfg: RunConfig, args) -> dict:
    out = _prepare_out(cfg)
    corpus = _corpus(cfg)
    vocab = load_vocab(cfg.vocab_path) if cfg.vocab_path.exists() else train_bpe(corpus, cfg.vocab_size)

    def grads():
        tiny = ModelConfig(vocab_size=13, n_layers=1, n_heads=2, d_model=8, d_ff=16, context_length=8)
        err = grad_check(tiny, cfg.seed, 1e-5)
        return err < 1e-4, err

    def sampler():
        rng = derive_rng(cfg.seed, 99)
        for _ in range(200):
            row = rng.normal(size=10)
            if sample_toppk(row, SamplerConfig(1, 1.0), rng) != int(np.argmax(row)):
                return False, "k=1 is not greedy"
            k, p = int(rng.integers(1, 11)), float(rng.uniform(0.05, 1.0))
            keep, _ = kept_set(row, SamplerConfig(k, p))
            probs = np.exp(row - row.max()) / np.exp(row - row.max()).sum()
            order = sorted(range(10), key=lambda i: (-probs[i], i))
            cum, nucleus = 0.0, []
            for i in order:
                nucleus.append(i)
                cum += probs[i]
                if cum >= p - 1e-12:
                    break
            if set(keep.tolist()) != set(order[:k]) & set(nucleus):
                return False, "kept set differs from the brute-force intersection"
        return True, "200 rows"

    def reconstruction():
        rng = derive_rng(cfg.seed, 98)
        n = 0
        for s in corpus[:1000]:
            for k in (1, 2):
                try:
                    plan = plan_masks(s, cfg.mask_fraction, k, rng)
                except ValueError:
                    continue
                ex = TrainingExample("CM", wrap(apply_cm(s, plan)), s, plan)
                if demask(ex) != s:
                    return False, s
                n += 1
        return True, f"{n} pairs"

    def round_trip():
        bad = [s for s in corpus if vocab.decode(vocab.encode(s)) != s]
        return not bad, f"{len(corpus) - len(bad)}/{len(corpus)}"

    def table():
        load_crippen_table()
        return True, "pinned hash ok"

    checks = [_check("grad_check", grads), _check("sampler_laws", sampler),
              _check("corpus_reconstruction", reconstruction), _check("bpe_round_trip", round_trip),
              _check("contribution_table", table)]
    status = "pass" if all(c["pass"] for c in checks) else "fail"
    record = {"status": status, "checks": checks, "code_sha256": code_fingerprint(),
              "vocab_sha256": vocab.sha256}
    (out / "selfcheck.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if status != "pass":
        failed = [c["check"] for c in checks if not c["pass"]]
        raise CliError(f"selfcheck failed: {', '.join(failed)}")
    return {"status": status, "checks": [c["check"] for c in checks]}


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "build-corpus": cmd_build_corpus,
    "pretrain": cmd_pretrain,
    "generate": cmd_generate,
    "score": cmd_score,
    "report": cmd_report,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--phase", type=int)
    common.add_argument("--out", help="output directory")
    parser = argparse.ArgumentParser(prog="cmsmol", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-tokenizer", parents=[common])
    p = sub.add_parser("build-corpus", parents=[common])
    p.add_argument("--epoch", type=int, default=0)
    sub.add_parser("pretrain", parents=[common])
    p = sub.add_parser("generate", parents=[common])
    p.add_argument("--source")
    p.add_argument("--sources")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--checkpoint")
    p = sub.add_parser("score", parents=[common])
    p.add_argument("inputs", nargs="*")
    p = sub.add_parser("report", parents=[common])
    p.add_argument("inputs", nargs="*")
    p.add_argument("--candidates", nargs="*")
    p.add_argument("--target", default="stub")
    p.add_argument("--algorithm", default="CMS")
    sub.add_parser("selfcheck", parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).override(seed=args.seed, workers=args.workers, out=args.out)
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 2
    if args.command != "report":
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
