"""Acceptance criteria A1-A10.  Each test records one PASS/FAIL line that is
repeated in the terminal summary."""
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from acceptance_log import record
from cmsmol import cli
from cmsmol._util import derive_rng
from cmsmol.corpus import (CM, CMS, CMS_CONFIGS, PlanInfeasible, SourceTooShort, TrainingExample,
                           apply_cm, build_epoch, demask, generate_s2s_target, make_example, plan_masks,
                           splice_reference, wrap)
from cmsmol.generate import (GREEDY, PromptSpec, SamplerConfig, TextModel, build_prompt, decoding_prefix,
                             generate_spans, kept_set, length_validity_profile, read_candidates, reintegrate,
                             sample_toppk)
from cmsmol.model import ModelConfig, forward, grad_check, init, loss, sample_coordinates
from cmsmol.score import NormBounds, ScoreVector, normalized_reward
from cmsmol.smiles import fingerprint, is_valid, parse, tanimoto
from cmsmol.tokenizer import save_vocab, sentinel_family, train_bpe
from cmsmol.train import PhaseSchedule, pad_batch, save_checkpoint, train_on_sequences, train_phase
from test_corpus import _constant_target, feasible_triples
from test_generate import brute_kept, spec_of
from test_score import test_monotone_property as monotone_property
from test_tokenizer import brute_force_merges

PEN = "CC1([C@@H](N2[C@H](S1)[C@@H](C2=O)NC(=O)CC3=CC=CC=C3)C(=O)O)C"


def test_A1_corpus_reconstruction(corpus):
    assert len(corpus) >= 2000 and all(is_valid(s) for s in corpus)
    t0 = time.perf_counter()
    done = tried = bad = 0
    while done < 10_000:
        rng = derive_rng(11, tried)
        s = corpus[tried % len(corpus)]
        tried += 1
        try:
            plan = plan_masks(s, 0.15, 1 + tried % 2, rng)
        except (SourceTooShort, PlanInfeasible):
            continue
        bad += demask(TrainingExample(CM, wrap(apply_cm(s, plan)), s, plan)) != s
        done += 1
    secs = time.perf_counter() - t0
    ok = bad == 0 and secs < 30
    record("A1", ok, f"{done - bad}/{done} pairs reconstructed in {secs:.1f}s")
    assert ok


def test_A2_span_statistics(corpus):
    rng = np.random.default_rng(7)
    budget_bad = draws = 0
    while draws < 100_000:
        s = corpus[int(rng.integers(len(corpus)))]
        p = float(rng.uniform(0.1, 0.3))
        try:
            plan = plan_masks(s, p, int(rng.integers(1, 3)), rng)
        except (SourceTooShort, PlanInfeasible):
            continue
        draws += 1
        budget_bad += sum(sp.masked_length for sp in plan.spans) != int(np.floor(len(s) * p))

    src = "CC(=O)Nc1ccc(O)cc1CCN(C)C(=O)c1ccccc1"
    mix = Counter(make_example(src, CMS, 0.15, rng, target_fn=_constant_target).plan.configuration
                  for _ in range(100_000))
    freqs = [mix[c] / 100_000 for c in CMS_CONFIGS]
    mix_ok = all(abs(f - e) <= 0.01 for f, e in zip(freqs, (0.1, 0.1, 0.4, 0.4)))

    oracle = feasible_triples(30, 0.2)
    counts = Counter()
    for _ in range(100_000):
        a, b = plan_masks("C" * 30, 0.2, 2, rng).spans
        counts[(a.masked_length, a.start, b.start)] += 1
    keys = sorted(oracle)
    obs = np.array([counts[k] for k in keys], dtype=float)
    pval = chisquare(obs, np.array([oracle[k] for k in keys]) * obs.sum()).pvalue
    ok = budget_bad == 0 and mix_ok and set(counts) <= set(oracle) and pval > 0.01
    record("A2", ok, f"budget misses {budget_bad}/{draws}; mix {[round(f, 4) for f in freqs]}; "
                     f"two-span chi-square p={pval:.3f}")
    assert ok


def test_A3_tokenizer(corpus, vocab):
    trips = sum(vocab.decode(vocab.encode(s)) == s for s in corpus)
    fam = sentinel_family()
    atomic = sum(vocab.encode(s.text) == [tid] and vocab.encode("CC(=O)" + s.text + "c1ccccc1").count(tid) == 1
                 for tid, s in enumerate(fam))
    merges_ok = list(vocab.merges[:20]) == brute_force_merges(corpus, 20)
    ok = trips == len(corpus) and len(fam) == 100 and atomic == 100 and merges_ok
    record("A3", ok, f"round trip {trips}/{len(corpus)}; atomic sentinels {atomic}/{len(fam)}; "
                     f"first 20 merges {'match' if merges_ok else 'differ'}")
    assert ok


def test_A4_gradient_check():
    cfg = ModelConfig(vocab_size=13, n_layers=1, n_heads=2, d_model=8, d_ff=16, context_length=6)
    n = len(sample_coordinates(init(cfg, 0), 200, np.random.default_rng(0)))
    t0 = time.perf_counter()
    err = grad_check(cfg, 0, 1e-5, n_coords=200, seq_len=6)
    secs = time.perf_counter() - t0
    ok = err < 1e-4 and n >= 200 and secs < 60
    record("A4", ok, f"max rel error {err:.2e} over {n} coordinates in {secs:.1f}s")
    assert ok


def test_A5_sentinel_loss_inclusion(corpus, vocab):
    epoch = build_epoch(corpus[:16], CM, 0.15, 3, vocab=vocab)
    x, y = pad_batch([ex.ids for ex in epoch.examples])
    cfg = ModelConfig(vocab.size, n_layers=1, n_heads=2, d_model=16, d_ff=32, context_length=160)
    logits = forward(init(cfg, 0), x, n_heads=2)
    w = (y != vocab.pad_id).astype(float)
    sentinel = np.vectorize(vocab.is_sentinel)(y) & (y != vocab.pad_id) & (y != vocab.eos_id)
    assert sentinel.any()
    full, without = loss(logits, y, w), loss(logits, y, w * ~sentinel)
    ok = full != without
    record("A5", ok, f"loss {full:.6f} with sentinel targets vs {without:.6f} without "
                     f"({int(sentinel.sum())} sentinel positions)")
    assert ok


# ---------------------------------------------------------------------------
# A6 and A10 share one toy model

@pytest.fixture(scope="module")
def toy(corpus, tmp_path_factory):
    t0 = time.perf_counter()
    src = [s for s in corpus if 50 <= len(s) <= 66][:32]
    vocab = train_bpe(corpus, 256)
    cfg = ModelConfig(vocab.size, context_length=160)  # 2 layers, d_model 64
    ck = train_phase(PhaseSchedule(1, 4, lr=2e-3, batch_size=16), src, vocab, config=cfg)
    ck = train_phase(PhaseSchedule(2, 6, single_mask_epochs=2, lr=2e-3, batch_size=16), src, vocab, ck)
    cm = TextModel(ck.params, cfg, vocab)
    target_fn = lambda s, plan, rng: generate_s2s_target(cm, s, plan, SamplerConfig(10, 0.9), rng)
    examples, i = [], 0
    while len(examples) < 32:
        rng = derive_rng(5, i)
        i += 1
        try:
            examples.append(make_example(src[len(examples)], CMS, 0.15, rng, mix=(0, 0, 0.5, 0.5),
                                         target_fn=target_fn))
        except (SourceTooShort, PlanInfeasible):
            continue
    seqs = [vocab.encode(ex.surface) for ex in examples]
    ck = train_phase(PhaseSchedule(3, 1, lr=2e-3, batch_size=16), src, vocab, ck)
    losses = train_on_sequences(ck, seqs, epochs=300, lr=3e-3, batch_size=32, seed=1)
    root = tmp_path_factory.mktemp("toy")
    save_checkpoint(ck, root / "toy.ckpt")
    save_vocab(vocab, root / "vocab.txt")
    return {"ckpt": ck, "vocab": vocab, "examples": examples, "seqs": seqs, "losses": losses,
            "root": root, "seconds": time.perf_counter() - t0}


def test_A6_overfit_closure(toy):
    t0 = time.perf_counter()
    ck, vocab = toy["ckpt"], toy["vocab"]
    tot_loss = tot_tok = 0.0
    for ids in toy["seqs"]:
        logits = forward(ck.params, ids[:-1], n_heads=ck.config.n_heads)
        tot_loss += loss(logits, np.array(ids[1:])) * (len(ids) - 1)
        tot_tok += len(ids) - 1
    per_token = tot_loss / tot_tok
    model = TextModel(ck.params, ck.config, vocab)
    recovered = hit = total = 0
    for ex in toy["examples"]:
        spec = PromptSpec("mask+s2s", ex.plan.spans)
        prompt = vocab.encode("[BOS]" + decoding_prefix(ex.source, spec))
        out = generate_spans(model, prompt, spec, ex.source, GREEDY, np.random.default_rng(0))
        recovered += reintegrate(ex.source, spec, out.spans) == splice_reference(ex.source, ex.plan, ex.target)
        for marker, span in zip(spec.tail_order, out.spans):
            total += 1
            hit += len(span) == marker.target_length
    secs = toy["seconds"] + time.perf_counter() - t0
    n = len(toy["examples"])
    ok = per_token < 0.1 and recovered / n >= 0.9 and hit / total >= 0.9 and secs < 900
    record("A6", ok, f"per-token loss {per_token:.4f}; recovered {recovered}/{n}; "
                     f"hint compliance {hit}/{total}; {secs:.0f}s")
    assert ok


def test_A7_golden_fixtures_attainable(golden):
    tasks = golden["tasks"]
    exact = []
    for t in tasks:
        fix = t.get("errata", {})
        spec = spec_of(t)
        prompt_ok = build_prompt(t["original"], spec) == fix.get("prompt", t["prompt"])
        span = fix.get("generated_span", t["generated_span"])[0]
        exact.append(prompt_ok and reintegrate(t["original"], spec, [span]) == t["generated"])
    valid = sum(bool(is_valid(s)) for t in tasks for s in (t["original"], t["generated"]))
    verbatim = [build_prompt(t["original"], spec_of(t)) == t["prompt"]
                and reintegrate(t["original"], spec_of(t), [t["generated_span"][0]]) == t["generated"]
                for t in tasks]
    record("A7", all(verbatim) and valid == 12,
           f"verbatim rows reproduced {sum(verbatim)}/6 (T5/T6 listed prompts and the T5 span are "
           f"inconsistent with their own outputs); with errata {sum(exact)}/6; valid strings {valid}/12")
    assert all(exact) and valid == 12


@pytest.mark.xfail(strict=True, reason="listed T5 prompt drops a leading C; listed T6 sentinel lacks its index")
@pytest.mark.parametrize("task", [5, 6])
def test_A7_verbatim_prompt(golden, task):
    t = golden["tasks"][task - 1]
    assert build_prompt(t["original"], spec_of(t)) == t["prompt"]


@pytest.mark.xfail(strict=True, reason="listed T5 span is the text after the mask, not its filler")
def test_A7_verbatim_task5_span(golden):
    t = golden["tasks"][4]
    assert reintegrate(t["original"], spec_of(t), [t["generated_span"][0]]) == t["generated"]


def test_A8_sampler_laws():
    rng = np.random.default_rng(8)
    greedy = all(sample_toppk(row, SamplerConfig(1, 1.0), rng) == int(np.argmax(row))
                 for row in rng.normal(size=(1000, 40)))
    row = rng.normal(size=16)
    probs = np.exp(row - row.max())
    probs /= probs.sum()
    draws = [sample_toppk(row, SamplerConfig(16, 1.0), rng) for _ in range(100_000)]
    pval = chisquare(np.bincount(draws, minlength=16), probs * 100_000).pvalue
    kept_ok = 0
    for _ in range(1000):
        r = rng.normal(size=int(rng.integers(2, 30))) * 2
        k, p = int(rng.integers(1, len(r) + 1)), float(rng.uniform(0.05, 1.0))
        kept_ok += set(kept_set(r, SamplerConfig(k, p))[0].tolist()) == brute_kept(r, k, p)
    ok = greedy and pval > 0.01 and kept_ok == 1000
    record("A8", ok, f"k=1 argmax {'exact' if greedy else 'broken'}; softmax chi-square p={pval:.3f}; "
                     f"kept sets {kept_ok}/1000")
    assert ok


def test_A9_scoring(corpus):
    self_sim = sum(tanimoto(fp, fp) == 1.0 for fp in (fingerprint(parse(s)) for s in corpus))
    monotone_property()  # 1000 perturbations, raises on any violation
    v = ScoreVector(-10.0, 0.7, 3.92, 2.471, 0.9)
    hand = ((10.0 - 6.0) / 8.0 + 0.7 + (10.0 - 3.92) / 9.0 + (2.471 + 5.0) / 10.0) / 4
    got = normalized_reward(v, NormBounds.default().without_similarity())
    ok = self_sim == len(corpus) and abs(got - hand) < 1e-12
    record("A9", ok, f"self-similarity {self_sim}/{len(corpus)}; monotonicity 0/1000 violations; "
                     f"no-similarity reward {got:.10f} vs hand {hand:.10f}")
    assert ok


def _pivot(table: str) -> str:
    cells: dict[tuple[int, int], list[int]] = {}
    for line in table.splitlines()[1:]:
        m, g, n, v, _ = line.split(",")
        key = (int(m), (int(g) - 1) // 8)
        acc = cells.setdefault(key, [0, 0])
        acc[0] += int(n)
        acc[1] += int(v)
    buckets = sorted({b for _, b in cells})
    rows = ["masked " + " ".join(f"{8 * b + 1:>2}-{8 * b + 8:<2}" for b in buckets)]
    for m in sorted({m for m, _ in cells}):
        vals = [cells.get((m, b)) for b in buckets]
        rows.append(f"{m:>6} " + " ".join(f"{v[1] / v[0]:.3f}" if v else "  -  " for v in vals))
    return "\n".join(rows)


def test_A10_end_to_end_determinism(toy, tmp_path, capsys):
    root = toy["root"]
    digests, secs = [], []
    for run, workers in enumerate((1, 1, 2)):
        cfg = tmp_path / f"run{run}.cfg"
        cfg.write_text(f"out = {tmp_path / f'out{run}'}\nvocab = {root / 'vocab.txt'}\n"
                       f"n_samples = 10000\nworkers = {workers}\nseed = 0\n")
        t0 = time.perf_counter()
        code = cli.main(["generate", "--config", str(cfg), "--checkpoint", str(root / "toy.ckpt"),
                         "--source", PEN])
        secs.append(time.perf_counter() - t0)
        capsys.readouterr()
        assert code == 0
        digests.append((tmp_path / f"out{run}" / "candidates.jsonl").read_bytes())
    cands = read_candidates(tmp_path / "out0" / "candidates.jsonl")
    table = length_validity_profile(cands).to_csv()
    same = digests[0] == digests[1] == digests[2]
    ok = same and len(cands) == 10_000 and max(secs) < 600
    validity = sum(c.valid for c in cands) / len(cands)
    with capsys.disabled():
        print("\nvalidity rate by masked length (rows) and generated-length bucket (columns)")
        print(_pivot(table))
    record("A10", ok, f"{len(cands)} candidates, byte-identical across workers 1/1/2: {same}; "
                      f"slowest run {max(secs):.0f}s; validity {validity:.4f}")
    assert ok
