import json
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from cmsmol._util import derive_rng
from cmsmol.corpus import (CLM, CM, CMS, CMS_CONFIGS, CMSCorruptor, CorruptExample, MaskPlan,
                           PlanInfeasible, PlanMismatch, SourceTooShort, Span, TrainingExample,
                           apply_cm, apply_cms, build_epoch, demask, generate_s2s_target,
                           make_example, mask_budget, plan_masks, plan_s2s, read_corpus,
                           render_s2s_prompt, s2s_lengths, splice_reference, write_corpus)
from cmsmol.generate import GREEDY, SamplerConfig

TASK2 = "O=C(Nc1ccccc1C(=O)n1cnc2ccccc21)c1ccc[nH]c1=O"


def cm_example(source, plan):
    return TrainingExample(CM, "[BOS]" + apply_cm(source, plan) + "[EOS]", source, plan)


def test_apply_cm_example():
    plan = MaskPlan((Span("mask", 2, 3, 3, 1),), 7, 0.4)
    assert apply_cm("ABCDEFG", plan) == "AB<mask_1:3>FG<mask_1:3>CDE"


def test_task2_shape():
    plan = MaskPlan((Span("mask", 4, 5, 5, 1),), len(TASK2), 0.1)
    surface = apply_cm(TASK2, plan)
    assert surface.count("<mask_1:5>") == 2
    assert surface.startswith("O=C(<mask_1:5>ccc1C(=O)")
    assert surface.endswith("<mask_1:5>Nc1cc")


def test_two_span_hint_configuration(golden):
    hints = golden["two_span_example"]["hints"]
    source = "C" * 30
    plan = MaskPlan((Span("mask", 3, hints[0], hints[0], 1), Span("mask", 12, hints[1], hints[1], 2)),
                    30, 0.3)
    plan.check(source)
    assert sorted(s.masked_length for s in plan.spans) == [2, 7]
    surface = apply_cm(source, plan)
    assert surface.index("<mask_1:2>") < surface.index("<mask_2:7>")
    assert demask(cm_example(source, plan)) == source


def test_single_span_boundaries():
    rng = np.random.default_rng(0)
    src = "C" * 20
    starts = set()
    for _ in range(10_000):
        plan = plan_masks(src, 0.1, 1, rng)
        (span,) = plan.spans
        assert span.masked_length == 2
        starts.add(span.start)
    assert starts == set(range(18))


def test_plan_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(SourceTooShort):
        plan_masks("CCCC", 0.15, 1, rng)
    with pytest.raises(SourceTooShort):
        plan_masks("C" * 10, 0.15, 2, rng)  # budget 1 cannot hold two spans
    with pytest.raises(SourceTooShort):
        plan_masks("C" * 300, 0.15, 1, rng)  # budget 45 > L_max
    with pytest.raises(ValueError):
        plan_masks("C" * 30, 0.2, 3, rng)


def feasible_triples(length, p):
    """Every (m1, idx1, idx2) reachable by the two-span scheme with its probability."""
    M = int(length * p)
    hi = length - M - 1
    probs = {}
    for m1 in range(1, M):
        m2 = M - m1
        ok = [i for i in range(hi + 1) if i + m1 + 1 <= length - m2 - 1]
        for i1 in ok:
            lo2, hi2 = i1 + m1 + 1, length - m2 - 1
            for i2 in range(lo2, hi2 + 1):
                probs[(m1, i1, i2)] = 1 / (M - 1) / len(ok) / (hi2 - lo2 + 1)
    return probs


def test_two_span_distribution_chi_square():
    src = "C" * 30
    oracle = feasible_triples(30, 0.2)
    assert abs(sum(oracle.values()) - 1) < 1e-12
    rng = np.random.default_rng(2024)
    counts = Counter()
    for _ in range(100_000):
        a, b = plan_masks(src, 0.2, 2, rng).spans
        assert a.masked_length + b.masked_length == 6
        counts[(a.masked_length, a.start, b.start)] += 1
    assert set(counts) <= set(oracle)
    keys = sorted(oracle)
    obs = np.array([counts[k] for k in keys], dtype=float)
    exp = np.array([oracle[k] for k in keys]) * obs.sum()
    assert chisquare(obs, exp).pvalue > 0.01
    m1 = Counter(k[0] for k in counts.elements())
    assert chisquare([m1[m] for m in range(1, 6)]).pvalue > 0.01


def test_budget_and_reconstruction_random(corpus):
    rng = np.random.default_rng(5)
    for _ in range(2000):
        s = corpus[rng.integers(len(corpus))]
        n = int(rng.integers(1, 3))
        p = float(rng.uniform(0.1, 0.3))
        try:
            plan = plan_masks(s, p, n, rng)
        except (SourceTooShort, PlanInfeasible):
            continue
        assert sum(sp.masked_length for sp in plan.spans) == int(np.floor(len(s) * p))
        assert all(a.end < b.start for a, b in zip(plan.spans, plan.spans[1:]))
        assert demask(cm_example(s, plan)) == s


def test_demask_detects_corruption():
    plan = MaskPlan((Span("mask", 2, 3, 3, 1),), 7, 0.4)
    ex = cm_example("ABCDEFG", plan)
    ex.surface = ex.surface.replace("<mask_1:3>CDE", "<mask_1:3>CD")
    with pytest.raises(CorruptExample):
        demask(ex)
    ex.surface = "[BOS]AB<mask_1:3>FG<mask_2:3>CDE[EOS]"
    with pytest.raises(CorruptExample):
        demask(ex)


def test_plan_check():
    with pytest.raises(PlanMismatch):
        apply_cm("ABC", MaskPlan((Span("mask", 2, 3, 3, 1),), 3, 0.5))
    with pytest.raises(PlanMismatch):
        MaskPlan((Span("mask", 0, 2, 2, 1), Span("mask", 1, 2, 2, 2)), 10).check("C" * 10)


def test_plan_s2s_avoids_existing():
    rng = np.random.default_rng(1)
    src = "C" * 25
    base = MaskPlan((Span("mask", 5, 4, 4, 1),), 25, 0.15)
    seen = Counter()
    for _ in range(4000):
        plan = plan_s2s(src, base, 3, 5, rng)
        s2s = plan.s2s_span
        assert s2s.end <= 5 or s2s.start >= 9
        seen[s2s.start] += 1
    feasible = [s for s in range(23) if s + 3 <= 5 or s >= 9]
    assert sorted(seen) == feasible
    assert chisquare([seen[s] for s in feasible]).pvalue > 0.01
    with pytest.raises(PlanInfeasible):
        plan_s2s("CCCC", MaskPlan((Span("mask", 1, 2, 2, 1),), 4), 3, 2, rng)


def test_apply_cms_surface_schema():
    src = "ABCDEFGHIJKLMNOP"
    plan = MaskPlan((Span("mask", 2, 2, 2, 1), Span("s2s", 8, 3, 4, 1)), len(src), 0.15)
    out = apply_cms(src, plan, "wxyz")
    assert out == "AB<mask_1:2>EFGH<s2s_1_4:IJK>LMNOP<mask_1:2>CD<s2s_1_4:IJK>wxyz"


def test_apply_cms_identity_mutation():
    src = "CC(=O)Nc1ccccc1"
    plan = MaskPlan((Span("s2s", 3, 4, 4, 1),), len(src), 0.15)
    surface = apply_cms(src, plan, src[3:7])
    target = surface[surface.rindex(">") + 1:]
    assert splice_reference(src, plan, target) == src


def test_task3_full_surface(golden):
    t3 = golden["tasks"][2]
    plan = MaskPlan(tuple(Span.from_list(m) for m in t3["markers"]), len(t3["original"]), 0.15)
    assert "[BOS]" + apply_cms(t3["original"], plan, "c1") + "[EOS]" == t3["cms_surface"]


def test_render_s2s_prompt():
    src = "ABCDEFGHIJ"
    plan = MaskPlan((Span("s2s", 3, 2, 5, 1),), 10, 0.15)
    assert render_s2s_prompt(src, plan) == "ABC<mask_1:5>FGHIJ<mask_1:5>"
    with pytest.raises(PlanMismatch):
        render_s2s_prompt(src, MaskPlan((Span("mask", 3, 2, 2, 1),), 10))


def test_s2s_lengths_ranges():
    rng = np.random.default_rng(9)
    src = "C" * 40  # floor(40 * 0.15) = 6
    spans, targets = Counter(), Counter()
    for _ in range(5000):
        span, target = s2s_lengths(src, 0.15, rng)
        assert 1 <= span <= 6 and 1 <= target <= min(32, 2 * span)
        spans[span] += 1
    assert sorted(spans) == list(range(1, 7))


def test_generate_s2s_target_budget_of_one(vocab, forced_model):
    model = forced_model(vocab, vocab.token_to_id["cc"])
    plan = MaskPlan((Span("s2s", 3, 2, 1, 1),), 10, 0.15)
    out = generate_s2s_target(model, "CCCCCCCCCC", plan, GREEDY, np.random.default_rng(0))
    assert out.text == "c" and not out.warning and out.attempts == 1


def test_generate_s2s_target_retry_accounting(vocab, forced_model):
    model = forced_model(vocab, vocab.eos_id)
    plan = MaskPlan((Span("s2s", 3, 2, 4, 1),), 10, 0.15)
    out = generate_s2s_target(model, "CCCCCCCCCC", plan, GREEDY, np.random.default_rng(0), retries=5)
    assert out.warning and out.attempts == 5 and out.text == ""


def _constant_target(source, plan, rng):
    from cmsmol.corpus import S2STarget
    t = plan.s2s_span.target_length
    return S2STarget("C" * t, False, 1)


def test_phase3_mix_frequencies():
    rng = np.random.default_rng(0)
    src = "CC(=O)Nc1ccc(O)cc1CCN(C)C(=O)c1ccccc1"
    counts = Counter()
    for _ in range(100_000):
        counts[make_example(src, CMS, 0.15, rng, target_fn=_constant_target).plan.configuration] += 1
    freqs = [counts[c] / 100_000 for c in CMS_CONFIGS]
    assert all(abs(f - e) <= 0.01 for f, e in zip(freqs, (0.1, 0.1, 0.4, 0.4)))


def test_hint_rewritten_when_target_misses():
    def short_target(source, plan, rng):
        from cmsmol.corpus import S2STarget
        return S2STarget("N", True, 8)

    src = "CC(=O)Nc1ccc(O)cc1CCN(C)C(=O)c1ccccc1"
    for i in range(50):
        ex = make_example(src, CMS, 0.15, derive_rng(3, i), mix=(0, 0, 1, 0), target_fn=short_target)
        assert ex.plan.s2s_span.target_length == 1 and ex.target == "N" and ex.warning
        assert "<s2s_1_1:" in ex.surface


def test_build_epoch_phases(corpus, vocab):
    data = corpus[:50]
    clm = build_epoch(data, 1, 0.15, 7, vocab=vocab)
    assert [e.surface for e in clm.examples] == ["[BOS]" + s + "[EOS]" for s in data]
    cm = build_epoch(data, 2, 0.15, 7, vocab=vocab, two_mask_prob=0.0)
    assert all(len(e.plan.spans) == 1 for e in cm.examples)
    for e in cm.examples:
        assert e.surface.startswith("[BOS]") and e.surface.endswith("[EOS]")
        assert e.ids[0] == vocab.bos_id and e.ids[-1] == vocab.eos_id
        assert demask(e) == e.source
    assert len(cm.examples) + sum(cm.skipped.values()) == 50


def test_build_epoch_determinism_and_regeneration(corpus):
    data = corpus[:200]
    a = build_epoch(data, CM, 0.15, 1)
    b = build_epoch(data, CM, 0.15, 1)
    c = build_epoch(data, CM, 0.15, 2)
    dump = lambda ep: json.dumps([e.to_record() for e in ep.examples], sort_keys=True)
    assert dump(a) == dump(b)
    plans = lambda ep: Counter(tuple(map(tuple, e.to_record()["plan"])) for e in ep.examples)
    assert plans(a) != plans(c)


def test_build_epoch_is_shard_independent(corpus):
    data = corpus[:100]
    whole = build_epoch(data, CM, 0.15, 4).examples
    # the example at index i only depends on (epoch seed, i)
    for i in (0, 37, 99):
        ex = make_example(data[i], CM, 0.15, derive_rng(4, i), key=(4, i))
        assert ex.to_record() == next(e for e in whole if e.key == (4, i)).to_record()


def test_build_epoch_skips_short():
    ep = build_epoch(["CC", "CCO", "CC(=O)Nc1ccc(O)cc1CC"], CM, 0.15, 0)
    assert sum(ep.skipped.values()) == 2 and len(ep.examples) == 1


def test_corpus_file_round_trip(corpus, tmp_path):
    ep = build_epoch(corpus[:30], CMS, 0.15, 3, target_fn=_constant_target)
    path = tmp_path / "c.jsonl"
    write_corpus(path, ep.examples, tokenizer_sha256="abc")
    header, examples = read_corpus(path)
    assert header["tokenizer_sha256"] == "abc"
    assert [e.to_record() for e in examples] == [e.to_record() for e in ep.examples]


def test_corruptor_estimator(corpus):
    est = CMSCorruptor(phase="CM", epoch_seed=5).fit(corpus[:20])
    assert est.get_params()["mask_fraction"] == 0.15
    out = est.transform(corpus[:20])
    assert len(out) == 20 and all("<mask_1:" in s for s in out if len(s) > 30)
    assert out == CMSCorruptor(phase="CM", epoch_seed=5).fit(corpus[:20]).transform(corpus[:20])
