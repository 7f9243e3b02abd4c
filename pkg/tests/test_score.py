import math

import numpy as np
import pytest

from cmsmol._util import MASK64, hash_text
from cmsmol.score import (CRITICS, FewerThanK, InvalidCandidate, MalformedRow, MoleculeResult, MoleculeScorer,
                          NormBounds, Scored, Scorers, ScoreVector, TableHashMismatch, TopK, crippen_logp,
                          crippen_logp_detail, docking_stub, druglikeness_components, druglikeness_proxy,
                          h_acceptors, h_donors, load_crippen_table, molecular_weight, normalize,
                          normalized_reward, parse_external_scores, ramp, report, report_csv, sa_proxy,
                          score_candidate, score_molecule, score_original, select_top)
from cmsmol.smiles import parse

PEN = "CC1([C@@H](N2[C@H](S1)[C@@H](C2=O)NC(=O)CC3=CC=CC=C3)C(=O)O)C"

# contributions copied by hand from data/crippen.tsv
C1, C3, C4, C5, C6 = 0.1441, -0.2035, -0.2051, -0.2783, 0.1551
H1, H2, H3 = 0.1230, -0.2677, 0.2142
N2, N3, O2, O9, S1 = -0.7096, -0.3187, -0.2893, -0.1526, 0.6482


def test_methane_lookup():
    assert crippen_logp(parse("C")) == pytest.approx(C1 + 4 * H1, abs=1e-12)


def test_ethanol_hand_sum():
    hand = (C1 + 3 * H1) + (C3 + 2 * H1) + (O2 + H2)
    assert crippen_logp(parse("CCO")) == pytest.approx(hand, abs=1e-12)


def test_penicillin_hand_sum():
    hand = (3 * C1 + 4 * C4 + N3 + S1 + 3 * C5 + 3 * O9 + N2 + 6 * C6 + O2
            + 16 * H1 + H3 + H2)
    detail = crippen_logp_detail(parse(PEN))
    assert detail.value == pytest.approx(hand, abs=1e-12)
    assert detail.fallback_atoms == 0


def test_unknown_element_falls_back():
    detail = crippen_logp_detail(parse("C[Si](C)(C)C"))
    assert detail.fallback_atoms == 1


def test_table_hash_pinned():
    from importlib import resources
    data = resources.files("cmsmol").joinpath("data", "crippen.tsv").read_bytes()
    assert load_crippen_table(data)["C1"] == C1
    with pytest.raises(TableHashMismatch):
        load_crippen_table(data.replace(b"0.1441", b"0.1442"))


def test_penicillin_ramps_recomputed():
    # C16H18N2O4S
    mw = 16 * 12.011 + 18 * 1.008 + 2 * 14.007 + 4 * 15.999 + 32.06
    g = parse(PEN)
    assert molecular_weight(g) == pytest.approx(mw, abs=1e-9)
    assert h_donors(g) == 2 and h_acceptors(g) == 6
    logp = crippen_logp(g)

    def sheet_ramp(x, a, b, c, d):
        if x <= a or x >= d:
            return 1.0 if b <= x <= c else 0.0
        if x < b:
            return (x - a) / (b - a)
        if x > c:
            return (d - x) / (d - c)
        return 1.0

    comps = [sheet_ramp(mw, 100, 200, 500, 700), sheet_ramp(logp, -3, -0.4, 5, 7.5),
             sheet_ramp(2, 0, 0, 5, 8), sheet_ramp(6, 0, 0, 10, 14)]
    assert druglikeness_proxy(g) == pytest.approx(math.prod(comps) ** 0.25, abs=1e-12)


def test_druglikeness_shapes():
    assert druglikeness_proxy(parse(PEN)) == 1.0
    heavy = "C" * 60  # about 843 Da, past the hard cutoff
    assert druglikeness_components(parse(heavy))["molecular_weight"] == 0.0
    assert druglikeness_proxy(parse(heavy)) == 0.0
    assert ramp(600, 100, 200, 500, 700) == pytest.approx(0.5)
    assert ramp(150, 100, 200, 500, 700) == pytest.approx(0.5)


def test_sa_proxy_range_and_monotone():
    assert sa_proxy(parse("C1CCCCC1")) > sa_proxy(parse("CCCCCC"))
    assert sa_proxy(parse("C[C@H](N)O")) > sa_proxy(parse("CC(N)O"))
    for s in ("C", PEN, "c1ccc2ccccc2c1"):
        assert 1.0 <= sa_proxy(parse(s)) <= 10.0


def test_docking_stub():
    for s in ("CCO", PEN, "c1ccccc1"):
        v = docking_stub(s)
        assert -14.0 <= v <= -6.0
        assert v == docking_stub(s) == -6.0 - 8.0 * hash_text(s) / MASK64


def test_external_scores_parsing():
    text = "smiles,docking,druglikeness\nCCO,-9.5,0.4\nbad,row\nCCN,oops,0.1\nCCC,-8,\n"
    ext = parse_external_scores(text)
    assert ext.skipped == 2
    assert ext.get("CCO") == {"docking": -9.5, "druglikeness": 0.4}
    assert ext.get("CCC") == {"docking": -8.0}
    with pytest.raises(MalformedRow):
        parse_external_scores("smile,dock\n")
    scorers = Scorers(ext)
    v = scorers.score("CCO", "CCN")
    assert v.docking == -9.5 and v.druglikeness == 0.4
    assert dict(v.provenance)["docking"] == "external" and dict(v.provenance)["solubility"] == "proxy"
    w = scorers.score("CCCl", None)
    assert w.docking == docking_stub("CCCl") and dict(w.provenance)["docking"] == "stub"
    assert w.similarity is None


def test_score_candidate_validity():
    v = score_candidate("C1CC", "CCO")
    assert not v.validity
    with pytest.raises(InvalidCandidate):
        normalized_reward(v, NormBounds.default())
    same = score_candidate(PEN, PEN)
    assert same.similarity == 1.0


def test_normalization_bounds():
    b = NormBounds.default()
    assert normalize("docking", -14.0, b) == 1.0 and normalize("docking", -6.0, b) == 0.0
    assert normalize("docking", -20.0, b) == 1.0 and normalize("docking", 0.0, b) == 0.0
    assert normalize("synthesizability", 1.0, b) == 1.0 and normalize("synthesizability", 12.0, b) == 0.0
    assert normalize("solubility", -7.0, b) == 0.0 and normalize("solubility", 9.0, b) == 1.0
    best = ScoreVector(-14.0, 1.0, 1.0, 5.0, 1.0)
    assert normalized_reward(best, b) == 1.0
    with pytest.raises(ValueError):
        NormBounds({"docking": (1.0, 1.0, "min")}, {"docking": 1.0})


def test_hand_built_vector():
    v = ScoreVector(-10.0, 0.7, 3.92, 2.471, 0.9)
    terms = [(10.0 - 6.0) / 8.0, 0.7, (10.0 - 3.92) / 9.0, (2.471 + 5.0) / 10.0, 0.9]
    b = NormBounds.default()
    assert abs(normalized_reward(v, b) - sum(terms) / 5) < 1e-12
    assert abs(normalized_reward(v, b.without_similarity()) - sum(terms[:4]) / 4) < 1e-12


def test_monotone_property():
    rng = np.random.default_rng(0)
    b = NormBounds.default()
    better = {"docking": -1, "druglikeness": 1, "synthesizability": -1, "solubility": 1, "similarity": 1}
    spans = {"docking": (-18, -2), "druglikeness": (0, 1), "synthesizability": (1, 10),
             "solubility": (-8, 8), "similarity": (0, 1)}
    violations = 0
    for _ in range(1000):
        vals = {c: float(rng.uniform(*spans[c])) for c in CRITICS}
        c = CRITICS[rng.integers(5)]
        moved = dict(vals)
        moved[c] += better[c] * float(rng.exponential(1.0))
        r0, r1 = normalized_reward(ScoreVector(**vals), b), normalized_reward(ScoreVector(**moved), b)
        violations += r1 < r0
        assert 0.0 <= r0 <= 1.0
    assert violations == 0


def _scored(smiles, reward):
    return Scored(smiles, ScoreVector(-8, 0.5, 3, 1, 0.5), reward)


def test_select_top_order_and_ties():
    items = [_scored("CCN", 0.5), _scored("CCC", 0.5), _scored("CCO", 0.9), _scored("C", 0.1)]
    top = select_top(items, 3)
    assert [s.smiles for s in top.items] == ["CCO", "CCC", "CCN"]
    assert top.mean_reward == pytest.approx((0.9 + 0.5 + 0.5) / 3)
    assert top.mean_reward >= np.mean([s.reward for s in items])
    assert not top.fewer_than_k
    few = select_top(items, 10)
    assert few.fewer_than_k and len(few.items) == 4
    assert select_top(list(reversed(items)), 3).items == top.items


def test_score_molecule_and_report(tmp_path):
    cands = [PEN, PEN.replace("CC3=CC=CC=C3", "CC3=CC=CS3"), "C1CC", "CC(=O)O"]
    res = score_molecule(PEN, cands, k=2)
    assert res.n_candidates == 4 and res.n_valid == 3 and len(res.top.items) == 2
    back = MoleculeResult.from_record(res.to_record())
    assert back.reward == res.reward and back.top.items == res.top.items
    vec, r0 = score_original(PEN)
    assert vec.similarity is None and 0 <= r0 <= 1
    row = report([res, back], target="stub")
    assert row["avg_norm_reward"] == pytest.approx(res.reward)
    assert "docking=stub" in row["provenance"]
    text = report_csv([row])
    assert text.splitlines()[0].split(",")[:5] == ["target", "algorithm", "n_molecules", "avg_norm_reward",
                                                  "avg_top10pct_norm_reward"]


def test_report_top_ten_percent():
    def result(r):
        return MoleculeResult("C", 1, 1, TopK([], r, False), {c: 0.0 for c in CRITICS}, "")
    rows = [result(x / 20) for x in range(20)]
    out = report(rows)
    assert out["avg_top10pct_norm_reward"] == pytest.approx((19 / 20 + 18 / 20) / 2)
    assert out["avg_norm_reward"] == pytest.approx(np.mean([x / 20 for x in range(20)]))


def test_scorer_estimator(tmp_path):
    path = tmp_path / "ext.csv"
    path.write_text("smiles,docking\nCCO,-12\n")
    est = MoleculeScorer(reference="CCO", external_path=str(path)).fit()
    assert est.get_params()["reference"] == "CCO"
    X = est.transform(["CCO", "C1CC"])
    assert X.shape == (2, 5) and X[0, 0] == -12.0 and np.isnan(X[1]).all()
    pred = est.predict(["CCO", "C1CC"])
    assert 0 <= pred[0] <= 1 and np.isnan(pred[1])
