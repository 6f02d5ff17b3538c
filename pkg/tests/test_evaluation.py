import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acoustemo.evaluation import (
    EmptyGroundTruth,
    ReportRow,
    SynonymMap,
    avg_score,
    emit_report,
    match_score,
    normalize_labels,
    round_half_away,
    score_corpus,
)

# (Accuracy_S, Recall_S, reported Avg) for reference rows whose Avg is their mean
REFERENCE_ROWS = [
    ("Qwen-Audio", 46.97, 30.35, 38.66),
    ("SALMONN", 54.17, 48.38, 51.28),
    ("Video-LLaMA", 39.44, 42.50, 40.97),
    ("AffectGPT", 62.03, 61.46, 61.75),
    ("MicroEmo", 63.82, 68.59, 66.21),
]


class TestNormalize:
    def test_list_string(self):
        assert normalize_labels("['anxious', 'concerned']") == {"anxious", "concerned"}

    def test_case_and_duplicates(self):
        assert normalize_labels("['Calm','calm ']") == {"calm"}

    def test_no_list_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="acoustemo.evaluation"):
            assert normalize_labels("I feel that the speaker is fine") == frozenset()
        assert "no label list" in caplog.text

    def test_unquoted_fallback(self):
        assert normalize_labels("[happy, Sad]") == {"happy", "sad"}

    def test_empty_list(self):
        assert normalize_labels("[]") == frozenset()


class TestMatchScore:
    def test_identity(self):
        assert match_score({"anxious", "concerned"}, {"anxious", "concerned"}) == (100.0, 100.0)

    def test_disjoint(self):
        assert match_score({"calm", "neutral"}, {"anxious", "concerned"}) == (0.0, 0.0)

    def test_partial(self):
        assert match_score({"anxious"}, {"anxious", "concerned"}) == (100.0, 50.0)

    def test_empty_prediction(self):
        assert match_score(set(), {"calm"}) == (0.0, 0.0)

    def test_empty_ground_truth(self):
        with pytest.raises(EmptyGroundTruth):
            match_score({"calm"}, set())

    def test_synonyms(self):
        syn = SynonymMap([["worried", "anxious", "concerned"]])
        assert match_score({"anxious"}, {"worried"}, syn) == (100.0, 100.0)
        assert match_score({"anxious", "concerned"}, {"worried", "sad"}, syn) == (100.0, 50.0)

    def test_overlapping_groups_rejected(self):
        with pytest.raises(ValueError):
            SynonymMap([["a", "b"], ["b", "c"]])

    def test_synonym_file(self, tmp_path):
        path = tmp_path / "syn.txt"
        path.write_text("# groups\nworried, anxious,concerned\n\ncalm,relaxed  # trailing\n")
        syn = SynonymMap.load(path)
        assert syn.canonical("Concerned") == "worried"
        assert syn.canonical("relaxed") == "calm"
        assert syn.canonical("joy") == "joy"


class TestAverage:
    @pytest.mark.parametrize("name,acc,rec,avg", REFERENCE_ROWS)
    def test_reference_rows(self, name, acc, rec, avg):
        assert avg_score(acc, rec) == avg

    def test_zero(self):
        assert avg_score(0, 0) == 0.0

    def test_half_away_from_zero(self):
        # 51.275 and 61.745 have no exact binary form; decimal rounding keeps the tie
        assert avg_score(54.17, 48.38) == 51.28
        assert round_half_away(61.745) == 61.75
        assert round_half_away(-0.125) == -0.13
        assert round(61.745, 2) == 61.74

    def test_headline_row_is_not_a_mean(self):
        # one reference row lists 67.55 for this pair; the mean rule gives 67.78
        assert avg_score(65.40, 70.15) == 67.78


class TestReport:
    def test_row_rendering(self):
        text = emit_report([ReportRow("AffectGPT", 62.03, 61.46)])
        assert text.splitlines()[1].split() == ["AffectGPT", "61.75", "62.03", "61.46"]

    def test_header_only(self):
        assert emit_report([]).splitlines() == ["Model     Avg  Accuracy_S  Recall_S"]

    def test_order_preserved(self):
        rows = [ReportRow(n, a, r) for n, a, r, _ in REFERENCE_ROWS]
        lines = emit_report(rows, title="T").splitlines()
        assert lines[0] == "T"
        assert [ln.split()[0] for ln in lines[2:]] == [r.name for r in rows]

    def test_salmonn_avg(self):
        assert "51.28" in emit_report([ReportRow("SALMONN", 54.17, 48.38)])


def test_score_corpus_averages_per_sample():
    preds = ["['anxious', 'concerned']", "['calm']", "nothing"]
    gts = [{"anxious", "concerned"}, {"calm", "neutral"}, {"calm"}]
    acc, rec = score_corpus(preds, gts)
    assert acc == pytest.approx((100 + 100 + 0) / 3, abs=1e-12)
    assert rec == pytest.approx((100 + 50 + 0) / 3, abs=1e-12)


labels = st.lists(st.sampled_from(["anxious", "worried", "concerned", "calm", "neutral", "sad", "joy"]),
                  max_size=6)
groups = [["worried", "anxious", "concerned"], ["calm", "neutral"]]


@settings(max_examples=200, deadline=None)
@given(labels, labels.filter(bool))
def test_score_properties(pred, gt):
    syn = SynonymMap(groups)
    acc, rec = match_score(pred, gt, syn)
    assert 0 <= acc <= 100 and 0 <= rec <= 100
    assert (acc, rec) == match_score(list(reversed(pred)) + pred, gt, syn)
    p, g = syn.apply(pred), syn.apply(gt)
    if p and p <= g:
        assert acc == 100.0
    if g <= p:
        assert rec == 100.0


@settings(max_examples=100, deadline=None)
@given(labels)
def test_canonicalization_idempotent(items):
    syn = SynonymMap(groups)
    once = syn.apply(items)
    assert syn.apply(once) == once
