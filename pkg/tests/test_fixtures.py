import pytest

from vlmpolyp.fixtures import FixtureError, load_counts, load_prompt_changes, verify_counts

MODELS = ["Decision Tree", "Random Forest", "SVM", "Logistic Regression", "Gaussian Naive Bayes", "ResNet50",
          "GPT-4", "Claude-3-Opus", "Gemini-1.5-Pro", "CLIP", "BiomedCLIP"]


def test_counts_fixture_shape():
    rows = load_counts()
    assert sorted({r.model for r in rows}) == sorted(MODELS)
    assert sum(r.item == "detection" for r in rows) == 11
    assert sum(r.counts is not None and r.item != "detection" for r in rows) == 66


def test_every_model_sees_the_same_images():
    # Each one-vs-all row of a model partitions the same image set.
    totals = {}
    for r in load_counts():
        if r.counts is not None and r.item != "detection":
            totals.setdefault(r.model, set()).add(r.counts.total)
    assert all(len(v) == 1 for v in totals.values())


def test_known_discrepancy_is_exempt_only_when_honoured():
    rows = load_counts()
    flagged = [r for r in rows if r.expected_delta is not None]
    assert [(r.model, r.item) for r in flagged] == [("Gemini-1.5-Pro", "detection")]
    assert all(c.ok for c in verify_counts(rows))
    strict = [c for c in verify_counts(rows, honor_known=False) if not c.ok]
    assert [(c.model, c.item) for c in strict] == [("Gemini-1.5-Pro", "detection")]


@pytest.mark.parametrize("content,needle", [
    ("model,task_or_class,tp,fp,tn,fn,reported_f1\nA,detection,1,2,3,x,0.1\n", "integer"),
    ("model,task_or_class,tp,fp,tn,fn,reported_f1\nA,detection,1,2,3,-4,0.1\n", "non-negative"),
    ("model,task_or_class,tp,fp,tn,fn,reported_f1\nA,bogus,1,2,3,4,0.1\n", "unknown task_or_class"),
    ("model,tp\nA,1\n", "header"),
])
def test_malformed(tmp_path, content, needle):
    p = tmp_path / "f.csv"
    p.write_text(content)
    with pytest.raises(FixtureError, match=needle):
        load_counts(p)


def test_weighted_needs_class_rows(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("model,task_or_class,tp,fp,tn,fn,reported_f1\nA,TA,1,0,0,0,1.0\nA,weighted,,,,,1.0\n")
    with pytest.raises(FixtureError, match="weighted row needs"):
        verify_counts(load_counts(p))


def test_missing_file(tmp_path):
    with pytest.raises(FixtureError, match="not found"):
        load_counts(tmp_path / "none.csv")


def test_prompt_change_rows():
    rows = load_prompt_changes()
    assert len(rows) == 6
    gemini = [r for r in rows if r.backend == "Gemini-1.5-Pro" and r.task == "classify"][0]
    assert gemini.reported_change is None and gemini.change is None
