import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbvlm.metrics import (METRICS_SCHEMA, TABLE_COLUMNS, Undefined, auc_rank, detect, evaluate_predictions,
                           format_table, iou, oracle_probs, parse_table, precision_recall, roc_auc,
                           write_report_files)
from tbvlm.params import init_params
from tbvlm.synth import PATHOLOGIES, load_manifest
from tbvlm.tensor import Tensor
from tbvlm.vision import ImageGrid

from conftest import SMALL


def pair_auc(scores, truth):
    """Brute force over every positive/negative pair."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def recount(preds, truth):
    tp = sum(1 for p, t in zip(preds, truth) if p and t)
    fp = sum(1 for p, t in zip(preds, truth) if p and not t)
    fn = sum(1 for p, t in zip(preds, truth) if not p and t)
    return tp, fp, fn


# -- precision / recall ----------------------------------------------------


def test_precision_recall_arithmetic():
    p, r, c = precision_recall([1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 1, 0])
    assert (p, r) == (0.75, 0.75)
    assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 1)


def test_all_negative_gives_undefined_markers():
    p, r, _ = precision_recall([0, 0, 0], [0, 0, 0])
    assert isinstance(p, Undefined) and isinstance(r, Undefined)
    assert not p and p.reason


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        precision_recall([1, 0], [1])


def test_precision_recall_random_recount():
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, truth = rng.random(50) < 0.4, rng.random(50) < 0.3
        p, r, _ = precision_recall(preds, truth)
        tp, fp, fn = recount(preds, truth)
        assert p == tp / (tp + fp) if tp + fp else isinstance(p, Undefined)
        assert r == tp / (tp + fn) if tp + fn else isinstance(r, Undefined)


# -- AUC -------------------------------------------------------------------


def test_worked_auc_example():
    scores, truth = [0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]
    auc, curve = roc_auc(scores, truth)
    assert auc == 0.75 == pair_auc(scores, truth)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)


def test_separated_and_tied_scores():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 1.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1])[0] == 0.5


def test_single_class_auc_is_undefined():
    auc, curve = roc_auc([0.1, 0.7], [1, 1])
    assert isinstance(auc, Undefined) and curve is None


def test_trapezoid_equals_rank_statistic_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        truth = rng.random(n) < 0.5
        truth[0], truth[1] = True, False
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding forces ties
        auc, curve = roc_auc(scores, truth)
        assert abs(auc - auc_rank(scores, truth)) <= 1e-12
        assert abs(auc - pair_auc(scores, truth)) <= 1e-12
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=30), st.integers(0, 2 ** 16))
def test_auc_invariant_under_monotone_transform(scores, seed):
    # integer scores keep the cubic transform exact, hence strictly monotone in floating point
    truth = np.random.default_rng(seed).random(len(scores)) < 0.5
    truth[0], truth[1] = True, False
    s = np.asarray(scores, dtype=np.float64)
    a = roc_auc(s, truth)[0]
    b = roc_auc(3.0 * s ** 3 + 7.0, truth)[0]
    assert a == b


# -- IoU -------------------------------------------------------------------


def test_iou_cases():
    assert iou(range(10), range(5, 15), 16) == pytest.approx(1 / 3, abs=0)
    assert iou([1, 2], [1, 2]) == 1.0
    assert iou([1, 2], [3]) == 0.0
    assert iou([], []) == 1.0
    assert iou([], [4]) == 0.0


def test_iou_grid_mismatch():
    with pytest.raises(ValueError):
        iou([16], [1], 16)


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 15)), st.sets(st.integers(0, 15)))
def test_iou_set_counting(a, b):
    expected = len(a & b) / len(a | b) if a | b else 1.0
    assert iou(a, b, 16) == expected == iou(b, a, 16)
    assert iou(a, a) == 1.0


# -- detection and evaluation ----------------------------------------------


def test_zero_head_gives_one_half():
    params = init_params(SMALL, 0)
    params["detect.head.w"] = Tensor(np.zeros((8, 6)))
    params["detect.head.b"] = Tensor(np.zeros(6))
    pred = detect(ImageGrid(np.random.default_rng(0).random((64, 64))), "", params, SMALL)
    assert np.all(pred.probs == 0.5)


def test_probabilities_are_bounded():
    params = init_params(SMALL, 1)
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = detect(ImageGrid(rng.random((64, 64))), "", params, SMALL).probs
        assert p.shape == (6, 16) and np.all((p >= 0) & (p <= 1))


@pytest.fixture(scope="module")
def annotations(small_dataset):
    return [e.annotation for e in load_manifest(small_dataset).entries]


def test_oracle_predictor_scores_perfectly(annotations):
    report = evaluate_predictions(oracle_probs(annotations), annotations)
    for r in report.rows:
        assert r.precision == r.recall == r.auc == r.iou == 1.0, r.name


def test_constant_predictor_has_chance_auc(annotations):
    report = evaluate_predictions(np.full((len(annotations), 6, 16), 0.5), annotations)
    assert [r.auc for r in report.rows] == [0.5] * 6
    assert all(isinstance(r.precision, Undefined) for r in report.rows)


def test_evaluation_ignores_image_order(annotations):
    probs = np.random.default_rng(2).random((len(annotations), 6, 16))
    perm = np.random.default_rng(3).permutation(len(annotations))
    a = evaluate_predictions(probs, annotations).to_json()
    b = evaluate_predictions(probs[perm], [annotations[i] for i in perm]).to_json()
    for ra, rb in zip(a["pathologies"], b["pathologies"]):
        assert ra["counts"] == rb["counts"] and ra["precision"] == rb["precision"]
        assert ra["auc"] == pytest.approx(rb["auc"], abs=1e-12)
        assert ra["iou"] == pytest.approx(rb["iou"], abs=1e-12)


def test_absent_pathology_marks_auc_undefined(annotations):
    clean = [a for a in annotations if not a.present["fibrosis"]]
    report = evaluate_predictions(oracle_probs(clean), clean)
    assert isinstance(report.row("fibrosis").auc, Undefined)
    assert "auc_undefined" in report.row("fibrosis").to_json()


def test_report_files_follow_schema(tmp_path, annotations):
    jsonschema = pytest.importorskip("jsonschema")
    probs = np.random.default_rng(4).random((len(annotations), 6, 16))
    paths = write_report_files(evaluate_predictions(probs, annotations), tmp_path)
    doc = json.loads(paths["json"].read_text())
    jsonschema.validate(doc, METRICS_SCHEMA)
    assert [p["pathology"] for p in doc["pathologies"]] == list(PATHOLOGIES)
    assert paths["roc"].read_text().splitlines()[0] == "pathology,threshold,fpr,tpr"


# -- table formatting ------------------------------------------------------


PUBLISHED = [("calcified_granuloma", 0.942, 0.940, 0.94, 0.92),
             ("bronchiectasis", 0.931, 0.923, 0.93, 0.91),
             ("cavity", 0.958, 0.950, 0.95, 0.94)]
PUBLISHED_LINES = ["Calcified Granulomas & 94.2 & 94.0 & 0.94 & 0.92 \\\\",
                   "Bronchiectasis & 93.1 & 92.3 & 0.93 & 0.91 \\\\",
                   "Cavity & 95.8 & 95.0 & 0.95 & 0.94 \\\\"]


def test_latex_rows_are_verbatim():
    lines = format_table(PUBLISHED, "latex").splitlines()
    assert lines[0] == "Pathology & Precision (\\%) & Recall (\\%) & AUC & IOU \\\\"
    assert lines[1:] == PUBLISHED_LINES


def test_text_table_structure():
    text = format_table(PUBLISHED)
    assert text.splitlines()[0] == "Performance Metrics for Detected Pathologies"
    rows = parse_table(text)
    assert rows[0] == list(TABLE_COLUMNS)
    assert rows[1] == ["Calcified Granulomas", "94.2", "94.0", "0.94", "0.92"]
    assert rows[2] == ["Bronchiectasis", "93.1", "92.3", "0.93", "0.91"]
    assert rows[3] == ["Cavity", "95.8", "95.0", "0.95", "0.94"]


def test_cp_angle_label_is_supported():
    assert parse_table(format_table([("cp_angle_blunting", 0.958, 0.95, 0.95, 0.94)]))[1][0] == "CP Angle Blunting"


def test_undefined_cells_render_as_na():
    assert parse_table(format_table([("cavity", Undefined("x"), 0.5, Undefined("y"), 0.1)]))[1][1:4] == \
        ["n/a", "50.0", "n/a"]
