import numpy as np
import pytest

from textspotter.evaluation import (
    correct_with_lexicon,
    detection_prh,
    e2e_hmean,
    edit_distance,
    evaluate_predictions,
    full_lexicon,
    hmean,
    match_image,
    one_minus_ned,
    read_lexicon,
)


def square(x, y, s=0.1):
    return np.array([[x, y], [x + s, y], [x + s, y + s], [x, y + s]])


def gt(x, y, text="word", ignore=False):
    return {"polygon": square(x, y), "transcript": text, "ignore": ignore}


def pred(x, y, text="word", score=0.9):
    return {"polygon": square(x, y), "transcript": text, "score": score}


def test_edit_distance():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance("", "abc") == 3
    assert edit_distance("abc", "abc") == 0
    assert edit_distance("abc", "abd") == 1


def test_identical_predictions_score_one():
    gts = [[gt(0.1, 0.1, "hello"), gt(0.5, 0.5, "world")]]
    preds = [[pred(0.1, 0.1, "hello"), pred(0.5, 0.5, "world")]]
    assert detection_prh(preds, gts) == (1.0, 1.0, 1.0)
    assert e2e_hmean(preds, gts) == (1.0, 1.0, 1.0)
    assert one_minus_ned(preds, gts) == 1.0


def test_no_predictions():
    assert detection_prh([[]], [[gt(0.1, 0.1)]]) == (0.0, 0.0, 0.0)
    assert one_minus_ned([[]], [[gt(0.1, 0.1)]]) == 0.0


def test_two_of_three_predictions_match():
    gts = [[gt(0.1, 0.1), gt(0.5, 0.5)]]
    preds = [[pred(0.1, 0.1), pred(0.5, 0.5), pred(0.8, 0.1)]]
    p, r, h = detection_prh(preds, gts)
    assert p == 2 / 3 and r == 1.0
    assert h == hmean(2 / 3, 1.0)
    assert h == pytest.approx(0.8, abs=1e-15)


def test_lexicon_correction():
    gts = [[gt(0.1, 0.1, "hello")]]
    preds = [[pred(0.1, 0.1, "hel1o")]]
    assert e2e_hmean(preds, gts, lexicon=["hello"])[2] == 1.0
    assert e2e_hmean(preds, gts)[2] == 0.0
    with pytest.raises(ValueError):
        e2e_hmean(preds, gts, lexicon=[])


def test_lexicon_tie_break_and_rejection():
    assert correct_with_lexicon("ab", ["ac", "aa"]) == "aa"  # both at distance 1
    assert correct_with_lexicon("xyzw", ["abcd"]) == "xyzw"  # distance 4 > ceil(4 / 2)
    assert correct_with_lexicon("xyzw", ["xyab"]) == "xyab"  # distance 2 == ceil(4 / 2)
    assert correct_with_lexicon("  HeLLo ", ["hello"]) == "hello"


def test_case_folding():
    assert e2e_hmean([[pred(0.1, 0.1, "HeLLo")]], [[gt(0.1, 0.1, "hello")]])[2] == 1.0


def test_per_image_lexicons():
    gts = [[gt(0.1, 0.1, "cat")], [gt(0.1, 0.1, "dog")]]
    preds = [[pred(0.1, 0.1, "cot")], [pred(0.1, 0.1, "dig")]]
    assert e2e_hmean(preds, gts, lexicon=[["cat"], ["dog"]])[2] == 1.0
    assert e2e_hmean(preds, gts, lexicon=[["dog"], ["cat"]])[2] == 0.0


def test_one_minus_ned_examples():
    assert one_minus_ned([[pred(0.1, 0.1, "abc")]], [[gt(0.1, 0.1, "abc")]]) == 1.0
    assert one_minus_ned([[pred(0.1, 0.1, "abd")]], [[gt(0.1, 0.1, "abc")]]) == pytest.approx(2 / 3)
    assert one_minus_ned([[pred(0.1, 0.1, "")]], [[gt(0.1, 0.1, "")]]) == 1.0
    # one exact pair plus one false positive
    assert one_minus_ned([[pred(0.1, 0.1, "abc"), pred(0.6, 0.6)]], [[gt(0.1, 0.1, "abc")]]) == 0.5


def test_ignored_ground_truth_removes_prediction():
    gts = [[gt(0.1, 0.1), gt(0.5, 0.5, ignore=True)]]
    preds = [[pred(0.1, 0.1), pred(0.5, 0.5)]]
    assert detection_prh(preds, gts) == (1.0, 1.0, 1.0)
    assert detection_prh([[pred(0.1, 0.1)]], gts) == (1.0, 1.0, 1.0)


def test_greedy_order_and_tie_break():
    g = [gt(0.1, 0.1)]
    near = pred(0.1, 0.1, score=0.5)
    off = pred(0.12, 0.1, score=0.5)
    m1 = match_image([off, near], g)
    m2 = match_image([near, off], g)
    # equal scores: the higher-IoU prediction wins regardless of list order
    assert m1.pairs[0][0] == 1 and m2.pairs[0][0] == 0
    high = pred(0.12, 0.1, score=0.9)
    assert match_image([near, high], g).pairs[0][0] == 1


def test_e2e_never_exceeds_detection(rng):
    for _ in range(30):
        gts = [[gt(*rng.uniform(0, 0.9, 2), text=str(rng.integers(3))) for _ in range(3)]]
        preds = [[pred(*rng.uniform(0, 0.9, 2), text=str(rng.integers(3)), score=rng.uniform())
                  for _ in range(4)]]
        for g0, p0 in zip(gts[0], preds[0][:2]):
            p0["polygon"] = g0["polygon"] + 0.005
        d = detection_prh(preds, gts)[2]
        assert e2e_hmean(preds, gts)[2] <= d
        assert 0.0 <= one_minus_ned(preds, gts) <= 1.0


def test_report_and_lexicon_file(tmp_path):
    gts = [[gt(0.1, 0.1, "hello")]]
    preds = [[pred(0.1, 0.1, "hel1o")]]
    report = evaluate_predictions(preds, gts, {"full": full_lexicon(gts)})
    assert report.end_to_end["none"].hmean == 0.0
    assert report.end_to_end["full"].hmean == 1.0
    assert report.per_image[0]["matches"][0]["expected"] == "hello"
    path = tmp_path / "lex.txt"
    path.write_text("hello\n\nworld\n")
    assert read_lexicon(path) == ["hello", "world"]
    (tmp_path / "empty.txt").write_text("\n")
    with pytest.raises(ValueError):
        read_lexicon(tmp_path / "empty.txt")
