import itertools
import json

import numpy as np
import pytest

from fdlite import evalkit as ev
from fdlite.anchorkit import iou
from fdlite.errors import DataError, ParseError

GT_TEXT = """\
0--Parade/a.jpg
2
10 20 30 40 0 0 0 0 0 0
100 100 20 25 1 0 0 1 0 0 hard
1--Handshaking/b.jpg
0
0 0 0 0 0 0 0 0 0 0
2--Demo/c.jpg
1
5 5 50 50 easy
"""


def det(image, box, score):
    return ev.EvalDet(image, tuple(float(v) for v in box), float(score))


# --------------------------------------------------------------------------
# parsing


def test_parse_layout():
    gts = ev.parse_gt(GT_TEXT)
    assert list(gts.images) == ["0--Parade/a.jpg", "1--Handshaking/b.jpg", "2--Demo/c.jpg"]
    a = gts.images["0--Parade/a.jpg"]
    assert [f.box for f in a] == [(10, 20, 30, 40), (100, 100, 20, 25)]
    assert [f.difficulty for f in a] == [None, "hard"]
    assert not any(f.ignore for f in a)  # attribute columns are ignored by default
    assert gts.images["1--Handshaking/b.jpg"] == []
    assert gts.n_gt == 3


def test_invalid_attribute_opt_in():
    gts = ev.parse_gt(GT_TEXT, invalid_as_ignore=True)
    assert [f.ignore for f in gts.images["0--Parade/a.jpg"]] == [False, True]
    assert gts.n_gt == 2


def test_ignore_and_difficulty_tokens():
    gts = ev.parse_gt("x.jpg\n2\n0 0 10 10 medium ignore\n20 0 10 10 ignore easy\n")
    faces = gts.images["x.jpg"]
    assert [(f.difficulty, f.ignore) for f in faces] == [("medium", True), ("easy", True)]


@pytest.mark.parametrize("text,line", [
    ("a.jpg\n1\n1 2 -3 4\n", 3),
    ("a.jpg\n1\n1 2 3 0\n", 3),
    ("a.jpg\n2\n1 2 3 4\n", 3),
    ("a.jpg\nmany\n", 2),
    ("a.jpg\n1\n1 2 x 4\n", 3),
    ("a.jpg\n1\n1 2 3\n", 3),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as e:
        ev.parse_gt(text, "gt.txt")
    assert e.value.line == line and "gt.txt" in str(e.value)


def test_load_files(tmp_path):
    (tmp_path / "gt.txt").write_text(GT_TEXT)
    recs = [{"image": "2--Demo/c.jpg", "x": 5, "y": 5, "w": 50, "h": 50, "score": 0.9,
             "landmarks": [[0, 0]] * 5}]
    (tmp_path / "d.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert ev.load_gt(tmp_path / "gt.txt").n_gt == 3
    assert ev.load_dets(tmp_path / "d.jsonl") == [det("2--Demo/c.jpg", (5, 5, 50, 50), 0.9)]
    (tmp_path / "bad.jsonl").write_text('{"image": "a"}\n')
    with pytest.raises(ParseError):
        ev.load_dets(tmp_path / "bad.jsonl")


# --------------------------------------------------------------------------
# matching


def greedy_loops(dets, gts, thr=0.5):
    tp, absorbed, used = [], [], [False] * len(gts)
    for d in dets:
        best, arg = -1.0, -1
        for j, g in enumerate(gts):
            if not g.ignore and not used[j]:
                v = iou(d.box, g.box)
                if v > best:
                    best, arg = v, j
        if arg >= 0 and best >= thr:
            used[arg] = True
            tp.append(True)
            absorbed.append(False)
        else:
            tp.append(False)
            absorbed.append(any(g.ignore and iou(d.box, g.box) >= thr for g in gts))
    return tp, absorbed, used


def max_matching(dets, gts, thr=0.5):
    """Exhaustive maximum one-to-one assignment size (small inputs only)."""
    real = [g for g in gts if not g.ignore]
    ok = [[iou(d.box, g.box) >= thr for g in real] for d in dets]
    best = 0
    k = min(len(dets), len(real))
    for perm in itertools.permutations(range(len(real)), k):
        for ds in itertools.combinations(range(len(dets)), k):
            best = max(best, sum(ok[d][g] for d, g in zip(ds, perm)))
        if best == k:
            break
    return best


def random_image(rng, n_det, n_gt):
    centres = rng.uniform(0, 100, (n_gt, 2))
    gts = [ev.GTFace((float(x), float(y), 20.0, 20.0), ignore=bool(rng.uniform() < 0.2))
           for x, y in centres]
    dets = []
    for _ in range(n_det):
        if gts and rng.uniform() < 0.7:
            g = gts[int(rng.integers(len(gts)))].box
            box = (g[0] + rng.normal() * 4, g[1] + rng.normal() * 4, 20.0, 20.0)
        else:
            box = (float(rng.uniform(0, 100)), float(rng.uniform(0, 100)), 20.0, 20.0)
        dets.append(det("i", box, rng.uniform()))
    return sorted(dets, key=lambda d: -d.score), gts


def test_match_examples():
    gts = [ev.GTFace((0, 0, 10, 10)), ev.GTFace((50, 50, 10, 10))]
    m = ev.match_dets([det("i", g.box, 0.9) for g in gts], gts)
    assert m.tp.all() and m.gt_matched.all()
    m = ev.match_dets([det("i", (0, 0, 10, 10), 0.9), det("i", (0, 0, 10, 10), 0.8)], gts[:1])
    assert m.tp.tolist() == [True, False] and m.fp.tolist() == [False, True]
    ign = [ev.GTFace((0, 0, 10, 10), ignore=True)]
    m = ev.match_dets([det("i", (0, 0, 10, 10), 0.9)] * 3, ign)
    assert not m.tp.any() and not m.fp.any() and m.ignored.all()


def test_match_equals_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        dets, gts = random_image(rng, int(rng.integers(0, 21)), int(rng.integers(0, 21)))
        m = ev.match_dets(dets, gts)
        tp, absorbed, used = greedy_loops(dets, gts)
        assert m.tp.tolist() == tp and m.ignored.tolist() == absorbed
        assert m.gt_matched.tolist() == used
        assert m.tp.sum() <= min(len(dets), len(gts))


def test_greedy_never_beats_exhaustive_assignment():
    rng = np.random.default_rng(1)
    for _ in range(100):
        dets, gts = random_image(rng, int(rng.integers(0, 6)), int(rng.integers(0, 6)))
        assert ev.match_dets(dets, gts).tp.sum() <= max_matching(dets, gts)


# --------------------------------------------------------------------------
# AP


def test_ap_examples():
    assert ev.average_precision([True, True, True], 3).ap == 1.0
    assert ev.average_precision([False, True], 1).ap == 0.5
    assert ev.average_precision([False, False], 4).ap == 0.0
    assert ev.average_precision([], 4).ap == 0.0
    # precision 1, 0.5, 2/3 at recalls 1/2, 1/2, 1 -> envelope 1 then 2/3
    assert ev.average_precision([True, False, True], 2).ap == pytest.approx(0.5 + 0.5 * 2 / 3)
    with pytest.raises(DataError):
        ev.average_precision([True], 0)


def test_ap_tied_scores_form_one_step():
    # a TP and FP tied at 0.9: one operating point with precision 1/2
    assert ev.average_precision([True, False], 1, [0.9, 0.9]).ap == 0.5
    assert ev.average_precision([True, False], 1).ap == 1.0
    with pytest.raises(DataError):
        ev.average_precision([True, False], 1, [0.1, 0.9])


def test_ap_invariants():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        flags = rng.uniform(size=n) < 0.5
        n_gt = int(flags.sum() + rng.integers(0, 5)) or 1
        scores = np.sort(rng.uniform(size=n))[::-1]
        curve = ev.average_precision(flags, n_gt, scores)
        assert 0 <= curve.ap <= 1
        assert np.all(np.diff(curve.recall) >= 0)
        env = np.maximum.accumulate(curve.precision[::-1])[::-1]
        assert np.all(np.diff(env) <= 0)
        # strictly monotone score transform leaves AP unchanged
        assert ev.average_precision(flags, n_gt, np.exp(3 * scores) - 7).ap == pytest.approx(curve.ap)
        # a trailing FP never increases AP
        worse = ev.average_precision(np.r_[flags, False], n_gt, np.r_[scores, scores[-1] - 1]).ap
        assert worse <= curve.ap + 1e-15


def test_evaluate_ap_corpus_and_subsets():
    gts = ev.parse_gt(GT_TEXT)
    dets = [det("0--Parade/a.jpg", (10, 20, 30, 40), 0.9),
            det("0--Parade/a.jpg", (100, 100, 20, 25), 0.8),
            det("2--Demo/c.jpg", (5, 5, 50, 50), 0.7),
            det("1--Handshaking/b.jpg", (0, 0, 9, 9), 0.95)]
    full = ev.evaluate_ap(dets, gts)
    assert full == {"subset": "all", "ap": pytest.approx(0.75), "n_images": 3, "n_gt": 3}
    hard = ev.evaluate_ap(dets, gts, "hard")
    # untagged and easy faces become ignore regions that absorb their detections
    assert hard["n_gt"] == 1 and hard["ap"] == pytest.approx(0.5)
    assert ev.evaluate_ap(dets[:3], gts, "easy")["ap"] == 1.0


# --------------------------------------------------------------------------
# TPR at a false-positive budget


def test_tpr_hand_walk():
    stream = [True, False, True, False]
    assert ev.tpr_at_fp(stream, 4, 0) == (0.25, False)
    assert ev.tpr_at_fp(stream, 4, 1) == (0.5, False)
    assert ev.tpr_at_fp(stream, 4, 2) == (0.5, False)
    assert ev.tpr_at_fp(stream, 4, 3) == (0.5, True)
    assert ev.tpr_at_fp([False, True], 1, 0) == (0.0, False)


def test_tpr_perfect_detector():
    for budget in (0, 1, 1000):
        assert ev.tpr_at_fp([True] * 5, 5, budget) == (1.0, budget > 0)


def test_tpr_on_corpus():
    gts = ev.parse_gt(GT_TEXT)
    dets = [det("0--Parade/a.jpg", (10, 20, 30, 40), 0.9),
            det("1--Handshaking/b.jpg", (0, 0, 9, 9), 0.85),
            det("2--Demo/c.jpg", (5, 5, 50, 50), 0.7)]
    assert ev.tpr_at_fp(dets, gts, 0) == (pytest.approx(1 / 3), False)
    assert ev.tpr_at_fp(dets, gts, 1000) == (pytest.approx(2 / 3), True)
    with pytest.raises(DataError):
        ev.tpr_at_fp([True], 0, 1)
