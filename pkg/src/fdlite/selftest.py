"""Quick oracle checks run by ``fdlite selftest``.

Each check recomputes a quantity through an independent route (closed form,
brute force, finite differences) and compares against the library.
"""
from __future__ import annotations

import io
import itertools
import math

import numpy as np

from . import anchorkit as ak
from . import evalkit as ev
from . import executor as ex
from . import losskit as lk
from . import netgraph as ng
from . import pipeline as pl


def _conv_params(k, cin, cout, g=1, bias=False):
    return k * k * cin // g * cout + (cout if bias else 0)


def check_unit_params():
    r = ng.count_params(ng.build_blite())
    cbl7 = _conv_params(7, 3, 8) + 16
    cdw = _conv_params(1, 8, 16) + 32 + _conv_params(3, 16, 16, 16) + 32
    fru = (_conv_params(3, 64, 64, bias=True) + _conv_params(3, 64, 32, bias=True)
           + _conv_params(1, 64, 32, bias=True) + _conv_params(3, 64, 64, bias=True))
    got = (r.unit("ife.cbl")[0], r.unit("ife.cdw0")[0], r.unit("l1.fru0")[0])
    return got == (cbl7, cdw, fru) == (1192, 336, 94400), f"{got}"


def check_stem_flops():
    r = ng.count_flops(ng.build_blite(), ng.TensorShape(1, 480, 640, 3))
    got = r.per_node[0].flops
    return got == 2 * 1176 * 320 * 240 == 180_633_600, f"{got}"


def check_anchor_count():
    n = sum(1 for _ in itertools.product(range(60), range(80), range(3)))
    n += sum(1 for _ in itertools.product(range(30), range(40), range(3)))
    n += sum(1 for _ in itertools.product(range(15), range(20), range(3)))
    got = len(ak.generate_anchors(640, 480))
    sides = set(ak.LEVEL_SIDES[0])
    return got == n == 18900 and sides == {16, 24, 32}, f"{got} anchors, level-1 sides {sides}"


def check_conv_direct():
    rng = np.random.default_rng(1)
    x = rng.integers(-3, 4, (1, 5, 6, 4)).astype(np.float32)
    k = rng.integers(-2, 3, (3, 3, 2, 4)).astype(np.float32)
    got = ex.conv2d(x, k, None, stride=2, padding=1, groups=2)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(got)
    for r, c, o in itertools.product(range(got.shape[1]), range(got.shape[2]), range(4)):
        g = o // 2
        for i, j, ci in itertools.product(range(3), range(3), range(2)):
            ref[0, r, c, o] += xp[0, 2 * r + i, 2 * c + j, 2 * g + ci] * k[i, j, ci, o]
    return np.array_equal(got, ref), "grouped strided conv vs loops"


def check_max_pool():
    x = np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4, 1)
    got = ex.max_pool2d(x, 3, 2, 1)[0, :, :, 0]
    return np.array_equal(got, [[6, 8], [14, 16]]), f"{got.tolist()}"


def check_losses():
    ce = lk.cross_entropy([0.0, 0.0], 1)
    s1, s2 = lk.smooth_l1([0.5], [0.0]), lk.smooth_l1([2.0], [0.0])
    ok = math.isclose(ce, math.log(2), rel_tol=1e-12) and (s1, s2) == (0.125, 1.5)
    return ok, f"ce={ce:.6f} smooth_l1={s1},{s2}"


def check_gradients():
    rng = np.random.default_rng(7)
    anchors = ak.anchor_array(64, 64)
    gts = [ak.GroundTruthFace((14.0, 10.0, 30.0, 34.0),
                              tuple((20.0 + 4 * i, 20.0 + 2 * i) for i in range(5)))]
    prob = lk.prepare_branch(anchors, gts, "L2")
    out = lk.BranchOutputs(rng.normal(size=(len(anchors), 2)), rng.normal(size=(len(anchors), 4)) * 0.3,
                           rng.normal(size=(len(anchors), 10)) * 0.3)
    sel = lk.ohem_select(lk.cross_entropy_rows(out.cls, prob.assignment.labels == ak.POSITIVE),
                         prob.assignment.labels)
    grads = lk.loss_gradients(out, prob.assignment, prob.targets, selected=sel)
    worst = 0.0
    h = 1e-3
    for name in ("cls", "bbox", "landm"):
        arr, g = getattr(out, name), getattr(grads, name)
        for idx in list(prob.assignment.positives[:3]) + list(sel[:3]):
            for col in range(arr.shape[1]):
                orig = arr[idx, col]
                arr[idx, col] = orig + h
                fp = lk.multitask_loss(out, prob.assignment, prob.targets, selected=sel).l_branch
                arr[idx, col] = orig - h
                fm = lk.multitask_loss(out, prob.assignment, prob.targets, selected=sel).l_branch
                arr[idx, col] = orig
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(num - g[idx, col]) / max(abs(num), abs(g[idx, col]), 1e-8))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_nms():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        xy = rng.uniform(0, 50, (n, 2))
        wh = rng.uniform(5, 30, (n, 2))
        boxes = np.hstack([xy, wh])
        scores = np.round(rng.uniform(0, 1, n), 1)
        got = list(pl.nms_indices(boxes, scores, 0.4))
        order = sorted(range(n), key=lambda i: (-scores[i], -boxes[i, 2] * boxes[i, 3], i))
        ref = []
        for i in order:
            if all(ak.iou(boxes[i], boxes[k]) <= 0.4 for k in ref):
                ref.append(i)
        if got != ref:
            return False, f"mismatch on {n} boxes"
    return True, "50 random sets"


def check_ap():
    perfect = ev.average_precision([True, True], 2).ap
    half = ev.average_precision([False, True], 1).ap
    return (perfect, half) == (1.0, 0.5), f"perfect={perfect} fp-then-tp={half}"


def check_weights_roundtrip():
    g = ng.build_fdlite()
    store = ex.init_weights(g, 5)
    blob = ex.dumps_weights(store)
    again = ex.loads_weights(io.BytesIO(blob).getvalue())
    return again == store and ex.dumps_weights(again) == blob, f"{len(store)} tensors"


def check_zero_forward():
    g = ng.build_fdlite()
    outs = ex.run_forward(g, ex.zero_weights(g), np.ones((1, 64, 64, 3), np.float32))
    cls = outs["cls_2"]
    return (not cls.any()) and cls.shape[1] == ak.anchor_count(64, 64), f"rows={cls.shape[1]}"


CHECKS = [
    ("unit parameter counts", check_unit_params),
    ("stem conv FLOPs", check_stem_flops),
    ("anchor enumeration", check_anchor_count),
    ("conv vs direct loops", check_conv_direct),
    ("max-pool window oracle", check_max_pool),
    ("loss closed forms", check_losses),
    ("gradients vs finite differences", check_gradients),
    ("NMS vs O(n^2) reference", check_nms),
    ("AP closed forms", check_ap),
    ("weight container round-trip", check_weights_roundtrip),
    ("zero-weight forward", check_zero_forward),
]


def run(out=print) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # report and keep going
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
