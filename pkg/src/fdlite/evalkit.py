"""Detection quality: greedy IoU matching, all-point AP and TPR at a false-positive budget."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchorkit import iou_matrix
from .errors import DataError, ParseError

DIFFICULTIES = ("easy", "medium", "hard")
# WIDER FACE attribute columns after x y w h
WIDER_ATTRS = ("blur", "expression", "illumination", "invalid", "occlusion", "pose")


@dataclass(frozen=True)
class GTFace:
    box: tuple[float, float, float, float]
    difficulty: str | None = None
    ignore: bool = False


@dataclass
class AnnotationSet:
    images: dict[str, list[GTFace]]

    @property
    def n_gt(self) -> int:
        return sum(1 for faces in self.images.values() for f in faces if not f.ignore)

    def subset(self, difficulty: str | None) -> "AnnotationSet":
        """Faces outside ``difficulty`` become ignore regions (None keeps all tags)."""
        if difficulty is None:
            return self
        out = {}
        for name, faces in self.images.items():
            out[name] = [f if f.difficulty == difficulty and not f.ignore
                         else GTFace(f.box, f.difficulty, True) for f in faces]
        return AnnotationSet(out)


@dataclass(frozen=True)
class EvalDet:
    image: str
    box: tuple[float, float, float, float]
    score: float


@dataclass
class MatchResult:
    tp: np.ndarray  # bool per det
    ignored: np.ndarray  # bool per det: absorbed by an ignore region
    gt_matched: np.ndarray  # bool per gt

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp & ~self.ignored


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    ap: float


# --------------------------------------------------------------------------
# io


def _parse_number(tok, lineno, path, what):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"expected {what}, got {tok!r}", lineno, path) from None


def parse_gt(text: str, path=None, invalid_as_ignore: bool = False) -> AnnotationSet:
    """WIDER FACE style listing.

    Per image: a path line, a face-count line, then one line per face with
    ``x y w h`` followed by optional attribute columns, which are ignored.
    A count of 0 is followed by one placeholder line.  A trailing
    ``easy``/``medium``/``hard`` token sets the face's difficulty, and an
    ``ignore`` token marks it as an ignore region.  With
    ``invalid_as_ignore`` the WIDER ``invalid`` attribute also does.
    """
    lines = text.splitlines()
    images: dict[str, list[GTFace]] = {}
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        i += 1
        if i >= len(lines):
            raise ParseError("missing face count", i, path)
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"bad face count {lines[i].strip()!r}", i + 1, path) from None
        if count < 0:
            raise ParseError("negative face count", i + 1, path)
        i += 1
        faces = []
        for _ in range(max(count, 1)):
            if i >= len(lines):
                raise ParseError(f"expected {count} face lines for {name}", i, path)
            lineno = i + 1
            toks = lines[i].split()
            i += 1
            if count == 0:
                continue
            if len(toks) < 4:
                raise ParseError("face line needs at least x y w h", lineno, path)
            x, y, w, h = (_parse_number(t, lineno, path, "a number") for t in toks[:4])
            if w <= 0 or h <= 0:
                raise ParseError(f"non-positive box size {w}x{h}", lineno, path)
            rest = toks[4:]
            difficulty, ignore = None, False
            while rest and rest[-1].lower() in DIFFICULTIES + ("ignore",):
                tag = rest.pop().lower()
                if tag == "ignore":
                    ignore = True
                else:
                    difficulty = tag
            if invalid_as_ignore and len(rest) > 3 and rest[3] == "1":
                ignore = True
            faces.append(GTFace((x, y, w, h), difficulty, ignore))
        images[name] = faces
    return AnnotationSet(images)


def load_gt(path, invalid_as_ignore: bool = False) -> AnnotationSet:
    return parse_gt(Path(path).read_text(encoding="utf-8"), path, invalid_as_ignore)


def load_dets(path) -> list[EvalDet]:
    """Detection JSON-lines: ``{image, x, y, w, h, score, ...}`` per line."""
    dets = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            dets.append(EvalDet(str(rec["image"]),
                                (float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"])),
                                float(rec["score"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad detection record: {e}", lineno, path) from None
    return dets


# --------------------------------------------------------------------------
# matching and metrics


def match_dets(dets, gts, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching of score-sorted detections against one image's faces.

    A detection takes the highest-IoU still-unmatched non-ignored face with
    IoU >= ``iou_thresh`` (TP).  Failing that, overlapping an ignore face at
    the same threshold absorbs it; otherwise it is a false positive.
    """
    det_boxes = np.asarray([d.box if hasattr(d, "box") else d for d in dets],
                           dtype=np.float64).reshape(-1, 4)
    gts = list(gts)
    gt_boxes = np.asarray([g.box if hasattr(g, "box") else g for g in gts],
                          dtype=np.float64).reshape(-1, 4)
    ignore = np.array([bool(getattr(g, "ignore", False)) for g in gts], dtype=bool)
    tp = np.zeros(len(det_boxes), dtype=bool)
    absorbed = np.zeros(len(det_boxes), dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    if len(gts) == 0 or len(det_boxes) == 0:
        return MatchResult(tp, absorbed, matched)
    ov = iou_matrix(det_boxes, gt_boxes)
    for d in range(len(det_boxes)):
        cand = np.where(~ignore & ~matched, ov[d], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            tp[d] = True
            matched[j] = True
        elif np.any(ignore & (ov[d] >= iou_thresh)):
            absorbed[d] = True
    return MatchResult(tp, absorbed, matched)


def average_precision(flags, n_gt: int, scores=None) -> PRCurve:
    """All-point interpolated AP.

    ``flags`` are TP indicators for detections in descending score order.
    With ``scores`` given, tied scores form one threshold step.
    """
    if n_gt < 1:
        raise DataError("average precision is undefined without ground truth")
    flags = np.asarray(flags, dtype=bool)
    if scores is None:
        cut = np.arange(len(flags))
        thresholds = np.arange(len(flags), 0, -1, dtype=np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        if np.any(np.diff(scores) > 0):
            raise DataError("detections must be sorted by descending score")
        last = np.r_[scores[1:] != scores[:-1], True] if len(scores) else np.zeros(0, bool)
        cut = np.flatnonzero(last)
        thresholds = scores[cut]
    ctp = np.cumsum(flags)[cut]
    cfp = np.cumsum(~flags)[cut]
    recall = ctp / n_gt
    precision = np.where(ctp + cfp > 0, ctp / np.maximum(ctp + cfp, 1), 0.0)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    steps = np.diff(np.r_[0.0, recall])
    ap = float(np.sum(steps * envelope))
    return PRCurve(recall, precision, thresholds, ap)


def _pool(dets, gts: AnnotationSet, iou_thresh: float):
    """Match per image, then return (scores, tp, fp) over the pooled, score-sorted list."""
    by_image: dict[str, list] = {}
    for d in dets:
        by_image.setdefault(d.image, []).append(d)
    scores, tp, fp = [], [], []
    for name, faces in gts.images.items():
        ds = sorted(by_image.get(name, []), key=lambda d: -d.score)
        m = match_dets(ds, faces, iou_thresh)
        scores.extend(d.score for d in ds)
        tp.extend(m.tp)
        fp.extend(m.fp)
    extra = [d for name, ds in by_image.items() if name not in gts.images for d in ds]
    scores.extend(d.score for d in extra)
    tp.extend([False] * len(extra))
    fp.extend([True] * len(extra))
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return scores[order], np.asarray(tp, bool)[order], np.asarray(fp, bool)[order]


def evaluate_ap(dets, gts: AnnotationSet, difficulty: str | None = None,
                iou_thresh: float = 0.5) -> dict:
    sub = gts.subset(difficulty)
    scores, tp, fp = _pool(dets, sub, iou_thresh)
    counted = tp | fp
    curve = average_precision(tp[counted], sub.n_gt, scores[counted])
    return {"subset": difficulty or "all", "ap": curve.ap, "n_images": len(sub.images),
            "n_gt": sub.n_gt}


def tpr_at_fp(dets, gts, fp_budget: int, iou_thresh: float = 0.5) -> tuple[float, bool]:
    """Highest TPR reachable while admitting at most ``fp_budget`` false positives.

    ``dets``/``gts`` are either an evaluation corpus (EvalDet list and
    AnnotationSet) or a pre-matched stream: a sequence of TP booleans in
    descending score order plus the total face count.  The flag is True when
    the whole list holds fewer than ``fp_budget`` false positives.
    """
    if isinstance(gts, AnnotationSet):
        _, tp, fp = _pool(dets, gts, iou_thresh)
        n_gt = gts.n_gt
    else:
        tp = np.asarray(dets, dtype=bool)
        fp = ~tp
        n_gt = int(gts)
    if n_gt < 1:
        raise DataError("TPR is undefined without ground truth")
    cfp = np.cumsum(fp)
    within = cfp <= fp_budget
    n_tp = int(tp[within].sum())
    return n_tp / n_gt, int(fp.sum()) < fp_budget
