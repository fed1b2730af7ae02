"""Anchor grid, IoU, anchor matching and box/landmark encoding.

Boxes handed in and out of this module are corner-form ``(x, y, w, h)`` in
input-image pixels.  Anchors are square and stored centre-form as rows of
``(cx, cy, side)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

LEVEL_STRIDES = (8, 16, 32)
# per level: 2^i a_i, 1.5 * 2^i a_i, 2^(i+1) a_i with a_i = 4 * 2^i
LEVEL_SIDES = tuple(
    (2 ** i * a, 1.5 * 2 ** i * a, 2 ** (i + 1) * a)
    for i, a in ((1, 8), (2, 16), (3, 32))
)
VARIANCES = (0.1, 0.2)

# left eye, right eye, nose, left mouth corner, right mouth corner
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")
FLIP_ORDER = (1, 0, 2, 4, 3)

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class AnchorBox:
    cx: float
    cy: float
    side: float
    level: int
    cell: tuple[int, int]

    def box(self) -> tuple[float, float, float, float]:
        half = self.side / 2
        return (self.cx - half, self.cy - half, self.side, self.side)


@dataclass(frozen=True)
class GroundTruthFace:
    box: tuple[float, float, float, float]
    landmarks: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise DataError(f"ground-truth box must have positive size, got {self.box}")
        if self.landmarks is not None and len(self.landmarks) != 5:
            raise DataError("landmarks must hold exactly 5 points")

    @property
    def has_landmarks(self) -> bool:
        return self.landmarks is not None


@dataclass(frozen=True)
class MatchPolicy:
    name: str
    pos_threshold: float
    neg_threshold: float  # best IoU below this is negative; in between is ignored


POLICY_L1 = MatchPolicy("L1", 0.7, 0.3)
POLICY_L2 = MatchPolicy("L2", 0.35, 0.35)
POLICIES = {"L1": POLICY_L1, "L2": POLICY_L2}


@dataclass(frozen=True)
class MatchAssignment:
    labels: np.ndarray  # int8 per anchor: POSITIVE / NEGATIVE / IGNORED
    gt_index: np.ndarray  # int per anchor, -1 unless positive
    policy: str

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


@dataclass(frozen=True)
class EncodedTargets:
    """Regression targets for the positive anchors, in ``positives`` order."""

    positives: np.ndarray
    box_targets: np.ndarray  # (P, 4)
    landm_targets: np.ndarray  # (P, 10), zeros where landm_valid is False
    landm_valid: np.ndarray  # (P,) bool
    variances: tuple[float, float] = VARIANCES


# --------------------------------------------------------------------------
# anchors


def grid_dims(image_w: int, image_h: int) -> list[tuple[int, int]]:
    return [(math.ceil(image_h / s), math.ceil(image_w / s)) for s in LEVEL_STRIDES]


def anchor_count(image_w: int, image_h: int) -> int:
    return sum(r * c * 3 for r, c in grid_dims(image_w, image_h))


def anchor_array(image_w: int, image_h: int) -> np.ndarray:
    """All anchors as an (N, 3) float64 array of (cx, cy, side).

    Order: level, then grid row, then grid column, then size index.
    """
    parts = []
    for stride, sides, (rows, cols) in zip(LEVEL_STRIDES, LEVEL_SIDES, grid_dims(image_w, image_h)):
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride,
                             indexing="ij")
        block = np.empty((rows, cols, len(sides), 3))
        block[..., 0] = cx[..., None]
        block[..., 1] = cy[..., None]
        block[..., 2] = np.asarray(sides)
        parts.append(block.reshape(-1, 3))
    return np.concatenate(parts)


def generate_anchors(image_w: int, image_h: int) -> list[AnchorBox]:
    if image_w < 32 or image_h < 32:
        raise DataError(f"image must be at least 32x32, got {image_w}x{image_h}")
    out = []
    for level, (stride, sides, (rows, cols)) in enumerate(
        zip(LEVEL_STRIDES, LEVEL_SIDES, grid_dims(image_w, image_h)), start=1
    ):
        for r in range(rows):
            for c in range(cols):
                for side in sides:
                    out.append(AnchorBox((c + 0.5) * stride, (r + 0.5) * stride, side, level, (r, c)))
    return out


def anchors_to_array(anchors) -> np.ndarray:
    if isinstance(anchors, np.ndarray):
        return np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    return np.array([(a.cx, a.cy, a.side) for a in anchors], dtype=np.float64).reshape(-1, 3)


def anchor_boxes(anchors) -> np.ndarray:
    """Corner-form (x, y, w, h) for every anchor."""
    a = anchors_to_array(anchors)
    half = a[:, 2] / 2
    return np.stack([a[:, 0] - half, a[:, 1] - half, a[:, 2], a[:, 2]], axis=1)


# --------------------------------------------------------------------------
# overlap


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    # capping the overlap at each extent keeps inter <= union under rounding
    iw = min(min(ax + aw, bx + bw) - max(ax, bx), aw, bw)
    ih = min(min(ay + ah, by + bh) - max(ay, by), ah, bh)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form boxes -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    iw = np.minimum(iw, np.minimum(a[:, None, 2], b[None, :, 2]))
    ih = np.minimum(ih, np.minimum(a[:, None, 3], b[None, :, 3]))
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


# --------------------------------------------------------------------------
# matching


def _gt_boxes(gts) -> np.ndarray:
    rows = [g.box if isinstance(g, GroundTruthFace) else g for g in gts]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def match_anchors(anchors, gts, policy, force_match: bool = True) -> MatchAssignment:
    """Label every anchor against the ground truth.

    The best-IoU ground truth of an anchor decides its label under
    ``policy``.  With ``force_match`` each ground truth additionally claims
    its highest-IoU anchor (lowest index on ties) as positive; ground truths
    are processed in order, so a later claim on the same anchor wins.
    """
    if isinstance(policy, str):
        policy = POLICIES[policy]
    boxes = anchor_boxes(anchors)
    n = len(boxes)
    gt = _gt_boxes(gts)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0 or n == 0:
        return MatchAssignment(labels, gt_index, policy.name)
    overlaps = iou_matrix(boxes, gt)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps[np.arange(n), best_gt]
    pos = best >= policy.pos_threshold
    labels[(best >= policy.neg_threshold) & ~pos] = IGNORED
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]
    if force_match:
        for j, a in enumerate(overlaps.argmax(axis=0)):
            labels[a] = POSITIVE
            gt_index[a] = j
    return MatchAssignment(labels, gt_index, policy.name)


# --------------------------------------------------------------------------
# encoding


def _center_form(box):
    x, y, w, h = box
    return x + w / 2, y + h / 2, w, h


def encode_box(anchor, gt_box, variances=VARIANCES) -> np.ndarray:
    a = anchors_to_array([anchor] if isinstance(anchor, AnchorBox) else anchor)
    return encode_boxes(a, np.asarray(gt_box, dtype=np.float64).reshape(1, 4), variances)[0]


def decode_box(anchor, code, variances=VARIANCES) -> np.ndarray:
    a = anchors_to_array([anchor] if isinstance(anchor, AnchorBox) else anchor)
    return decode_boxes(a, np.asarray(code, dtype=np.float64).reshape(1, 4), variances)[0]


def encode_boxes(anchors, gt_boxes, variances=VARIANCES) -> np.ndarray:
    """Row-wise encoding of corner-form ``gt_boxes`` against anchors."""
    a = anchors_to_array(anchors)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(g[:, 2] <= 0) or np.any(g[:, 3] <= 0):
        raise DataError("ground-truth boxes must have positive width and height")
    vc, vs = variances
    gcx = g[:, 0] + g[:, 2] / 2
    gcy = g[:, 1] + g[:, 3] / 2
    side = a[:, 2]
    return np.stack([
        (gcx - a[:, 0]) / (side * vc),
        (gcy - a[:, 1]) / (side * vc),
        np.log(g[:, 2] / side) / vs,
        np.log(g[:, 3] / side) / vs,
    ], axis=1)


def decode_boxes(anchors, codes, variances=VARIANCES) -> np.ndarray:
    a = anchors_to_array(anchors)
    t = np.asarray(codes, dtype=np.float64).reshape(-1, 4)
    vc, vs = variances
    side = a[:, 2]
    cx = a[:, 0] + t[:, 0] * vc * side
    cy = a[:, 1] + t[:, 1] * vc * side
    w = side * np.exp(t[:, 2] * vs)
    h = side * np.exp(t[:, 3] * vs)
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def encode_landmarks(anchor, points, variances=VARIANCES):
    """10-vector for 5 points, or ``None`` when landmarks are absent."""
    if points is None:
        return None
    a = anchors_to_array([anchor] if isinstance(anchor, AnchorBox) else anchor)
    return encode_landmark_rows(a, np.asarray(points, dtype=np.float64).reshape(1, 10), variances)[0]


def decode_landmarks(anchor, code, variances=VARIANCES) -> np.ndarray:
    a = anchors_to_array([anchor] if isinstance(anchor, AnchorBox) else anchor)
    return decode_landmark_rows(a, np.asarray(code, dtype=np.float64).reshape(1, 10),
                                variances)[0].reshape(5, 2)


def encode_landmark_rows(anchors, points, variances=VARIANCES) -> np.ndarray:
    a = anchors_to_array(anchors)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 5, 2)
    scale = (a[:, 2] * variances[0])[:, None, None]
    return ((p - a[:, None, :2]) / scale).reshape(-1, 10)


def decode_landmark_rows(anchors, codes, variances=VARIANCES) -> np.ndarray:
    a = anchors_to_array(anchors)
    t = np.asarray(codes, dtype=np.float64).reshape(-1, 5, 2)
    scale = (a[:, 2] * variances[0])[:, None, None]
    return (t * scale + a[:, None, :2]).reshape(-1, 10)


def encode_targets(anchors, gts, assignment: MatchAssignment, variances=VARIANCES) -> EncodedTargets:
    a = anchors_to_array(anchors)
    pos = assignment.positives
    gts = list(gts)
    idx = assignment.gt_index[pos]
    boxes = _gt_boxes(gts)
    box_t = encode_boxes(a[pos], boxes[idx], variances) if len(pos) else np.zeros((0, 4))
    landm_t = np.zeros((len(pos), 10))
    valid = np.zeros(len(pos), dtype=bool)
    for row, (anchor_i, g) in enumerate(zip(pos, idx)):
        face = gts[g]
        if isinstance(face, GroundTruthFace) and face.has_landmarks:
            landm_t[row] = encode_landmark_rows(a[anchor_i:anchor_i + 1], face.landmarks, variances)[0]
            valid[row] = True
    return EncodedTargets(pos, box_t, landm_t, valid, tuple(variances))
