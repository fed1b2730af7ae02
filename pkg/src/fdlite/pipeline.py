"""Preprocessing, single- and multi-scale inference, NMS and top-k selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

import numpy as np

from . import anchorkit as ak
from .errors import ConfigurationError, DataError
from .executor import run_forward
from .images import load_image  # noqa: F401  (re-exported for callers)
from .losskit import softmax

MEANS_RGB = (123.0, 117.0, 104.0)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    landmarks: tuple[tuple[float, float], ...]
    source_scale: float = 1.0
    flipped: bool = False

    def to_record(self, image: str | None = None) -> dict:
        x, y, w, h = self.box
        return {
            "image": image,
            "x": x, "y": y, "w": w, "h": h,
            "score": self.score,
            "landmarks": [list(p) for p in self.landmarks],
        }


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = 0.02
    nms_iou: float = 0.4
    top_k: int = 750
    scales: tuple[int, ...] = (500, 800, 1100, 1400, 1700)
    flip: bool = True
    branch: int = 2
    max_pixels: int = 8_000_000

    def __post_init__(self):
        if not 0 < self.score_threshold <= 1:
            raise ConfigurationError("score_threshold must lie in (0, 1]")
        if not 0 < self.nms_iou < 1:
            raise ConfigurationError("nms_iou must lie in (0, 1)")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if not self.scales or any(s < 32 for s in self.scales):
            raise ConfigurationError("scales must be a non-empty list of short edges >= 32")
        if self.branch not in (1, 2):
            raise ConfigurationError("branch must be 1 or 2")

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown inference options {sorted(unknown)}")
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(int(s) for s in d["scales"])
        return cls(**d)


@dataclass
class Candidates:
    """Column-wise detections; boxes corner-form, landmarks flattened (x0, y0, ...)."""

    boxes: np.ndarray
    scores: np.ndarray
    landmarks: np.ndarray
    source_scale: np.ndarray
    flipped: np.ndarray

    @classmethod
    def empty(cls) -> "Candidates":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 10)), np.zeros(0),
                   np.zeros(0, dtype=bool))

    @classmethod
    def concat(cls, parts) -> "Candidates":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))

    def take(self, idx) -> "Candidates":
        return Candidates(*(getattr(self, f.name)[idx] for f in fields(self)))

    def __len__(self):
        return len(self.scores)

    def to_detections(self) -> list[Detection]:
        out = []
        for i in range(len(self)):
            lm = self.landmarks[i]
            out.append(Detection(
                box=tuple(float(v) for v in self.boxes[i]),
                score=float(self.scores[i]),
                landmarks=tuple((float(lm[2 * k]), float(lm[2 * k + 1])) for k in range(5)),
                source_scale=float(self.source_scale[i]),
                flipped=bool(self.flipped[i]),
            ))
        return out

    @classmethod
    def from_detections(cls, dets) -> "Candidates":
        dets = list(dets)
        if not dets:
            return cls.empty()
        return cls(
            np.array([d.box for d in dets], dtype=np.float64),
            np.array([d.score for d in dets], dtype=np.float64),
            np.array([np.ravel(d.landmarks) for d in dets], dtype=np.float64).reshape(-1, 10),
            np.array([d.source_scale for d in dets], dtype=np.float64),
            np.array([d.flipped for d in dets], dtype=bool),
        )


# --------------------------------------------------------------------------
# preprocessing


def resized_size(h: int, w: int, target: int) -> tuple[int, int]:
    """(new_h, new_w) with the short edge equal to ``target``; long edge rounded up."""
    if h <= w:
        return target, -(-w * target // h)
    return -(-h * target // w), target


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[:2]
    if (h, w) == (new_h, new_w):
        return x.copy()
    i0, i1, fy = _bilinear_axis(h, new_h)
    rows = x[i0] * (1 - fy)[:, None, None] + x[i1] * fy[:, None, None]
    j0, j1, fx = _bilinear_axis(w, new_w)
    return rows[:, j0] * (1 - fx)[None, :, None] + rows[:, j1] * fx[None, :, None]


def preprocess(image: np.ndarray, target_short_edge: int, max_pixels: int | None = None):
    """Resize so the short edge equals the target and subtract channel means.

    Returns ``(tensor, scale)``: a (1, H', W', 3) float32 tensor and the factor
    mapping original pixel coordinates to tensor coordinates.
    """
    if target_short_edge < 32:
        raise DataError("target short edge must be >= 32")
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    nh, nw = resized_size(h, w, target_short_edge)
    if max_pixels is not None and nh * nw > max_pixels:
        raise DataError(f"resized image {nw}x{nh} exceeds the {max_pixels}-pixel limit")
    x = resize_bilinear(img, nh, nw)
    x -= np.asarray(MEANS_RGB)
    return x.astype(np.float32)[None], target_short_edge / min(h, w)


# --------------------------------------------------------------------------
# detection


def _clamp(c: Candidates, width: float, height: float) -> Candidates:
    b = c.boxes
    x1 = np.clip(b[:, 0], 0, width)
    y1 = np.clip(b[:, 1], 0, height)
    x2 = np.clip(b[:, 0] + b[:, 2], 0, width)
    y2 = np.clip(b[:, 1] + b[:, 3], 0, height)
    lm = c.landmarks.copy()
    lm[:, 0::2] = np.clip(lm[:, 0::2], 0, width)
    lm[:, 1::2] = np.clip(lm[:, 1::2], 0, height)
    boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
    return Candidates(boxes, c.scores, lm, c.source_scale, c.flipped)


def detect_candidates(tensor, model, weights, config: InferenceConfig = InferenceConfig(),
                      scale: float = 1.0, image_size=None, workers: int = 1) -> Candidates:
    """Column-wise form of :func:`detect_single`."""
    tensor = np.asarray(tensor, dtype=np.float32)
    th, tw = tensor.shape[1:3]
    if image_size is None:
        image_size = (tw / scale, th / scale)
    outs = run_forward(model, weights, tensor, workers=workers)
    u = config.branch
    cls = outs[f"cls_{u}"][0, :, 0, :]
    face = softmax(cls)[:, 0]
    keep = np.flatnonzero(face > config.score_threshold)
    anchors = ak.anchor_array(tw, th)
    if len(anchors) != len(cls):
        raise DataError(f"head rows ({len(cls)}) disagree with anchor count ({len(anchors)})")
    a = anchors[keep]
    boxes = ak.decode_boxes(a, outs[f"bbox_{u}"][0, keep, 0, :]) / scale
    landms = ak.decode_landmark_rows(a, outs[f"landm_{u}"][0, keep, 0, :]) / scale
    n = len(keep)
    c = Candidates(boxes, face[keep], landms, np.full(n, float(scale)), np.zeros(n, dtype=bool))
    return _clamp(c, *image_size)


def detect_single(tensor, model, weights, config: InferenceConfig = InferenceConfig(),
                  scale: float = 1.0, image_size=None, workers: int = 1) -> list[Detection]:
    """Every anchor whose face probability exceeds the threshold, decoded into
    original-image coordinates (divide by ``scale``) and clamped to the image."""
    return detect_candidates(tensor, model, weights, config, scale, image_size,
                             workers).to_detections()


def nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score, then larger area, then input order."""
    area = boxes[:, 2] * boxes[:, 3]
    return np.lexsort((np.arange(len(scores)), -area, -scores))


def _iou_one(box, others):
    x2 = np.minimum(box[0] + box[2], others[:, 0] + others[:, 2])
    y2 = np.minimum(box[1] + box[3], others[:, 1] + others[:, 3])
    iw = np.minimum(x2 - np.maximum(box[0], others[:, 0]), np.minimum(box[2], others[:, 2]))
    ih = np.minimum(y2 - np.maximum(box[1], others[:, 1]), np.minimum(box[3], others[:, 3]))
    iw = np.clip(iw, 0, None)
    ih = np.clip(ih, 0, None)
    inter = iw * ih
    union = box[2] * box[3] + others[:, 2] * others[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms_indices(boxes, scores, iou_threshold: float = 0.4, max_keep: int | None = None,
                chunk: int = 4096) -> np.ndarray:
    """Greedy NMS returning kept indices in rank order.

    The sorted list is processed in blocks: a block is first filtered against
    everything already kept, then suppressed greedily within itself.  Because
    a greedy decision only depends on higher-ranked boxes, stopping at
    ``max_keep`` yields exactly the first ``max_keep`` entries of the full
    result.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = nms_order(boxes, scores)
    limit = len(order) if max_keep is None else max_keep
    keep: list[int] = []
    for start in range(0, len(order), chunk):
        if len(keep) >= limit:
            break
        cand = order[start:start + chunk]
        if keep:
            kb = boxes[keep]
            ok = np.ones(len(cand), dtype=bool)
            for k in kb:
                ok &= _iou_one(k, boxes[cand]) <= iou_threshold
            cand = cand[ok]
        while len(cand) and len(keep) < limit:
            i = cand[0]
            keep.append(int(i))
            rest = cand[1:]
            cand = rest[_iou_one(boxes[i], boxes[rest]) <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(dets, iou_threshold: float = 0.4, max_keep: int | None = None) -> list[Detection]:
    dets = list(dets)
    if not dets:
        return []
    c = Candidates.from_detections(dets)
    return [dets[i] for i in nms_indices(c.boxes, c.scores, iou_threshold, max_keep)]


def flip_back(c: Candidates, width: float) -> Candidates:
    """Map candidates found on a mirrored image back to the original frame."""
    boxes = c.boxes.copy()
    boxes[:, 0] = width - c.boxes[:, 0] - c.boxes[:, 2]
    pts = c.landmarks.reshape(-1, 5, 2)[:, list(ak.FLIP_ORDER)].copy()
    pts[..., 0] = width - pts[..., 0]
    return Candidates(boxes, c.scores, pts.reshape(-1, 10), c.source_scale,
                      np.ones(len(c), dtype=bool))


def pool_candidates(image, model, weights, config: InferenceConfig = InferenceConfig(),
                    workers: int = 1) -> Candidates:
    """Candidates from every scale (and its mirror, if enabled) before NMS."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    parts = []
    views = [(img, False)] + ([(img[:, ::-1], True)] if config.flip else [])
    for short in config.scales:
        for view, flipped in views:
            tensor, scale = preprocess(view, short, config.max_pixels)
            c = detect_candidates(tensor, model, weights, config, scale, (w, h), workers)
            parts.append(flip_back(c, w) if flipped else c)
    return Candidates.concat(parts)


def detect_multiscale(image, model, weights, config: InferenceConfig = InferenceConfig(),
                      workers: int = 1) -> list[Detection]:
    pool = pool_candidates(image, model, weights, config, workers)
    keep = nms_indices(pool.boxes, pool.scores, config.nms_iou, config.top_k)
    return pool.take(keep).to_detections()


def detect_image(image, model, weights, config: InferenceConfig = InferenceConfig(),
                 multiscale: bool = True, workers: int = 1) -> list[Detection]:
    """CLI entry: multi-scale, or a single pass at the native size."""
    if multiscale:
        return detect_multiscale(image, model, weights, config, workers)
    img = np.asarray(image)
    short = min(img.shape[:2])
    cfg = replace(config, scales=(max(short, 32),), flip=False)
    return detect_multiscale(img, model, weights, cfg, workers)


def to_jsonl(dets, image: str | None = None) -> str:
    return "".join(json.dumps(d.to_record(image), sort_keys=True) + "\n" for d in dets)
