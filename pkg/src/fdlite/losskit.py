"""Per-branch multi-task loss, hard negative mining and analytic gradients.

Class column 0 is *face*, column 1 is *background*.  Each term is averaged
over the anchors that contribute to it; a branch loss is
``l_cls + lambda1 * l_box + lambda2 * l_landm`` and the detector loss is the
sum of the two branch losses, each branch matched with its own IoU policy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import anchorkit as ak
from .errors import ConfigurationError


@dataclass(frozen=True)
class TrainingRecipe:
    """Optimiser schedule used for the published model; documentation only."""

    optimizer: str = "SGD"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 130
    lr_drop_epochs: tuple[int, ...] = (100, 120)
    lr_drop_factor: float = 0.1
    batch_size: int = 8


TRAINING_RECIPE = TrainingRecipe()


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.25
    lambda2: float = 0.1
    ohem_ratio: int = 7
    policies: tuple[str, str] = ("L1", "L2")
    force_match: bool = True
    variances: tuple[float, float] = ak.VARIANCES

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ConfigurationError("lambda1 and lambda2 must be positive")
        if self.ohem_ratio < 1:
            raise ConfigurationError("ohem_ratio must be >= 1")
        for p in self.policies:
            if p not in ak.POLICIES:
                raise ConfigurationError(f"unknown matching policy {p!r}")


@dataclass(frozen=True)
class BranchLoss:
    l_cls: float
    l_box: float
    l_landm: float
    l_branch: float
    n_pos: int
    n_neg: int
    n_landm: int


@dataclass(frozen=True)
class LossReport:
    branches: tuple[BranchLoss, BranchLoss]
    l_total: float

    @property
    def l_branch(self) -> tuple[float, float]:
        return tuple(b.l_branch for b in self.branches)

    def to_json(self) -> dict:
        return {
            "l_total": self.l_total,
            "branches": [dict(asdict(b), branch=u) for u, b in enumerate(self.branches, start=1)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass
class BranchOutputs:
    """Head outputs for one branch, row-aligned with the anchors."""

    cls: np.ndarray  # (N, 2)
    bbox: np.ndarray  # (N, 4)
    landm: np.ndarray  # (N, 10)

    @classmethod
    def from_forward(cls, outputs, branch: int, batch: int = 0) -> "BranchOutputs":
        return cls(*(np.asarray(outputs[f"{t}_{branch}"][batch, :, 0, :], dtype=np.float64)
                     for t in ("cls", "bbox", "landm")))


@dataclass
class BranchGradients:
    cls: np.ndarray
    bbox: np.ndarray
    landm: np.ndarray


# --------------------------------------------------------------------------
# elementary losses


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logit_pair, label) -> float:
    """-log p(true class); ``label`` 1 means face (column 0)."""
    return float(cross_entropy_rows(np.asarray(logit_pair).reshape(1, 2), np.array([label]))[0])


def cross_entropy_rows(logits, face) -> np.ndarray:
    logp = log_softmax(logits)
    col = np.where(np.asarray(face).astype(bool), 0, 1)
    return -logp[np.arange(len(logp)), col]


def smooth_l1(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {target.shape}")
    return float(smooth_l1_elementwise(pred - target).sum())


def smooth_l1_elementwise(x) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def ohem_select(cls_losses, labels, ratio: int = 7) -> np.ndarray:
    """Indices of the hardest negatives, at most ``ratio * max(P, 1)`` of them.

    Sorted by descending loss, ties to the lower anchor index.
    """
    labels = np.asarray(labels)
    losses = np.asarray(cls_losses, dtype=np.float64)
    neg = np.flatnonzero(labels == ak.NEGATIVE)
    n_pos = int(np.count_nonzero(labels == ak.POSITIVE))
    k = min(ratio * max(n_pos, 1), len(neg))
    order = np.argsort(-losses[neg], kind="stable")
    return neg[order[:k]]


# --------------------------------------------------------------------------
# branch loss


def _contributors(out: BranchOutputs, assignment, config, selected):
    labels = assignment.labels
    pos = assignment.positives
    if selected is None:
        neg_losses = cross_entropy_rows(out.cls, labels == ak.POSITIVE)
        selected = ohem_select(neg_losses, labels, config.ohem_ratio)
    return pos, np.asarray(selected, dtype=np.int64)


def multitask_loss(out: BranchOutputs, assignment: ak.MatchAssignment,
                   targets: ak.EncodedTargets, config: LossConfig = LossConfig(),
                   selected=None) -> BranchLoss:
    """One branch's loss.  ``selected`` pins the OHEM negatives when given."""
    pos, sel = _contributors(out, assignment, config, selected)
    rows = np.concatenate([pos, sel])
    face = np.zeros(len(rows), dtype=bool)
    face[:len(pos)] = True
    l_cls = float(cross_entropy_rows(out.cls[rows], face).mean()) if len(rows) else 0.0
    if len(pos):
        l_box = float(smooth_l1_elementwise(out.bbox[pos] - targets.box_targets).sum(axis=1).mean())
    else:
        l_box = 0.0
    lv = targets.landm_valid
    if lv.any():
        diff = out.landm[pos[lv]] - targets.landm_targets[lv]
        l_landm = float(smooth_l1_elementwise(diff).sum(axis=1).mean())
    else:
        l_landm = 0.0
    total = l_cls + config.lambda1 * l_box + config.lambda2 * l_landm
    return BranchLoss(l_cls, l_box, l_landm, total, len(pos), len(sel), int(lv.sum()))


def loss_gradients(out: BranchOutputs, assignment: ak.MatchAssignment,
                   targets: ak.EncodedTargets, config: LossConfig = LossConfig(),
                   selected=None) -> BranchGradients:
    """d l_branch / d (cls, bbox, landm) with the OHEM selection held fixed."""
    pos, sel = _contributors(out, assignment, config, selected)
    g_cls = np.zeros_like(out.cls, dtype=np.float64)
    g_box = np.zeros_like(out.bbox, dtype=np.float64)
    g_landm = np.zeros_like(out.landm, dtype=np.float64)
    rows = np.concatenate([pos, sel])
    if len(rows):
        onehot = np.zeros((len(rows), 2))
        onehot[:len(pos), 0] = 1
        onehot[len(pos):, 1] = 1
        np.add.at(g_cls, rows, (softmax(out.cls[rows]) - onehot) / len(rows))
    if len(pos):
        g_box[pos] = config.lambda1 * smooth_l1_grad(out.bbox[pos] - targets.box_targets) / len(pos)
    lv = targets.landm_valid
    if lv.any():
        diff = out.landm[pos[lv]] - targets.landm_targets[lv]
        g_landm[pos[lv]] = config.lambda2 * smooth_l1_grad(diff) / int(lv.sum())
    return BranchGradients(g_cls, g_box, g_landm)


# --------------------------------------------------------------------------
# both branches


@dataclass
class BranchProblem:
    """Matching and targets for one branch on one image."""

    assignment: ak.MatchAssignment
    targets: ak.EncodedTargets


def prepare_branch(anchors, gts, policy: str, config: LossConfig = LossConfig()) -> BranchProblem:
    assignment = ak.match_anchors(anchors, gts, policy, force_match=config.force_match)
    return BranchProblem(assignment, ak.encode_targets(anchors, gts, assignment, config.variances))


def total_loss(branch1: BranchOutputs, branch2: BranchOutputs, anchors, gts,
               config: LossConfig = LossConfig()) -> LossReport:
    losses = []
    for out, policy in zip((branch1, branch2), config.policies):
        prob = prepare_branch(anchors, gts, policy, config)
        losses.append(multitask_loss(out, prob.assignment, prob.targets, config))
    return LossReport(tuple(losses), losses[0].l_branch + losses[1].l_branch)
