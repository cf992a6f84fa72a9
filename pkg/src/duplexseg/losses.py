"""Set-prediction training objective.

Ground-truth segments (one binary mask per class present) are matched one-to-
one to queries by minimum-cost bipartite assignment; the loss combines binary
cross-entropy and dice over matched masks with a weighted classification term
over all queries, summed over every decoder layer (deep supervision). The
assignment is recomputed per layer and treated as a constant during
differentiation.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, InputError
from .query_decoder import PredictionSet

DICE_EPS = 1.0


@dataclass
class LossWeights:
    lambda_mask: float = 1.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        vals = (self.lambda_mask, self.lambda_ce, self.lambda_dice, self.lambda_cls)
        if any(v < 0 for v in vals):
            raise ConfigurationError("loss weights must be non-negative")
        if all(v == 0 for v in vals):
            raise ConfigurationError("at least one loss weight must be positive")
        if self.no_object_weight <= 0:
            raise ConfigurationError("no_object_weight must be positive")


@dataclass
class GroundTruthSegments:
    """Per-class binary masks at quarter resolution plus a validity mask."""

    class_ids: List[int]
    masks: torch.Tensor  # (S, H/4, W/4) bool
    valid: torch.Tensor  # (H/4, W/4) bool, False where every source pixel was ignored

    def __len__(self):
        return len(self.class_ids)


@dataclass
class MatchResult:
    assignment: Dict[int, int]  # segment index -> query index, injective
    total_cost: float


def label_to_segments(label: torch.Tensor, num_classes: int, ignore_id: int = 255, factor: int = 4) -> GroundTruthSegments:
    """Build one segment per class present in the full-resolution label map.

    Masks are downsampled by per-block majority vote over the non-ignored
    pixels (ties go to the lower class id); blocks that are entirely ignored
    are excluded from every loss via the validity mask.
    """
    if label.ndim != 2:
        raise InputError(f"label must be 2-D, got shape {tuple(label.shape)}")
    h, w = label.shape
    if h % factor or w % factor:
        raise InputError(f"label dims {h}x{w} must be divisible by {factor}")
    dh, dw = h // factor, w // factor
    blocks = label.view(dh, factor, dw, factor).permute(0, 2, 1, 3).reshape(dh, dw, factor * factor)
    counts = torch.stack([(blocks == c).sum(-1) for c in range(num_classes)], dim=-1)
    valid = (blocks != ignore_id).sum(-1) > 0
    down = counts.argmax(-1)  # first max wins, i.e. lower class id on ties

    present = torch.unique(label)
    class_ids = [int(c) for c in present.tolist() if c != ignore_id]
    if any(c < 0 or c >= num_classes for c in class_ids):
        raise InputError(f"label contains class ids outside [0, {num_classes}): {class_ids}")
    masks = torch.stack(
        [(down == c) & valid for c in class_ids], dim=0
    ) if class_ids else torch.zeros((0, dh, dw), dtype=torch.bool, device=label.device)
    return GroundTruthSegments(class_ids=class_ids, masks=masks, valid=valid)


def dice_loss(pred_prob: torch.Tensor, gt_mask: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """1 - (2 * sum(p*g) + eps) / (sum(p) + sum(g) + eps), eps = 1."""
    if pred_prob.shape != gt_mask.shape:
        raise InputError(f"shape mismatch: {tuple(pred_prob.shape)} vs {tuple(gt_mask.shape)}")
    p = pred_prob.flatten()
    g = gt_mask.to(pred_prob.dtype).flatten()
    if valid is not None:
        keep = valid.flatten()
        p, g = p[keep], g[keep]
    num = 2.0 * (p * g).sum() + DICE_EPS
    den = p.sum() + g.sum() + DICE_EPS
    return 1.0 - num / den


def bce_mask_loss(pred_logits: torch.Tensor, gt_mask: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean numerically stable binary cross-entropy on logits."""
    if pred_logits.shape != gt_mask.shape:
        raise InputError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(gt_mask.shape)}")
    loss = F.binary_cross_entropy_with_logits(
        pred_logits, gt_mask.to(pred_logits.dtype), reduction="none"
    )
    if valid is not None:
        loss = loss[valid]
    return loss.mean()


def classification_loss(
    class_logits: torch.Tensor,  # (N, K+1)
    assignment: Dict[int, int],
    class_ids: List[int],
    no_object_weight: float,
) -> torch.Tensor:
    """Cross-entropy over all queries; unmatched ones target no-object, downweighted."""
    n, k1 = class_logits.shape
    targets = torch.full((n,), k1 - 1, dtype=torch.long, device=class_logits.device)
    for seg, query in assignment.items():
        targets[query] = class_ids[seg]
    weights = torch.where(
        targets == k1 - 1,
        torch.as_tensor(no_object_weight, dtype=class_logits.dtype, device=class_logits.device),
        torch.ones((), dtype=class_logits.dtype, device=class_logits.device),
    )
    ce = F.cross_entropy(class_logits, targets, reduction="none")
    return (weights * ce).sum() / n


def _pairwise_mask_costs(mask_logits: torch.Tensor, gt: GroundTruthSegments) -> Tuple[torch.Tensor, torch.Tensor]:
    """(N, S) bce and dice cost matrices over the valid pixels."""
    keep = gt.valid.flatten()
    logits = mask_logits.flatten(1)[:, keep]  # (N, P)
    masks = gt.masks.flatten(1)[:, keep].to(mask_logits.dtype)  # (S, P)
    p = logits.shape[1]
    pos = F.softplus(-logits)  # per-pixel BCE when target is 1
    neg = F.softplus(logits)  # per-pixel BCE when target is 0
    bce = (pos @ masks.T + neg @ (1.0 - masks).T) / max(p, 1)
    prob = torch.sigmoid(logits)
    inter = prob @ masks.T
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (prob.sum(1, keepdim=True) + masks.sum(1)[None] + DICE_EPS)
    return bce, dice


def solve_assignment(cost) -> MatchResult:
    """Optimal injective row->column assignment for an (S, N) cost matrix."""
    cost_np = np.asarray(cost, dtype=np.float64)
    if cost_np.shape[0] > cost_np.shape[1]:
        raise ConfigurationError(
            f"{cost_np.shape[0]} segments exceed {cost_np.shape[1]} queries"
        )
    rows, cols = linear_sum_assignment(cost_np)
    assignment = {int(r): int(c) for r, c in zip(rows, cols)}
    return MatchResult(assignment=assignment, total_cost=float(cost_np[rows, cols].sum()))


def hungarian_match(pred: PredictionSet, sample: int, gt: GroundTruthSegments, w: LossWeights) -> MatchResult:
    """Optimal injective assignment of segments to queries under the Eq-style cost.

    cost(q, s) = lambda_cls * (-softmax(class_logits[q])[class_s])
               + lambda_mask * (lambda_ce * bce(q, s) + lambda_dice * dice(q, s))
    """
    class_logits = pred.class_logits[sample]
    mask_logits = pred.mask_logits[sample]
    n = class_logits.shape[0]
    s = len(gt)
    if s > n:
        raise ConfigurationError(f"{s} segments exceed {n} queries")
    if s == 0:
        return MatchResult(assignment={}, total_cost=0.0)
    with torch.no_grad():
        prob = torch.softmax(class_logits, dim=-1)  # (N, K+1)
        cls_cost = -prob[:, gt.class_ids]  # (N, S)
        bce, dice = _pairwise_mask_costs(mask_logits, gt)
        cost = w.lambda_cls * cls_cost + w.lambda_mask * (w.lambda_ce * bce + w.lambda_dice * dice)
    return solve_assignment(cost.T.double().cpu().numpy())


@dataclass
class LossBreakdown:
    total: float
    layers: List[Dict[str, float]] = field(default_factory=list)

    def as_flat_dict(self) -> Dict[str, float]:
        out = {"loss": self.total}
        last = self.layers[-1] if self.layers else {}
        for key, val in last.items():
            out[f"final_{key}"] = val
        return out


def total_loss(
    preds_per_layer: List[PredictionSet],
    gts: List[GroundTruthSegments],
    w: LossWeights,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Deep-supervised loss summed over layers, averaged over the batch."""
    if not preds_per_layer:
        raise InputError("need at least one prediction set")
    batch = preds_per_layer[0].class_logits.shape[0]
    if len(gts) != batch:
        raise InputError(f"{len(gts)} ground-truth entries for batch of {batch}")

    device = preds_per_layer[0].class_logits.device
    dtype = preds_per_layer[0].class_logits.dtype
    total = torch.zeros((), dtype=dtype, device=device)
    layer_records = []
    for pred in preds_per_layer:
        ce_terms, dice_terms, cls_terms = [], [], []
        for b in range(batch):
            gt = gts[b]
            match = hungarian_match(pred, b, gt, w)
            pair_ce, pair_dice = [], []
            for seg, query in match.assignment.items():
                pair_ce.append(bce_mask_loss(pred.mask_logits[b, query], gt.masks[seg], gt.valid))
                pair_dice.append(dice_loss(torch.sigmoid(pred.mask_logits[b, query]), gt.masks[seg], gt.valid))
            zero = total.new_zeros(())
            ce_terms.append(torch.stack(pair_ce).mean() if pair_ce else zero)
            dice_terms.append(torch.stack(pair_dice).mean() if pair_dice else zero)
            cls_terms.append(
                classification_loss(pred.class_logits[b], match.assignment, gt.class_ids, w.no_object_weight)
            )
        l_ce = torch.stack(ce_terms).mean()
        l_dice = torch.stack(dice_terms).mean()
        l_cls = torch.stack(cls_terms).mean()
        layer_loss = w.lambda_mask * (w.lambda_ce * l_ce + w.lambda_dice * l_dice) + w.lambda_cls * l_cls
        total = total + layer_loss
        layer_records.append(
            {
                "ce": float(l_ce.detach()),
                "dice": float(l_dice.detach()),
                "cls": float(l_cls.detach()),
                "loss": float(layer_loss.detach()),
            }
        )
    return total, LossBreakdown(total=float(total.detach()), layers=layer_records)
