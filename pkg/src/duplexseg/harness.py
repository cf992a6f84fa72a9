"""Training, evaluation, prediction, and checkpoint orchestration."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_raw, save_raw
from .config import Config, format_config
from .data import (
    DatasetManifest,
    Sample,
    load_manifest,
    load_sample,
    write_label_png,
    write_rgb_png,
)
from .errors import ConfigurationError, InputError
from .geometry import (
    CameraIntrinsics,
    depth_to_normals,
    normals_to_image,
    read_depth_png,
    read_intrinsics,
)
from .data import read_rgb_png, read_label_png
from .losses import LossWeights, label_to_segments, total_loss
from .metrics import ConfusionCounts, compute_metrics, confusion, format_report, max_f_and_ap
from .network import SegmentationNet, backbone_parameter_names, build_network
from .query_decoder import semantic_inference

CHECKPOINT_NAME = "checkpoint.dsck"
LOG_NAME = "train_log.jsonl"


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    """base_lr * (1 - step/total)**power; reaches exactly 0 at step == total."""
    return base_lr * (1.0 - step / total_steps) ** power


def loss_weights_from_config(cfg: Config) -> LossWeights:
    return LossWeights(
        lambda_mask=cfg["loss.lambda_mask"],
        lambda_ce=cfg["loss.lambda_ce"],
        lambda_dice=cfg["loss.lambda_dice"],
        lambda_cls=cfg["loss.lambda_cls"],
        no_object_weight=cfg["loss.no_object_weight"],
    )


def sample_tensors(sample: Sample, cfg: Config):
    """(rgb, normal_image, label) tensors with channel-wise normalization."""
    mean, std = cfg["data.input_mean"], cfg["data.input_std"]
    rgb = torch.from_numpy(np.ascontiguousarray(sample.rgb.transpose(2, 0, 1))).float()
    rgb = (rgb - mean) / std
    nimg = normals_to_image(sample.normals).astype(np.float32)
    nrm = torch.from_numpy(np.ascontiguousarray(nimg.transpose(2, 0, 1)))
    nrm = (nrm - mean) / std
    label = torch.from_numpy(sample.label.astype(np.int64))
    return rgb, nrm, label


def build_optimizer(net: SegmentationNet, cfg: Config):
    """AdamW with the encoder parameters in a reduced-learning-rate group.

    Returns the optimizer plus the parameter names flattened in group order,
    used to serialize optimizer state under stable names.
    """
    backbone = set(backbone_parameter_names(net))
    base_params, base_names, bb_params, bb_names = [], [], [], []
    for name, param in net.named_parameters():
        if name in backbone:
            bb_params.append(param)
            bb_names.append(name)
        else:
            base_params.append(param)
            base_names.append(name)
    lr = cfg["optim.lr"]
    mult = cfg["optim.backbone_lr_mult"]
    groups = [
        {"params": base_params, "lr": lr, "lr_mult": 1.0},
        {"params": bb_params, "lr": lr * mult, "lr_mult": mult},
    ]
    optimizer = torch.optim.AdamW(groups, lr=lr, weight_decay=cfg["optim.weight_decay"])
    return optimizer, base_names + bb_names


@dataclass
class TrainState:
    steps: List[int] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    records: List[dict] = field(default_factory=list)
    eval_records: List[dict] = field(default_factory=list)


@dataclass
class TrainResult:
    checkpoint_path: Path
    state: TrainState
    net: SegmentationNet


def save_training_checkpoint(path, net: SegmentationNet, optimizer, param_names, step: int, cfg: Config):
    arrays = {}
    for key, val in net.state_dict().items():
        arrays[f"model.{key}"] = val.detach().cpu().numpy()
    flat_params = [p for group in optimizer.param_groups for p in group["params"]]
    if len(flat_params) != len(param_names):
        raise ConfigurationError("optimizer parameter count does not match recorded names")
    for name, param in zip(param_names, flat_params):
        state = optimizer.state.get(param, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                arrays[f"optim.{name}.{key}"] = state[key].detach().cpu().numpy()
        if "step" in state:
            s = state["step"]
            arrays[f"optim.{name}.step"] = (
                s.detach().cpu().numpy() if torch.is_tensor(s) else np.asarray(s)
            )
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    meta = {"config": cfg.to_dict(), "step": step, "num_classes": net.num_classes}
    save_raw(path, meta, arrays)


def load_network_from_checkpoint(path) -> Tuple[SegmentationNet, Config, dict, Dict[str, np.ndarray]]:
    meta, arrays = load_raw(path)
    cfg = Config(meta["config"])
    net = build_network(cfg, num_classes=meta["num_classes"])
    state = {
        key[len("model.") :]: torch.from_numpy(arr.copy())
        for key, arr in arrays.items()
        if key.startswith("model.")
    }
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint parameters do not match the model: {exc}") from exc
    net.eval()
    return net, cfg, meta, arrays


def _load_split_tensors(manifest: DatasetManifest, split: str, cfg: Config):
    ids = manifest.splits.get(split, [])
    if not ids:
        raise InputError(f"split {split!r} is empty or missing")
    samples = [load_sample(manifest, sid) for sid in ids]
    return ids, samples, [sample_tensors(s, cfg) for s in samples]


def train(cfg: Config, out_dir) -> TrainResult:
    """Deterministic single-device training run; returns the final checkpoint."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg["seed"])

    manifest = load_manifest(cfg["data.root"])
    num_classes = len(manifest.class_names)
    _, _, tensors = _load_split_tensors(manifest, "train", cfg)

    net = build_network(cfg, num_classes=num_classes)
    net.train()
    weights = loss_weights_from_config(cfg)
    optimizer, param_names = build_optimizer(net, cfg)

    total_steps = cfg["train.steps"]
    batch_size = cfg["train.batch_size"]
    power = cfg["optim.poly_power"]
    clip = cfg["optim.clip_norm"]
    use_normals = cfg["model.modality"] == "rgb+normal"
    ignore_id = cfg["data.ignore_id"]

    order_gen = torch.Generator().manual_seed(cfg["seed"] + 1)
    queue: List[int] = []
    state = TrainState()
    last_breakdown = None

    for step in range(total_steps):
        factor = poly_lr(1.0, step, total_steps, power)
        for group in optimizer.param_groups:
            group["lr"] = cfg["optim.lr"] * group["lr_mult"] * factor
        lr_now = cfg["optim.lr"] * factor

        while len(queue) < batch_size:
            queue.extend(torch.randperm(len(tensors), generator=order_gen).tolist())
        idx, queue = queue[:batch_size], queue[batch_size:]

        rgb = torch.stack([tensors[i][0] for i in idx])
        nrm = torch.stack([tensors[i][1] for i in idx]) if use_normals else None
        labels = [tensors[i][2] for i in idx]

        preds = net(rgb, nrm)
        gts = [label_to_segments(lbl, num_classes, ignore_id) for lbl in labels]
        loss, breakdown = total_loss(preds, gts, weights)
        if not math.isfinite(breakdown.total):
            raise RuntimeError(
                f"non-finite loss at step {step}; last breakdown: "
                f"{last_breakdown.as_flat_dict() if last_breakdown else None}"
            )
        last_breakdown = breakdown

        optimizer.zero_grad()
        loss.backward()
        if clip > 0:
            torch.nn.utils.clip_grad_norm_(net.parameters(), clip)
        optimizer.step()

        record = {"step": step, "lr": lr_now, **breakdown.as_flat_dict()}
        state.steps.append(step)
        state.lrs.append(lr_now)
        state.losses.append(breakdown.total)
        state.records.append(record)

        val_every = cfg["train.val_every"]
        if val_every and (step + 1) % val_every == 0 and manifest.splits.get("val"):
            report = evaluate(net, manifest, "val", cfg)
            state.eval_records.append({"step": step, "miou": report.miou})
            net.train()

    ckpt_path = out_dir / CHECKPOINT_NAME
    save_training_checkpoint(ckpt_path, net, optimizer, param_names, total_steps, cfg)
    with open(out_dir / LOG_NAME, "w") as fh:
        for record in state.records:
            fh.write(json.dumps(record) + "\n")
    (out_dir / "config.txt").write_text(format_config(cfg))
    net.eval()
    return TrainResult(checkpoint_path=ckpt_path, state=state, net=net)


@torch.no_grad()
def evaluate(net: SegmentationNet, manifest: DatasetManifest, split: str, cfg: Config, out_dir=None):
    """Aggregate confusion over a split; adds freespace MaxF/AP when present."""
    num_classes = len(manifest.class_names)
    if num_classes != net.num_classes:
        raise ConfigurationError(
            f"checkpoint predicts {net.num_classes} classes but manifest defines {num_classes}"
        )
    net.eval()
    ids, samples, tensors = _load_split_tensors(manifest, split, cfg)
    use_normals = net.modality == "rgb+normal"
    ignore_id = cfg["data.ignore_id"]

    counts = ConfusionCounts.zeros(num_classes)
    free_probs, free_gts = [], []
    free_class = manifest.class_names.index("freespace") if "freespace" in manifest.class_names else None
    for sample, (rgb, nrm, label) in zip(samples, tensors):
        preds = net(rgb[None], nrm[None] if use_normals else None)
        h, w = label.shape
        pred_label, probs = semantic_inference(preds[-1], output_size=(h, w))
        pred_np = pred_label[0].cpu().numpy()
        counts = counts + confusion(pred_np, sample.label, num_classes, ignore_id)
        if free_class is not None:
            free_probs.append(probs[0, free_class].cpu().numpy().ravel())
            free_gts.append((sample.label == free_class).ravel())

    report = compute_metrics(counts, class_names=list(manifest.class_names))
    if free_class is not None and free_probs:
        max_f, ap = max_f_and_ap(np.concatenate(free_probs), np.concatenate(free_gts))
        report.max_f, report.ap = max_f, ap
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"metrics_{split}.txt").write_text(format_report(report))
        (out_dir / f"metrics_{split}.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def pad_to_multiple(arr: np.ndarray, multiple: int = 32) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Edge-pad bottom/right so both spatial dims divide `multiple`."""
    h, w = arr.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (arr.ndim - 2)
    return np.pad(arr, pad, mode="edge"), (h, w)


@torch.no_grad()
def predict(
    net: SegmentationNet,
    cfg: Config,
    rgb_path,
    depth_path,
    out_dir,
    intrinsics_path=None,
    gt_path=None,
    overlay_class: int = 1,
    palette=None,
):
    """Run one image pair, writing label PNG, probability arrays, and overlay."""
    from .data import PALETTE  # default palette for exported labels

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = read_rgb_png(rgb_path)
    use_normals = net.modality == "rgb+normal"

    rgb_padded, (h0, w0) = pad_to_multiple(rgb)
    nrm_t = None
    if use_normals:
        if intrinsics_path is None:
            raise ConfigurationError("depth-to-normal conversion requires an intrinsics file")
        intr = read_intrinsics(intrinsics_path)
        depth = read_depth_png(depth_path)
        if depth.values.shape != rgb.shape[:2]:
            raise InputError(
                f"rgb {rgb.shape[:2]} and depth {depth.values.shape} dims disagree"
            )
        padded_vals, _ = pad_to_multiple(depth.values)
        padded_valid, _ = pad_to_multiple(depth.validity)
        from .geometry import DepthMap

        normals = depth_to_normals(DepthMap(padded_vals, padded_valid), intr)
        nimg = normals_to_image(normals).astype(np.float32)
        nrm_t = torch.from_numpy(nimg.transpose(2, 0, 1).copy())
        nrm_t = ((nrm_t - cfg["data.input_mean"]) / cfg["data.input_std"])[None]

    rgb_t = torch.from_numpy(rgb_padded.transpose(2, 0, 1).copy()).float()
    rgb_t = ((rgb_t - cfg["data.input_mean"]) / cfg["data.input_std"])[None]

    preds = net(rgb_t, nrm_t)
    ph, pw = rgb_padded.shape[:2]
    pred_label, probs = semantic_inference(preds[-1], output_size=(ph, pw))
    label = pred_label[0].cpu().numpy()[:h0, :w0].astype(np.uint8)
    prob_np = probs[0].cpu().numpy()[:, :h0, :w0]

    write_label_png(out_dir / "label.png", label, palette=palette or PALETTE)
    np.savez(out_dir / "probs.npz", **{f"class_{c}": prob_np[c] for c in range(prob_np.shape[0])})

    if gt_path is not None:
        gt = read_label_png(gt_path)
        overlay = (np.clip(rgb, 0, 1) * 255).astype(np.uint8).copy()
        tp = (label == overlay_class) & (gt == overlay_class)
        fp = (label == overlay_class) & (gt != overlay_class)
        fn = (label != overlay_class) & (gt == overlay_class)
        overlay[tp] = (0, 255, 0)
        overlay[fp] = (0, 0, 255)
        overlay[fn] = (255, 0, 0)
        write_rgb_png(out_dir / "overlay.png", overlay.astype(np.float32) / 255.0)
    return label, prob_np


def ablate(cfg: Config, modes: Sequence[str], out_dir, split: str = "val") -> List[dict]:
    """Train and evaluate one run per fusion mode; write a comparison table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(cfg["data.root"])
    rows = []
    for mode in modes:
        run_cfg = cfg.copy_with(**{"fusion.mode": mode})
        result = train(run_cfg, out_dir / mode.replace("+", "_"))
        report = evaluate(result.net, manifest, split, run_cfg, out_dir=out_dir / mode.replace("+", "_"))
        row = {"mode": mode, "miou": report.miou}
        for name, m in zip(report.class_names, report.per_class):
            row[f"iou_{name}"] = m["iou"]
        rows.append(row)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    lines = ["mode\tmiou\t" + "\t".join(k for k in rows[0] if k.startswith("iou_"))]
    for row in rows:
        ious = "\t".join(
            "undef" if row[k] is None else f"{row[k]:.4f}" for k in row if k.startswith("iou_")
        )
        miou = "undef" if row["miou"] is None else f"{row['miou']:.4f}"
        lines.append(f"{row['mode']}\t{miou}\t{ious}")
    (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    return rows
