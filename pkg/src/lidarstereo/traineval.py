"""Toy training loop, sparse-split strategy switchboard, and metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .losses import (DegenerateMaskError, LossWeights, appearance_loss,
                     lr_consistency_loss, masked_mean, occlusion_from_range,
                     smooth_loss, sparse_loss, total_loss, warp_right_to_left)
from .model import ModelConfig, StereoModel
from .refine import SparseDisparity
from .scenegen import (SceneConfig, disparity_to_depth, generate_scene,
                       sample_lidar, split_sparse)

STRATEGIES = ("supervised", "self-all-in", "self-half1", "self-half2")


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 1
    max_lr: float = 2e-4
    strategy: str = "self-half2"
    n_points: int = 500
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    supervise_intermediate: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, "
                             f"got {self.strategy!r}")


@dataclass
class MetricsReport:
    epe: float    # mean |pred - gt| in pixels
    d1: float     # percent of valid pixels with error > 1 px
    rmse: float   # depth RMSE, millimeters
    mae: float    # depth MAE, millimeters
    irmse: float  # inverse-depth RMSE, 1/km
    imae: float   # inverse-depth MAE, 1/km

    def as_dict(self):
        return {"epe": self.epe, "d1": self.d1, "rmse": self.rmse,
                "mae": self.mae, "irmse": self.irmse, "imae": self.imae}


def compute_metrics(pred_disp, gt_disp, gt_valid, focal, baseline,
                    min_disparity=1e-3) -> MetricsReport:
    """Disparity and depth-completion metrics over the valid mask.

    D1 counts strict > 1 px outliers (exactly 1 px is an inlier). Predicted
    disparities are floored at ``min_disparity`` before depth conversion.
    """
    pred_disp = np.asarray(pred_disp, dtype=np.float64)
    gt_disp = np.asarray(gt_disp, dtype=np.float64)
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if pred_disp.shape != gt_disp.shape or pred_disp.shape != gt_valid.shape:
        raise ValueError("metric input shapes disagree")
    if not gt_valid.any():
        raise DegenerateMaskError("no valid pixels to evaluate")
    err = np.abs(pred_disp - gt_disp)[gt_valid]
    epe = float(err.mean())
    d1 = float(100.0 * np.mean(err > 1.0))
    pred_depth_mm = 1000.0 * disparity_to_depth(
        np.maximum(pred_disp[gt_valid], min_disparity), focal, baseline)
    gt_depth_mm = 1000.0 * disparity_to_depth(gt_disp[gt_valid], focal, baseline)
    depth_err = pred_depth_mm - gt_depth_mm
    inv_pred = 1e6 / pred_depth_mm  # 1/km from mm
    inv_gt = 1e6 / gt_depth_mm
    inv_err = inv_pred - inv_gt
    return MetricsReport(
        epe=epe, d1=d1,
        rmse=float(np.sqrt(np.mean(depth_err ** 2))),
        mae=float(np.mean(np.abs(depth_err))),
        irmse=float(np.sqrt(np.mean(inv_err ** 2))),
        imae=float(np.mean(np.abs(inv_err))))


def aggregate_metrics(reports) -> MetricsReport:
    reports = list(reports)
    return MetricsReport(**{k: float(np.mean([getattr(r, k) for r in reports]))
                            for k in ("epe", "d1", "rmse", "mae", "irmse", "imae")})


# ---------------------------------------------------------------------------
# optimizer and schedule


def one_cycle_lr(step, total_steps, max_lr, warmup_frac=0.3,
                 start_div=25.0, end_div=1000.0):
    """Linear ramp to exactly max_lr, then cosine anneal toward max_lr/end_div."""
    if total_steps <= 1:
        return max_lr
    up = max(1, int(round(warmup_frac * (total_steps - 1))))
    if step <= up:
        start = max_lr / start_div
        return start + (max_lr - start) * (step / up)
    t = (step - up) / (total_steps - 1 - up)
    end = max_lr / end_div
    return end + (max_lr - end) * 0.5 * (1.0 + np.cos(np.pi * t))


class Adam:
    """Standard first/second-moment adaptive update over a parameter dict."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# loss assembly


def split_for_strategy(sp: SparseDisparity, strategy: str, seed: int):
    """Map a training strategy to (network input set, loss set)."""
    if strategy == "supervised":
        return sp, sp
    return split_sparse(sp, strategy.replace("self-", ""), seed)


def self_supervised_loss(model: StereoModel, sample, input_set: SparseDisparity,
                         loss_set: SparseDisparity, weights: LossWeights):
    """Weighted total over both sides; returns (scalar loss, left disparity)."""
    image_l = ng.as_diff(sample.image_left)
    image_r = ng.as_diff(sample.image_right)
    res_l = model.forward(image_l, image_r, input_set)
    d_l = res_l.disparity
    # right view through the horizontal flip trick, sharing all weights
    flip_l, flip_r = ng.flip_lastdim(image_l), ng.flip_lastdim(image_r)
    res_rf = model.forward(flip_r, flip_l, None)
    d_rf = res_rf.disparity
    d_r = ng.flip_lastdim(d_rf)
    d_lf = ng.flip_lastdim(d_l)

    occ_l = occlusion_from_range(d_l.data)
    left_terms = {
        "appearance": appearance_loss(image_l, warp_right_to_left(image_r, d_l),
                                      occ_l, weights.alpha),
        "sparse": sparse_loss(loss_set, d_l) if loss_set.count else None,
        "lr_consistency": lr_consistency_loss(d_l, d_r, occ_l),
        "smoothness": smooth_loss(d_l, sample.image_left, occ_l),
    }
    occ_rf = occlusion_from_range(d_rf.data)
    right_terms = {
        # right side has no LiDAR seeds, so no sparse term
        "appearance": appearance_loss(flip_r, warp_right_to_left(flip_l, d_rf),
                                      occ_rf, weights.alpha),
        "lr_consistency": lr_consistency_loss(d_rf, d_lf, occ_rf),
        "smoothness": smooth_loss(d_rf, flip_r.data, occ_rf),
    }
    loss = ng.mul(ng.add(total_loss(left_terms, weights),
                         total_loss(right_terms, weights)), 0.5)
    return loss, d_l


def supervised_loss(model: StereoModel, sample, input_set: SparseDisparity):
    """Mean absolute disparity error against dense ground truth."""
    res = model.forward(ng.as_diff(sample.image_left),
                        ng.as_diff(sample.image_right), input_set)
    diff = ng.absval(ng.sub(res.disparity, ng.constant(sample.gt_disparity)))
    return masked_mean(diff, sample.gt_valid), res.disparity


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: StereoModel
    curve: list  # rows of dicts with step/loss/metrics keys


def train_step_loss(model, cfg: TrainConfig, sample, sp, split_seed):
    input_set, loss_set = split_for_strategy(sp, cfg.strategy, split_seed)
    if cfg.strategy == "supervised":
        return supervised_loss(model, sample, input_set)
    return self_supervised_loss(model, sample, input_set, loss_set, cfg.weights)


def train(cfg: TrainConfig, model: StereoModel = None,
          progress=None) -> TrainResult:
    """Deterministic toy training; returns the model and per-step curve."""
    model = model or StereoModel(cfg.model, seed=cfg.seed)
    opt = Adam(model.params)
    curve = []
    for step in range(cfg.steps):
        lr = one_cycle_lr(step, cfg.steps, cfg.max_lr)
        grads = {}
        loss_val = 0.0
        report = None
        for b in range(cfg.batch_size):
            data_seed = cfg.seed * 1_000_003 + step * cfg.batch_size + b
            sample = generate_scene(cfg.scene, seed=data_seed)
            sp = sample_lidar(sample, cfg.n_points, seed=data_seed + 1)
            with ng.GradientTape() as tape:
                loss, d_l = train_step_loss(model, cfg, sample, sp, data_seed + 2)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"loss became {loss.item()} at step {step} "
                    f"(strategy {cfg.strategy}, lr {lr:.2e})")
            tape.backward(loss)
            loss_val += loss.item() / cfg.batch_size
            for name, p in model.params.items():
                if p.grad is None:
                    continue
                g = p.grad / cfg.batch_size
                grads[name] = grads.get(name, 0.0) + g
                p.grad = None
            report = compute_metrics(d_l.data, sample.gt_disparity,
                                     sample.gt_valid, cfg.scene.focal,
                                     cfg.scene.baseline)
        opt.step(grads, lr)
        row = {"step": step, "loss": loss_val}
        row.update(report.as_dict())
        curve.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(model=model, curve=curve)


def write_curve_csv(path, curve):
    fields = ["step", "loss", "epe", "d1", "rmse", "mae", "irmse", "imae"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: row[k] for k in fields})


# ---------------------------------------------------------------------------
# evaluation


def heldout_scenes(cfg: TrainConfig, count: int, offset: int = 10_000_000):
    """Scene/seed pairs disjoint from any training seed of this config."""
    for k in range(count):
        seed = cfg.seed * 1_000_003 + offset + k
        yield generate_scene(cfg.scene, seed=seed), seed


def evaluate(model: StereoModel, cfg: TrainConfig, count: int = 20,
             gru_iters: int = None) -> MetricsReport:
    """Aggregate metrics over held-out synthetic scenes."""
    reports = []
    for sample, seed in heldout_scenes(cfg, count):
        sp = sample_lidar(sample, cfg.n_points, seed=seed + 1)
        pred = model.predict(sample.image_left, sample.image_right, sp,
                             gru_iters=gru_iters)
        reports.append(compute_metrics(pred, sample.gt_disparity,
                                       sample.gt_valid, cfg.scene.focal,
                                       cfg.scene.baseline))
    return aggregate_metrics(reports)


def ablate_iterations(model: StereoModel, cfg: TrainConfig, iters,
                      count: int = 20):
    """Evaluate the same model truncated at each GRU iteration count."""
    rows = []
    for k in iters:
        report = evaluate(model, cfg, count=count, gru_iters=k)
        row = {"iters": int(k)}
        row.update(report.as_dict())
        rows.append(row)
    return rows


def write_ablation_csv(path, rows):
    fields = ["iters", "epe", "d1", "rmse", "mae", "irmse", "imae"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
