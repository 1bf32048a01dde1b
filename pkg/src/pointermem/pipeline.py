"""Streaming reconstruction loop, overfit training and evaluation.

Frames are consumed strictly in order through plain iteration. For every
frame the loop predicts pointmaps and a pose from the current memory, turns
the frame into new pointers and fuses them into memory before the next
frame is read.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .geometry import AlignmentError, CameraPose, Pointmap, apply_pose
from .losses import LossConfig, PointmapPrediction, loss_conf, loss_pose, scale_norm, scale_norm_tensor
from .memory import (
    DEFAULT_L,
    FusionPlan,
    SpatialPointerMemory,
    apply_plan,
    ingest_first_frame,
    plan_fusion,
)
from .metrics import cloud_metrics, depth_metrics, grid_normals, traj_metrics
from .model import FrameTokens, HeadOutput, PoseOutput, StreamingModel, assign_token_positions
from .synth import Frame, oracle_frontend
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "StreamError",
    "NumericError",
    "StreamConfig",
    "FrameRecord",
    "FrameOutput",
    "StreamResult",
    "SequenceTrace",
    "reconstruct_stream",
    "forward_sequence",
    "sequence_loss",
    "train_overfit",
    "evaluate",
    "REPORT_KEYS",
]


class StreamError(ValueError):
    """Bad input frame; carries the frame index."""

    def __init__(self, frame: int, message: str):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


class NumericError(ArithmeticError):
    """Non-finite value during training; carries the step index."""

    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class StreamConfig:
    fusion: bool = True
    l: tuple = DEFAULT_L
    accelerator: str = "brute"
    oracle_frontend: bool = False
    noise_sigma: float = 0.0
    seed: int = 0
    patch: int = 8


@dataclass
class FrameRecord:
    frame: int
    pose: dict
    pointers: int
    fused: int
    appended: int
    ms: float
    delta: float | None = None


@dataclass
class FrameOutput:
    self_pm: Pointmap
    global_pm: Pointmap
    pose: CameraPose
    pose_fallback: bool = False


@dataclass
class StreamResult:
    outputs: list[FrameOutput]
    memory: SpatialPointerMemory
    records: list[FrameRecord]
    config: StreamConfig

    def manifest(self, extra: dict | None = None) -> dict:
        out = {"config": asdict(self.config), "frames": [asdict(r) for r in self.records]}
        if extra:
            out.update(extra)
        return out


@dataclass
class SequenceTrace:
    """Discrete decisions of one forward pass, replayable for gradient checks."""

    token_positions: list = field(default_factory=list)
    memory_positions: list = field(default_factory=list)
    plans: list = field(default_factory=list)


@dataclass
class _State:
    mem: SpatialPointerMemory | None = None
    mem_feat: Tensor | None = None
    prev_global: Pointmap | None = None
    l: tuple = DEFAULT_L


def _model_step(model: StreamingModel, frame: Frame, t: int, st: _State, fusion: bool,
                accelerator: str, trace: SequenceTrace | None, replay: SequenceTrace | None):
    cfg = model.cfg
    F = model.encode_image(frame.pixels)
    if t == 0:
        M0 = model.embed_first_memory(F, 0)
        st.mem = SpatialPointerMemory.with_placeholder(M0.data, st.l)
        st.mem_feat = M0
    if replay is not None:
        tok_pos, tok_null = replay.token_positions[t]
        mem_pos = replay.memory_positions[t]
    else:
        tok_pos, tok_null = assign_token_positions(None if t == 0 else st.prev_global, cfg.patch, cfg.n_tokens)
        mem_pos = st.mem.positions.copy()
    if trace is not None:
        trace.token_positions.append((tok_pos, tok_null))
        trace.memory_positions.append(mem_pos)

    tokens = FrameTokens(F, model.pose_token, tok_pos, tok_null)
    dec = model.interaction_decode(tokens, st.mem_feat, mem_pos)
    pose = model.head_pose(dec.pose_token)
    head_self = model.head_self(dec.image_tokens)
    head_global = model.head_global(dec.image_tokens, dec.pose_token)
    feats, positions, _ = model.memory_encode(F, dec.image_tokens, head_global.points)

    if t == 0:
        ingest_first_frame(st.mem, positions, feats.data, 0)
        st.mem_feat = feats
        fused, appended, delta, plan = 0, len(positions), None, None
    else:
        if replay is not None:
            plan = replay.plans[t]
        elif fusion:
            plan = plan_fusion(st.mem, positions, accelerator)
        else:
            plan = FusionPlan(len(st.mem), len(positions), None, {}, list(range(len(positions))))
        report = apply_plan(st.mem, plan, positions, feats.data, t)
        if T.is_grad_enabled():
            stacked = T.concat([st.mem_feat, feats], axis=0)
            st.mem_feat = T.matmul(Tensor(plan.mixing_matrix()), stacked)
        else:
            st.mem_feat = Tensor(st.mem.features)
        fused, appended, delta = report.fused, report.appended, report.delta
    if trace is not None:
        trace.plans.append(plan)
    st.prev_global = Pointmap(head_global.points.data.copy())
    return pose, head_self, head_global, (fused, appended, delta)


def _check_frame(frame: Frame, t: int, shape: tuple | None) -> tuple:
    if frame.index != t:
        raise StreamError(t, f"out-of-order frame index {frame.index}")
    s = frame.pixels.shape
    if shape is not None and s != shape:
        raise StreamError(t, f"pixel shape {s} differs from {shape}")
    return s


def reconstruct_stream(
    frames: Iterable[Frame],
    model: StreamingModel | None = None,
    config: StreamConfig | None = None,
    on_frame: Callable[[int, StreamResult], None] | None = None,
) -> StreamResult:
    """Run the streaming loop over ``frames``.

    Without a model ``config.oracle_frontend`` must be set: ground-truth
    geometry plus noise then stands in for the network and poses are taken
    from ground truth.

    Args:
        on_frame: called after each frame with the index and the partial
            result, e.g. to write memory snapshots.
    """
    config = config or StreamConfig()
    if model is None and not config.oracle_frontend:
        raise ValueError("a model is required unless the oracle frontend is enabled")
    if model is not None and config.oracle_frontend:
        raise ValueError("choose either a model or the oracle frontend")
    result = StreamResult([], None, [], config)
    st = _State(l=tuple(config.l))
    shape = None
    if model is not None:
        H, W = model.cfg.image_size
        shape = (H, W, model.cfg.channels)

    t = -1
    for t, frame in enumerate(frames):
        shape = _check_frame(frame, t, shape)
        t0 = time.perf_counter()
        if model is None:
            out, counts = _oracle_step(frame, t, st, config)
        else:
            with T.no_grad():
                pose_o, hs, hg, counts = _model_step(model, frame, t, st, config.fusion,
                                                     config.accelerator, None, None)
            out = FrameOutput(hs.to_pointmap(), hg.to_pointmap(), pose_o.to_pose(), pose_o.fallback)
        ms = (time.perf_counter() - t0) * 1e3
        result.outputs.append(out)
        result.memory = st.mem
        fused, appended, delta = counts
        result.records.append(FrameRecord(t, out.pose.to_json(), len(st.mem), fused, appended, ms, delta))
        if on_frame is not None:
            on_frame(t, result)
    if t < 0:
        raise ValueError("reconstruct_stream needs at least one frame")
    return result


def _oracle_step(frame: Frame, t: int, st: _State, config: StreamConfig):
    noisy, positions, feats, _ = oracle_frontend(frame, config.noise_sigma, config.seed, config.patch)
    if t == 0:
        st.mem = SpatialPointerMemory.with_placeholder(np.zeros((0, feats.shape[1])), st.l)
        ingest_first_frame(st.mem, positions, feats, 0)
        counts = (0, len(positions), None)
    elif config.fusion:
        plan = plan_fusion(st.mem, positions, config.accelerator)
        r = apply_plan(st.mem, plan, positions, feats, t)
        counts = (r.fused, r.appended, r.delta)
    else:
        st.mem.append(positions, feats, t)
        counts = (0, len(positions), None)
    pose = frame.gt_pose
    self_pts = apply_pose(noisy.points, pose.inverse())
    out = FrameOutput(Pointmap(np.where(noisy.valid[..., None], self_pts, 0.0), noisy.valid.copy()), noisy, pose)
    return out, counts


def forward_sequence(model: StreamingModel, frames, fusion: bool = True, accelerator: str = "brute",
                     trace: SequenceTrace | None = None, replay: SequenceTrace | None = None,
                     l=DEFAULT_L):
    """Differentiable pass over a short sequence.

    Returns a list of ``(PoseOutput, HeadOutput self, HeadOutput global)``.
    """
    st = _State(l=tuple(l))
    outs = []
    for t, frame in enumerate(frames):
        pose, hs, hg, _ = _model_step(model, frame, t, st, fusion, accelerator, trace, replay)
        outs.append((pose, hs, hg))
    return outs


def sequence_loss(outs, frames, loss_cfg: LossConfig) -> tuple[Tensor, dict]:
    """Pose plus confidence loss over both pointmap branches."""
    gts_global = [f.gt_global for f in frames]
    s_gt = scale_norm(gts_global)
    if loss_cfg.metric_scale:
        s_pred = Tensor(s_gt)
    else:
        s_pred = scale_norm_tensor([hg.points for _, _, hg in outs],
                                   [np.ones(hg.points.shape[:2], bool) for _, _, hg in outs])
    preds = [PointmapPrediction(hs.points, hs.confidence) for _, hs, _ in outs]
    preds += [PointmapPrediction(hg.points, hg.confidence) for _, _, hg in outs]
    gts = [f.gt_self for f in frames] + gts_global
    lc = loss_conf(preds, gts, loss_cfg, s_pred, s_gt)
    lp = loss_pose([p.quat for p, _, _ in outs], [p.trans for p, _, _ in outs],
                   [f.gt_pose for f in frames], s_pred, s_gt)
    total = lc + lp
    return total, {"conf": lc.item(), "pose": lp.item(), "total": total.item()}


def train_overfit(
    frames,
    model: StreamingModel,
    steps: int,
    lr: float,
    loss_cfg: LossConfig | None = None,
    fusion: bool = True,
    on_step: Callable[[int, dict], None] | None = None,
) -> list[float]:
    """Plain gradient descent on one sequence; returns the loss per step.

    Raises:
        NumericError: the loss or a gradient became non-finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    loss_cfg = loss_cfg or LossConfig(alpha=model.cfg.alpha)
    frames = list(frames)
    params = model.parameters()
    curve = []
    for step in range(steps):
        model.zero_grad()
        outs = forward_sequence(model, frames, fusion)
        loss, parts = sequence_loss(outs, frames, loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(step)
        T.backward(loss, wrt=params)
        for p in params:
            if not np.isfinite(p.grad).all():
                raise NumericError(step, "non-finite gradient")
        for p in params:
            p.data = p.data - lr * p.grad
        curve.append(value)
        if on_step is not None:
            on_step(step, parts)
    return curve


REPORT_KEYS = (
    "acc_mean", "acc_median", "comp_mean", "comp_median", "nc_mean", "nc_median",
    "abs_rel", "inlier_1.25", "ate", "rpe_trans", "rpe_rot",
)


def evaluate(outputs: list[FrameOutput], frames: list[Frame], median_scaling: bool = True) -> dict:
    """Metrics report for a run against its ground-truth scene.

    Trajectory metrics are ``None`` with ``traj_error`` set when the ground
    truth trajectory cannot be aligned (e.g. a stationary camera).
    """
    if len(outputs) != len(frames):
        raise ValueError(f"run has {len(outputs)} frames, scene has {len(frames)}")
    pred_pts, pred_n, gt_pts, gt_n = [], [], [], []
    abs_rels, inliers = [], []
    for out, fr in zip(outputs, frames):
        pm, gm = out.global_pm, fr.gt_global
        pred_pts.append(pm.valid_points())
        pred_n.append(grid_normals(pm)[pm.valid])
        gt_pts.append(gm.valid_points())
        gt_n.append(grid_normals(gm)[gm.valid])
        pred_depth = np.where(out.self_pm.valid, out.self_pm.points[..., 2], np.nan)
        a, i = depth_metrics(pred_depth, fr.depth, median_scaling)
        abs_rels.append(a)
        inliers.append(i)
    cm = cloud_metrics(np.concatenate(pred_pts), np.concatenate(gt_pts),
                       np.concatenate(pred_n), np.concatenate(gt_n))
    report = {"frames": len(frames), **cm.to_json(),
              "abs_rel": float(np.mean(abs_rels)), "inlier_1.25": float(np.mean(inliers))}
    try:
        tm = traj_metrics([o.pose for o in outputs], [f.gt_pose for f in frames])
        report.update(tm.to_json())
    except (AlignmentError, ValueError) as exc:
        report.update({"ate": None, "rpe_trans": None, "rpe_rot": None, "traj_error": str(exc)})
    return report
