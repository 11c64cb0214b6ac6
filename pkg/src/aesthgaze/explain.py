"""Interpretability artifacts: Grad-CAM maps and temporal saliency curves.

Grad-CAM targets the pre-sigmoid task logit and one of the task-specific
conv layers. Temporal saliency has no dedicated attention layer to read, so
it reports the L2 norm of the logit's gradient with respect to each
timestep's LSTM input vector, per branch and combined.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .model import AestheticModel, _over_time

TEMPORAL_TASKCONV = "temporal.video_taskconv"
SPATIAL_TASKCONV = "spatial.video_taskconv"
CAM_LAYERS = (TEMPORAL_TASKCONV, SPATIAL_TASKCONV)


@dataclass
class SaliencyResult:
    task_id: int
    layer_name: str = ""
    spatial: np.ndarray = None      # (T, H, W), max-normalized per timestep
    temporal: np.ndarray = None     # (T,), sums to 1
    per_branch: dict = field(default_factory=dict)


def _sample_tensors(sample):
    frames = torch.from_numpy(sample.frames[None])
    pupil = torch.from_numpy(sample.pupil_images.images[None])
    attn = torch.from_numpy(sample.attention_maps.maps[None])
    return frames, pupil, attn


def _logit_with_cam_target(model, frames, pupil, attn, task, layer):
    """Forward pass returning (logit, activation leaf) for the chosen layer."""
    tfeats = model.temporal.features(frames, pupil)
    sfeats = model.spatial.features(frames, attn)

    if layer == TEMPORAL_TASKCONV:
        vfeat, pfeat = tfeats
        act = _over_time(model.temporal.video_taskconv[task], vfeat)
        act = act.detach().requires_grad_(True)
        tv = act.mean(dim=(3, 4))
        tp = _over_time(model.temporal.pupil_taskconv[task], pfeat).mean(dim=(3, 4))
        _, t_fin = model.temporal.run_lstm(torch.cat([tv, tp], dim=2))
        _, s_fin = model.spatial.task_forward(sfeats, task)
    else:
        vfeat, afeat = sfeats
        act = _over_time(model.spatial.video_taskconv[task], vfeat)
        act = act.detach().requires_grad_(True)
        b, t = act.shape[:2]
        v_flat = act.reshape(b * t, *act.shape[2:])
        a_flat = afeat.reshape(b * t, *afeat.shape[2:])
        gv, ga = model.spatial.mmtm(v_flat, a_flat)
        pooled = torch.cat([(v_flat + gv).mean(dim=(2, 3)),
                            (a_flat + ga).mean(dim=(2, 3))], dim=1)
        _, s_fin = model.spatial.run_lstm(pooled.reshape(b, t, -1), task)
        _, t_fin = model.temporal.task_forward(tfeats, task)

    logit = model.head[task](torch.cat([t_fin, s_fin], dim=1))[0, 0]
    return logit, act


def grad_cam(model: AestheticModel, sample, task: int,
             layer: str = SPATIAL_TASKCONV) -> SaliencyResult:
    """Per-timestep Grad-CAM maps upsampled to the working resolution."""
    if layer not in CAM_LAYERS:
        raise ValidationError(f"unknown Grad-CAM layer {layer!r}; "
                              f"choose one of {CAM_LAYERS}")
    model.eval()
    frames, pupil, attn = _sample_tensors(sample)
    logit, act = _logit_with_cam_target(model, frames, pupil, attn, task, layer)
    grad, = torch.autograd.grad(logit, act)

    weights = grad.mean(dim=(3, 4))                       # (1, T, C)
    cam = torch.relu((weights[:, :, :, None, None] * act).sum(dim=2))
    h, w = model.cfg.in_h, model.cfg.in_w
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    cam = cam[0].detach().numpy()                          # (T, H, W)
    peak = cam.max(axis=(1, 2), keepdims=True)
    cam = np.where(peak > 0, cam / np.where(peak == 0, 1, peak), 0.0)
    return SaliencyResult(task_id=task, layer_name=layer,
                          spatial=cam.astype(np.float32))


def temporal_saliency(model: AestheticModel, sample, task: int) -> SaliencyResult:
    """Input-gradient saliency over timesteps, normalized to unit mass."""
    model.eval()
    frames, pupil, attn = _sample_tensors(sample)
    tfeats = model.temporal.features(frames, pupil)
    sfeats = model.spatial.features(frames, attn)

    zt = model.temporal.task_inputs(tfeats, task).detach().requires_grad_(True)
    zs = model.spatial.task_inputs(sfeats, task).detach().requires_grad_(True)
    _, t_fin = model.temporal.run_lstm(zt)
    _, s_fin = model.spatial.run_lstm(zs, task)
    logit = model.head[task](torch.cat([t_fin, s_fin], dim=1))[0, 0]
    gt, gs = torch.autograd.grad(logit, (zt, zs), allow_unused=True)

    def norms(g, z):
        if g is None:
            return np.zeros(z.shape[1])
        return torch.linalg.norm(g[0], dim=1).detach().numpy()

    nt, ns = norms(gt, zt), norms(gs, zs)
    combined = nt + ns
    total = combined.sum()
    if total > 0:
        weights = combined / total
    else:
        weights = np.full_like(combined, 1.0 / len(combined))
    return SaliencyResult(task_id=task, temporal=weights.astype(np.float64),
                          per_branch={"temporal": nt, "spatial": ns})


def render_overlay(frame, cam, alpha=0.5) -> np.ndarray:
    """Blend a (3, H, W) frame in [0,1] with a Grad-CAM heat map."""
    from matplotlib import colormaps
    heat = colormaps["jet"](cam)[:, :, :3]
    img = frame.transpose(1, 2, 0)
    out = (1 - alpha) * img + alpha * heat
    return (np.clip(out, 0, 1) * 255).astype(np.uint8)


def save_saliency(out_dir, sample, cam_result: SaliencyResult,
                  temp_result: SaliencyResult, stride=10) -> None:
    """Write saliency arrays plus a few overlay images and the time curve."""
    from matplotlib import pyplot as plt

    from .arrayio import write_array
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "grad_cam.arr", cam_result.spatial.astype(np.float32))
    write_array(out / "temporal_saliency.arr",
                temp_result.temporal.astype(np.float32))
    for t in range(0, cam_result.spatial.shape[0], stride):
        overlay = render_overlay(sample.frames[t], cam_result.spatial[t])
        plt.imsave(out / f"overlay_t{t:03d}.png", overlay)
    fig, ax = plt.subplots(figsize=(6, 2.5))
    ax.plot(temp_result.temporal)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("saliency mass")
    fig.tight_layout()
    fig.savefig(out / "temporal_saliency.png", dpi=100)
    plt.close(fig)
