"""Dual-branch CNN-LSTM for multi-label aesthetic prediction.

Temporal branch: video frames + pupil-response images through small conv
stacks (shared backbone + per-task conv), concatenated per timestep and fed
to a shared 2-layer LSTM.

Spatial branch: video frames + attention maps through parallel conv stacks,
cross-modal channel recalibration (squeeze / joint bottleneck / per-modality
sigmoid gates scaled to (0, 2)), residual combination, then shared and
per-task LSTMs.

Per task, the two final hidden states feed a two-layer sigmoid head.
"""

import json
import math
import re
from contextlib import contextmanager
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .arrayio import read_array, write_array
from .errors import ConfigError

FULL_MULTIMODAL = "full_multimodal"
VIDEO_ONLY_ZERO = "video_only_zero"
VIDEO_ONLY_MEANFILL = "video_only_meanfill"
INFERENCE_MODES = (FULL_MULTIMODAL, VIDEO_ONLY_ZERO, VIDEO_ONLY_MEANFILL)


@dataclass(frozen=True)
class ModelConfig:
    n_tasks: int = 15
    seq_len: int = 80
    in_h: int = 90
    in_w: int = 160
    video_channels: tuple = (8, 16, 32)
    video_task_channels: int = 16
    pupil_channels: tuple = (8, 16)
    pupil_task_channels: int = 8
    pupil_size: int = 32
    lstm_hidden: int = 64
    shared_lstm_layers: int = 2
    head_hidden: int = 64

    def validate(self):
        vals = (self.n_tasks, self.seq_len, self.in_h, self.in_w,
                *self.video_channels, self.video_task_channels,
                *self.pupil_channels, self.pupil_task_channels,
                self.pupil_size, self.lstm_hidden, self.shared_lstm_layers,
                self.head_hidden)
        if any(v <= 0 for v in vals):
            raise ConfigError("all ModelConfig sizes must be positive")
        if len(self.video_channels) != 3 or len(self.pupil_channels) != 2:
            raise ConfigError("expected 3 video and 2 pupil conv stages")
        return self

    @property
    def mmtm_bottleneck(self) -> int:
        return max((self.video_task_channels + self.video_channels[-1]) // 4, 1)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["video_channels"] = tuple(d["video_channels"])
        d["pupil_channels"] = tuple(d["pupil_channels"])
        return ModelConfig(**d).validate()


def _conv_stage(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


def _task_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _over_time(module, x):
    """Apply a 2-D conv module to a (B, T, C, H, W) tensor.

    Flattens time into the batch and uses channels_last, which is much
    faster for small conv stacks on CPU.
    """
    b, t = x.shape[:2]
    flat = x.reshape(b * t, *x.shape[2:])
    if flat.dim() == 4 and flat.dtype == torch.float32:
        flat = flat.contiguous(memory_format=torch.channels_last)
    y = module(flat)
    return y.reshape(b, t, *y.shape[1:])


class MMTM(nn.Module):
    """Cross-modal channel recalibration with a joint bottleneck."""

    def __init__(self, c_a, c_b):
        super().__init__()
        self.c_a, self.c_b = c_a, c_b
        bottleneck = max((c_a + c_b) // 4, 1)
        self.fc_squeeze = nn.Linear(c_a + c_b, bottleneck)
        self.fc_a = nn.Linear(bottleneck, c_a)
        self.fc_b = nn.Linear(bottleneck, c_b)

    def gates(self, a, b):
        if a.shape[1] != self.c_a or b.shape[1] != self.c_b:
            raise ValueError(
                f"channel mismatch: got ({a.shape[1]}, {b.shape[1]}), "
                f"expected ({self.c_a}, {self.c_b})")
        s = torch.cat([a.mean(dim=(2, 3)), b.mean(dim=(2, 3))], dim=1)
        z = torch.relu(self.fc_squeeze(s))
        e_a = 2.0 * torch.sigmoid(self.fc_a(z))
        e_b = 2.0 * torch.sigmoid(self.fc_b(z))
        return e_a, e_b

    def forward(self, a, b):
        e_a, e_b = self.gates(a, b)
        return a * e_a[:, :, None, None], b * e_b[:, :, None, None]


class TemporalBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        v1, v2, v3 = cfg.video_channels
        p1, p2 = cfg.pupil_channels
        self.video_backbone = nn.Sequential(
            _conv_stage(3, v1), _conv_stage(v1, v2), _conv_stage(v2, v3))
        self.video_taskconv = nn.ModuleList(
            [_task_conv(v3, cfg.video_task_channels) for _ in range(cfg.n_tasks)])
        self.pupil_encoder = nn.Sequential(
            _conv_stage(2, p1), _conv_stage(p1, p2))
        self.pupil_taskconv = nn.ModuleList(
            [_task_conv(p2, cfg.pupil_task_channels) for _ in range(cfg.n_tasks)])
        self.shared_lstm = nn.LSTM(
            cfg.video_task_channels + cfg.pupil_task_channels,
            cfg.lstm_hidden, num_layers=cfg.shared_lstm_layers, batch_first=True)

    def features(self, frames, pupil):
        """Shared-backbone feature maps; computed once per batch."""
        return _over_time(self.video_backbone, frames), \
            _over_time(self.pupil_encoder, pupil)

    def task_inputs(self, feats, task):
        vfeat, pfeat = feats
        tv = _over_time(self.video_taskconv[task], vfeat).mean(dim=(3, 4))
        tp = _over_time(self.pupil_taskconv[task], pfeat).mean(dim=(3, 4))
        return torch.cat([tv, tp], dim=2)    # (B, T, F)

    def run_lstm(self, z):
        seq, (h_n, _) = self.shared_lstm(z)
        return seq, h_n[-1]

    def task_forward(self, feats, task):
        return self.run_lstm(self.task_inputs(feats, task))


class SpatialBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        v1, v2, v3 = cfg.video_channels
        self.video_backbone = nn.Sequential(
            _conv_stage(3, v1), _conv_stage(v1, v2), _conv_stage(v2, v3))
        self.video_taskconv = nn.ModuleList(
            [_task_conv(v3, cfg.video_task_channels) for _ in range(cfg.n_tasks)])
        self.attn_backbone = nn.Sequential(
            _conv_stage(1, v1), _conv_stage(v1, v2), _conv_stage(v2, v3))
        self.mmtm = MMTM(cfg.video_task_channels, v3)
        self.shared_lstm = nn.LSTM(
            cfg.video_task_channels + v3, cfg.lstm_hidden,
            num_layers=cfg.shared_lstm_layers, batch_first=True)
        self.task_lstm = nn.ModuleList(
            [nn.LSTM(cfg.lstm_hidden, cfg.lstm_hidden, batch_first=True)
             for _ in range(cfg.n_tasks)])

    def features(self, frames, attn):
        return _over_time(self.video_backbone, frames), \
            _over_time(self.attn_backbone, attn)

    def task_inputs(self, feats, task):
        vfeat, afeat = feats
        b, t = vfeat.shape[:2]
        v = _over_time(self.video_taskconv[task], vfeat)
        v_flat = v.reshape(b * t, *v.shape[2:])
        a_flat = afeat.reshape(b * t, *afeat.shape[2:])
        gv, ga = self.mmtm(v_flat, a_flat)
        v_res = v_flat + gv          # residual around the recalibration
        a_res = a_flat + ga
        pooled = torch.cat([v_res.mean(dim=(2, 3)), a_res.mean(dim=(2, 3))], dim=1)
        return pooled.reshape(b, t, -1)

    def run_lstm(self, z, task):
        shared_seq, _ = self.shared_lstm(z)
        seq, (h_n, _) = self.task_lstm[task](shared_seq)
        return seq, h_n[-1]

    def task_forward(self, feats, task):
        return self.run_lstm(self.task_inputs(feats, task), task)


class AestheticModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.temporal = TemporalBranch(cfg)
        self.spatial = SpatialBranch(cfg)
        self.head = nn.ModuleList([
            nn.Sequential(nn.Linear(2 * cfg.lstm_hidden, cfg.head_hidden),
                          nn.ReLU(inplace=True),
                          nn.Linear(cfg.head_hidden, 1))
            for _ in range(cfg.n_tasks)])

    def forward(self, frames, pupil, attn, tasks=None):
        """Logits of shape (B, len(tasks)); ``tasks`` defaults to all."""
        tasks = range(self.cfg.n_tasks) if tasks is None else tasks
        tfeats = self.temporal.features(frames, pupil)
        sfeats = self.spatial.features(frames, attn)
        logits = []
        for task in tasks:
            _, t_fin = self.temporal.task_forward(tfeats, task)
            _, s_fin = self.spatial.task_forward(sfeats, task)
            logits.append(self.head[task](torch.cat([t_fin, s_fin], dim=1)))
        return torch.cat(logits, dim=1)

    def predict_proba(self, frames, pupil, attn, tasks=None):
        return torch.sigmoid(self.forward(frames, pupil, attn, tasks))


# ---------------------------------------------------------------------------
# Initialization


def _init_linear_or_conv(m, gen):
    fan_in = m.weight.shape[1] * (m.weight[0][0].numel() if m.weight.dim() > 2 else 1)
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        m.weight.uniform_(-bound, bound, generator=gen)
        if m.bias is not None:
            m.bias.zero_()


def init_lstm_weights(lstm: nn.LSTM, gen) -> None:
    """Fan-in uniform weights; forget-gate bias 1, all other biases 0."""
    h = lstm.hidden_size
    with torch.no_grad():
        for name, p in sorted(lstm.named_parameters()):
            if name.startswith("weight"):
                bound = 1.0 / math.sqrt(p.shape[1])
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()
                if name.startswith("bias_ih"):
                    p[h:2 * h] = 1.0     # forget gate block
        lstm.flatten_parameters()


@contextmanager
def flush_denormals():
    """Flush denormal floats to zero (FTZ/DAZ) for heavy conv work.

    Denormals in the small conv stacks cost an order of magnitude on this
    CPU. The flag is thread-global processor state, so it is restored on
    exit to keep IEEE-754 semantics for everything outside the model loops
    (e.g. property-testing libraries probe subnormal support).
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def init_model(cfg: ModelConfig, seed: int) -> AestheticModel:
    """Deterministically initialized model for a seed."""
    torch.manual_seed(seed)
    model = AestheticModel(cfg)
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            _init_linear_or_conv(m, gen)
        elif isinstance(m, nn.LSTM):
            init_lstm_weights(m, gen)
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
            m.reset_running_stats()
    return model


# ---------------------------------------------------------------------------
# Named parameter groups (for transfer, freezing, and gradient checks)

_GROUP_PATTERNS = [
    (re.compile(r"^(temporal|spatial)\.(video_taskconv|pupil_taskconv|task_lstm)\.(\d+)\."),
     lambda m: f"{m.group(1)}.{m.group(2)}[{m.group(3)}]"),
    (re.compile(r"^(temporal|spatial)\.(video_backbone|pupil_encoder|attn_backbone|shared_lstm|mmtm)\."),
     lambda m: f"{m.group(1)}.{m.group(2)}"),
    (re.compile(r"^head\.(\d+)\."), lambda m: f"head[{m.group(1)}]"),
]


def group_of(param_name: str) -> str:
    for pattern, fmt in _GROUP_PATTERNS:
        m = pattern.match(param_name)
        if m:
            return fmt(m)
    raise KeyError(f"parameter {param_name!r} matches no group")


def parameter_groups(model: AestheticModel) -> dict:
    """Map group name -> list of (parameter name, tensor)."""
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(group_of(name), []).append((name, p))
    return groups


def count_parameters(model: AestheticModel) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Inference-mode input substitution


@dataclass
class ModalityStats:
    """Training-set mean pupil-image and attention-map sequences."""

    mean_pupil: np.ndarray      # (T, 2, S, S)
    mean_attn: np.ndarray       # (T, 1, H', W')


def apply_mode(pupil, attn, mode, stats: ModalityStats = None):
    """Substitute gaze-derived inputs according to the deployment mode."""
    if mode == FULL_MULTIMODAL:
        return pupil, attn
    if mode == VIDEO_ONLY_ZERO:
        return torch.zeros_like(pupil), torch.zeros_like(attn)
    if mode == VIDEO_ONLY_MEANFILL:
        if stats is None:
            raise ConfigError("video_only_meanfill requires modality stats")
        mp = torch.as_tensor(stats.mean_pupil, dtype=pupil.dtype)
        ma = torch.as_tensor(stats.mean_attn, dtype=attn.dtype)
        b = pupil.shape[0]
        return mp[None].expand(b, *mp.shape).clone(), \
            ma[None].expand(b, *ma.shape).clone()
    raise ConfigError(f"unknown inference mode {mode!r}")


# ---------------------------------------------------------------------------
# Checkpoints: directory of ARR1 tensors plus a metadata record


CHECKPOINT_VERSION = 1


def _mangle(name):
    return name.replace(".", "__") + ".arr"


def save_checkpoint(path, model: AestheticModel, stats: ModalityStats = None,
                    metadata: dict = None) -> None:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    index = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        index.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape)})
        write_array(path / "tensors" / _mangle(name),
                    arr.astype(np.float32, copy=False).reshape(arr.shape or (1,)))
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": index,
        "has_stats": stats is not None,
        "metadata": metadata or {},
    }
    if stats is not None:
        write_array(path / "tensors" / "stats__mean_pupil.arr",
                    stats.mean_pupil.astype(np.float32))
        write_array(path / "tensors" / "stats__mean_attn.arr",
                    stats.mean_attn.astype(np.float32))
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(path):
    """Return (model, stats, metadata)."""
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta['version']}")
    cfg = ModelConfig.from_dict(meta["config"])
    model = AestheticModel(cfg)
    state = {}
    for entry in meta["tensors"]:
        arr = read_array(path / "tensors" / _mangle(entry["name"]))
        arr = arr.reshape(entry["shape"]).astype(entry["dtype"])
        state[entry["name"]] = torch.as_tensor(arr)
    model.load_state_dict(state)
    stats = None
    if meta["has_stats"]:
        stats = ModalityStats(
            mean_pupil=read_array(path / "tensors" / "stats__mean_pupil.arr"),
            mean_attn=read_array(path / "tensors" / "stats__mean_attn.arr"))
    return model, stats, meta["metadata"]
