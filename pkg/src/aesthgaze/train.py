"""Three-stage training, loss/metric stack and experiment orchestration.

Stage 1 trains the temporal branch alone (with throwaway heads). Stage 2
copies the shared LSTM's hidden-to-hidden weights into the spatial branch and
builds a freeze mask over a ~30% row prefix of every gate block. Stage 3
fine-tunes everything jointly with masked gradients.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dims
from .errors import AesthgazeError, ConfigError, ValidationError
from .model import (FULL_MULTIMODAL, AestheticModel, ModalityStats,
                    ModelConfig, apply_mode, flush_denormals, init_model)
from .preprocess import load_aligned

PROB_EPS = 1e-7

VARIANTS = ("full", "no_attention", "no_pupil", "neither")
VARIANT_LABELS = {
    "full": "Full model",
    "no_attention": "w/o visual attention",
    "no_pupil": "w/o pupil",
    "neither": "w/o visual attention & pupil",
}


@dataclass
class TrainConfig:
    stage1_epochs: int = 50
    stage3_epochs: int = 30
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    freeze_fraction: float = 0.30
    seed: int = 0
    patience: int = 10
    # Optional stop once the running training accuracy reaches this level.
    stop_train_accuracy: float = None
    random_freeze_mask: bool = False
    # Probability that a training sample's gaze-derived inputs (pupil images
    # and attention maps) are replaced by the training-set mean for that
    # optimizer step. Simulates video-only deployment during training so the
    # model keeps a working video-only pathway; evaluation is unaffected.
    modality_dropout: float = 0.0

    def validate(self):
        if self.stage1_epochs < 1 or self.stage3_epochs < 1:
            raise ConfigError("stage epochs must be >= 1")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ConfigError("freeze_fraction must be in [0, 1]")
        if not 0.0 <= self.modality_dropout <= 1.0:
            raise ConfigError("modality_dropout must be in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self


@dataclass
class TrialData:
    """In-memory tensors for a set of trials."""

    frames: torch.Tensor        # (N, T, 3, H, W)
    pupil: torch.Tensor         # (N, T, 2, S, S)
    attn: torch.Tensor          # (N, T, 1, H', W')
    labels: torch.Tensor        # (N, 15)
    participant_ids: list
    video_ids: list

    @property
    def n(self):
        return self.frames.shape[0]

    def subset(self, idx):
        idx = list(idx)
        return TrialData(self.frames[idx], self.pupil[idx], self.attn[idx],
                         self.labels[idx],
                         [self.participant_ids[i] for i in idx],
                         [self.video_ids[i] for i in idx])

    @staticmethod
    def from_aligned(samples):
        return TrialData(
            frames=torch.from_numpy(np.stack([s.frames for s in samples])),
            pupil=torch.from_numpy(np.stack([s.pupil_images.images for s in samples])),
            attn=torch.from_numpy(np.stack([s.attention_maps.maps for s in samples])),
            labels=torch.from_numpy(np.stack([s.labels for s in samples])),
            participant_ids=[s.participant_id for s in samples],
            video_ids=[s.video_id for s in samples],
        )

    def zero_modalities(self, zero_pupil=False, zero_attn=False):
        return TrialData(
            self.frames,
            torch.zeros_like(self.pupil) if zero_pupil else self.pupil,
            torch.zeros_like(self.attn) if zero_attn else self.attn,
            self.labels, list(self.participant_ids), list(self.video_ids))


def load_dataset(aligned_dir, participants=None, use_pupil=True,
                 use_attn=True) -> TrialData:
    """Load aligned samples from disk; disabled modality files stay unread."""
    aligned_dir = Path(aligned_dir)
    sample_dirs = sorted(d for d in aligned_dir.iterdir()
                         if (d / "meta.json").exists())
    samples = []
    for d in sample_dirs:
        s = load_aligned(d, use_pupil=use_pupil, use_attn=use_attn)
        if participants is None or s.participant_id in participants:
            samples.append(s)
    if not samples:
        raise ValidationError(f"no aligned samples found under {aligned_dir}")
    return TrialData.from_aligned(samples)


# ---------------------------------------------------------------------------
# Loss and metrics


def bce_loss(probs, labels):
    """Mean binary cross-entropy with probabilities clamped away from 0/1."""
    p = torch.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(p.dtype)
    return (-(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))).mean()


def aggregate_accuracies(per_dim: dict):
    """Unweighted means over objective, subjective and all dimensions."""
    obj = [per_dim[d.id] for d in dims.objective_dimensions()]
    subj = [per_dim[d.id] for d in dims.subjective_dimensions()]
    allv = [per_dim[d.id] for d in dims.active_dimensions()]
    return (float(np.mean(obj)), float(np.mean(subj)), float(np.mean(allv)))


@dataclass
class AccuracyReport:
    per_dimension: dict          # dim id -> accuracy
    objective: float
    subjective: float
    overall: float
    n_trials: int
    mode: str
    threshold: float = 0.5

    def to_text(self) -> str:
        lines = [f"n_trials = {self.n_trials}",
                 f"mode = {self.mode}",
                 f"threshold = {self.threshold}"]
        for d in dims.active_dimensions():
            lines.append(f"accuracy.{d.name} = {self.per_dimension[d.id]:.6f}")
        lines.append(f"aggregate.objective = {self.objective:.6f}")
        lines.append(f"aggregate.subjective = {self.subjective:.6f}")
        lines.append(f"aggregate.overall = {self.overall:.6f}")
        return "\n".join(lines) + "\n"


def make_report(per_dim, n_trials, mode, threshold=0.5) -> AccuracyReport:
    obj, subj, overall = aggregate_accuracies(per_dim)
    return AccuracyReport(per_dimension=dict(per_dim), objective=obj,
                          subjective=subj, overall=overall, n_trials=n_trials,
                          mode=mode, threshold=threshold)


@dataclass
class HistoryRow:
    stage: str
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: dict = field(default_factory=dict)


def write_history_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        names = [d.name for d in dims.active_dimensions()]
        writer.writerow(["stage", "epoch", "train_loss", "val_loss"]
                        + [f"val_acc_{n}" for n in names])
        for r in rows:
            accs = [f"{r.val_accuracy.get(d.id, float('nan')):.6f}"
                    for d in dims.active_dimensions()]
            writer.writerow([r.stage, r.epoch, f"{r.train_loss:.6f}",
                             f"{r.val_loss:.6f}"] + accs)


# ---------------------------------------------------------------------------
# Forward helpers


def _batches(n, batch_size, rng=None):
    idx = np.arange(n)
    if rng is not None:
        rng.shuffle(idx)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def _temporal_logits(model, temp_heads, frames, pupil):
    feats = model.temporal.features(frames, pupil)
    logits = []
    for task in range(model.cfg.n_tasks):
        _, fin = model.temporal.task_forward(feats, task)
        logits.append(temp_heads[task](fin))
    return torch.cat(logits, dim=1)


def _check_finite(loss, stage, epoch):
    if not torch.isfinite(loss):
        raise AesthgazeError(
            f"non-finite loss {loss.item()} in {stage} epoch {epoch}")


def _eval_loss_and_acc(forward_fn, data, batch_size, threshold=0.5):
    losses, correct, total = [], None, 0
    with torch.no_grad():
        for idx in _batches(data.n, batch_size):
            logits = forward_fn(data, idx)
            probs = torch.sigmoid(logits)
            y = data.labels[idx]
            losses.append(bce_loss(probs, y).item() * len(idx))
            hits = ((probs > threshold) == (y > 0.5)).to(torch.float64).sum(dim=0)
            correct = hits if correct is None else correct + hits
            total += len(idx)
    per_dim = {d.id: float(correct[d.id] / total)
               for d in dims.active_dimensions()}
    return sum(losses) / total, per_dim


def _run_stage(model, params, forward_fn, train_data, val_data, config,
               stage_name, max_epochs):
    """Shared optimizer loop with early stopping and masked gradients."""
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.betas,
                           eps=config.eps)
    stage_tag = sum(ord(c) for c in stage_name)   # stable across runs
    rng = np.random.default_rng([config.seed, stage_tag])
    mask = getattr(forward_fn, "freeze_mask", None)
    named = dict(model.named_parameters()) if mask else None

    with flush_denormals():
        history = _run_epochs(model, opt, forward_fn, train_data, val_data,
                              config, stage_name, max_epochs, rng, mask, named)
    return history


def _run_epochs(model, opt, forward_fn, train_data, val_data, config,
                stage_name, max_epochs, rng, mask, named):
    history = []
    best_val = math.inf
    best_epoch = -1
    for epoch in range(max_epochs):
        model.train()
        epoch_loss, epoch_hits, epoch_total = 0.0, 0.0, 0
        for idx in _batches(train_data.n, config.batch_size, rng):
            opt.zero_grad()
            logits = forward_fn(train_data, idx)
            probs = torch.sigmoid(logits)
            y = train_data.labels[idx]
            loss = bce_loss(probs, y)
            _check_finite(loss, stage_name, epoch)
            loss.backward()
            if mask:
                for pname, m in mask.items():
                    g = named[pname].grad
                    if g is not None:
                        g[m] = 0.0
            opt.step()
            epoch_loss += loss.item() * len(idx)
            with torch.no_grad():
                epoch_hits += ((probs > 0.5) == (y > 0.5)).float().sum().item()
            epoch_total += len(idx)
        train_loss = epoch_loss / train_data.n
        train_acc = epoch_hits / (epoch_total * model.cfg.n_tasks)

        model.eval()
        val_loss, val_acc = _eval_loss_and_acc(forward_fn, val_data,
                                               config.batch_size)
        history.append(HistoryRow(stage=stage_name, epoch=epoch,
                                  train_loss=train_loss, val_loss=val_loss,
                                  val_accuracy=val_acc))
        if val_loss < best_val - 1e-12:
            best_val, best_epoch = val_loss, epoch
        if (config.stop_train_accuracy is not None
                and train_acc >= config.stop_train_accuracy):
            break
        if epoch - best_epoch >= config.patience:
            break
    return history


# ---------------------------------------------------------------------------
# Stages


def stage1_pretrain(model: AestheticModel, train_data: TrialData,
                    val_data: TrialData, config: TrainConfig):
    """Train the temporal branch with temporary heads; heads are discarded."""
    config.validate()
    cfg = model.cfg
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    temp_heads = nn.ModuleList([
        nn.Sequential(nn.Linear(cfg.lstm_hidden, cfg.head_hidden),
                      nn.ReLU(inplace=True),
                      nn.Linear(cfg.head_hidden, 1))
        for _ in range(cfg.n_tasks)])
    for m in temp_heads.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.weight.shape[1])
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()

    drop_rng = np.random.default_rng([config.seed, 101])
    mean_pupil = train_data.pupil.mean(dim=0, keepdim=True)

    def forward_fn(data, idx):
        pupil = data.pupil[idx]
        if model.training and config.modality_dropout > 0.0:
            drop = torch.from_numpy(
                drop_rng.random(len(idx)) < config.modality_dropout)
            pupil = torch.where(drop[:, None, None, None, None],
                                mean_pupil, pupil)
        return _temporal_logits(model, temp_heads, data.frames[idx], pupil)

    params = list(model.temporal.parameters()) + list(temp_heads.parameters())
    history = _run_stage(model, params, forward_fn, train_data, val_data,
                         config, "stage1", config.stage1_epochs)
    return history


def transfer_lstm(src: nn.LSTM, dst: nn.LSTM, freeze_fraction: float,
                  seed: int, random_mask=False, name_prefix=""):
    """Copy hidden-to-hidden weights/biases, reinit input-to-hidden weights.

    Returns {param name: bool mask} marking the frozen prefix rows of each
    gate block in every transferred hidden-to-hidden matrix.
    """
    if src.hidden_size != dst.hidden_size or src.num_layers != dst.num_layers:
        raise ConfigError(
            f"LSTM shape mismatch: hidden {src.hidden_size} vs "
            f"{dst.hidden_size}, layers {src.num_layers} vs {dst.num_layers}")
    h = dst.hidden_size
    n_freeze = math.ceil(freeze_fraction * h)
    gen = torch.Generator().manual_seed(seed)
    mask = {}
    with torch.no_grad():
        for k in range(dst.num_layers):
            for kind in ("weight_hh", "bias_hh"):
                getattr(dst, f"{kind}_l{k}").copy_(getattr(src, f"{kind}_l{k}"))
            w_ih = getattr(dst, f"weight_ih_l{k}")
            bound = 1.0 / math.sqrt(w_ih.shape[1])
            w_ih.uniform_(-bound, bound, generator=gen)

            w_hh = getattr(dst, f"weight_hh_l{k}")
            m = torch.zeros_like(w_hh, dtype=torch.bool)
            for gate in range(4):
                if random_mask:
                    rows = torch.randperm(h, generator=gen)[:n_freeze]
                else:
                    rows = torch.arange(n_freeze)
                m[gate * h + rows] = True
            mask[f"{name_prefix}weight_hh_l{k}"] = m
    dst.flatten_parameters()
    return mask


def stage2_transfer(model: AestheticModel, config: TrainConfig):
    """Hidden-to-hidden transfer from the temporal to the spatial shared LSTM."""
    return transfer_lstm(model.temporal.shared_lstm, model.spatial.shared_lstm,
                         config.freeze_fraction, seed=config.seed + 2,
                         random_mask=config.random_freeze_mask,
                         name_prefix="spatial.shared_lstm.")


def stage3_joint_finetune(model: AestheticModel, freeze_mask: dict,
                          train_data: TrialData, val_data: TrialData,
                          config: TrainConfig):
    """Joint fine-tuning of both branches with masked gradients."""
    config.validate()
    torch.manual_seed(config.seed + 3)
    drop_rng = np.random.default_rng([config.seed, 103])
    mean_pupil = train_data.pupil.mean(dim=0, keepdim=True)
    mean_attn = train_data.attn.mean(dim=0, keepdim=True)

    def forward_fn(data, idx):
        pupil, attn = data.pupil[idx], data.attn[idx]
        if model.training and config.modality_dropout > 0.0:
            # both gaze modalities drop together, mirroring deployment
            drop = torch.from_numpy(
                drop_rng.random(len(idx)) < config.modality_dropout)
            sel = drop[:, None, None, None, None]
            pupil = torch.where(sel, mean_pupil, pupil)
            attn = torch.where(sel, mean_attn, attn)
        return model(data.frames[idx], pupil, attn)

    forward_fn.freeze_mask = freeze_mask
    history = _run_stage(model, list(model.parameters()), forward_fn,
                         train_data, val_data, config, "stage3",
                         config.stage3_epochs)
    return history


def compute_modality_stats(train_data: TrialData) -> ModalityStats:
    return ModalityStats(
        mean_pupil=train_data.pupil.mean(dim=0).numpy(),
        mean_attn=train_data.attn.mean(dim=0).numpy())


def train_full_pipeline(model_cfg: ModelConfig, config: TrainConfig,
                        train_data: TrialData, val_data: TrialData):
    """Run all three stages; returns (model, history, stats, freeze_mask)."""
    model = init_model(model_cfg, config.seed)
    history = list(stage1_pretrain(model, train_data, val_data, config))
    freeze_mask = stage2_transfer(model, config)
    history += stage3_joint_finetune(model, freeze_mask, train_data, val_data,
                                     config)
    stats = compute_modality_stats(train_data)
    return model, history, stats, freeze_mask


# ---------------------------------------------------------------------------
# Evaluation and ablations


def evaluate(model: AestheticModel, data: TrialData, mode=FULL_MULTIMODAL,
             stats: ModalityStats = None, threshold=0.5,
             batch_size=4) -> AccuracyReport:
    if data.n == 0:
        raise ValidationError("cannot evaluate on an empty trial set")
    model.eval()

    def forward_fn(d, idx):
        pupil, attn = apply_mode(d.pupil[idx], d.attn[idx], mode, stats)
        return model(d.frames[idx], pupil, attn)

    with flush_denormals():
        _, per_dim = _eval_loss_and_acc(forward_fn, data, batch_size,
                                        threshold)
    return make_report(per_dim, data.n, mode, threshold)


def run_ablation_variant(variant: str, model_cfg: ModelConfig,
                         config: TrainConfig, train_data: TrialData,
                         val_data: TrialData, test_data: TrialData):
    """Train and evaluate one ablation variant.

    The removed modality is zeroed in training and evaluation alike. Callers
    that load data from disk should pass data loaded with the matching
    use_pupil / use_attn flags so the gaze files are never opened.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    zero_pupil = variant in ("no_pupil", "neither")
    zero_attn = variant in ("no_attention", "neither")

    def prep(d):
        return d.zero_modalities(zero_pupil=zero_pupil, zero_attn=zero_attn)

    model, history, stats, _ = train_full_pipeline(
        model_cfg, config, prep(train_data), prep(val_data))
    report = evaluate(model, prep(test_data), FULL_MULTIMODAL,
                      batch_size=config.batch_size)
    return model, history, stats, report


def ablation_grid(model_cfg, config, train_data, val_data, test_data,
                  variants=VARIANTS) -> dict:
    """Objective/subjective accuracy per ablation variant."""
    grid = {}
    for variant in variants:
        _, _, _, report = run_ablation_variant(
            variant, model_cfg, config, train_data, val_data, test_data)
        grid[variant] = (report.objective, report.subjective)
    return grid


def format_ablation_table(grid: dict) -> str:
    lines = ["method\tobjective_accuracy\tsubjective_accuracy"]
    for variant in VARIANTS:
        if variant in grid:
            obj, subj = grid[variant]
            lines.append(f"{VARIANT_LABELS[variant]}\t{obj:.3f}\t{subj:.3f}")
    return "\n".join(lines) + "\n"
