"""Raw trial -> model-ready sample conversion.

Per trial this module
  * z-scores ratings per participant and binarizes them,
  * cleans the pupil trace (blink interpolation, resampling, smoothing,
    baseline subtraction),
  * encodes 1-second pupil windows as 2-channel GASF/MTF images,
  * renders 1-second gaze histograms into Gaussian-blurred attention maps,
  * subsamples video frames at 1 fps and aligns all streams.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from . import dims
from .accel import splat_points, transition_counts
from .arrayio import read_array, write_array
from .config import ScreenGeometry, StimulusConfig
from .errors import AlignmentError, QualityError, ValidationError

# ---------------------------------------------------------------------------
# Label normalization


@dataclass
class NormalizedLabelTable:
    z: dict          # (participant, video, dim id) -> z-score
    binary: dict     # (participant, video) -> np.ndarray of 15 {0,1}
    stats: dict      # (participant, dim id) -> (mean, population std)


def normalize_and_binarize(records) -> NormalizedLabelTable:
    """Per-participant z-scoring of ratings, binarized at z > 0.

    Ties (z == 0, which includes every zero-variance participant/dimension
    pair) fall back to the raw scale midpoint: label 1 iff raw rating > 4.
    """
    by_participant = {}
    for r in records:
        by_participant.setdefault(r.participant_id, []).append(r)

    active = dims.active_dimensions()
    z, binary, stats = {}, {}, {}
    for pid, trials in by_participant.items():
        if len(trials) < 2:
            raise ValidationError(
                f"participant {pid!r} has {len(trials)} trial(s); "
                "need >= 2 to define a rating std")
        for d in active:
            vals = np.array([t.ratings[d.id] for t in trials], dtype=np.float64)
            mu = float(vals.mean())
            sigma = float(vals.std())  # population std: deterministic for 2 trials
            stats[(pid, d.id)] = (mu, sigma)
            for t, raw in zip(trials, vals):
                zv = 0.0 if sigma == 0.0 else (raw - mu) / sigma
                z[(pid, t.video_id, d.id)] = zv
        for t in trials:
            lab = np.zeros(dims.N_ACTIVE, dtype=np.float32)
            for d in active:
                zv = z[(pid, t.video_id, d.id)]
                if zv > 0:
                    lab[d.id] = 1.0
                elif zv == 0.0:
                    lab[d.id] = 1.0 if t.ratings[d.id] > 4 else 0.0
            binary[(pid, t.video_id)] = lab
    return NormalizedLabelTable(z=z, binary=binary, stats=stats)


# ---------------------------------------------------------------------------
# Pupil cleaning


@dataclass(frozen=True)
class PupilCleanConfig:
    min_mm: float = 1.5
    max_mm: float = 9.0
    max_gap_s: float = 0.075     # blink gaps up to this length are interpolated
    smooth_s: float = 0.1        # moving-average width (rounded to odd samples)
    baseline_s: float = 0.5
    min_valid_fraction: float = 0.5


@dataclass
class CleanPupilTrace:
    values: np.ndarray            # baseline-corrected mm, uniform grid
    interpolated_mask: np.ndarray
    baseline_mm: float


def clean_pupil(gaze, stim: StimulusConfig = None,
                cfg: PupilCleanConfig = None) -> CleanPupilTrace:
    """Clean and resample a pupil trace to a uniform grid.

    Samples flagged invalid or outside the physiological range are dropped.
    Gaps up to ``max_gap_s`` are linearly interpolated, longer gaps take the
    trace median, then the trace is smoothed and baseline-corrected with the
    mean of the first ``baseline_s`` seconds.
    """
    stim = stim or StimulusConfig()
    cfg = cfg or PupilCleanConfig()
    fs = stim.gaze_hz
    n = stim.n_gaze

    t = np.asarray(gaze.t, dtype=np.float64)
    pupil = np.asarray(gaze.pupil_mm, dtype=np.float64)
    ok = (np.asarray(gaze.valid, dtype=bool)
          & np.isfinite(pupil)
          & (pupil >= cfg.min_mm) & (pupil <= cfg.max_mm))

    total = max(len(t), 1)
    frac = float(ok.sum()) / total
    if frac < cfg.min_valid_fraction:
        raise QualityError(
            f"only {frac:.1%} of pupil samples are valid "
            f"(threshold {cfg.min_valid_fraction:.0%})", valid_fraction=frac)

    # Snap samples to the uniform grid (nominal rate with possible jitter).
    grid = np.full(n, np.nan)
    idx = np.round(t[ok] * fs).astype(np.int64)
    keep = (idx >= 0) & (idx < n)
    grid[idx[keep]] = pupil[ok][keep]

    present = np.isfinite(grid)
    if not present.any():
        raise QualityError("no pupil samples fall inside the stimulus window",
                           valid_fraction=0.0)
    median = float(np.median(grid[present]))

    values = grid.copy()
    interpolated = ~present
    max_gap = int(round(cfg.max_gap_s * fs))
    i = 0
    while i < n:
        if present[i]:
            i += 1
            continue
        j = i
        while j < n and not present[j]:
            j += 1
        gap = j - i
        left = i - 1
        if gap <= max_gap and left >= 0 and j < n:
            # linear bridge between the flanking valid samples
            v0, v1 = grid[left], grid[j]
            for k in range(i, j):
                w = (k - left) / (j - left)
                values[k] = v0 + w * (v1 - v0)
        else:
            values[i:j] = median
        i = j

    # Centered moving average, width rounded to the nearest odd sample count.
    half = max(1, round(cfg.smooth_s * fs / 2))
    win = 2 * half + 1
    padded = np.pad(values, half, mode="edge")
    kernel = np.full(win, 1.0 / win)
    smoothed = np.convolve(padded, kernel, mode="valid")

    nb = max(1, int(round(cfg.baseline_s * fs)))
    baseline = float(smoothed[:nb].mean())
    return CleanPupilTrace(values=(smoothed - baseline).astype(np.float64),
                           interpolated_mask=interpolated,
                           baseline_mm=baseline)


# ---------------------------------------------------------------------------
# Time-series imaging


def paa(series, size: int) -> np.ndarray:
    """Piecewise aggregate approximation by exact fractional segment means."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if size <= 0:
        raise ValidationError("paa size must be positive")
    # Repeating each sample `size` times makes every segment an integer slice.
    return np.repeat(x, size).reshape(size, n).mean(axis=1)


def gaf(window) -> np.ndarray:
    """Gramian angular summation field of one window.

    Rescales to [-1, 1], maps to angles via arccos and returns
    cos(phi_i + phi_j). A constant window maps to the all -1 matrix.
    """
    x = np.asarray(window, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("gaf: window contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        scaled = np.zeros_like(x)
    else:
        scaled = 2.0 * (x - lo) / (hi - lo) - 1.0
    phi = np.arccos(np.clip(scaled, -1.0, 1.0))
    return np.cos(np.add.outer(phi, phi))


def quantile_bins(window, q: int) -> np.ndarray:
    """Assign each sample to one of ``q`` per-window quantile bins."""
    x = np.asarray(window, dtype=np.float64)
    edges = np.quantile(x, np.arange(1, q) / q)
    return np.searchsorted(edges, x, side="right")


def mtf(window, q: int = 8) -> np.ndarray:
    """Markov transition field of one window with ``q`` quantile bins."""
    x = np.asarray(window, dtype=np.float64)
    if len(x) < 2:
        raise ValidationError("mtf: window needs >= 2 samples")
    if q < 2:
        raise ValidationError("mtf: need >= 2 bins")
    if not np.all(np.isfinite(x)):
        raise ValidationError("mtf: window contains non-finite values")
    bins = quantile_bins(x, q)
    counts = transition_counts(bins, q)
    row_sums = counts.sum(axis=1, keepdims=True)
    w = np.where(row_sums > 0, counts / np.where(row_sums == 0, 1, row_sums),
                 1.0 / q)
    return w[np.ix_(bins, bins)]


@dataclass
class PupilImageSequence:
    images: np.ndarray       # (T, 2, S, S) float32; ch 0 GASF, ch 1 MTF
    window_seconds: float = 1.0


def pupil_image_sequence(trace: CleanPupilTrace, stim: StimulusConfig = None,
                         image_size: int = 32, mtf_bins: int = 8) -> PupilImageSequence:
    """Encode each 1-second pupil window as a stacked GASF/MTF image."""
    stim = stim or StimulusConfig()
    n = stim.n_gaze
    if len(trace.values) != n:
        raise AlignmentError(
            f"pupil trace length {len(trace.values)}, expected {n}")
    per_win = stim.gaze_hz
    t_windows = stim.n_windows
    out = np.empty((t_windows, 2, image_size, image_size), dtype=np.float32)
    for w in range(t_windows):
        seg = trace.values[w * per_win:(w + 1) * per_win]
        reduced = paa(seg, image_size)
        out[w, 0] = gaf(reduced)
        out[w, 1] = mtf(reduced, mtf_bins)
    return PupilImageSequence(images=out, window_seconds=1.0)


# ---------------------------------------------------------------------------
# Attention maps


def sigma_pixels(geometry: ScreenGeometry) -> float:
    """Pixels subtended by 1 degree of visual angle on this screen."""
    geometry.validate()
    diag_cm = geometry.diagonal_inches * 2.54
    diag_px = math.hypot(geometry.width_px, geometry.height_px)
    pitch_cm = diag_cm / diag_px           # square pixels assumed
    extent_cm = 2.0 * geometry.viewing_distance_cm * math.tan(math.radians(0.5))
    return extent_cm / pitch_cm


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Isotropic 2-D Gaussian truncated at radius 3*sigma, renormalized."""
    r = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


@dataclass
class AttentionMapSequence:
    maps: np.ndarray       # (T, 1, H', W') float32
    sigma_px: float


def attention_maps(gaze, sigma_px: float,
                   stim: StimulusConfig = None) -> AttentionMapSequence:
    """Per-second gaze histograms blurred at ~1 degree and mass-normalized.

    Accumulation happens at full screen resolution; the result is block-mean
    downsampled to the working resolution (screen size must be an integer
    multiple of it) and normalized to unit mass. Windows without any valid
    sample stay all-zero.
    """
    stim = stim or StimulusConfig()
    if sigma_px <= 0:
        raise ValidationError("sigma_px must be positive")
    g = stim.geometry
    fy, fx = divmod(g.height_px, stim.work_h), divmod(g.width_px, stim.work_w)
    if fy[1] or fx[1]:
        raise ValidationError(
            "screen resolution must be an integer multiple of the working "
            f"resolution ({g.width_px}x{g.height_px} vs {stim.work_w}x{stim.work_h})")
    fy, fx = fy[0], fx[0]

    kernel = gaussian_kernel(sigma_px)
    t = np.asarray(gaze.t)
    x = np.asarray(gaze.x)
    y = np.asarray(gaze.y)
    ok = (np.asarray(gaze.valid, dtype=bool)
          & (x >= 0) & (x < g.width_px) & (y >= 0) & (y < g.height_px))

    maps = np.zeros((stim.n_windows, 1, stim.work_h, stim.work_w), dtype=np.float32)
    for w in range(stim.n_windows):
        sel = ok & (t >= w) & (t < w + 1)
        if not sel.any():
            continue
        acc = np.zeros((g.height_px, g.width_px), dtype=np.float64)
        splat_points(acc, np.round(x[sel]).astype(np.int64),
                     np.round(y[sel]).astype(np.int64), kernel)
        small = acc.reshape(stim.work_h, fy, stim.work_w, fx).mean(axis=(1, 3))
        total = small.sum()
        if total > 0:
            maps[w, 0] = (small / total).astype(np.float32)
    return AttentionMapSequence(maps=maps, sigma_px=float(sigma_px))


# ---------------------------------------------------------------------------
# Alignment


@dataclass
class AlignedSample:
    frames: np.ndarray            # (T, 3, H', W') float32 in [0, 1]
    pupil_images: PupilImageSequence
    attention_maps: AttentionMapSequence
    labels: np.ndarray            # 15 binary values
    participant_id: str
    video_id: str


def subsample_frames(frames, stim: StimulusConfig = None) -> np.ndarray:
    """Pick the middle frame of each second, resize and scale to [0, 1]."""
    stim = stim or StimulusConfig()
    t_raw = frames.shape[0]
    if t_raw == 0:
        raise AlignmentError("empty frame stack")
    out = np.empty((stim.n_windows, 3, stim.work_h, stim.work_w), dtype=np.float32)
    for w in range(stim.n_windows):
        idx = min(stim.fps * w + stim.fps // 2, t_raw - 1)
        frame = frames[idx]
        if frame.shape[0] != stim.work_h or frame.shape[1] != stim.work_w:
            frame = cv2.resize(frame, (stim.work_w, stim.work_h),
                               interpolation=cv2.INTER_AREA)
        out[w] = (frame.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return out


def align(record, labels, pupil_images: PupilImageSequence,
          attention_maps_seq: AttentionMapSequence,
          stim: StimulusConfig = None) -> AlignedSample:
    stim = stim or StimulusConfig()
    frames = subsample_frames(record.frames, stim)
    t = stim.n_windows
    if pupil_images.images.shape[0] != t:
        raise AlignmentError(
            f"pupil image sequence has {pupil_images.images.shape[0]} windows, "
            f"expected {t}")
    if attention_maps_seq.maps.shape[0] != t:
        raise AlignmentError(
            f"attention map sequence has {attention_maps_seq.maps.shape[0]} "
            f"windows, expected {t}")
    labels = np.asarray(labels, dtype=np.float32)
    if labels.shape != (dims.N_ACTIVE,):
        raise AlignmentError(f"labels must have shape ({dims.N_ACTIVE},)")
    return AlignedSample(frames=frames, pupil_images=pupil_images,
                         attention_maps=attention_maps_seq, labels=labels,
                         participant_id=record.participant_id,
                         video_id=record.video_id)


# ---------------------------------------------------------------------------
# Whole-manifest driver and on-disk layout


def preprocess_record(record, labels, stim: StimulusConfig = None,
                      clean_cfg: PupilCleanConfig = None) -> AlignedSample:
    stim = stim or StimulusConfig()
    trace = clean_pupil(record.gaze, stim, clean_cfg)
    pupil_imgs = pupil_image_sequence(trace, stim)
    sig = sigma_pixels(stim.geometry)
    attn = attention_maps(record.gaze, sig, stim)
    return align(record, labels, pupil_imgs, attn, stim)


def save_aligned(sample: AlignedSample, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "frames.arr", sample.frames)
    write_array(out / "pupil.arr", sample.pupil_images.images)
    write_array(out / "attn.arr", sample.attention_maps.maps)
    write_array(out / "labels.arr", sample.labels)
    meta = {
        "participant_id": sample.participant_id,
        "video_id": sample.video_id,
        "sigma_px": sample.attention_maps.sigma_px,
        "window_seconds": sample.pupil_images.window_seconds,
        "pupil_shape": list(sample.pupil_images.images.shape),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_aligned(sample_dir, use_pupil=True, use_attn=True) -> AlignedSample:
    """Load an aligned sample; disabled modalities are zero-filled and their
    files are never opened."""
    d = Path(sample_dir)
    meta = json.loads((d / "meta.json").read_text())
    frames = read_array(d / "frames.arr", dtype=np.float32)
    labels = read_array(d / "labels.arr", dtype=np.float32)
    t = frames.shape[0]
    if use_pupil:
        pupil = read_array(d / "pupil.arr", dtype=np.float32)
    else:
        pupil = None
    if use_attn:
        attn = read_array(d / "attn.arr", dtype=np.float32)
    else:
        attn = np.zeros((t, 1, frames.shape[2], frames.shape[3]), dtype=np.float32)
    if pupil is None:
        pupil = np.zeros(meta.get("pupil_shape", (t, 2, 32, 32)), dtype=np.float32)
    return AlignedSample(
        frames=frames,
        pupil_images=PupilImageSequence(images=pupil,
                                        window_seconds=meta["window_seconds"]),
        attention_maps=AttentionMapSequence(maps=attn, sigma_px=meta["sigma_px"]),
        labels=labels,
        participant_id=meta["participant_id"],
        video_id=meta["video_id"],
    )
