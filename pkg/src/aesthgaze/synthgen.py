"""Procedural multimodal dataset with known ground truth.

Scenes are camera pans over colored rectangles ("furniture") on a background
whose luminance encodes brightness. Simulated observers pursue salient
rectangles with noisy gaze, their pupil couples to local luminance (light
reflex) and to a latent interest signal, and their ratings mix scene
parameters with gaze/pupil latents. Subjective ratings deliberately depend on
latents that are only observable through the gaze and pupil channels, so that
training with those channels carries extra signal.
"""

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import dims
from .accel import pursuit
from .arrayio import write_array
from .config import StimulusConfig
from .errors import ValidationError
from .records import DatasetManifest, GazeTrace, RecordRef, write_manifest


@dataclass(frozen=True)
class SceneParams:
    brightness: float          # background luminance in [0, 1]
    clutter_count: int         # number of rectangles, 0..12
    alignment: float           # grid-snap strength in [0, 1]
    natural_fraction: float    # share of wood/green rectangles in [0, 1]
    style_seed: int

    def validate(self):
        if not 0.0 <= self.brightness <= 1.0:
            raise ValidationError("brightness must be in [0, 1]")
        if not 0 <= self.clutter_count <= 12:
            raise ValidationError("clutter_count must be in 0..12")
        if not 0.0 <= self.alignment <= 1.0:
            raise ValidationError("alignment must be in [0, 1]")
        if not 0.0 <= self.natural_fraction <= 1.0:
            raise ValidationError("natural_fraction must be in [0, 1]")
        return self


@dataclass(frozen=True)
class SimObserver:
    participant_id: str
    rating_bias: tuple         # per active dimension, integer offsets
    gaze_noise_px: float       # screen pixels
    pupil_gain: float


@dataclass
class Rect:
    x0: int
    y0: int
    x1: int
    y1: int
    color: tuple
    natural: bool
    salience: float

    @property
    def center(self):
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


_NATURAL_PALETTE = [(115, 74, 38), (139, 94, 52), (70, 110, 45), (95, 130, 70)]


@dataclass
class SceneWorld:
    """Pre-rendered panorama the camera pans across."""

    image: np.ndarray          # (H, W_world, 3) uint8
    rects: list
    params: SceneParams
    stim: StimulusConfig

    @property
    def pan_range(self):
        return self.image.shape[1] - self.stim.work_w

    def offset_at(self, time_s: float) -> int:
        return int(round(self.pan_range * min(max(time_s / self.stim.duration_s, 0.0), 1.0)))

    def frame_at(self, index: int) -> np.ndarray:
        t_raw = self.stim.n_frames
        o = int(round(self.pan_range * index / max(t_raw - 1, 1)))
        return self.image[:, o:o + self.stim.work_w]

    def frames(self) -> np.ndarray:
        return np.stack([self.frame_at(i) for i in range(self.stim.n_frames)])

    def luminance_profile(self) -> np.ndarray:
        """Mean luminance of the visible window per gaze tick, in [0, 1]."""
        col = self.image.mean(axis=(0, 2)) / 255.0
        prefix = np.concatenate([[0.0], np.cumsum(col)])
        w = self.stim.work_w
        n = self.stim.n_gaze
        out = np.empty(n)
        for i in range(n):
            o = self.offset_at(i / self.stim.gaze_hz)
            out[i] = (prefix[o + w] - prefix[o]) / w
        return out


def render_world(params: SceneParams, stim: StimulusConfig = None) -> SceneWorld:
    """Deterministically rasterize the panorama for one scene."""
    params.validate()
    stim = stim or StimulusConfig()
    rng = np.random.default_rng(params.style_seed)
    h, w = stim.work_h, stim.work_w
    world_w = 2 * w

    bg = int(round(20 + 235 * params.brightness))
    image = np.full((h, world_w, 3), bg, dtype=np.uint8)

    n_natural = int(round(params.natural_fraction * params.clutter_count))
    grid = max(h // 6, 1)
    rects = []
    for i in range(params.clutter_count):
        rw = int(rng.integers(max(w // 10, 4), max(w // 3, 6)))
        rh = int(rng.integers(max(h // 8, 4), max(h // 2, 6)))
        x0 = float(rng.integers(0, max(world_w - rw, 1)))
        y0 = float(rng.integers(0, max(h - rh, 1)))
        # alignment interpolates toward grid-snapped positions
        x0 = int(round((1 - params.alignment) * x0 + params.alignment * (round(x0 / grid) * grid)))
        y0 = int(round((1 - params.alignment) * y0 + params.alignment * (round(y0 / grid) * grid)))
        x0 = min(x0, world_w - rw)
        y0 = min(y0, h - rh)
        if i < n_natural:
            base = _NATURAL_PALETTE[int(rng.integers(0, len(_NATURAL_PALETTE)))]
            jitter = rng.integers(-15, 16, size=3)
            color = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(base, jitter))
            natural = True
        else:
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            natural = False
        contrast = float(np.linalg.norm(np.array(color, dtype=np.float64) - bg)) / 441.7
        area = (rw * rh) / float(h * world_w)
        rect = Rect(x0, y0, x0 + rw, y0 + rh, color, natural,
                    salience=0.2 + area * 4.0 + contrast)
        image[y0:y0 + rh, x0:x0 + rw] = color
        # darker 1px border so edge density tracks clutter
        border = tuple(int(c * 0.5) for c in color)
        image[y0, x0:x0 + rw] = border
        image[y0 + rh - 1, x0:x0 + rw] = border
        image[y0:y0 + rh, x0] = border
        image[y0:y0 + rh, x0 + rw - 1] = border
        rects.append(rect)
    return SceneWorld(image=image, rects=rects, params=params, stim=stim)


def gen_scene(params: SceneParams, stim: StimulusConfig = None) -> np.ndarray:
    """Render the full frame stack (T_raw, H, W, 3) uint8."""
    return render_world(params, stim).frames()


@dataclass
class GazeSim:
    trace: GazeTrace
    latents: dict


def gen_gaze(world: SceneWorld, observer: SimObserver, seed) -> GazeSim:
    """Simulate noisy pursuit gaze, blinks and the pupil trace at 60 Hz."""
    stim = world.stim
    g = stim.geometry
    rng = np.random.default_rng(seed)
    n = stim.n_gaze
    hz = stim.gaze_hz
    scale_x = g.width_px / stim.work_w
    scale_y = g.height_px / stim.work_h
    center = np.array([g.width_px / 2.0, g.height_px / 2.0])

    sal_max = max((r.salience for r in world.rects), default=1.0)

    # Dwell schedule: pick visible rectangles with probability and duration
    # proportional to salience; fall back to screen center.
    targets = np.empty((n, 2))
    interest = np.zeros(n)
    natural_target = np.zeros(n, dtype=bool)
    i = 0
    while i < n:
        t_s = i / hz
        off = world.offset_at(t_s)
        visible = [r for r in world.rects
                   if off <= r.center[0] < off + stim.work_w]
        if visible:
            sal = np.array([r.salience for r in visible])
            rect = visible[int(rng.choice(len(visible), p=sal / sal.sum()))]
            sal_norm = rect.salience / sal_max
            dwell = float(np.clip(0.4 + 1.6 * sal_norm + rng.exponential(0.3), 0.3, 3.0))
        else:
            rect, sal_norm, dwell = None, 0.0, float(rng.uniform(0.5, 1.5))
        steps = min(n - i, max(int(round(dwell * hz)), 1))
        for k in range(i, i + steps):
            off_k = world.offset_at(k / hz)
            if rect is None:
                targets[k] = center
            else:
                cx, cy = rect.center
                targets[k] = ((cx - off_k) * scale_x, cy * scale_y)
                natural_target[k] = rect.natural
            interest[k] = sal_norm
        i += steps

    noise = rng.normal(0.0, observer.gaze_noise_px, size=(n, 2))
    xy = pursuit(targets, 0.25, noise, center)
    xy[:, 0] = np.clip(xy[:, 0], 0, g.width_px - 1)
    xy[:, 1] = np.clip(xy[:, 1], 0, g.height_px - 1)

    lum = world.luminance_profile()
    ar = np.empty(n)
    acc = 0.0
    innov = rng.normal(0.0, 0.02, size=n)
    for k in range(n):
        acc = 0.95 * acc + innov[k]
        ar[k] = acc
    pupil = 4.0 + observer.pupil_gain * (0.8 * (1.0 - lum) + 0.4 * interest) + ar

    valid = np.ones(n, dtype=bool)
    n_blinks = rng.poisson(0.1 * stim.duration_s)
    for _ in range(n_blinks):
        start = int(rng.integers(0, n))
        length = int(round(rng.uniform(0.1, 0.3) * hz))
        valid[start:start + length] = False
    pupil = np.where(valid, pupil, 0.0)

    t = np.arange(n) / hz
    trace = GazeTrace(t, xy[:, 0], xy[:, 1], pupil, valid)
    latents = {
        "interest_mean": float(interest.mean()),
        "natural_dwell": float(natural_target.mean()),
        "dispersion": float(np.std(xy[:, 0]) / g.width_px
                            + np.std(xy[:, 1]) / g.height_px),
    }
    return GazeSim(trace=trace, latents=latents)


_OBJECTIVE_VALUE = {
    0: lambda p: p.brightness,
    1: lambda p: p.clutter_count / 12.0,
    2: lambda p: p.alignment,
    3: lambda p: p.natural_fraction,
}


def _scene_score(params: SceneParams, dim_id: int) -> float:
    """Fixed per-dimension mixture of scene parameters for subjective dims."""
    rng = np.random.default_rng(7000 + dim_id)
    coef = rng.dirichlet(np.ones(4))
    feats = np.array([params.brightness, 1.0 - params.clutter_count / 12.0,
                      params.alignment, params.natural_fraction])
    return float(coef @ feats)


def gen_labels(params: SceneParams, observer: SimObserver, latents: dict,
               seed) -> dict:
    """Ratings 1..7 per active dimension.

    Objective dimensions are monotone deterministic maps of scene parameters;
    subjective dimensions mix scene terms with gaze/pupil latents so part of
    their signal is invisible to a video-only observer.
    """
    rng = np.random.default_rng(seed)
    ratings = {}
    for d in dims.active_dimensions():
        bias = observer.rating_bias[d.id]
        if d.id in _OBJECTIVE_VALUE:
            v = _OBJECTIVE_VALUE[d.id](params)
        else:
            v = (0.25 * _scene_score(params, d.id)
                 + 0.45 * latents["interest_mean"]
                 + 0.30 * latents["natural_dwell"]
                 + rng.normal(0.0, 0.04))
        raw = int(round(1 + 6 * min(max(v, 0.0), 1.0)))
        ratings[d.id] = int(np.clip(raw + bias, 1, 7))
    return ratings


def make_observer(participant_id: str, rng) -> SimObserver:
    bias = tuple(int(b) for b in rng.integers(-1, 2, size=dims.N_ACTIVE))
    return SimObserver(participant_id=participant_id, rating_bias=bias,
                       gaze_noise_px=float(rng.uniform(10.0, 40.0)),
                       pupil_gain=float(rng.uniform(0.7, 1.3)))


def make_scene_params(video_index: int, rng) -> SceneParams:
    return SceneParams(
        brightness=float(rng.uniform(0.05, 0.95)),
        clutter_count=int(rng.integers(1, 13)),
        alignment=float(rng.uniform(0.0, 1.0)),
        natural_fraction=float(rng.uniform(0.0, 1.0)),
        style_seed=int(rng.integers(0, 2**31)),
    )


@dataclass
class SimTrial:
    observer: SimObserver
    params: SceneParams
    world: SceneWorld
    gaze: GazeSim
    ratings: dict


def simulate_trial(params: SceneParams, observer: SimObserver, seed,
                   stim: StimulusConfig = None,
                   world: SceneWorld = None) -> SimTrial:
    """Everything but materialized frames; cheap enough for probe studies."""
    stim = stim or StimulusConfig()
    world = world or render_world(params, stim)
    gaze = gen_gaze(world, observer, seed)
    ratings = gen_labels(params, observer, gaze.latents,
                         np.random.default_rng([seed, 1]).integers(0, 2**31))
    return SimTrial(observer=observer, params=params, world=world, gaze=gaze,
                    ratings=ratings)


def gen_dataset(n_participants: int, n_videos: int, seed: int, out_dir,
                stim: StimulusConfig = None,
                videos_per_participant: int = 8) -> DatasetManifest:
    """Write a complete synthetic dataset and its manifest to ``out_dir``."""
    if n_participants < 3:
        raise ValidationError("need at least 3 participants")
    stim = (stim or StimulusConfig()).validate()
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "gaze").mkdir(exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)

    root_rng = np.random.default_rng(seed)
    scenes = [make_scene_params(v, np.random.default_rng([seed, 100, v]))
              for v in range(n_videos)]
    worlds = [render_world(p, stim) for p in scenes]
    for v, world in enumerate(worlds):
        write_array(out / "videos" / f"V{v:03d}.arr", world.frames())

    refs = []
    for p in range(n_participants):
        pid = f"P{p:03d}"
        observer = make_observer(pid, np.random.default_rng([seed, 200, p]))
        k = min(videos_per_participant, n_videos)
        chosen = sorted(root_rng.choice(n_videos, size=k, replace=False).tolist())
        for v in chosen:
            vid = f"V{v:03d}"
            trial_seed = int(np.random.default_rng([seed, 300, p, v]).integers(0, 2**31))
            trial = simulate_trial(scenes[v], observer, trial_seed, stim,
                                   world=worlds[v])
            gaze_path = f"gaze/{pid}_{vid}.csv"
            trial.gaze.trace.save_csv(out / gaze_path)
            truth = {
                "params": asdict(scenes[v]),
                "latents": trial.gaze.latents,
                "ratings": {str(k2): v2 for k2, v2 in trial.ratings.items()},
                "observer": {
                    "rating_bias": list(observer.rating_bias),
                    "gaze_noise_px": observer.gaze_noise_px,
                    "pupil_gain": observer.pupil_gain,
                },
            }
            (out / "truth" / f"{pid}_{vid}.json").write_text(
                json.dumps(truth, sort_keys=True, indent=1))
            refs.append(RecordRef(pid, vid, f"videos/{vid}.arr", gaze_path,
                                  trial.ratings))

    manifest = DatasetManifest(records=refs, geometry=stim.geometry, root=out)
    write_manifest(out / "manifest.txt", manifest)
    return manifest
