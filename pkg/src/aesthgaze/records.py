"""Dataset records: gaze traces, trial records, and the manifest file.

The manifest is a flat, diff-able text format::

    schema_version = 1

    [geometry]
    width_px = 1920
    height_px = 1080
    diagonal_inches = 27.0
    viewing_distance_cm = 65.0

    [record]
    participant = P00
    video = V00
    frames = videos/V00.arr
    gaze = gaze/P00_V00.csv
    ratings = 5 3 4 6 2 5 4 4 3 5 6 5 4 3 5

``ratings`` lists the 15 active dimensions in id order. Paths are relative to
the manifest's directory. Gaze files are CSV with header t,x,y,pupil_mm,valid.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dims
from .arrayio import read_array, _notify_read
from .config import ScreenGeometry
from .errors import ValidationError

SCHEMA_VERSION = "1"

GAZE_CSV_HEADER = "t,x,y,pupil_mm,valid"


@dataclass(frozen=True)
class GazeSample:
    t: float
    x: float
    y: float
    pupil_mm: float
    valid: bool


class GazeTrace:
    """Columnar gaze recording; the array-backed form of a GazeSample list."""

    def __init__(self, t, x, y, pupil_mm, valid):
        self.t = np.asarray(t, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.pupil_mm = np.asarray(pupil_mm, dtype=np.float64)
        self.valid = np.asarray(valid, dtype=bool)
        n = len(self.t)
        if not all(len(a) == n for a in (self.x, self.y, self.pupil_mm, self.valid)):
            raise ValidationError("gaze columns must share one length")
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise ValidationError("gaze timestamps must be nondecreasing")

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield GazeSample(self.t[i], self.x[i], self.y[i],
                             self.pupil_mm[i], bool(self.valid[i]))

    @staticmethod
    def from_samples(samples):
        return GazeTrace(
            [s.t for s in samples], [s.x for s in samples], [s.y for s in samples],
            [s.pupil_mm for s in samples], [s.valid for s in samples],
        )

    def save_csv(self, path):
        with open(path, "w") as f:
            f.write(GAZE_CSV_HEADER + "\n")
            for i in range(len(self)):
                f.write("%.6f,%.3f,%.3f,%.4f,%d\n" % (
                    self.t[i], self.x[i], self.y[i], self.pupil_mm[i],
                    int(self.valid[i])))

    @staticmethod
    def load_csv(path):
        _notify_read(path)
        try:
            data = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        except OSError:
            raise ValidationError(f"gaze file not found: {path}") from None
        if data.size == 0:
            return GazeTrace([], [], [], [], [])
        if data.shape[1] != 5:
            raise ValidationError(f"gaze CSV {path} must have 5 columns")
        return GazeTrace(data[:, 0], data[:, 1], data[:, 2], data[:, 3],
                         data[:, 4] > 0.5)


@dataclass
class SequenceRecord:
    """One participant x video trial, fully materialized."""

    participant_id: str
    video_id: str
    frames: np.ndarray          # (T_raw, H, W, 3) uint8
    gaze: GazeTrace
    ratings: dict               # dimension id -> int 1..7


@dataclass(frozen=True)
class RecordRef:
    """Manifest entry pointing at a trial's files on disk."""

    participant_id: str
    video_id: str
    frames_path: str
    gaze_path: str
    ratings: dict

    def load(self, root: Path) -> SequenceRecord:
        frames = read_array(Path(root) / self.frames_path, dtype=np.uint8)
        gaze = GazeTrace.load_csv(Path(root) / self.gaze_path)
        return SequenceRecord(self.participant_id, self.video_id, frames, gaze,
                              dict(self.ratings))


@dataclass
class DatasetManifest:
    records: list
    geometry: ScreenGeometry
    schema_version: str = SCHEMA_VERSION
    root: Path = field(default_factory=Path)

    @property
    def participants(self):
        return sorted({r.participant_id for r in self.records})


def _validate_ratings(ratings, ctx):
    active = dims.active_dimensions()
    if set(ratings) != {d.id for d in active}:
        raise ValidationError(f"{ctx}: ratings must cover the 15 active dimensions")
    for d in active:
        v = ratings[d.id]
        if not (isinstance(v, (int, np.integer)) and 1 <= v <= 7):
            raise ValidationError(
                f"{ctx}: rating {v!r} for dimension {d.name!r} (id {d.id}) "
                "outside 1..7")


def load_manifest(path) -> DatasetManifest:
    """Parse and fully validate a manifest file."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}") from None
    root = path.parent

    version = None
    geo = {}
    records = []
    section = None
    current = None

    def finish_record():
        if current is None:
            return
        for key in ("participant", "video", "frames", "gaze", "ratings"):
            if key not in current:
                raise ValidationError(f"manifest record missing {key!r}")
        vals = current["ratings"].split()
        if len(vals) != dims.N_ACTIVE:
            raise ValidationError(
                f"record {current['participant']}/{current['video']}: "
                f"expected {dims.N_ACTIVE} ratings, got {len(vals)}")
        ratings = {i: int(v) for i, v in enumerate(vals)}
        ctx = f"record {current['participant']}/{current['video']}"
        _validate_ratings(ratings, ctx)
        records.append(RecordRef(current["participant"], current["video"],
                                 current["frames"], current["gaze"], ratings))

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            finish_record()
            current = None
            section = line[1:-1]
            if section == "record":
                current = {}
            elif section != "geometry":
                raise ValidationError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if section is None:
            if key == "schema_version":
                version = value
            else:
                raise ValidationError(f"line {lineno}: unknown top-level key {key!r}")
        elif section == "geometry":
            geo[key] = value
        else:
            current[key] = value
    finish_record()

    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version!r}")

    geometry = ScreenGeometry(
        width_px=int(geo.get("width_px", 1920)),
        height_px=int(geo.get("height_px", 1080)),
        diagonal_inches=float(geo.get("diagonal_inches", 27.0)),
        viewing_distance_cm=float(geo.get("viewing_distance_cm", 65.0)),
    ).validate()

    seen = set()
    for r in records:
        key = (r.participant_id, r.video_id)
        if key in seen:
            raise ValidationError(f"duplicate record {key[0]}/{key[1]}")
        seen.add(key)
        for p in (r.frames_path, r.gaze_path):
            if not (root / p).exists():
                raise ValidationError(
                    f"record {r.participant_id}/{r.video_id}: missing file {root / p}")

    return DatasetManifest(records=records, geometry=geometry,
                           schema_version=version, root=root)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    lines = [f"schema_version = {manifest.schema_version}", ""]
    g = manifest.geometry
    lines += ["[geometry]",
              f"width_px = {g.width_px}",
              f"height_px = {g.height_px}",
              f"diagonal_inches = {g.diagonal_inches}",
              f"viewing_distance_cm = {g.viewing_distance_cm}", ""]
    for r in manifest.records:
        ratings = " ".join(str(r.ratings[d.id]) for d in dims.active_dimensions())
        lines += ["[record]",
                  f"participant = {r.participant_id}",
                  f"video = {r.video_id}",
                  f"frames = {r.frames_path}",
                  f"gaze = {r.gaze_path}",
                  f"ratings = {ratings}", ""]
    path.write_text("\n".join(lines))
