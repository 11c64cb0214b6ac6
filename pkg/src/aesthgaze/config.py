"""Global stimulus / apparatus configuration defaults."""

from dataclasses import dataclass, field, asdict

from .errors import ConfigError


@dataclass(frozen=True)
class ScreenGeometry:
    width_px: int = 1920
    height_px: int = 1080
    diagonal_inches: float = 27.0
    # Not reported with the apparatus; typical desktop eye-tracker distance.
    viewing_distance_cm: float = 65.0

    def validate(self):
        for name in ("width_px", "height_px", "diagonal_inches", "viewing_distance_cm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ScreenGeometry.{name} must be positive")
        return self


@dataclass(frozen=True)
class StimulusConfig:
    """Timing and resolution of the stimulus presentation and recording."""

    duration_s: int = 80
    fps: int = 30
    gaze_hz: int = 60
    # Working resolution the pipeline operates at (16:9 preserved).
    work_w: int = 160
    work_h: int = 90
    geometry: ScreenGeometry = field(default_factory=ScreenGeometry)

    def validate(self):
        if self.duration_s <= 0 or self.fps <= 0 or self.gaze_hz <= 0:
            raise ConfigError("duration_s, fps and gaze_hz must be positive")
        if self.work_w <= 0 or self.work_h <= 0:
            raise ConfigError("working resolution must be positive")
        self.geometry.validate()
        return self

    @property
    def n_frames(self) -> int:
        return self.duration_s * self.fps

    @property
    def n_gaze(self) -> int:
        return self.duration_s * self.gaze_hz

    @property
    def n_windows(self) -> int:
        """Number of 1-second alignment windows."""
        return self.duration_s

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        geo = d.pop("geometry", None)
        cfg = StimulusConfig(**d, geometry=ScreenGeometry(**geo) if geo else ScreenGeometry())
        return cfg.validate()
