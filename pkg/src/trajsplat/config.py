"""Run configuration shared by the command-line tools (one flat JSON document)."""

from dataclasses import asdict, dataclass, fields
import json
from pathlib import Path

from ._validation import check_positive, check_positive_int
from .camera import IntervalSchedule, TrajectoryKind
from .exceptions import InputError, ParseError


@dataclass(frozen=True)
class RunConfig:
    # cameras and images
    width: int = 32
    height: int = 32
    fov_deg: float = 60.0
    trajectory: str = "orbit"
    n_frames: int = 4
    magnitude: float = 2.0
    cy_by: str = "height"
    # conditioning
    feature_height: int = 8
    feature_width: int = 8
    tau: float = 2.0
    splat_radius: float = 1.0
    depth_mode: str = "z"
    pgm_scale: float = 1.0
    min_points: int = 10
    # interval schedule
    schedule_start: int = 2
    schedule_end: int = 10
    schedule_mode: str = "linear"
    schedule_steps: int = 9
    # splat fitting
    grid: int = 8
    n_iters: int = 2000
    lr_color: float = 0.05
    lr_opacity: float = 0.05
    lr_mean: float = 1e-3
    loss_mse: float = 1.0
    loss_perceptual: float = 0.0
    loss_depth: float = 0.1
    # toy diffusion
    n_data: int = 4096
    seq_length: int = 16
    train_steps: int = 2000
    batch_size: int = 512
    lr: float = 3e-3
    hidden: int = 128
    sample_steps: int = 50
    guidance: float = 1.0
    n_samples: int = 16
    sample_mode: str = "interpolation"
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int:
                if isinstance(v, float) and v.is_integer():
                    object.__setattr__(self, f.name, int(v))
                check_positive_int(getattr(self, f.name), f.name, minimum=0)
            elif f.type is float:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise InputError(f"{f.name} must be a number, got {v!r}")
                object.__setattr__(self, f.name, float(v))
        for name in ("width", "height", "feature_height", "feature_width", "n_frames", "grid",
                     "seq_length", "batch_size", "hidden", "sample_steps", "n_samples", "n_data"):
            check_positive_int(getattr(self, name), name)
        for name in ("fov_deg", "magnitude", "tau", "pgm_scale", "lr"):
            check_positive(getattr(self, name), name)
        if self.trajectory not in {k.value for k in TrajectoryKind}:
            raise InputError(f"unknown trajectory kind {self.trajectory!r}")
        self.schedule  # validates the schedule fields
        if self.cy_by not in ("height", "width"):
            raise InputError(f"cy_by must be 'height' or 'width', got {self.cy_by!r}")
        if self.depth_mode not in ("z", "ray"):
            raise InputError(f"depth_mode must be 'z' or 'ray', got {self.depth_mode!r}")
        if self.sample_mode not in ("interpolation", "single"):
            raise InputError(f"sample_mode must be 'interpolation' or 'single', got {self.sample_mode!r}")

    @property
    def schedule(self):
        return IntervalSchedule(self.schedule_start, self.schedule_end, self.schedule_mode, self.schedule_steps)

    @property
    def feature_res(self):
        return (self.feature_height, self.feature_width)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides):
        """New config with non-``None`` overrides applied."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file (if any), then ``overrides`` (flags win)."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno, path=str(path)) from None
        if not isinstance(data, dict):
            raise ParseError("config must be a JSON object", path=str(path))
    cfg = RunConfig.from_dict(data)
    return cfg.with_overrides(overrides or {})
