"""Procedural scenes with paired visible / infrared renders.

A scene is a list of axis-aligned objects painted back-to-front over a
background class.  The visible render uses per-object colours (which carry
no class information), while the infrared render reads intensities from a
versioned per-class, per-band emissivity table.  Both renders are pure
functions of the scene description, so every downstream learning claim has
an exact ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError

CLASSES = ("person", "car", "tree", "building", "road", "sky")
BANDS = ("near", "mid", "long")
SHAPES = ("ellipse", "rectangle", "blob")
N_MAX = 16

# Sizes are (w_min, w_max, h_min, h_max) at the 64 px reference resolution.
CLASS_SIZES = {
    "person": (7, 12, 12, 20),
    "car": (12, 22, 8, 14),
    "tree": (10, 18, 12, 24),
    "building": (16, 30, 16, 30),
    "road": (24, 48, 8, 14),
    "sky": (30, 56, 8, 16),
}

DEFAULT_CLASS_WEIGHTS = {
    "person": 0.30,
    "car": 0.22,
    "tree": 0.18,
    "building": 0.15,
    "road": 0.10,
    "sky": 0.05,
}

# Visible colour of the background only; objects get random colours.
BACKGROUND_COLORS = {
    "person": (0.80, 0.60, 0.50),
    "car": (0.50, 0.10, 0.10),
    "tree": (0.20, 0.45, 0.20),
    "building": (0.60, 0.55, 0.50),
    "road": (0.35, 0.35, 0.38),
    "sky": (0.55, 0.70, 0.95),
}

# Metaball centres and radii in bbox-normalized coordinates.
_BLOB_BALLS = ((0.35, 0.40, 0.28), (0.65, 0.45, 0.26), (0.50, 0.65, 0.25))


@dataclass(frozen=True)
class EmissivityTable:
    values: dict  # band -> class -> intensity
    noise_sigma: float = 0.02
    version: str = "v1"

    def __post_init__(self):
        for band, row in self.values.items():
            for cls, v in row.items():
                if not 0.0 <= v <= 1.0:
                    raise ConfigurationError(f"emissivity {cls}/{band}={v} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")

    def intensity(self, class_name: str, band: str) -> float:
        try:
            return self.values[band][class_name]
        except KeyError:
            raise ConfigurationError(f"emissivity table {self.version!r} has no entry for "
                                     f"({class_name}, {band})") from None

    def to_dict(self) -> dict:
        return {"version": self.version, "noise_sigma": self.noise_sigma,
                "values": {b: dict(r) for b, r in self.values.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "EmissivityTable":
        return cls(values={b: dict(r) for b, r in d["values"].items()},
                   noise_sigma=float(d["noise_sigma"]), version=d["version"])

    def with_noise(self, noise_sigma: float) -> "EmissivityTable":
        return EmissivityTable(self.values, noise_sigma, self.version)


DEFAULT_TABLE = EmissivityTable(
    values={
        "long": {"person": 0.90, "car": 0.70, "building": 0.45, "tree": 0.35, "road": 0.50, "sky": 0.05},
        "mid": {"person": 0.80, "car": 0.75, "building": 0.40, "tree": 0.30, "road": 0.55, "sky": 0.05},
        "near": {"person": 0.50, "car": 0.40, "building": 0.45, "tree": 0.85, "road": 0.30, "sky": 0.10},
    },
    noise_sigma=0.02,
    version="v1",
)


@dataclass(frozen=True)
class ObjectSpec:
    class_name: str
    shape: str
    position: tuple  # (x, y) top-left, pixels
    size: tuple  # (w, h), pixels
    visible_color: tuple
    thermal_jitter: float = 0.0

    def validate(self, width: int, height: int) -> None:
        if self.class_name not in CLASSES:
            raise ConfigurationError(f"unknown class {self.class_name!r}")
        if self.shape not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.shape!r}")
        x, y = self.position
        w, h = self.size
        if w < 4 or h < 4:
            raise ConfigurationError(f"object size {w}x{h} below 4x4")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise ConfigurationError(f"object footprint {self.position}+{self.size} leaves the image")
        if not -0.05 <= self.thermal_jitter <= 0.05:
            raise ConfigurationError("thermal_jitter outside [-0.05, 0.05]")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int
    height: int
    objects: tuple
    background_class: str = "road"
    illumination: float = 1.0

    def validate(self) -> None:
        if len(self.objects) > N_MAX:
            raise ConfigurationError(f"{len(self.objects)} objects exceeds N_max={N_MAX}")
        if self.background_class not in CLASSES:
            raise ConfigurationError(f"unknown background class {self.background_class!r}")
        if not 0.5 <= self.illumination <= 1.0:
            raise ConfigurationError("illumination outside [0.5, 1.0]")
        for obj in self.objects:
            obj.validate(self.width, self.height)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeneratorConfig:
    seed: int = 0
    width: int = 64
    height: int = 64
    count_range: tuple = (2, 6)
    class_weights: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_WEIGHTS))
    background_class: str = "road"
    illumination_range: tuple = (0.5, 1.0)
    required_classes: tuple = ()
    bands: dict = field(default_factory=lambda: {"long": 1.0})
    splits: dict = field(default_factory=lambda: {"train": 100, "test": 20})
    noise_sigma: float | None = None

    def validate(self) -> None:
        lo, hi = self.count_range
        if not 0 <= lo <= hi <= N_MAX:
            raise ConfigurationError(f"count_range {self.count_range} must lie within [0, {N_MAX}]")
        if not (8 <= self.width <= 256 and 8 <= self.height <= 256):
            raise ConfigurationError("image size must be within [8, 256]")
        unknown = set(self.class_weights) - set(CLASSES)
        if unknown:
            raise ConfigurationError(f"unknown classes in class_weights: {sorted(unknown)}")
        if sum(self.class_weights.values()) <= 0 or min(self.class_weights.values()) < 0:
            raise ConfigurationError("class weights must be non-negative with a positive sum")
        if len(self.required_classes) > lo:
            raise ConfigurationError("more required classes than the minimum object count")
        if set(self.required_classes) - set(CLASSES):
            raise ConfigurationError("unknown required class")
        if not self.bands or set(self.bands) - set(BANDS):
            raise ConfigurationError(f"bands must be a non-empty subset of {BANDS}")
        a, b = self.illumination_range
        if not 0.5 <= a <= b <= 1.0:
            raise ConfigurationError("illumination_range must lie within [0.5, 1.0]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count_range"] = list(self.count_range)
        d["illumination_range"] = list(self.illumination_range)
        d["required_classes"] = list(self.required_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("count_range", "illumination_range", "required_classes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def sample_scene(seed: int, cfg: GeneratorConfig) -> SceneSpec:
    """Draw a scene; identical ``(seed, cfg)`` always gives an identical spec."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    W, H = cfg.width, cfg.height
    scale = min(W, H) / 64.0
    lo, hi = cfg.count_range
    n = int(rng.integers(lo, hi + 1))
    names = list(cfg.class_weights)
    p = np.array([cfg.class_weights[c] for c in names], dtype=float)
    p /= p.sum()
    drawn = [names[i] for i in rng.choice(len(names), size=n - len(cfg.required_classes), p=p)]
    classes = list(cfg.required_classes) + drawn

    objects = []
    for cls in classes:
        w0, w1, h0, h1 = CLASS_SIZES[cls]
        w = int(np.clip(round(rng.integers(w0, w1 + 1) * scale), 4, W))
        h = int(np.clip(round(rng.integers(h0, h1 + 1) * scale), 4, H))
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, 3))
        jitter = float(rng.uniform(-0.05, 0.05))
        objects.append(ObjectSpec(cls, shape, (x, y), (w, h), color, jitter))
    # Larger objects go to the back so small ones stay visible.
    objects.sort(key=lambda o: -o.size[0] * o.size[1])
    a, b = cfg.illumination_range
    spec = SceneSpec(seed=int(seed), width=W, height=H, objects=tuple(objects),
                     background_class=cfg.background_class,
                     illumination=float(rng.uniform(a, b)))
    spec.validate()
    return spec


def footprint(obj: ObjectSpec, height: int, width: int) -> np.ndarray:
    """Boolean H x W mask of the pixels an object covers (ignoring occlusion)."""
    x, y = obj.position
    w, h = obj.size
    out = np.zeros((height, width), dtype=bool)
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, v)
    if obj.shape == "rectangle":
        local = np.ones((h, w), dtype=bool)
    elif obj.shape == "ellipse":
        local = (uu - 0.5) ** 2 + (vv - 0.5) ** 2 <= 0.25
    else:
        field_ = sum(r * r / ((uu - cx) ** 2 + (vv - cy) ** 2 + 1e-12) for cx, cy, r in _BLOB_BALLS)
        local = field_ >= 1.0
    out[y:y + h, x:x + w] = local
    return out


def object_id_map(spec: SceneSpec) -> np.ndarray:
    """Index of the top-most object at every pixel, -1 for background."""
    ids = np.full((spec.height, spec.width), -1, dtype=np.int32)
    for i, obj in enumerate(spec.objects):
        ids[footprint(obj, spec.height, spec.width)] = i
    return ids


def render_visible(spec: SceneSpec) -> np.ndarray:
    spec.validate()
    img = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    img[:] = BACKGROUND_COLORS[spec.background_class]
    for obj in spec.objects:
        img[footprint(obj, spec.height, spec.width)] = obj.visible_color
    return np.clip(img * spec.illumination, 0.0, 1.0)


def render_infrared(spec: SceneSpec, band: str, table: EmissivityTable = DEFAULT_TABLE,
                    noise_seed: int = 0) -> np.ndarray:
    """H x W x 1 infrared render; illumination has no effect here.

    Each band draws its noise from an independent stream derived from
    ``(noise_seed, band)``.
    """
    if band not in BANDS:
        raise ConfigurationError(f"unknown band {band!r}")
    spec.validate()
    ir = np.full((spec.height, spec.width), table.intensity(spec.background_class, band))
    for obj in spec.objects:
        ir[footprint(obj, spec.height, spec.width)] = table.intensity(obj.class_name, band) + obj.thermal_jitter
    if table.noise_sigma > 0:
        rng = np.random.default_rng([int(noise_seed), BANDS.index(band)])
        ir = ir + rng.normal(0.0, table.noise_sigma, ir.shape)
    return np.clip(ir, 0.0, 1.0)[:, :, None]
