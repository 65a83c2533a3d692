"""Deterministic stick-figure generator with exact COCO-17 keypoint ground truth.

Figures are built from a torso anchor plus per-limb angles and lengths, every
joint is snapped to the centre of the pixel it falls in, and the image is
rendered with hard-edged strokes. Each joint is marked by a small disc with its
own grey level so that the seventeen keypoints are distinguishable in pixel
space. Dataset files are JSON lines plus a JSON manifest.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .prompt_codec import KEYPOINT_NAMES, NUM_KEYPOINTS

FORMAT_VERSION = 1

NOSE, L_EYE, R_EYE, L_EAR, R_EAR = 0, 1, 2, 3, 4
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST = 5, 6, 7, 8, 9, 10
L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE = 11, 12, 13, 14, 15, 16

LIMBS: Tuple[Tuple[int, int], ...] = (
    (L_SHOULDER, R_SHOULDER), (L_SHOULDER, L_ELBOW), (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW), (R_ELBOW, R_WRIST), (L_SHOULDER, L_HIP),
    (R_SHOULDER, R_HIP), (L_HIP, R_HIP), (L_HIP, L_KNEE), (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE), (R_KNEE, R_ANKLE), (NOSE, L_EYE), (NOSE, R_EYE),
    (L_EYE, L_EAR), (R_EYE, R_EAR),
)


class DatasetError(ValueError):
    pass


class DatasetIntegrityError(DatasetError):
    pass


Range = Tuple[float, float]


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    # mid-shoulder anchor, normalized
    center_x: Range = (0.30, 0.70)
    center_y: Range = (0.28, 0.42)
    torso_tilt: Range = (-0.30, 0.30)
    torso_length: Range = (0.18, 0.24)
    shoulder_half_width: Range = (0.07, 0.10)
    hip_half_width: Range = (0.05, 0.07)
    neck_length: Range = (0.10, 0.13)
    eye_offset: Range = (0.030, 0.040)
    ear_offset: Range = (0.060, 0.075)
    upper_arm: Range = (0.10, 0.15)
    forearm: Range = (0.09, 0.13)
    thigh: Range = (0.12, 0.17)
    shin: Range = (0.11, 0.16)
    # limb angles in radians, measured from the torso's downward axis
    upper_arm_angle: Range = (0.15, 2.4)
    forearm_bend: Range = (-1.3, 1.3)
    thigh_angle: Range = (-0.05, 0.55)
    shin_bend: Range = (-0.45, 0.45)
    occlusion_prob: float = 0.05
    joint_radius: int = 1
    limb_level: int = 48
    joint_level_low: int = 96

    def validate(self) -> None:
        if self.image_size <= 0:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        for name in ("torso_length", "shoulder_half_width", "hip_half_width", "neck_length",
                     "eye_offset", "ear_offset", "upper_arm", "forearm", "thigh", "shin"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 0.5):
                raise ConfigError(f"{name} range must lie in (0, 0.5], got ({lo}, {hi})")
        for name in ("center_x", "center_y", "torso_tilt", "upper_arm_angle", "forearm_bend",
                     "thigh_angle", "shin_bend"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is inverted: ({lo}, {hi})")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must be in [0, 1]")
        if self.joint_radius < 0:
            raise ConfigError("joint_radius must be >= 0")
        if not 0 <= self.limb_level < self.joint_level_low <= 255 - NUM_KEYPOINTS + 1:
            raise ConfigError("grey levels must satisfy 0 <= limb_level < joint_level_low")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def joint_levels(config: GeneratorConfig) -> np.ndarray:
    """Grey level (0-255) of each keypoint's disc; strictly increasing in keypoint index."""
    lo = config.joint_level_low
    return np.round(np.linspace(lo, 255, NUM_KEYPOINTS)).astype(np.uint8)


@dataclass
class SkeletonSample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    keypoints: np.ndarray  # (17, 2) normalized (x, y)
    visibility: np.ndarray  # (17,) int in {0, 1}
    area: float  # px^2
    head_size: float  # normalized units
    seed: int

    @property
    def h(self) -> int:
        return self.image.shape[0]

    @property
    def w(self) -> int:
        return self.image.shape[1]

    def image_bytes(self) -> bytes:
        return np.round(self.image * 255.0).astype(np.uint8).tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkeletonSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.visibility, other.visibility)
            and self.area == other.area
            and self.head_size == other.head_size
        )


def _rot(axis: np.ndarray, perp: np.ndarray, angle: float) -> np.ndarray:
    return axis * np.cos(angle) + perp * np.sin(angle)


def sample_skeleton(rng: np.random.Generator, config: GeneratorConfig) -> np.ndarray:
    """Draw continuous (17, 2) joint positions in normalized coordinates."""
    u = lambda r: rng.uniform(*r)  # noqa: E731
    tilt = u(config.torso_tilt)
    down = np.array([np.sin(tilt), np.cos(tilt)])
    # the person's left is on the image right (subject faces the camera)
    left = np.array([np.cos(tilt), -np.sin(tilt)])
    neck = np.array([u(config.center_x), u(config.center_y)])
    pelvis = neck + down * u(config.torso_length)

    kp = np.zeros((NUM_KEYPOINTS, 2))
    sw, hw = u(config.shoulder_half_width), u(config.hip_half_width)
    kp[L_SHOULDER], kp[R_SHOULDER] = neck + left * sw, neck - left * sw
    kp[L_HIP], kp[R_HIP] = pelvis + left * hw, pelvis - left * hw

    nose = neck - down * u(config.neck_length)
    kp[NOSE] = nose
    eye, ear = u(config.eye_offset), u(config.ear_offset)
    kp[L_EYE], kp[R_EYE] = nose - down * eye + left * eye, nose - down * eye - left * eye
    kp[L_EAR], kp[R_EAR] = nose - down * 0.5 * eye + left * ear, nose - down * 0.5 * eye - left * ear

    for side, sh, el, wr in ((1.0, L_SHOULDER, L_ELBOW, L_WRIST), (-1.0, R_SHOULDER, R_ELBOW, R_WRIST)):
        a = u(config.upper_arm_angle)
        b = a + u(config.forearm_bend)
        kp[el] = kp[sh] + _rot(down, side * left, a) * u(config.upper_arm)
        kp[wr] = kp[el] + _rot(down, side * left, b) * u(config.forearm)
    for side, hp, kn, an in ((1.0, L_HIP, L_KNEE, L_ANKLE), (-1.0, R_HIP, R_KNEE, R_ANKLE)):
        a = u(config.thigh_angle)
        b = a + u(config.shin_bend)
        kp[kn] = kp[hp] + _rot(down, side * left, a) * u(config.thigh)
        kp[an] = kp[kn] + _rot(down, side * left, b) * u(config.shin)
    return kp


def snap_to_pixels(kp: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Snap normalized points to pixel centres; returns (snapped points, integer pixel indices)."""
    pix = np.floor(kp * size).astype(np.int64)
    return (pix + 0.5) / size, pix


def _line(img: np.ndarray, p0: np.ndarray, p1: np.ndarray, level: int) -> None:
    h, w = img.shape
    (x0, y0), (x1, y1) = p0, p1
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n + 1)).astype(np.int64)
    ys = np.rint(np.linspace(y0, y1, n + 1)).astype(np.int64)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[ys[ok], xs[ok]] = level


def render(pix: np.ndarray, visibility: np.ndarray, config: GeneratorConfig) -> Tuple[np.ndarray, Dict[int, Tuple[float, float]]]:
    """Rasterize a figure from integer joint pixels.

    Returns the uint8 image and a registry mapping each drawn keypoint index to
    the normalized centre of the pixel its disc is centred on.
    """
    size = config.image_size
    img = np.zeros((size, size), dtype=np.uint8)
    for a, b in LIMBS:
        _line(img, pix[a], pix[b], config.limb_level)
    levels = joint_levels(config)
    r = config.joint_radius
    drawn = [k for k in range(NUM_KEYPOINTS) if visibility[k]]
    # rims first, then centres, so no disc hides another joint's centre pixel
    for k in drawn:
        cx, cy = pix[k]
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if (dx or dy) and dx * dx + dy * dy <= r * r and 0 <= cx + dx < size and 0 <= cy + dy < size:
                    img[cy + dy, cx + dx] = levels[k]
    registry = {}
    for k in drawn:
        cx, cy = pix[k]
        img[cy, cx] = levels[k]
        registry[k] = ((cx + 0.5) / size, (cy + 0.5) / size)
    return img, registry


def _head_size(kp: np.ndarray, vis: np.ndarray) -> float:
    if vis[L_EAR] and vis[R_EAR]:
        return 2.0 * float(np.hypot(*(kp[L_EAR] - kp[R_EAR])))
    mid_shoulder = 0.5 * (kp[L_SHOULDER] + kp[R_SHOULDER])
    return 2.0 * float(np.hypot(*(kp[NOSE] - mid_shoulder)))


def _area(kp: np.ndarray, vis: np.ndarray, size: int) -> float:
    pts = kp[vis.astype(bool)] * size
    if len(pts) == 0:
        return 1.0
    extent = pts.max(axis=0) - pts.min(axis=0)
    return max(float(extent[0] * extent[1]), 1.0)


def generate_with_registry(seed: int, config: GeneratorConfig) -> Tuple[SkeletonSample, Dict[int, Tuple[float, float]]]:
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.image_size
    kp, pix = snap_to_pixels(sample_skeleton(rng, config), size)
    inside = np.all((pix >= 0) & (pix < size), axis=1)
    occluded = rng.random(NUM_KEYPOINTS) < config.occlusion_prob
    vis = (inside & ~occluded).astype(np.int64)
    img, registry = render(pix, vis, config)
    sample = SkeletonSample(
        image=img.astype(np.float64) / 255.0,
        keypoints=kp,
        visibility=vis,
        area=_area(kp, vis, size),
        head_size=_head_size(kp, vis),
        seed=int(seed),
    )
    return sample, registry


def generate_sample(seed: int, config: GeneratorConfig = GeneratorConfig()) -> SkeletonSample:
    return generate_with_registry(seed, config)[0]


def generate_samples(seeds: Sequence[int], config: GeneratorConfig = GeneratorConfig()) -> List[SkeletonSample]:
    return [generate_sample(int(s), config) for s in seeds]


# ---------------------------------------------------------------------------
# file IO


@dataclass
class DatasetManifest:
    records: str
    count: int
    split: str
    config_hash: str
    version: int = FORMAT_VERSION
    config: dict = field(default_factory=dict)

    def dumps(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def manifest_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def sample_to_record(s: SkeletonSample) -> dict:
    return {
        "seed": s.seed,
        "h": s.h,
        "w": s.w,
        "image_b64": base64.b64encode(s.image_bytes()).decode("ascii"),
        "kps": [float(v) for v in s.keypoints.reshape(-1)],
        "vis": [int(v) for v in s.visibility],
        "area": s.area,
        "head_size": s.head_size,
    }


def record_to_sample(rec: dict) -> SkeletonSample:
    h, w = int(rec["h"]), int(rec["w"])
    raw = np.frombuffer(base64.b64decode(rec["image_b64"], validate=True), dtype=np.uint8)
    if raw.size != h * w:
        raise ValueError(f"image has {raw.size} bytes, expected {h * w}")
    kps = np.asarray(rec["kps"], dtype=np.float64)
    vis = np.asarray(rec["vis"], dtype=np.int64)
    if kps.shape != (2 * NUM_KEYPOINTS,) or vis.shape != (NUM_KEYPOINTS,):
        raise ValueError("wrong keypoint/visibility length")
    return SkeletonSample(
        image=raw.reshape(h, w).astype(np.float64) / 255.0,
        keypoints=kps.reshape(NUM_KEYPOINTS, 2),
        visibility=vis,
        area=float(rec["area"]),
        head_size=float(rec["head_size"]),
        seed=int(rec["seed"]),
    )


def write_dataset(samples: Sequence[SkeletonSample], path, split: str = "train",
                  config: GeneratorConfig = None) -> DatasetManifest:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(json.dumps(sample_to_record(s), sort_keys=True) + "\n")
    manifest = DatasetManifest(
        records=path.name,
        count=len(samples),
        split=split,
        config_hash=config.hash() if config is not None else "",
        config=config.to_dict() if config is not None else {},
    )
    manifest_path(path).write_text(manifest.dumps(), encoding="utf-8")
    return manifest


def read_manifest(path) -> DatasetManifest:
    mp = manifest_path(Path(path))
    try:
        d = json.loads(mp.read_text(encoding="utf-8"))
        return DatasetManifest(**d)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise DatasetIntegrityError(f"cannot read manifest {mp}: {e}") from e


def read_dataset(path, check_manifest: bool = True) -> List[SkeletonSample]:
    path = Path(path)
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                samples.append(record_to_sample(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: corrupt record ({e})") from e
    if check_manifest:
        manifest = read_manifest(path)
        if manifest.version != FORMAT_VERSION:
            raise DatasetIntegrityError(f"dataset format version {manifest.version}, expected {FORMAT_VERSION}")
        if manifest.count != len(samples):
            raise DatasetIntegrityError(
                f"manifest declares {manifest.count} records but {path} holds {len(samples)}"
            )
        if manifest.config:
            cfg = GeneratorConfig.from_dict(manifest.config)
            if manifest.config_hash != cfg.hash():
                raise DatasetIntegrityError("manifest config_hash does not match its generator config")
    return samples


def keypoint_name(k: int) -> str:
    return KEYPOINT_NAMES[k]
