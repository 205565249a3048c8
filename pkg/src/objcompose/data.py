"""Procedural object-placement scenes and their on-disk format.

A scene is a triplet: a *source* view of a parametric object on a neutral
background, a *target* image with the same object composited into a box
over a textured background, and a *hint* image equal to the target with the
box blacked out.  Images are float32 HWC arrays in [0, 1] whose values sit
exactly on the 8-bit grid, so PNG storage is lossless.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import LoadError, ParameterError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

SHAPES = ("ellipse", "rectangle", "triangle")
PATTERNS = ("stripes", "dots")
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.65, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.90],
        [1.00, 0.55, 0.05],
        [0.98, 0.98, 0.98],
    ],
    dtype=np.float64,
)
NEUTRAL_GRAY = 128 / 255


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap an image in [0, 1] onto the 8-bit grid (float32 output)."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def validate(self, image_size: int, factor: int) -> None:
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(isinstance(v, (int, np.integer)) for v in coords):
            raise ParameterError(f"box coordinates must be integers, got {coords}")
        if not (0 <= self.x0 < self.x1 <= image_size and 0 <= self.y0 < self.y1 <= image_size):
            raise ParameterError(f"box {coords} outside image of size {image_size}")
        if any(v % factor for v in coords):
            raise ParameterError(f"box {coords} not aligned to grid {factor}")
        if self.width * self.height < factor * factor:
            raise ParameterError(f"box {coords} smaller than one latent cell")

    def scaled(self, factor: int) -> "Box":
        """Box in a grid downsampled by ``factor`` (exact for aligned boxes)."""
        return Box(self.x0 // factor, self.y0 // factor, self.x1 // factor, self.y1 // factor)

    def mask(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m

    def as_list(self) -> list[int]:
        return [int(self.x0), int(self.y0), int(self.x1), int(self.y1)]


@dataclass(frozen=True)
class ObjectIdentity:
    shape: str
    primary: int
    secondary: int
    pattern: str
    frequency: float

    def key(self) -> tuple:
        return (self.shape, self.primary, self.secondary, self.pattern, self.frequency)


@dataclass
class SynthParams:
    image_size: int = 64
    downsample_factor: int = 4
    box_min: int = 20
    box_max: int = 40
    object_fill: tuple[float, float] = (0.8, 1.0)
    rotation_range: float = 180.0
    scale_range: tuple[float, float] = (0.55, 0.9)
    background_noise: float = 0.04
    supersample: int = 2

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or self.image_size % f:
            raise ParameterError(f"image_size {self.image_size} not divisible by {f}")
        if self.box_min < f:
            raise ParameterError(f"box_min {self.box_min} smaller than grid {f}")
        if self.box_max > self.image_size:
            raise ParameterError(f"box_max {self.box_max} larger than image {self.image_size}")
        if self.box_min > self.box_max:
            raise ParameterError("box_min exceeds box_max")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1.0:
            raise ParameterError(f"scale_range {self.scale_range} must lie in (0, 1]")
        lo, hi = self.object_fill
        if not 0 < lo <= hi <= 1.0:
            raise ParameterError(f"object_fill {self.object_fill} must lie in (0, 1]")
        if self.rotation_range < 0:
            raise ParameterError("rotation_range must be non-negative")


@dataclass
class SceneSample:
    scene_id: str
    source_image: np.ndarray
    hint_image: np.ndarray
    target_image: np.ndarray
    box: Box
    box_viz: np.ndarray
    view_id: int = 0
    identity: ObjectIdentity | None = None
    view_group: int = 0
    views: list[np.ndarray] = field(default_factory=list)


# --------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # all shapes fit inside the unit circle, so any rotation stays in bounds
    if shape == "ellipse":
        return u**2 + (v / 0.7) ** 2 <= 1.0
    if shape == "rectangle":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.55)
    if shape == "triangle":
        return (v >= -0.5) & (v <= 1.0 - math.sqrt(3.0) * np.abs(u))
    raise ParameterError(f"unknown shape {shape!r}")


def _pattern_mask(identity: ObjectIdentity, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    f = identity.frequency
    if identity.pattern == "stripes":
        return np.sin(math.pi * f * u) > 0
    if identity.pattern == "dots":
        gu = (u * f / 2.0) % 1.0 - 0.5
        gv = (v * f / 2.0) % 1.0 - 0.5
        return gu**2 + gv**2 < 0.09
    raise ParameterError(f"unknown pattern {identity.pattern!r}")


def render_object(
    canvas: np.ndarray,
    region: tuple[int, int, int, int],
    center: tuple[float, float],
    radius: float,
    rotation: float,
    identity: ObjectIdentity,
    supersample: int = 2,
) -> None:
    """Composite the object into ``canvas`` in place, touching only ``region``.

    ``region`` is ``(x0, y0, x1, y1)``; ``center`` is ``(cx, cy)`` in pixels and
    ``rotation`` is in radians.
    """
    x0, y0, x1, y1 = region
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    dx = (px - center[0]) / radius
    dy = (center[1] - py) / radius
    cos, sin = math.cos(rotation), math.sin(rotation)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy

    inside = _shape_mask(identity.shape, u, v)
    accent = _pattern_mask(identity, u, v)
    color = np.where(accent[..., None], PALETTE[identity.secondary], PALETTE[identity.primary])

    h, w = y1 - y0, x1 - x0
    cover = inside.reshape(h, ss, w, ss).mean(axis=(1, 3))
    rgb = (color * inside[..., None]).reshape(h, ss, w, ss, 3).sum(axis=(1, 3))
    rgb = rgb / np.maximum(cover * ss * ss, 1e-12)[..., None]
    patch = canvas[y0:y1, x0:x1].astype(np.float64)
    canvas[y0:y1, x0:x1] = cover[..., None] * rgb + (1.0 - cover[..., None]) * patch


def _background(rng: np.random.Generator, size: int, factor: int, noise: float) -> np.ndarray:
    # constant on each factor x factor cell: the mosaic lives on the latent grid
    n = size // factor
    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = rng.uniform(0.15, 0.85, size=3)
    ang = rng.uniform(0, 2 * math.pi)
    centers = (np.arange(n) + 0.5) / n - 0.5
    gx, gy = np.meshgrid(centers, centers)
    ramp = np.clip(0.5 + gx * math.cos(ang) + gy * math.sin(ang), 0.0, 1.0)
    cells = c0 + (c1 - c0) * ramp[..., None] + rng.normal(0.0, noise, size=(n, n, 3))
    return np.repeat(np.repeat(cells, factor, axis=0), factor, axis=1)


def _random_identity(rng: np.random.Generator) -> ObjectIdentity:
    primary, secondary = rng.choice(len(PALETTE), size=2, replace=False)
    return ObjectIdentity(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        primary=int(primary),
        secondary=int(secondary),
        pattern=PATTERNS[int(rng.integers(len(PATTERNS)))],
        frequency=float(rng.choice([3.0, 4.0, 5.0])),
    )


def _random_box(rng: np.random.Generator, params: SynthParams) -> Box:
    f = params.downsample_factor
    sizes = np.arange(-(-params.box_min // f) * f, params.box_max + 1, f)
    bw, bh = (int(v) for v in rng.choice(sizes, size=2))
    x0 = int(rng.integers(0, (params.image_size - bw) // f + 1)) * f
    y0 = int(rng.integers(0, (params.image_size - bh) // f + 1)) * f
    return Box(x0, y0, x0 + bw, y0 + bh)


def render_source(
    identity: ObjectIdentity,
    size: int,
    scale: float,
    rotation: float,
    supersample: int = 2,
) -> np.ndarray:
    canvas = np.full((size, size, 3), NEUTRAL_GRAY, dtype=np.float64)
    render_object(canvas, (0, 0, size, size), (size / 2, size / 2), scale * size / 2,
                  rotation, identity, supersample)
    return quantize(canvas)


def box_visualization(box: Box, size: int) -> np.ndarray:
    viz = np.zeros((size, size, 3), dtype=np.float32)
    viz[box.y0:box.y1, box.x0:box.x1] = 1.0
    return viz


def _draw_view(rng: np.random.Generator, params: SynthParams) -> tuple[float, float]:
    rot = math.radians(rng.uniform(-params.rotation_range, params.rotation_range))
    scale = rng.uniform(*params.scale_range)
    return scale, rot


def generate_scene(seed: int, params: SynthParams | None = None, box: Box | None = None) -> SceneSample:
    """Build one scene; a pure function of ``(seed, params, box)``."""
    params = params or SynthParams()
    params.validate()
    size, f = params.image_size, params.downsample_factor
    rng = np.random.default_rng(seed)

    identity = _random_identity(rng)
    if box is None:
        box = _random_box(rng, params)
    box.validate(size, f)

    target = _background(rng, size, f, params.background_noise)
    fill = rng.uniform(*params.object_fill)
    radius = fill * min(box.width, box.height) / 2
    center = ((box.x0 + box.x1) / 2, (box.y0 + box.y1) / 2)
    rot_t = math.radians(rng.uniform(-params.rotation_range, params.rotation_range))
    render_object(target, (box.x0, box.y0, box.x1, box.y1), center, radius, rot_t,
                  identity, params.supersample)
    target = quantize(target)

    hint = target.copy()
    hint[box.y0:box.y1, box.x0:box.x1] = 0.0

    scale, rot_s = _draw_view(rng, params)
    source = render_source(identity, size, scale, rot_s, params.supersample)

    return SceneSample(
        scene_id=f"scene-{seed}",
        source_image=source,
        hint_image=hint,
        target_image=target,
        box=box,
        box_viz=box_visualization(box, size),
        view_id=0,
        identity=identity,
    )


def generate_views(
    scene: SceneSample,
    k: int,
    seed: int,
    params: SynthParams | None = None,
) -> list[np.ndarray]:
    """Render ``k`` source views of the scene's object under fresh rotations/scales."""
    if k < 2:
        raise ParameterError(f"need at least 2 views, got {k}")
    if scene.identity is None:
        raise ParameterError(f"scene {scene.scene_id} has no object identity")
    params = params or SynthParams()
    params.validate()
    rng = np.random.default_rng(seed)
    size = scene.source_image.shape[0]
    views = []
    for _ in range(k):
        scale, rot = _draw_view(rng, params)
        views.append(render_source(scene.identity, size, scale, rot, params.supersample))
    return views


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def synthesize(
    num: int,
    seed: int,
    params: SynthParams | None = None,
    views: int = 0,
) -> list[SceneSample]:
    """Generate ``num`` scenes deterministically from one base seed."""
    params = params or SynthParams()
    samples = []
    for i in range(num):
        s = scene_seed(seed, i)
        scene = generate_scene(s, params)
        scene.view_group = i
        if views:
            scene.views = generate_views(scene, views, s + 1, params)
        samples.append(scene)
    return samples


# --------------------------------------------------------------------------
# storage


@dataclass
class DatasetManifest:
    version: int
    image_size: int
    downsample_factor: int
    samples: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        for key, typ in (("version", int), ("image_size", int), ("downsample_factor", int), ("samples", list)):
            if key not in d:
                raise LoadError(f"manifest: missing field {key!r}")
            if not isinstance(d[key], typ):
                raise LoadError(f"manifest: field {key!r} must be {typ.__name__}")
        if d["version"] != MANIFEST_VERSION:
            raise LoadError(f"manifest: unsupported version {d['version']}")
        return cls(d["version"], d["image_size"], d["downsample_factor"], d["samples"])


_IMAGE_FIELDS = ("source", "hint", "target", "box_viz")


def save_png(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def write_dataset(samples: Sequence[SceneSample], directory, downsample_factor: int = 4) -> DatasetManifest:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ParameterError("no samples to write")
    size = samples[0].target_image.shape[0]
    entries = []
    for s in samples:
        s.box.validate(size, downsample_factor)
        stem = f"images/{s.scene_id}"
        files = {
            "source": s.source_image,
            "hint": s.hint_image,
            "target": s.target_image,
            "box_viz": s.box_viz,
        }
        entry: dict = {"scene_id": s.scene_id}
        for name, img in files.items():
            rel = f"{stem}_{name}.png"
            save_png(directory / rel, img)
            entry[name] = rel
        view_paths = []
        for j, v in enumerate(s.views):
            rel = f"{stem}_view{j}.png"
            save_png(directory / rel, v)
            view_paths.append(rel)
        entry.update(
            box=s.box.as_list(),
            view_group=int(s.view_group),
            view_id=int(s.view_id),
            identity=asdict(s.identity) if s.identity else None,
            views=view_paths,
        )
        entries.append(entry)

    manifest = DatasetManifest(MANIFEST_VERSION, int(size), int(downsample_factor), entries)
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=1))
    os.replace(tmp, directory / MANIFEST_NAME)
    return manifest


class SceneStore:
    """Lazy, indexable accessor over a stored dataset."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = root
        self.manifest = manifest
        self._index = {e["scene_id"]: i for i, e in enumerate(manifest.samples)}

    def __len__(self) -> int:
        return len(self.manifest.samples)

    def __iter__(self) -> Iterator[SceneSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def scene_ids(self) -> list[str]:
        return [e["scene_id"] for e in self.manifest.samples]

    def by_id(self, scene_id: str) -> SceneSample:
        if scene_id not in self._index:
            raise LoadError(f"unknown scene_id {scene_id!r}")
        return self[self._index[scene_id]]

    def __getitem__(self, i: int) -> SceneSample:
        e = self.manifest.samples[i]
        box = Box(*e["box"])
        identity = ObjectIdentity(**e["identity"]) if e.get("identity") else None
        return SceneSample(
            scene_id=e["scene_id"],
            source_image=read_png(self.root / e["source"]),
            hint_image=read_png(self.root / e["hint"]),
            target_image=read_png(self.root / e["target"]),
            box=box,
            box_viz=read_png(self.root / e["box_viz"]),
            view_id=e.get("view_id", 0),
            identity=identity,
            view_group=e.get("view_group", i),
            views=[read_png(self.root / p) for p in e.get("views", [])],
        )


def _check_entry(root: Path, e: dict, manifest: DatasetManifest) -> None:
    sid = e.get("scene_id")
    if not isinstance(sid, str):
        raise LoadError(f"manifest sample missing 'scene_id': {e!r:.80}")
    for key in (*_IMAGE_FIELDS, "box", "view_group"):
        if key not in e:
            raise LoadError(f"sample {sid}: missing field {key!r}")
    for key in (*_IMAGE_FIELDS, *e.get("views", [])):
        rel = e[key] if key in _IMAGE_FIELDS else key
        if not (root / rel).is_file():
            raise LoadError(f"sample {sid}: missing file {rel}")
    box = e["box"]
    if not (isinstance(box, list) and len(box) == 4):
        raise LoadError(f"sample {sid}: field 'box' must be 4 integers")
    try:
        Box(*box).validate(manifest.image_size, manifest.downsample_factor)
    except ParameterError as exc:
        raise LoadError(f"sample {sid}: field 'box': {exc}") from None


def load_dataset(directory) -> tuple[DatasetManifest, SceneStore]:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise LoadError(f"no {MANIFEST_NAME} in {root}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise LoadError("manifest: top level must be an object")
    manifest = DatasetManifest.from_dict(raw)
    for e in manifest.samples:
        _check_entry(root, e, manifest)
    return manifest, SceneStore(root, manifest)


def to_model_range(img: np.ndarray) -> np.ndarray:
    """[0, 1] display range -> [-1, 1] model range."""
    return img * 2.0 - 1.0


def to_display_range(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)
