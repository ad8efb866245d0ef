"""Synthetic moving-shape video sequences and their on-disk layout.

Layout per sequence::

    seq_0000/meta.json
    seq_0000/frames/00000.ppm   binary P6, 8-bit RGB
    seq_0000/masks/00000.pgm    binary P5, pixel value = object id
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import BadSpec, FormatError
from .model import substream

MIN_COLOR_DISTANCE = 60.0
MIN_VISIBLE_PIXELS = 24
PARTIAL_RATIO = 0.6


@dataclass(frozen=True)
class OccluderSpec:
    width: int = 8
    speed: float = 2.0


@dataclass(frozen=True)
class SequenceSpec:
    seed: int = 0
    frames: int = 20
    height: int = 64
    width: int = 64
    num_objects: int = 1
    max_speed: float = 1.5  # pixels per frame
    max_rotation: float = 0.05  # radians per frame
    max_scale_drift: float = 0.01  # relative size change per frame
    appearance_drift: float = 1.5  # colour units per frame
    partial_entry: bool = False
    occluder: OccluderSpec | None = None

    def validate(self) -> None:
        if self.frames < 2:
            raise BadSpec("a sequence needs at least 2 frames")
        if self.height % 4 or self.width % 4 or self.height < 16 or self.width < 16:
            raise BadSpec("resolution must be >= 16 and divisible by the feature stride 4")
        if not 1 <= self.num_objects <= 3:
            raise BadSpec("num_objects must lie in [1, 3]")
        if min(self.max_speed, self.max_rotation, self.max_scale_drift, self.appearance_drift) < 0:
            raise BadSpec("motion and drift ranges must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SequenceSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown spec keys {sorted(unknown)}")
        d = dict(d)
        if d.get("occluder") is not None:
            d["occluder"] = OccluderSpec(**d["occluder"])
        return cls(**d)


@dataclass
class Sequence:
    frames: list[np.ndarray]  # (3, H, W) uint8
    masks: list[np.ndarray]  # (H, W) uint8 labels
    spec: SequenceSpec
    name: str = ""

    @property
    def num_objects(self) -> int:
        return self.spec.num_objects


# ---------------------------------------------------------------- rendering


@dataclass
class _Shape:
    kind: str  # ellipse | polygon
    radii: tuple[float, float]
    vertices: np.ndarray | None  # unit-scale polygon vertices (K, 2), convex, ccw
    center: np.ndarray
    velocity: np.ndarray
    angle: float
    spin: float
    scale_drift: float
    color: np.ndarray
    color_drift: np.ndarray
    stripe_freq: float
    stripe_phase: float
    extra: dict = field(default_factory=dict)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(40, 215, size=(3, 5, 5))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.minimum(np.floor(ys).astype(int), 3)
    x0 = np.minimum(np.floor(xs).astype(int), 3)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    img = (
        c[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
        + c[:, y0 + 1][:, :, x0] * fy * (1 - fx)
        + c[:, y0][:, :, x0 + 1] * (1 - fy) * fx
        + c[:, y0 + 1][:, :, x0 + 1] * fy * fx
    )
    img += rng.normal(0, 6, size=(3, h, w))
    return img


def _pick_color(rng: np.random.Generator, avoid: list[np.ndarray]) -> np.ndarray:
    for _ in range(200):
        col = rng.uniform(10, 245, size=3)
        if all(np.linalg.norm(col - a) > MIN_COLOR_DISTANCE * 1.5 for a in avoid):
            return col
    return col


def _convex_polygon(rng: np.random.Generator) -> np.ndarray:
    k = int(rng.integers(5, 9))
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    rad = rng.uniform(0.85, 1.0, size=k)
    pts = np.stack([np.cos(ang) * rad, np.sin(ang) * rad], axis=1)
    # convexify: keep hull vertices only (monotone chain)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _local_coords(shape: _Shape, t: int, yy: np.ndarray, xx: np.ndarray):
    cx, cy = shape.center + shape.velocity * t
    theta = shape.angle + shape.spin * t
    s = max(0.3, 1.0 + shape.scale_drift * t)
    dx, dy = xx - cx, yy - cy
    c, sn = math.cos(theta), math.sin(theta)
    u = (c * dx + sn * dy) / s
    v = (-sn * dx + c * dy) / s
    return u, v


def _inside(shape: _Shape, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    a, b = shape.radii
    if shape.kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    verts = shape.vertices * np.array([a, b])
    inside = np.ones(u.shape, dtype=bool)
    for i in range(len(verts)):
        p, q = verts[i], verts[(i + 1) % len(verts)]
        inside &= (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0]) >= 0
    return inside


def _make_shape(rng: np.random.Generator, spec: SequenceSpec, avoid: list[np.ndarray], partial: bool) -> _Shape:
    h, w = spec.height, spec.width
    scale = min(h, w) / 64.0
    a = rng.uniform(8, 14) * scale
    b = a * rng.uniform(0.6, 1.0)
    kind = "ellipse" if rng.random() < 0.5 else "polygon"
    verts = _convex_polygon(rng) if kind == "polygon" else None
    speed = rng.uniform(0, spec.max_speed)
    heading = rng.uniform(0, 2 * np.pi)
    velocity = np.array([math.cos(heading), math.sin(heading)]) * speed
    center = np.array([rng.uniform(a, w - a), rng.uniform(a, h - a)])
    if partial:
        # start centred just outside an edge and move inwards
        side = int(rng.integers(4))
        inward = max(spec.max_speed, 1.0) * rng.uniform(0.8, 1.0)
        off = -0.15 * a
        if side == 0:
            center = np.array([off, rng.uniform(a, h - a)])
            velocity = np.array([inward, 0.0])
        elif side == 1:
            center = np.array([w - 1 - off, rng.uniform(a, h - a)])
            velocity = np.array([-inward, 0.0])
        elif side == 2:
            center = np.array([rng.uniform(a, w - a), off])
            velocity = np.array([0.0, inward])
        else:
            center = np.array([rng.uniform(a, w - a), h - 1 - off])
            velocity = np.array([0.0, -inward])
    color = _pick_color(rng, avoid)
    drift_dir = rng.normal(size=3)
    drift_dir /= np.linalg.norm(drift_dir) + 1e-12
    return _Shape(
        kind=kind,
        radii=(a, b),
        vertices=verts,
        center=center,
        velocity=velocity,
        angle=rng.uniform(0, 2 * np.pi),
        spin=rng.uniform(-spec.max_rotation, spec.max_rotation),
        scale_drift=rng.uniform(-spec.max_scale_drift, spec.max_scale_drift),
        color=color,
        color_drift=drift_dir * spec.appearance_drift,
        stripe_freq=rng.uniform(0.5, 1.0),
        stripe_phase=rng.uniform(0, 2 * np.pi),
    )


def _keep_in_frame(shape: _Shape, spec: SequenceSpec) -> None:
    """Turn the velocity around so the centre stays inside the frame for the whole sequence."""
    a = shape.radii[0]
    for axis, lim in ((0, spec.width), (1, spec.height)):
        end = shape.center[axis] + shape.velocity[axis] * (spec.frames - 1)
        if end < a * 0.5 or end > lim - a * 0.5:
            shape.velocity[axis] = -shape.velocity[axis]
            end = shape.center[axis] + shape.velocity[axis] * (spec.frames - 1)
            if end < a * 0.5 or end > lim - a * 0.5:
                shape.velocity[axis] *= 0.25


def _render(spec: SequenceSpec, bg: np.ndarray, shapes: list[_Shape], occ: dict | None, t: int):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = bg.copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    for k, shape in enumerate(shapes, start=1):
        u, v = _local_coords(shape, t, yy, xx)
        inside = _inside(shape, u, v)
        color = np.clip(shape.color + shape.color_drift * t, 0, 255)
        stripes = 1.0 + 0.18 * np.sin(shape.stripe_freq * u + shape.stripe_phase)
        tex = color[:, None, None] * stripes[None]
        img = np.where(inside[None], tex, img)
        labels[inside] = k
    if occ is not None:
        x0 = occ["x"] + occ["speed"] * t
        bar = (xx >= x0) & (xx < x0 + occ["width"])
        img = np.where(bar[None], occ["color"][:, None, None], img)
        labels[bar] = 0
    return np.clip(np.round(img), 0, 255).astype(np.uint8), labels


def generate_sequence(spec: SequenceSpec) -> Sequence:
    """Render a seeded sequence; identical specs give bit-identical output."""
    spec.validate()
    rng = substream(spec.seed, "synth", "sequence")
    for attempt in range(100):
        bg = _background(rng, spec.height, spec.width)
        avoid = [bg.mean(axis=(1, 2))]
        shapes = []
        for k in range(spec.num_objects):
            sh = _make_shape(rng, spec, avoid, partial=spec.partial_entry and k == 0)
            if not (spec.partial_entry and k == 0):
                _keep_in_frame(sh, spec)
            avoid.append(sh.color)
            shapes.append(sh)
        occ = None
        if spec.occluder is not None:
            occ = {
                "x": float(rng.uniform(-spec.occluder.width, spec.width * 0.3)),
                "speed": spec.occluder.speed,
                "width": spec.occluder.width,
                "color": _pick_color(rng, avoid),
            }
        frames, masks = [], []
        for t in range(spec.frames):
            img, lab = _render(spec, bg, shapes, occ, t)
            frames.append(img)
            masks.append(lab)
        if _acceptable(spec, masks):
            return Sequence(frames, masks, spec)
    raise BadSpec(f"could not render an acceptable sequence for seed {spec.seed}")


def _acceptable(spec: SequenceSpec, masks: list[np.ndarray]) -> bool:
    for k in range(1, spec.num_objects + 1):
        areas = [int((m == k).sum()) for m in masks]
        if areas[0] < MIN_VISIBLE_PIXELS:
            return False
        if spec.partial_entry and k == 1 and areas[0] / max(areas) >= PARTIAL_RATIO:
            return False
    return True


def default_suite(
    num_train: int = 200,
    num_eval: int = 40,
    frames: int = 20,
    height: int = 64,
    width: int = 64,
    seed_offset: int = 0,
) -> tuple[list[SequenceSpec], list[SequenceSpec]]:
    """Mixed specs: a quarter partial-entry, a quarter with an occluder, 1-3 objects."""
    specs = []
    for i in range(num_train + num_eval):
        seed = seed_offset + i
        rng = substream(seed, "synth", "suite")
        specs.append(
            SequenceSpec(
                seed=seed,
                frames=frames,
                height=height,
                width=width,
                num_objects=int(rng.integers(1, 4)),
                partial_entry=(i % 4 == 1),
                occluder=OccluderSpec() if i % 4 == 2 else None,
            )
        )
    return specs[:num_train], specs[num_train:]


# ---------------------------------------------------------------- PNM I/O


def _pnm_bytes(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_ppm(path: Path, frame: np.ndarray) -> None:
    Path(path).write_bytes(_pnm_bytes(b"P6", np.transpose(frame, (1, 2, 0))))


def write_pgm(path: Path, labels: np.ndarray) -> None:
    Path(path).write_bytes(_pnm_bytes(b"P5", labels))


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} file")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: bad header") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: only 8-bit rasters are supported")
    ch = 3 if magic == b"P6" else 1
    raster = blob[pos:]
    if len(raster) != w * h * ch:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h * ch}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).copy() if ch == 3 else arr.reshape(h, w).copy()


def read_ppm(path: Path) -> np.ndarray:
    return _read_pnm(path, b"P6")


def read_pgm(path: Path) -> np.ndarray:
    return _read_pnm(path, b"P5")


def save_sequence(seq: Sequence, seq_dir: Path) -> None:
    seq_dir = Path(seq_dir)
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    (seq_dir / "masks").mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(seq.frames, seq.masks)):
        write_ppm(seq_dir / "frames" / f"{i:05d}.ppm", frame)
        write_pgm(seq_dir / "masks" / f"{i:05d}.pgm", mask)
    meta = {"spec": seq.spec.to_json(), "num_objects": seq.spec.num_objects, "frames": len(seq.frames)}
    (seq_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def save_dataset(seqs: list[Sequence], root: str | Path) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i, seq in enumerate(seqs):
        d = root / f"seq_{i:04d}"
        save_sequence(seq, d)
        out.append(d)
    return out


def load_sequence(seq_dir: str | Path) -> Sequence:
    seq_dir = Path(seq_dir)
    meta_path = seq_dir / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{seq_dir}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        spec = SequenceSpec.from_json(meta["spec"])
        n, t = int(meta["num_objects"]), int(meta["frames"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{meta_path}: malformed metadata") from exc
    if n != spec.num_objects or t != spec.frames:
        raise FormatError(f"{meta_path}: metadata disagrees with its spec")
    frames, masks = [], []
    for i in range(t):
        fp, mp = seq_dir / "frames" / f"{i:05d}.ppm", seq_dir / "masks" / f"{i:05d}.pgm"
        if not fp.is_file() or not mp.is_file():
            raise FormatError(f"{seq_dir}: missing frame or mask {i:05d}")
        frame, mask = read_ppm(fp), read_pgm(mp)
        if frame.shape != (3, spec.height, spec.width) or mask.shape != (spec.height, spec.width):
            raise FormatError(f"{seq_dir}: frame {i} has wrong dims")
        if mask.max() > n:
            raise FormatError(f"{mp}: label {mask.max()} exceeds object count {n}")
        frames.append(frame)
        masks.append(mask)
    return Sequence(frames, masks, spec, seq_dir.name)


def load_dataset(root: str | Path) -> list[Sequence]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root} is not a dataset directory")
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("seq_"))
    if not dirs:
        raise FormatError(f"{root}: no seq_* directories")
    return [load_sequence(d) for d in dirs]
