"""Synthetic detection scenes and the on-disk dataset format.

Scenes are 3xHxW float images in [0,1] containing 0-4 filled shapes (disc,
square, triangle) on a noisy gray background, quantized to 8-bit levels so
that the binary PPM container round-trips losslessly.  Annotations are tight
boxes.  Object centers are rejection-sampled so no two land in the same block
of the default detection grid.

Dataset directory layout:
    manifest.txt          header lines ("# key value"), then one record per
                          line: image path followed by repeated
                          "class x_min y_min x_max y_max" groups
    images/NNNNNN.ppm     binary PPM, "P6\\n<w> <h>\\n255\\n" + RGB bytes
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("disc", "square", "triangle")

_BG_LEVEL = 0.5
_MIN_COLOR_CONTRAST = 0.25


@dataclass
class SceneConfig:
    image_size: int = 48
    num_classes: int = 3
    max_objects: int = 4
    min_size: float = 8.0
    max_size: float = 20.0
    noise_sigma: float = 0.05
    grid: int = 6  # block grid used for the one-center-per-block rule

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        if self.min_size < 4 or self.max_size > self.image_size:
            raise ValueError("object sizes out of range for the image")


@dataclass
class Scene:
    image: np.ndarray                       # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray                       # (k, 4) x0, y0, x1, y1
    classes: np.ndarray                     # (k,) int in 1..num_classes

    @property
    def n_objects(self) -> int:
        return int(self.classes.size)


@dataclass
class DatasetManifest:
    split: str
    seed: int
    class_names: tuple[str, ...]
    records: list[str] = field(default_factory=list)  # relative image paths


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _pixel_mask(shape_id: int, cx: float, cy: float, h: float, w: float,
                size: int) -> np.ndarray:
    """Boolean support of a filled shape sampled at pixel centers.

    The triangle widens to its row's lower edge and always paints the apex
    pixel, so the support bounding box stays within one pixel of the
    annotation box at every aspect ratio.
    """
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    if shape_id == 1:  # disc: radius from the smaller half-extent
        r = min(h, w) / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape_id == 2:  # axis-aligned rectangle
        return ((np.abs(px - cx) <= w / 2.0) & (np.abs(py - cy) <= h / 2.0))
    if shape_id == 3:  # upward triangle: apex top-center, base bottom edge
        top = cy - h / 2.0
        bot = cy + h / 2.0
        inside_y = (py >= top) & (py <= bot)
        half_width = (np.minimum(py + 0.5, bot) - top) / h * (w / 2.0)
        mask = inside_y & (np.abs(px - cx) <= half_width)
        apex_y = min(max(int(top), 0), size - 1)
        apex_x = min(max(int(cx), 0), size - 1)
        mask[apex_y, apex_x] = True
        return mask
    raise ValueError(f"unknown shape id {shape_id}")


def shape_box(shape_id: int, cx: float, cy: float, h: float, w: float) -> np.ndarray:
    if shape_id == 1:
        r = min(h, w) / 2.0
        return np.array([cx - r, cy - r, cx + r, cy + r])
    return np.array([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0])


def generate_scene(rng: np.random.Generator,
                   config: SceneConfig | None = None) -> Scene:
    """Draw one scene: noisy gray background, shapes back-to-front, tight
    boxes, at most one object center per block (bounded rejection, then
    fewer objects)."""
    cfg = config or SceneConfig()
    size = cfg.image_size
    block = size // cfg.grid
    img = np.full((3, size, size), _BG_LEVEL, dtype=np.float64)
    img += rng.normal(0.0, cfg.noise_sigma, img.shape)

    n_objects = int(rng.integers(0, cfg.max_objects + 1))
    used_blocks: set[tuple[int, int]] = set()
    boxes = []
    classes = []
    for _ in range(n_objects):
        placed = False
        for _try in range(100):
            shape_id = int(rng.integers(1, cfg.num_classes + 1))
            h = float(rng.uniform(cfg.min_size, cfg.max_size))
            w = h if shape_id == 1 else float(rng.uniform(cfg.min_size, cfg.max_size))
            cx = float(rng.uniform(w / 2.0, size - w / 2.0))
            cy = float(rng.uniform(h / 2.0, size - h / 2.0))
            key = (int(cx // block), int(cy // block))
            if key in used_blocks:
                continue
            color = rng.uniform(0.0, 1.0, 3)
            while np.abs(color - _BG_LEVEL).max() < _MIN_COLOR_CONTRAST:
                color = rng.uniform(0.0, 1.0, 3)
            mask = _pixel_mask(shape_id, cx, cy, h, w, size)
            img[:, mask] = color[:, None]
            boxes.append(shape_box(shape_id, cx, cy, h, w))
            classes.append(shape_id)
            used_blocks.add(key)
            placed = True
            break
        if not placed:
            break  # grid saturated; emit fewer objects

    return Scene(image=_quantize(img),
                 boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
                 classes=np.array(classes, dtype=np.int64))


def scene_for_index(seed: int, index: int,
                    config: SceneConfig | None = None) -> Scene:
    """Pure function of (seed, index): record-by-record reproducibility."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(index,)))
    return generate_scene(rng, config)


# -- PPM container ---------------------------------------------------------------


def write_ppm(path: Path | str, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3,H,W) image, got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file missing: {path}")
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


# -- dataset directory ------------------------------------------------------------


def _format_float(v: float) -> str:
    return repr(float(v))


def write_dataset(scenes: list[Scene], directory: Path | str, split: str = "train",
                  seed: int = 0, class_names: tuple[str, ...] | None = None) -> DatasetManifest:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    names = class_names or CLASS_NAMES
    manifest = DatasetManifest(split=split, seed=seed, class_names=tuple(names))
    lines = [f"# split {split}", f"# seed {seed}", "# classes " + " ".join(names)]
    for i, scene in enumerate(scenes):
        rel = f"images/{i:06d}.ppm"
        write_ppm(directory / rel, scene.image)
        parts = [rel]
        for box, cls in zip(scene.boxes, scene.classes):
            parts.append(str(int(cls)))
            parts.extend(_format_float(v) for v in box)
        lines.append(" ".join(parts))
        manifest.records.append(rel)
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return manifest


def read_dataset(directory: Path | str) -> tuple[DatasetManifest, list[Scene]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest missing: {manifest_path}")
    split, seed, names = "train", 0, CLASS_NAMES
    scenes: list[Scene] = []
    manifest = DatasetManifest(split=split, seed=seed, class_names=tuple(names))
    for ln, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if fields[:1] == ["split"]:
                manifest.split = fields[1]
            elif fields[:1] == ["seed"]:
                manifest.seed = int(fields[1])
            elif fields[:1] == ["classes"]:
                manifest.class_names = tuple(fields[1:])
            continue
        fields = line.split()
        if (len(fields) - 1) % 5 != 0:
            raise ValueError(f"{manifest_path}:{ln}: malformed record "
                             f"(expected path + groups of 5 fields)")
        rel = fields[0]
        try:
            values = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise ValueError(f"{manifest_path}:{ln}: non-numeric field: {exc}") from None
        k = len(values) // 5
        boxes = np.zeros((k, 4))
        classes = np.zeros(k, dtype=np.int64)
        for j in range(k):
            group = values[j * 5:(j + 1) * 5]
            classes[j] = int(group[0])
            boxes[j] = group[1:]
        image = read_ppm(directory / rel)
        scenes.append(Scene(image=image, boxes=boxes, classes=classes))
        manifest.records.append(rel)
    return manifest, scenes


# -- augmentation -----------------------------------------------------------------


def hflip(scene: Scene) -> Scene:
    """Mirror horizontally; an involution on scenes."""
    width = scene.image.shape[2]
    boxes = scene.boxes.copy()
    if boxes.size:
        boxes[:, [0, 2]] = width - scene.boxes[:, [2, 0]]
    return Scene(image=np.ascontiguousarray(scene.image[:, :, ::-1]),
                 boxes=boxes, classes=scene.classes.copy())


def translate(scene: Scene, dx: int, dy: int, fill: float = _BG_LEVEL) -> Scene:
    """Shift image and boxes jointly by whole pixels; boxes are clipped to the
    frame and objects pushed fully outside are dropped."""
    c, h, w = scene.image.shape
    out = np.full_like(scene.image, np.float32(fill))
    src_x = slice(max(0, -dx), min(w, w - dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    out[:, dst_y, dst_x] = scene.image[:, src_y, src_x]
    boxes = []
    classes = []
    for box, cls in zip(scene.boxes, scene.classes):
        moved = box + np.array([dx, dy, dx, dy], dtype=float)
        clipped = np.array([max(moved[0], 0.0), max(moved[1], 0.0),
                            min(moved[2], float(w)), min(moved[3], float(h))])
        if clipped[2] - clipped[0] > 1.0 and clipped[3] - clipped[1] > 1.0:
            boxes.append(clipped)
            classes.append(cls)
    return Scene(image=out, boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
                 classes=np.array(classes, dtype=np.int64))


def augment(scene: Scene, rng: np.random.Generator, flip_prob: float = 0.5,
            jitter: int = 2) -> Scene:
    """Random horizontal flip plus integer translation jitter."""
    out = scene
    if rng.random() < flip_prob:
        out = hflip(out)
    if jitter > 0:
        dx = int(rng.integers(-jitter, jitter + 1))
        dy = int(rng.integers(-jitter, jitter + 1))
        if dx or dy:
            out = translate(out, dx, dy)
    return out
