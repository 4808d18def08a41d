"""Frame-pair datasets: synthetic moving-sprite scenes and CamVid-layout folders.

Every item is a :class:`LabeledFramePair` holding an earlier frame (the
prior), the current frame, and the label map of the current frame.

Synthetic scenes are built so that appearance alone is ambiguous.  Each
moving class has a static look-alike with the same size range and colour
family (pedestrian/pole, bicyclist/sign, car/fence), placed in the same part
of the frame.  Appearance identifies the pair; by default only displacement
between the two frames tells its members apart.  ``twin_separation`` pulls
the red-channel ranges of the two members apart so that appearance becomes a
weak cue as well.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pfseg.imageio import ImageFormatError, read_image, read_png_raw, to_float, to_uint8, write_ppm

VOID = 255
STATIC, DYNAMIC = "static", "dynamic"


class DataError(ValueError):
    """Missing, corrupt, or inconsistent dataset files."""


# ---------------------------------------------------------------------------
# classes


@dataclass(frozen=True)
class ClassTable:
    names: Tuple[str, ...]
    palette: Tuple[Tuple[int, int, int], ...]
    partition: Dict[str, str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if len(self.palette) != len(self.names):
            raise ValueError("one palette colour per class is required")
        if len(set(map(tuple, self.palette))) != len(self.palette):
            raise ValueError("palette colours must be unique")
        missing = [n for n in self.names if self.partition.get(n) not in (STATIC, DYNAMIC)]
        if missing:
            raise ValueError(f"classes without a static/dynamic group: {missing}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def group_of(self, class_id: int) -> str:
        return self.partition[self.names[class_id]]

    def groups(self) -> List[str]:
        """Group label for each class id."""
        return [self.partition[n] for n in self.names]

    def colorize(self, labels: np.ndarray) -> np.ndarray:
        """Label map -> ``H x W x 3`` uint8; void renders black."""
        lut = np.zeros((256, 3), dtype=np.uint8)
        lut[: len(self)] = np.asarray(self.palette, dtype=np.uint8)
        return lut[np.asarray(labels, dtype=np.int64)]

    def decode_colors(self, rgb: np.ndarray, strict: bool = False, source: str = "") -> np.ndarray:
        """Map exact palette colours to class ids; other colours become void.

        With ``strict=True`` an unknown non-black colour raises instead.
        """
        rgb = np.asarray(rgb, dtype=np.uint8)
        keys = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
        out = np.full(keys.shape, VOID, dtype=np.uint8)
        for i, (r, g, b) in enumerate(self.palette):
            out[keys == ((r << 16) | (g << 8) | b)] = i
        if strict:
            unknown = (out == VOID) & (keys != 0)
            if unknown.any():
                y, x = np.argwhere(unknown)[0]
                raise DataError(f"{source}: colour {tuple(int(v) for v in rgb[y, x])} at ({y}, {x}) is not in the palette")
        return out


def default_class_table() -> ClassTable:
    """The 11-class CamVid evaluation set with its conventional colours."""
    names = ("sky", "building", "pole", "road", "sidewalk", "tree", "sign", "fence", "car", "pedestrian", "bicyclist")
    palette = (
        (128, 128, 128),
        (128, 0, 0),
        (192, 192, 128),
        (128, 64, 128),
        (60, 40, 222),
        (128, 128, 0),
        (192, 128, 128),
        (64, 64, 128),
        (64, 0, 128),
        (64, 64, 0),
        (0, 128, 192),
    )
    dynamic = {"car", "pedestrian", "bicyclist"}
    return ClassTable(names, palette, {n: DYNAMIC if n in dynamic else STATIC for n in names})


# ---------------------------------------------------------------------------
# items


@dataclass
class LabeledFramePair:
    prior: np.ndarray  # 3 x H x W float32 in [0, 1]
    current: np.ndarray
    labels: np.ndarray  # H x W uint8, VOID = 255
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.prior.shape != self.current.shape or self.current.shape[1:] != self.labels.shape:
            raise DataError(
                f"prior {self.prior.shape}, current {self.current.shape} and labels {self.labels.shape} disagree"
            )

    @property
    def size(self) -> Tuple[int, int]:
        return self.labels.shape


# ---------------------------------------------------------------------------
# synthetic scenes

# background bands top to bottom
_BANDS = ("sky", "building", "tree", "sidewalk", "road")
_BAND_COLORS = {
    "sky": (0.55, 0.70, 0.90),
    "building": (0.55, 0.35, 0.30),
    "tree": (0.25, 0.50, 0.20),
    "sidewalk": (0.60, 0.60, 0.55),
    "road": (0.35, 0.35, 0.38),
}
# static look-alike for each moving class, with (height, width) ranges
_TWINS = {
    "pedestrian": ("pole", (14, 22), (4, 6)),
    "bicyclist": ("sign", (8, 12), (8, 12)),
    "car": ("fence", (8, 12), (18, 26)),
}
_SPEEDS = {"pedestrian": (2, 3), "bicyclist": (3, 4), "car": (3, 5)}
# per-pair RGB ranges: each look-alike pair shares one colour family
_FAMILY_COLORS = {
    "pedestrian": ((0.75, 0.05, 0.10), (0.95, 0.25, 0.45)),
    "bicyclist": ((0.80, 0.70, 0.00), (1.00, 0.90, 0.20)),
    "car": ((0.30, 0.00, 0.65), (0.50, 0.15, 0.90)),
}


@dataclass
class Sprite:
    """Textured rectangle; ``x, y`` is the top-left corner at frame 0."""

    class_name: str
    height: int
    width: int
    x: int
    y: int
    vx: int = 0
    vy: int = 0
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    texture_seed: int = 0

    def box(self, t: int) -> Tuple[int, int, int, int]:
        """``(top, left, bottom, right)`` at frame ``t``, bottom/right exclusive."""
        top = self.y + self.vy * t
        left = self.x + self.vx * t
        return top, left, top + self.height, left + self.width


@dataclass
class SceneScript:
    height: int
    width: int
    band_edges: Tuple[int, ...]  # bottom row (exclusive) of each band
    band_colors: Dict[str, Tuple[float, float, float]]
    texture_seed: int
    noise: float = 0.06
    sprites: List[Sprite] = field(default_factory=list)


def make_script(
    rng: np.random.Generator,
    height: int,
    width: int,
    offset: int,
    objects_per_class: Tuple[int, int] = (1, 2),
    twin_separation: float = 0.0,
) -> SceneScript:
    """Draw a random scene whose moving sprites sit inside the frame at time ``offset``.

    ``twin_separation`` in ``[0, 1)`` shifts the red-channel range of moving
    sprites up and that of their static look-alikes down by that fraction of
    the family range, so appearance becomes a weak cue; at 0 the pair is
    separable by motion alone.
    """
    if not 0.0 <= twin_separation < 1.0:
        raise ValueError("twin_separation must lie in [0, 1)")
    # band heights as fractions of the frame: sky, building, tree, sidewalk, road
    weights = rng.uniform([0.10, 0.18, 0.08, 0.14, 0.22], [0.18, 0.28, 0.14, 0.22, 0.32])
    edges = np.round(np.cumsum(weights / weights.sum()) * height).astype(int)
    edges[-1] = height
    colors = {
        b: tuple(float(v) for v in np.clip(np.asarray(c) + rng.uniform(-0.06, 0.06, 3), 0, 1))
        for b, c in _BAND_COLORS.items()
    }
    ground_top = int(edges[2]) - 4
    script = SceneScript(height, width, tuple(int(e) for e in edges), colors, int(rng.integers(2**31)))

    for moving, (static, hr, wr) in _TWINS.items():
        for cls, is_moving in ((moving, True), (static, False)):
            for _ in range(int(rng.integers(objects_per_class[0], objects_per_class[1] + 1))):
                h = int(rng.integers(hr[0], hr[1] + 1))
                w = int(rng.integers(wr[0], wr[1] + 1))
                if h > height or w > width:
                    raise ValueError(f"sprite {h}x{w} does not fit a {height}x{width} frame")
                y = int(rng.integers(ground_top, max(ground_top + 1, height - h + 1)))
                y = min(y, height - h)
                x_now = int(rng.integers(0, width - w + 1))
                vx = 0
                if is_moving:
                    lo, hi = _SPEEDS[cls]
                    vx = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
                c_lo, c_hi = (np.array(c, dtype=np.float64) for c in _FAMILY_COLORS[moving])
                shift = twin_separation * (c_hi[0] - c_lo[0])
                if is_moving:
                    c_lo[0] += shift
                else:
                    c_hi[0] -= shift
                color = tuple(float(v) for v in rng.uniform(c_lo, c_hi))
                script.sprites.append(
                    Sprite(cls, h, w, x_now - vx * offset, y, vx, 0, color, int(rng.integers(2**31)))
                )
    # draw larger objects first so small ones stay visible
    order = rng.permutation(len(script.sprites))
    script.sprites = sorted((script.sprites[i] for i in order), key=lambda s: -s.height * s.width)
    return script


def render(script: SceneScript, t: int, table: ClassTable, brightness: float = 1.0):
    """Render frame ``t`` of a script: ``(image 3xHxW float32, labels HxW uint8)``."""
    h, w = script.height, script.width
    tex = np.random.default_rng(script.texture_seed).normal(0.0, script.noise, (3, h, w))
    img = np.empty((3, h, w), dtype=np.float64)
    labels = np.empty((h, w), dtype=np.uint8)
    top = 0
    for band, bottom in zip(_BANDS, script.band_edges):
        img[:, top:bottom] = np.asarray(script.band_colors[band])[:, None, None]
        labels[top:bottom] = table.index(band)
        top = bottom
    img += tex
    for s in script.sprites:
        if s.height > h or s.width > w:
            raise ValueError(f"sprite {s.height}x{s.width} does not fit a {h}x{w} frame")
        y0, x0, y1, x1 = s.box(t)
        cy0, cx0, cy1, cx1 = max(y0, 0), max(x0, 0), min(y1, h), min(x1, w)
        if cy0 >= cy1 or cx0 >= cx1:
            continue
        patch = np.random.default_rng(s.texture_seed).normal(0.0, script.noise, (3, s.height, s.width))
        patch += np.asarray(s.color)[:, None, None]
        img[:, cy0:cy1, cx0:cx1] = patch[:, cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
        labels[cy0:cy1, cx0:cx1] = table.index(s.class_name)
    img = np.clip(img * brightness, 0.0, 1.0).astype(np.float32)
    return img, labels


def generate_synthetic(
    seed: int,
    n_scenes: int,
    size: Tuple[int, int] = (64, 64),
    prior_offset_frames: int = 3,
    jitter: float = 0.03,
    start: int = 0,
    table: Optional[ClassTable] = None,
    objects_per_class: Tuple[int, int] = (1, 2),
    twin_separation: float = 0.0,
) -> List[LabeledFramePair]:
    """Deterministic prior/current/label triples for scenes ``start .. start+n_scenes-1``.

    The prior is frame 0 and the current frame is frame ``prior_offset_frames``;
    each frame gets an independent global brightness factor in
    ``[1 - jitter, 1 + jitter]``.
    """
    h, w = size
    if h % 16 or w % 16:
        raise ValueError(f"frame size must be divisible by 16, got {h}x{w}")
    if prior_offset_frames < 1:
        raise ValueError("prior_offset_frames must be >= 1")
    table = table or default_class_table()
    items = []
    for k in range(start, start + n_scenes):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, k])
        script = make_script(rng, h, w, prior_offset_frames, objects_per_class, twin_separation)
        b0, b1 = 1.0 + jitter * rng.uniform(-1, 1, 2)
        prior, _ = render(script, 0, table, b0)
        current, labels = render(script, prior_offset_frames, table, b1)
        meta = {"source": f"synthetic-{seed}-{k:05d}", "frame_index": prior_offset_frames, "prior_offset": prior_offset_frames}
        items.append(LabeledFramePair(prior, current, labels, meta))
    return items


# ---------------------------------------------------------------------------
# crops and padding


def pad_pair(pair: LabeledFramePair, height: int, width: int) -> LabeledFramePair:
    """Zero-pad images and void-pad labels at the bottom/right to ``height x width``."""
    h, w = pair.size
    if h > height or w > width:
        raise ValueError(f"cannot pad {h}x{w} down to {height}x{width}")
    ph, pw = height - h, width - w
    img_pad = ((0, 0), (0, ph), (0, pw))
    meta = dict(pair.meta, padding=(ph, pw))
    return LabeledFramePair(
        np.pad(pair.prior, img_pad),
        np.pad(pair.current, img_pad),
        np.pad(pair.labels, ((0, ph), (0, pw)), constant_values=VOID),
        meta,
    )


def pad_to_multiple(pair: LabeledFramePair, multiple: int = 16) -> LabeledFramePair:
    h, w = pair.size
    return pad_pair(pair, -(-h // multiple) * multiple, -(-w // multiple) * multiple)


def crop_window(frame: Tuple[int, int], crop: Tuple[int, int], rng) -> Tuple[int, int]:
    h, w = frame
    ch, cw = crop
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} is larger than the {h}x{w} frame")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))


def crop_pair(pair: LabeledFramePair, top: int, left: int, crop: Tuple[int, int]) -> LabeledFramePair:
    ch, cw = crop
    h, w = pair.size
    if top < 0 or left < 0 or top + ch > h or left + cw > w:
        raise ValueError(f"crop window ({top}, {left}) + {ch}x{cw} exceeds the {h}x{w} frame")
    sl = (slice(top, top + ch), slice(left, left + cw))
    meta = dict(pair.meta, crop=(top, left, ch, cw))
    return LabeledFramePair(pair.prior[:, sl[0], sl[1]], pair.current[:, sl[0], sl[1]], pair.labels[sl], meta)


def random_crop_pair(
    pair: LabeledFramePair,
    crop: Tuple[int, int] = (227, 227),
    seed=0,
    pad_to: Optional[Tuple[int, int]] = (240, 240),
) -> LabeledFramePair:
    """One uniformly drawn window applied to prior, current and labels alike.

    The crop is then padded to ``pad_to`` so the pooling stack can consume it.
    """
    top, left = crop_window(pair.size, crop, seed)
    out = crop_pair(pair, top, left, crop)
    if pad_to is not None:
        out = pad_pair(out, *pad_to)
    return out


# ---------------------------------------------------------------------------
# export / manifest


MANIFEST = "manifest.tsv"


def export_dataset(items: Sequence[LabeledFramePair], out_dir, table: Optional[ClassTable] = None, splits=None) -> Path:
    """Write PPM triples and a tab-separated manifest.

    Manifest columns: id, split, prior path, current path, label path, offset.
    Paths are relative to ``out_dir``.  Labels are palette-coloured.
    """
    table = table or default_class_table()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, item in enumerate(items):
        split = splits[i] if splits is not None else "train"
        item_id = item.meta.get("source", f"item-{i:05d}")
        names = (f"{item_id}_prior.ppm", f"{item_id}_current.ppm", f"{item_id}_label.ppm")
        write_ppm(out / names[0], to_uint8(item.prior))
        write_ppm(out / names[1], to_uint8(item.current))
        write_ppm(out / names[2], table.colorize(item.labels))
        lines.append("\t".join((item_id, split) + names + (str(item.meta.get("prior_offset", "")),)))
    (out / MANIFEST).write_text("".join(line + "\n" for line in lines))
    return out / MANIFEST


def load_exported(data_dir, split: Optional[str] = None, table: Optional[ClassTable] = None) -> List[LabeledFramePair]:
    table = table or default_class_table()
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DataError(f"{manifest}: manifest not found")
    items = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise DataError(f"{manifest}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        item_id, item_split, p, c, lab, offset = fields
        if split is not None and item_split != split:
            continue
        try:
            prior = to_float(read_image(root / p))
            current = to_float(read_image(root / c))
            labels = table.decode_colors(read_image(root / lab), source=str(root / lab))
        except (OSError, ImageFormatError) as exc:
            raise DataError(f"{manifest}:{lineno}: {exc}") from exc
        meta = {"source": item_id, "split": item_split, "prior_offset": int(offset) if offset else None}
        items.append(LabeledFramePair(prior, current, labels, meta))
    return items


# ---------------------------------------------------------------------------
# CamVid-layout folders

_FRAME_RE = re.compile(r"^(?P<seq>[0-9A-Za-z]+)_(?P<frame>\d+)(?:_L)?\.(?:png|ppm)$", re.IGNORECASE)


def parse_frame_name(name: str) -> Tuple[str, int, int]:
    """``"0001TP_006690.png"`` -> ``("0001TP", 6690, 6)`` (sequence, frame, digit count)."""
    m = _FRAME_RE.match(name)
    if not m:
        raise DataError(f"{name}: expected <sequence>_<frame>.png")
    return m.group("seq"), int(m.group("frame")), len(m.group("frame"))


def prior_frame_name(name: str, offset: int) -> str:
    seq, frame, digits = parse_frame_name(name)
    if frame - offset < 0:
        raise DataError(f"{name}: no frame {offset} frames earlier")
    return f"{seq}_{frame - offset:0{digits}d}"


class CamVidDataset:
    """Labelled frames of one split paired with earlier raw frames.

    Expected layout under ``root``::

        <split>/<seq>_<frame>.png        current frames
        <split>annot/<seq>_<frame>.png   labels (RGB/paletted colours or
                                         grayscale class indices)
        frames/<seq>_<frame>.png         raw video frames used as priors

    Priors are searched in ``frames/`` first, then among the split's own
    images.  Labelled frames without a prior are dropped and counted.
    """

    def __init__(self, root, split: str = "train", prior_offset_frames: int = 30, table=None, strict_palette=False):
        self.root = Path(root)
        self.split = split
        self.offset = prior_offset_frames
        self.table = table or default_class_table()
        self.strict_palette = strict_palette
        img_dir = self.root / split
        lab_dir = self.root / f"{split}annot"
        if not img_dir.is_dir():
            raise DataError(f"{img_dir}: image directory not found")
        if not lab_dir.is_dir():
            raise DataError(f"{lab_dir}: label directory not found")
        labels = {}
        for p in sorted(lab_dir.iterdir()):
            if _FRAME_RE.match(p.name):
                seq, frame, digits = parse_frame_name(p.name)
                labels[f"{seq}_{frame:0{digits}d}"] = p
        lookup = {}
        for d in (self.root / "frames", img_dir):
            if d.is_dir():
                for p in sorted(d.iterdir()):
                    if _FRAME_RE.match(p.name):
                        lookup.setdefault(p.stem, p)
        images = {p.stem: p for p in sorted(img_dir.iterdir()) if _FRAME_RE.match(p.name)}
        self.candidates = len(images)
        self.items: List[Tuple[Path, Path, Path]] = []
        self.dropped: List[str] = []
        for stem, img in sorted(images.items()):
            lab = labels.get(stem)
            if lab is None:
                raise DataError(f"{img}: no label file in {lab_dir}")
            try:
                prior = lookup.get(prior_frame_name(img.name, self.offset))
            except DataError:
                prior = None
            if prior is None:
                self.dropped.append(stem)
                continue
            self.items.append((prior, img, lab))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> LabeledFramePair:
        prior_path, img_path, lab_path = self.items[i]
        try:
            prior = to_float(read_image(prior_path))
            current = to_float(read_image(img_path))
            labels = self._read_labels(lab_path)
        except ImageFormatError as exc:
            raise DataError(str(exc)) from exc
        seq, frame, _ = parse_frame_name(img_path.name)
        meta = {"source": img_path.stem, "sequence": seq, "frame_index": frame, "prior_offset": self.offset}
        return LabeledFramePair(prior, current, labels, meta)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def _read_labels(self, path: Path) -> np.ndarray:
        if path.suffix.lower() == ".png":
            arr, mode = read_png_raw(path)
            if mode in ("L", "I", "I;16"):
                idx = arr.astype(np.int64)
                return np.where((idx >= 0) & (idx < len(self.table)), idx, VOID).astype(np.uint8)
        return self.table.decode_colors(read_image(path), strict=self.strict_palette, source=str(path))


def load_camvid(root, prior_offset_frames: int = 30, class_table: Optional[ClassTable] = None, split: str = "train", **kw):
    return CamVidDataset(root, split, prior_offset_frames, class_table, **kw)
