"""Synthetic spatial-reasoning datasets and their on-disk format.

Absolute task: one red square on a white image, inside one of the four
edge cells (top, bottom, left, right) of a 3x3 partition, so exactly one
position question is answered "yes".

Relative task: a gray ellipse ("blob") with a red square next to one side
of its bounding box, separated by a fixed gap.

Every placement is assigned to the train or test split by a hash of its
geometry, so the two splits never share a placement.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from .features import RasterImage, SpatialFeatures, save_precomputed
from .tensor import Rng

POSITIONS = ("top", "bottom", "left", "right")
RED = (255, 0, 0)
GRAY = (128, 128, 128)
TEST_SHARE = 5  # one placement in five belongs to the test split


class SpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    task: str = "absolute"
    image_size: int = 64
    square: int | None = None  # 12 (absolute) / 6 (relative) when unset
    object_noun: str = "blob"
    object_axes: tuple[int, int] = (4, 7)  # semi-axis range of the ellipse, pixels
    gap: int = 2
    num_distractors: int = 0
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.task in ("abs", "absolute"):
            self.task = "absolute"
        elif self.task in ("rel", "relative"):
            self.task = "relative"
        else:
            raise SpecError(f"unknown task {self.task!r}")
        if self.square is None:
            self.square = 12 if self.task == "absolute" else 6
        self.object_axes = tuple(self.object_axes)
        if self.n_train <= 0 or self.n_test <= 0:
            raise SpecError("image counts must be positive")
        if self.square <= 0 or self.image_size <= 0:
            raise SpecError("sizes must be positive")
        if self.task == "absolute" and self.square > self.image_size // 3:
            raise SpecError(f"square of side {self.square} does not fit a placement zone of {self.image_size // 3}")
        if self.task == "relative":
            lo, hi = self.object_axes
            if lo < 1 or hi < lo:
                raise SpecError(f"bad object axis range {self.object_axes}")
            if 2 * hi + 2 * (self.square + self.gap) > self.image_size:
                raise SpecError("object plus squares on both sides do not fit the image")


@dataclass
class QASample:
    image: int  # index into Dataset.images
    question: str
    answer: str
    category: str
    square_box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    object_box: tuple[int, int, int, int] | None = None
    human_answers: list[str] | None = None


@dataclass
class Dataset:
    task: str
    images: list[RasterImage]
    samples: list[QASample]
    image_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.image_names:
            self.image_names = [f"img_{i:05d}.ppm" for i in range(len(self.images))]

    def corpus(self):
        return [(s.question, s.answer) for s in self.samples]


def zones(size: int) -> dict[str, tuple[int, int, int, int]]:
    """Edge cells of the 3x3 partition as (x0, y0, x1, y1)."""
    b = [0, size // 3, 2 * size // 3, size]
    return {
        "top": (b[1], b[0], b[2], b[1]),
        "bottom": (b[1], b[2], b[2], b[3]),
        "left": (b[0], b[1], b[1], b[2]),
        "right": (b[2], b[1], b[3], b[2]),
    }


def zone_of_point(x: float, y: float, size: int) -> tuple[int, int]:
    """(row, col) of the 3x3 partition cell containing a point."""
    b = [size // 3, 2 * size // 3]
    return int(np.searchsorted(b, y, side="right")), int(np.searchsorted(b, x, side="right"))


def _in_test(key) -> bool:
    return zlib.crc32(repr(key).encode()) % TEST_SHARE == 0


def _draw_box(px: np.ndarray, box, color):
    x0, y0, x1, y1 = box
    px[y0:y1, x0:x1] = color


def _draw_ellipse(px: np.ndarray, box, color):
    x0, y0, x1, y1 = box
    ax, ay = (x1 - x0) / 2, (y1 - y0) / 2
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = ((xs + 0.5 - x0 - ax) / ax) ** 2 + ((ys + 0.5 - y0 - ay) / ay) ** 2 <= 1.0
    px[y0:y1, x0:x1][inside] = color


def absolute_question(pos: str) -> str:
    return f"Is there a red square on the {pos}?"


def relative_question(pos: str, noun: str) -> str:
    return f"Is there a red square on the {pos} of the {noun}?"


def _emit(samples, idx, truth, question_fn, square_box, object_box=None):
    for pos in POSITIONS:
        samples.append(QASample(idx, question_fn(pos), "yes" if pos == truth else "no", pos,
                                tuple(square_box), None if object_box is None else tuple(object_box)))


def _absolute_split(spec: SynthSpec, rng: Rng, count: int, test: bool) -> Dataset:
    size, s = spec.image_size, spec.square
    zs = zones(size)
    images, samples = [], []
    g = rng.gen
    while len(images) < count:
        pos = POSITIONS[g.integers(4)]
        zx0, zy0, zx1, zy1 = zs[pos]
        x = int(g.integers(zx0, zx1 - s + 1))
        y = int(g.integers(zy0, zy1 - s + 1))
        if _in_test((pos, x, y, s)) != test:
            continue
        img = RasterImage.blank(size, size)
        box = (x, y, x + s, y + s)
        _draw_box(img.pixels, box, RED)
        _emit(samples, len(images), pos, absolute_question, box)
        images.append(img)
    return Dataset("absolute", images, samples)


def relative_square_box(object_box, side: str, s: int, gap: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = object_box
    cx, cy = (x0 + x1 - s) // 2, (y0 + y1 - s) // 2
    if side == "top":
        return (cx, y0 - gap - s, cx + s, y0 - gap)
    if side == "bottom":
        return (cx, y1 + gap, cx + s, y1 + gap + s)
    if side == "left":
        return (x0 - gap - s, cy, x0 - gap, cy + s)
    return (x1 + gap, cy, x1 + gap + s, cy + s)


def _overlaps(a, b, pad=0) -> bool:
    return not (a[2] + pad <= b[0] or b[2] + pad <= a[0] or a[3] + pad <= b[1] or b[3] + pad <= a[1])


def _relative_split(spec: SynthSpec, rng: Rng, count: int, test: bool) -> Dataset:
    size, s, gap = spec.image_size, spec.square, spec.gap
    lo, hi = spec.object_axes
    margin = s + gap
    q = lambda pos: relative_question(pos, spec.object_noun)
    images, samples = [], []
    g = rng.gen
    while len(images) < count:
        ax, ay = (int(v) for v in g.integers(lo, hi + 1, size=2))
        w, h = 2 * ax, 2 * ay
        ox = int(g.integers(margin, size - margin - w + 1))
        oy = int(g.integers(margin, size - margin - h + 1))
        side = POSITIONS[g.integers(4)]
        if _in_test((side, ox, oy, w, h, s)) != test:
            continue
        obj = (ox, oy, ox + w, oy + h)
        sq = relative_square_box(obj, side, s, gap)
        img = RasterImage.blank(size, size)
        _draw_ellipse(img.pixels, obj, GRAY)
        taken = [obj, sq]
        for _ in range(spec.num_distractors):
            for _attempt in range(100):
                dx, dy = (int(v) for v in g.integers(lo, hi + 1, size=2))
                bx = int(g.integers(0, size - 2 * dx + 1))
                by = int(g.integers(0, size - 2 * dy + 1))
                box = (bx, by, bx + 2 * dx, by + 2 * dy)
                if not any(_overlaps(box, t, pad=margin) for t in taken):
                    _draw_ellipse(img.pixels, box, GRAY)
                    taken.append(box)
                    break
        _draw_box(img.pixels, sq, RED)
        _emit(samples, len(images), side, q, sq, obj)
        images.append(img)
    return Dataset("relative", images, samples)


def _generate(spec: SynthSpec, split_fn) -> tuple[Dataset, Dataset]:
    root = Rng(spec.seed)
    train = split_fn(spec, root.spawn(0), spec.n_train, test=False)
    test = split_fn(spec, root.spawn(1), spec.n_test, test=True)
    return train, test


def gen_absolute(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    if spec.task != "absolute":
        raise SpecError("gen_absolute needs an absolute-task spec")
    return _generate(spec, _absolute_split)


def gen_relative(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    if spec.task != "relative":
        raise SpecError("gen_relative needs a relative-task spec")
    return _generate(spec, _relative_split)


def generate(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    return gen_absolute(spec) if spec.task == "absolute" else gen_relative(spec)


def answer_from_geometry(sample: QASample, size: int) -> str:
    """Recompute the answer from stored boxes alone."""
    x0, y0, x1, y1 = sample.square_box
    if sample.object_box is None:
        row, col = zone_of_point((x0 + x1) / 2, (y0 + y1) / 2, size)
        where = {(0, 1): "top", (2, 1): "bottom", (1, 0): "left", (1, 2): "right"}.get((row, col))
    else:
        ox0, oy0, ox1, oy1 = sample.object_box
        if y1 <= oy0:
            where = "top"
        elif y0 >= oy1:
            where = "bottom"
        elif x1 <= ox0:
            where = "left"
        elif x0 >= ox1:
            where = "right"
        else:
            where = None
    return "yes" if where == sample.category else "no"


# ---------------------------------------------------------------- disk format

def serialize_dataset(ds: Dataset, out_dir, features: list[SpatialFeatures] | None = None) -> Path:
    """Write images as P6 PPM plus manifest.jsonl (one line per sample)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for name, img in zip(ds.image_names, ds.images):
        pnm.write(out / "images" / name, img.pixels)
    feat_names = None
    if features is not None:
        (out / "features").mkdir(exist_ok=True)
        feat_names = []
        for name, f in zip(ds.image_names, features):
            fname = Path(name).with_suffix(".smemfeat").name
            save_precomputed(out / "features" / fname, f)
            feat_names.append(f"features/{fname}")
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for s in ds.samples:
            rec = {
                "image": f"images/{ds.image_names[s.image]}",
                "question": s.question,
                "answer": s.answer,
                "category": s.category,
                "square_box": list(s.square_box),
            }
            if s.object_box is not None:
                rec["object_box"] = list(s.object_box)
            if s.human_answers is not None:
                rec["human_answers"] = s.human_answers
            if feat_names is not None:
                rec["features"] = feat_names[s.image]
            fh.write(json.dumps(rec) + "\n")
    (out / "dataset.json").write_text(json.dumps({"task": ds.task, "images": len(ds.images)}) + "\n")
    return out


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    meta_path = root / "dataset.json"
    task = json.loads(meta_path.read_text())["task"] if meta_path.exists() else "unknown"
    index: dict[str, int] = {}
    images, names, samples = [], [], []
    manifest = root / "manifest.jsonl"
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise OSError(f"cannot read manifest {manifest}: {e}") from e
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        ref = rec["image"]
        if ref not in index:
            path = root / ref
            try:
                px = pnm.read(path)
            except OSError as e:
                raise OSError(f"cannot read image {path}: {e}") from e
            index[ref] = len(images)
            images.append(RasterImage(px.shape[1], px.shape[0], px))
            names.append(Path(ref).name)
        obj = rec.get("object_box")
        samples.append(QASample(index[ref], rec["question"], rec["answer"], rec["category"],
                                tuple(rec["square_box"]), None if obj is None else tuple(obj),
                                rec.get("human_answers")))
    return Dataset(task, images, samples, names)


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
