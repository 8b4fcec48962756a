"""Procedural shape scenes with word-tagged captions.

Every sample is drawn from its own ``numpy`` generator seeded by
``(seed, index)``, so a dataset is a pure function of ``(n, split, seed)``
and can be generated in any order or in parallel.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ralb.captions import AnnotatedCaption, write_captions_jsonl
from ralb.rawtensor import write_rtns

SHAPES = ("circle", "square", "triangle", "star", "cross")
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.50, 0.05),
    "pink": (0.95, 0.45, 0.70),
    "brown": (0.50, 0.30, 0.10),
}
SIZES = ("small", "large")
TEXTURES = ("plain", "striped", "dotted")
BACKGROUND_COLORS = {"white": (0.95, 0.95, 0.95), "gray": (0.60, 0.60, 0.60)}
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")

_RADIUS = {"small": 7.0, "large": 10.0}
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    shape: str | None
    color: str
    size: str
    row: int
    col: int
    texture: str
    background: str

    def __post_init__(self):
        if self.shape is not None and self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")
        if not (0 <= self.row < 3 and 0 <= self.col < 3):
            raise ValueError("grid cell out of range")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.background not in BACKGROUND_COLORS:
            raise ValueError(f"unknown background color {self.background!r}")


@dataclass(frozen=True)
class DatasetSplit:
    train_classes: tuple[str, ...]
    zeroshot_classes: tuple[str, ...] = ()
    task_kind: str = "ObjectLabel"

    def __post_init__(self):
        if self.task_kind not in ("ObjectLabel", "AttributeLabel"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        vocab = SHAPES if self.task_kind == "ObjectLabel" else TEXTURES
        for name in (*self.train_classes, *self.zeroshot_classes):
            if name not in vocab:
                raise ValueError(f"{name!r} is not a valid {self.task_kind} class")
        if self.task_kind == "ObjectLabel" and set(self.train_classes) & set(self.zeroshot_classes):
            raise ValueError("train and zero-shot classes must be disjoint")

    def classes(self, partition: str) -> tuple[str, ...]:
        if partition == "train":
            return self.train_classes
        if partition == "zeroshot":
            return self.zeroshot_classes
        raise ValueError(f"unknown partition {partition!r}")

    def to_json(self) -> dict:
        return {
            "train_classes": list(self.train_classes),
            "zeroshot_classes": list(self.zeroshot_classes),
            "task_kind": self.task_kind,
        }

    @classmethod
    def from_json(cls, d: dict) -> DatasetSplit:
        return cls(tuple(d["train_classes"]), tuple(d.get("zeroshot_classes", ())), d.get("task_kind", "ObjectLabel"))


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3) float32
    labels: np.ndarray  # (n,) int64
    captions: list[AnnotatedCaption]
    class_names: list[str]
    specs: list[SceneSpec] = field(default_factory=list)
    name: str = "synthetic"

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            [self.captions[i] for i in idx],
            list(self.class_names),
            [self.specs[i] for i in idx] if self.specs else [],
            self.name,
        )


def _inside(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape == "triangle":
        # apex up, base at dy = +0.8r
        t = (dy + r) / (1.8 * r)
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= t * r)
    if shape == "star":
        rho = np.hypot(dx, dy)
        theta = np.arctan2(dx, -dy)
        lobe = np.abs(np.cos(2.5 * theta)) ** 2
        return rho <= r * (0.4 + 0.6 * lobe)
    if shape == "cross":
        arm = 0.3 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, resolution: int = 32) -> np.ndarray:
    """Rasterize ``spec`` into an ``(R, R, 3)`` float32 image in [0, 1]."""
    if resolution < 8:
        raise ValueError("resolution must be at least 8x8")
    R = resolution
    bg = np.array(BACKGROUND_COLORS[spec.background], dtype=np.float64)
    img = np.broadcast_to(bg, (R, R, 3)).copy()
    yy, xx = np.mgrid[0:R, 0:R]
    if spec.texture == "striped":
        img[(yy // 2) % 2 == 1] *= 0.85
    elif spec.texture == "dotted":
        img[(yy % 4 == 1) & (xx % 4 == 1)] *= 0.7

    if spec.shape is not None:
        scale = R / 32.0
        r = _RADIUS[spec.size] * scale
        # 3x3 anchor grid spaced R/6 around the image center
        cx = R / 2.0 + (spec.col - 1) * R / 6.0
        cy = R / 2.0 + (spec.row - 1) * R / 6.0
        # supersampled coverage at sub-pixel centers
        offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
        cover = np.zeros((R, R))
        for oy, ox in itertools.product(offs, offs):
            cover += _inside(spec.shape, xx + ox - cx, yy + oy - cy, r)
        cover /= _SUPERSAMPLE**2
        fg = np.array(COLORS[spec.color])
        img = img * (1.0 - cover[..., None]) + fg * cover[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _position_words(row: int, col: int) -> list[tuple[str, str]]:
    if row == 1 and col == 1:
        return [("very", "A"), ("center", "N")]
    if row == 1:
        return [("center", "A"), (COLS[col], "N")]
    return [(ROWS[row], "A"), (COLS[col], "N")]


def caption_of(spec: SceneSpec, style: str = "rich") -> AnnotatedCaption:
    """Template caption with ground-truth word classes.

    ``rich`` mentions every scene attribute (17 words); ``short`` is
    ``"a {color} {shape}"``.
    """
    shape = spec.shape or "blank"
    if style == "short":
        words = [("a", "F"), (spec.color, "A"), (shape, "N")]
    elif style == "rich":
        words = [
            ("a", "F"), (spec.size, "A"), (spec.color, "A"), (shape, "N"),
            ("drawn", "O"), ("at", "F"), ("the", "F"),
            *_position_words(spec.row, spec.col),
            ("of", "F"), ("the", "F"), ("image", "N"),
            ("on", "F"), ("a", "F"), (spec.texture, "A"), (spec.background, "A"), ("background", "N"),
        ]
    else:
        raise ValueError(f"unknown caption style {style!r}")
    return AnnotatedCaption(words=words, raw_text=" ".join(w for w, _ in words))


def class_templates(class_names) -> list[str]:
    names = list(class_names)
    if not names:
        raise ValueError("class_templates needs at least one class name")
    return [f"a photo of {name}" for name in names]


def all_scene_specs():
    """Every renderable spec with a shape (5 * 8 * 2 * 9 * 6 combinations)."""
    for shape, color, size, row, col, texture, bg in itertools.product(
        SHAPES, COLORS, SIZES, range(3), range(3), TEXTURES, BACKGROUND_COLORS
    ):
        yield SceneSpec(shape, color, size, row, col, texture, bg)


def _draw_spec(rng: np.random.Generator, split: DatasetSplit, classes) -> tuple[SceneSpec, int]:
    label = int(rng.integers(len(classes)))
    if split.task_kind == "ObjectLabel":
        shape, texture = classes[label], TEXTURES[int(rng.integers(len(TEXTURES)))]
    else:
        shape, texture = SHAPES[int(rng.integers(len(SHAPES)))], classes[label]
    colors = list(COLORS)
    spec = SceneSpec(
        shape=shape,
        color=colors[int(rng.integers(len(colors)))],
        size=SIZES[int(rng.integers(2))],
        row=int(rng.integers(3)),
        col=int(rng.integers(3)),
        texture=texture,
        background=list(BACKGROUND_COLORS)[int(rng.integers(2))],
    )
    return spec, label


def generate_dataset(
    n: int,
    split: DatasetSplit,
    seed: int,
    partition: str = "train",
    caption_style: str = "rich",
    resolution: int = 32,
    name: str | None = None,
) -> Dataset:
    """Draw ``n`` i.i.d. labelled scenes from ``split``'s ``partition`` classes.

    ``caption_style="mixed"`` picks rich or short per sample with equal odds.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    classes = split.classes(partition)
    if not classes:
        raise ValueError(f"split has no {partition} classes")
    images = np.empty((n, resolution, resolution, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    captions, specs = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec, label = _draw_spec(rng, split, classes)
        style = caption_style
        if style == "mixed":
            style = "rich" if rng.random() < 0.5 else "short"
        images[i] = render_scene(spec, resolution)
        labels[i] = label
        captions.append(caption_of(spec, style))
        specs.append(spec)
    return Dataset(images, labels, captions, list(classes), specs, name or f"{split.task_kind}-{partition}")


# --- persistence -----------------------------------------------------------

def save_dataset(ds: Dataset, out_dir, split: DatasetSplit, seed: int) -> Path:
    """Write manifest.json, one RTNS file per image and captions.jsonl."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    items, ids = [], []
    for i in range(len(ds)):
        item_id = f"{i:06d}"
        rel = f"images/{item_id}.rtns"
        write_rtns(out / rel, ds.images[i])
        items.append({"id": item_id, "image_file": rel, "label": int(ds.labels[i]), "caption_id": item_id})
        ids.append(item_id)
    write_captions_jsonl(out / "captions.jsonl", ds.captions, ids)
    manifest = {
        "name": ds.name,
        "classes": list(ds.class_names),
        "split": split.to_json(),
        "seed": int(seed),
        "items": items,
    }
    if ds.specs:
        manifest["specs"] = [asdict(s) for s in ds.specs]
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> tuple[Dataset, DatasetSplit, int]:
    """Load a manifest-conformant dataset directory (or manifest path)."""
    from ralb.captions import read_captions_jsonl
    from ralb.rawtensor import read_rtns

    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    root = p.parent
    manifest = json.loads(p.read_text())
    caps = read_captions_jsonl(root / "captions.jsonl") if (root / "captions.jsonl").exists() else {}
    items = manifest["items"]
    if not items:
        raise ValueError(f"{p}: manifest has no items")
    images = np.stack([read_rtns(root / it["image_file"]) for it in items]).astype(np.float32)
    labels = np.array([it["label"] for it in items], dtype=np.int64)
    missing = [it["caption_id"] for it in items if it.get("caption_id") not in caps]
    if caps and missing:
        raise ValueError(f"{p}: {len(missing)} items reference unknown caption ids")
    captions = [caps[it["caption_id"]] for it in items] if caps else []
    specs = [SceneSpec(**s) for s in manifest.get("specs", [])]
    ds = Dataset(images, labels, captions, list(manifest["classes"]), specs, manifest.get("name", root.name))
    return ds, DatasetSplit.from_json(manifest["split"]), int(manifest["seed"])
