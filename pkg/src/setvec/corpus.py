"""Items, style sets and corpora: manifest I/O and a synthetic generator.

A style set holds 2-4 items from pairwise-distinct categories. The synthetic
generator renders small images whose colour palette and pattern are tied to
a latent style cluster, and writes a sidecar of ground-truth factors so that
analogy answers can be scored automatically.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import load_itf, save_itf

MIN_SET_SIZE = 2
MAX_SET_SIZE = 4


class ManifestError(ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class CorpusError(ValueError):
    """A corpus violates an item or style-set invariant."""


@dataclass(frozen=True)
class Item:
    id: str
    category: str
    image_ref: str


@dataclass(frozen=True)
class StyleSet:
    set_id: str
    item_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.item_ids)


class Corpus:
    """Item pool plus the style sets drawn from it.

    Immutable once built; images are read lazily and cached.
    """

    def __init__(self, items: Iterable[Item], sets: Iterable[StyleSet], category_set: Sequence[str] | None = None):
        self.items: tuple[Item, ...] = tuple(items)
        self.sets: tuple[StyleSet, ...] = tuple(sets)
        self._index = {}
        for pos, item in enumerate(self.items):
            if item.id in self._index:
                raise CorpusError(f"duplicate item id {item.id!r}")
            self._index[item.id] = pos
        if category_set is None:
            category_set = sorted({it.category for it in self.items})
        self.category_set: tuple[str, ...] = tuple(category_set)
        allowed = set(self.category_set)
        for item in self.items:
            if item.category not in allowed:
                raise CorpusError(f"item {item.id!r} has undeclared category {item.category!r}")
        for s in self.sets:
            validate_set(s, self)
        self._images: dict[str, np.ndarray] = {}

    @property
    def item_ids(self) -> list[str]:
        return [it.id for it in self.items]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def index_of(self, item_id: str) -> int:
        return self._index[item_id]

    def item(self, item_id: str) -> Item:
        try:
            return self.items[self._index[item_id]]
        except KeyError:
            raise CorpusError(f"unknown item id {item_id!r}") from None

    def category_of(self, item_id: str) -> str:
        return self.item(item_id).category

    def max_set_size(self) -> int:
        return max((len(s) for s in self.sets), default=0)

    def load_image(self, item_id: str) -> np.ndarray:
        img = self._images.get(item_id)
        if img is None:
            item = self.item(item_id)
            try:
                img = read_image(item.image_ref)
            except (OSError, ValueError) as exc:
                raise CorpusError(f"failed to load image for item {item_id!r}: {exc}") from exc
            img.flags.writeable = False
            self._images[item_id] = img
        return img

    def images(self, item_ids: Sequence[str], dtype=np.float32) -> np.ndarray:
        """Stack the images of ``item_ids`` into an (n, C, H, W) array."""
        return np.stack([self.load_image(i) for i in item_ids]).astype(dtype, copy=False)

    def with_sets(self, sets: Iterable[StyleSet]) -> "Corpus":
        out = Corpus(self.items, sets, self.category_set)
        out._images = self._images
        return out


def validate_set(s: StyleSet, corpus: Corpus) -> None:
    n = len(s.item_ids)
    if not MIN_SET_SIZE <= n <= MAX_SET_SIZE:
        raise CorpusError(f"set {s.set_id!r} has {n} items; expected {MIN_SET_SIZE} to {MAX_SET_SIZE}")
    if len(set(s.item_ids)) != n:
        raise CorpusError(f"set {s.set_id!r} repeats an item id")
    for iid in s.item_ids:
        if iid not in corpus:
            raise CorpusError(f"set {s.set_id!r} references unknown item {iid!r}")
    cats = [corpus.category_of(i) for i in s.item_ids]
    if len(set(cats)) != n:
        raise CorpusError(f"set {s.set_id!r} repeats a category: {cats}")


def read_image(path) -> np.ndarray:
    """Load an ITF tensor as-is, or a PNG as float32 (C, H, W) in [0, 1]."""
    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    arr = load_itf(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a (C, H, W) image, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# manifests


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def read_items_manifest(path) -> list[Item]:
    base = Path(path).parent
    items = []
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise ManifestError(path, lineno, "expected item_id<TAB>category<TAB>image_path")
        iid, cat, ref = parts
        if not os.path.isabs(ref):
            ref = str(base / ref)
        items.append(Item(iid, cat, ref))
    return items


def read_sets_manifest(path) -> list[StyleSet]:
    sets = []
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ManifestError(path, lineno, "expected set_id<TAB>item_id,item_id[,...]")
        ids = tuple(x.strip() for x in parts[1].split(","))
        if not all(ids):
            raise ManifestError(path, lineno, "empty item id")
        sets.append(StyleSet(parts[0], ids))
    return sets


def load_corpus(items_manifest_path, sets_manifest_path, category_set: Sequence[str] | None = None) -> Corpus:
    """Parse and validate an items manifest and a sets manifest."""
    items = read_items_manifest(items_manifest_path)
    sets = read_sets_manifest(sets_manifest_path)
    return Corpus(items, sets, category_set)


def write_items_manifest(items: Iterable[Item], path, relative_to=None) -> None:
    base = Path(relative_to) if relative_to else None
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            ref = it.image_ref
            if base is not None:
                ref = os.path.relpath(ref, base)
            fh.write(f"{it.id}\t{it.category}\t{ref}\n")


def write_sets_manifest(sets: Iterable[StyleSet], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sets:
            fh.write(f"{s.set_id}\t{','.join(s.item_ids)}\n")


@dataclass(frozen=True)
class Factors:
    style: str
    color: str
    pattern: str

    def get(self, name: str) -> str:
        return getattr(self, name)


def read_sidecar(path) -> dict[str, Factors]:
    out = {}
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(path, lineno, "expected item_id<TAB>style_cluster<TAB>color<TAB>pattern")
        out[parts[0]] = Factors(*parts[1:])
    return out


def write_sidecar(factors: Mapping[str, Factors], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for iid, f in factors.items():
            fh.write(f"{iid}\t{f.style}\t{f.color}\t{f.pattern}\n")


def read_labeled_sets(path) -> tuple[list[StyleSet], list[str]]:
    """Read ``set_id<TAB>item_ids<TAB>label`` lines."""
    sets, labels = [], []
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(path, lineno, "expected set_id<TAB>item_id,...<TAB>label")
        sets.append(StyleSet(parts[0], tuple(parts[1].split(","))))
        labels.append(parts[2])
    return sets, labels


def write_labeled_sets(sets: Sequence[StyleSet], labels: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, lab in zip(sets, labels):
            fh.write(f"{s.set_id}\t{','.join(s.item_ids)}\t{lab}\n")


# --------------------------------------------------------------------------
# pairwise ablation


def pairwise_transform(corpus: Corpus) -> Corpus:
    """Replace every set by all of its unordered 2-subsets.

    Pairs repeated across different originating sets are kept once per set.
    """
    pairs = []
    for s in corpus.sets:
        for n, (a, b) in enumerate(itertools.combinations(s.item_ids, 2)):
            pairs.append(StyleSet(f"{s.set_id}/p{n}", (a, b)))
    return corpus.with_sets(pairs)


# --------------------------------------------------------------------------
# synthetic generator


COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.90, 0.20),
    "green": (0.15, 0.65, 0.20),
    "teal": (0.10, 0.60, 0.60),
    "blue": (0.15, 0.30, 0.85),
    "purple": (0.55, 0.20, 0.70),
    "pink": (0.95, 0.50, 0.75),
    "brown": (0.50, 0.30, 0.15),
    "black": (0.10, 0.10, 0.10),
    "gray": (0.55, 0.55, 0.55),
    "olive": (0.50, 0.50, 0.10),
}
PATTERNS = ("solid", "stripe", "check", "dot")
SHAPED_CATEGORIES = ("top", "bottom", "shoes", "outer", "dress")
BACKGROUND = 1.0


@dataclass
class SyntheticSpec:
    """Knobs for :func:`gen_synthetic`.

    ``popularity_exponent`` controls item reuse across sets: items in each
    (style, category) cell are drawn with weight ``rank ** -exponent``, so 0
    means uniform reuse and larger values concentrate sets on a few items.
    """

    n_styles: int = 4
    n_items_per_category_per_style: int = 20
    categories: tuple[str, ...] = ("top", "bottom", "shoes")
    image_shape: tuple[int, int, int] = (3, 32, 32)
    colors_per_style: int = 2
    patterns_per_style: int = 2
    n_shades: int = 6
    n_sets: int = 500
    set_size_distribution: tuple[float, float, float] = (0.4, 0.6, 0.0)
    n_labeled_sets: int = 1000
    popularity_exponent: float = 0.0
    seed: int = 7

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.image_shape = tuple(int(x) for x in self.image_shape)
        self.set_size_distribution = tuple(float(x) for x in self.set_size_distribution)

    def validate(self) -> None:
        if self.n_styles < 1 or self.n_items_per_category_per_style < 1:
            raise ValueError("n_styles and n_items_per_category_per_style must be positive")
        if len(set(self.categories)) != len(self.categories) or len(self.categories) < 2:
            raise ValueError("need at least two distinct categories")
        if len(self.image_shape) != 3 or self.image_shape[0] != 3 or min(self.image_shape[1:]) < 8:
            raise ValueError(f"image_shape must be (3, H, W) with H, W >= 8, got {self.image_shape}")
        if self.n_styles * self.colors_per_style > len(COLORS):
            raise ValueError(
                f"{self.n_styles} styles x {self.colors_per_style} colours exceeds the {len(COLORS)}-colour palette"
            )
        if not 1 <= self.patterns_per_style <= len(PATTERNS):
            raise ValueError(f"patterns_per_style must be in [1, {len(PATTERNS)}]")
        grid = self.colors_per_style * self.patterns_per_style * self.n_shades
        if self.n_items_per_category_per_style > grid:
            raise ValueError(
                f"{self.n_items_per_category_per_style} items per cell exceed the factor grid of {grid} "
                f"({self.colors_per_style} colours x {self.patterns_per_style} patterns x {self.n_shades} shades)"
            )
        dist = self.set_size_distribution
        if len(dist) != 3 or min(dist) < 0 or (self.n_sets or self.n_labeled_sets) and sum(dist) <= 0:
            raise ValueError("set_size_distribution needs three non-negative weights for sizes 2, 3, 4")
        for size, w in zip((2, 3, 4), dist):
            if w > 0 and size > len(self.categories):
                raise ValueError(f"set size {size} needs {size} categories, only {len(self.categories)} declared")
        if self.n_sets < 0 or self.n_labeled_sets < 0:
            raise ValueError("set counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        d["image_shape"] = list(self.image_shape)
        d["set_size_distribution"] = list(self.set_size_distribution)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        return cls(**d)


def style_name(s: int) -> str:
    return f"style{s}"


def style_palette(spec: SyntheticSpec, s: int) -> tuple[list[str], list[str]]:
    names = list(COLORS)
    colors = names[s * spec.colors_per_style:(s + 1) * spec.colors_per_style]
    patterns = [PATTERNS[(s + j) % len(PATTERNS)] for j in range(spec.patterns_per_style)]
    return colors, patterns


def _shape_mask(category: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    sc = rng.uniform(0.85, 1.0)
    cy = h / 2 + rng.uniform(-1.5, 1.5)
    cx = w / 2 + rng.uniform(-1.5, 1.5)
    # coordinates normalized to roughly [-1, 1]
    y = (yy - cy) / (h / 2 * sc)
    x = (xx - cx) / (w / 2 * sc)
    if category == "top":
        body = (np.abs(x) < 0.45) & (y > -0.6) & (y < 0.7)
        sleeves = (np.abs(x) < 0.9) & (y > -0.6) & (y < -0.15)
        return body | sleeves
    if category == "bottom":
        waist = (np.abs(x) < 0.5) & (y > -0.85) & (y < -0.45)
        legs = (np.abs(x) < 0.5) & (np.abs(x) > 0.08) & (y >= -0.45) & (y < 0.9)
        return waist | legs
    if category == "shoes":
        left = ((x + 0.4) / 0.38) ** 2 + ((y - 0.35) / 0.25) ** 2 < 1
        right = ((x - 0.4) / 0.38) ** 2 + ((y - 0.35) / 0.25) ** 2 < 1
        return left | right
    if category == "outer":
        coat = (np.abs(x) < 0.6) & (y > -0.8) & (y < 0.9) & (np.abs(x) > 0.05)
        sleeves = (np.abs(x) < 0.95) & (y > -0.8) & (y < 0.3)
        return coat | sleeves
    if category == "dress":
        half_width = 0.25 + 0.45 * (y + 0.8) / 1.7
        return (np.abs(x) < half_width) & (y > -0.8) & (y < 0.9)
    # unknown categories: an ellipse whose aspect depends on the label
    aspect = 0.4 + (sum(map(ord, category)) % 7) / 10
    return (x / 0.8) ** 2 + (y / aspect) ** 2 < 1


def _pattern_mask(pattern: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Pixels taking the secondary tone; always under half of the plane."""
    yy, xx = np.mgrid[0:h, 0:w]
    off = int(rng.integers(0, 4))
    if pattern == "solid":
        return np.zeros((h, w), dtype=bool)
    if pattern == "stripe":
        return (yy + off) % 4 == 0
    if pattern == "check":
        return ((yy + off) % 4 == 0) | ((xx + off) % 4 == 0)
    if pattern == "dot":
        return ((yy + off) % 4 == 1) & ((xx + off) % 4 == 1)
    raise ValueError(f"unknown pattern {pattern!r}")


def render_item(category: str, color: str, pattern: str, shade: float, image_shape, rng: np.random.Generator) -> np.ndarray:
    c, h, w = image_shape
    base = np.clip(np.array(COLORS[color]) * shade, 0.0, 1.0)
    secondary = 0.5 * base + 0.5
    img = np.full((c, h, w), BACKGROUND, dtype=np.float32)
    mask = _shape_mask(category, h, w, rng)
    pat = _pattern_mask(pattern, h, w, rng)
    for ch in range(c):
        plane = np.where(pat, secondary[ch], base[ch])
        img[ch][mask] = plane[mask]
    return img


def _shades(n: int) -> np.ndarray:
    return np.linspace(0.88, 1.12, n) if n > 1 else np.array([1.0])


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    factors: dict[str, Factors]
    labeled_sets: list[StyleSet] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)


def _draw_sets(spec, cells, rng, n, prefix):
    sizes = np.array([2, 3, 4])
    probs = np.asarray(spec.set_size_distribution) / np.sum(spec.set_size_distribution)
    sets, labels = [], []
    n_cat = len(spec.categories)
    m = spec.n_items_per_category_per_style
    weights = np.arange(1, m + 1, dtype=float) ** -spec.popularity_exponent
    weights /= weights.sum()
    for k in range(n):
        s = k % spec.n_styles if prefix == "L" else int(rng.integers(spec.n_styles))
        size = int(rng.choice(sizes, p=probs))
        cats = sorted(rng.choice(n_cat, size=size, replace=False))
        ids = tuple(cells[(s, c)][int(rng.choice(m, p=weights))] for c in cats)
        sets.append(StyleSet(f"{prefix}{k:05d}", ids))
        labels.append(style_name(s))
    return sets, labels


def gen_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticCorpus:
    """Render a style-coherent corpus into ``out_dir``.

    Writes ``items.tsv``, ``sets.tsv``, ``factors.tsv`` (sidecar),
    ``labeled_sets.tsv``, ``spec.json`` and one ITF image per item under
    ``images/``. Output is a pure function of ``spec``.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    shades = _shades(spec.n_shades)
    items, factors, cells = [], {}, {}
    idx = 0
    for s in range(spec.n_styles):
        colors, patterns = style_palette(spec, s)
        grid = list(itertools.product(range(spec.n_shades), patterns, colors))
        for ci, cat in enumerate(spec.categories):
            # per-cell grid order is fixed by the seed, then the first m cells are used
            order = np.random.default_rng([spec.seed, 11, s, ci]).permutation(len(grid))
            cell = []
            for j in range(spec.n_items_per_category_per_style):
                shade_i, pattern, color = grid[int(order[j])]
                iid = f"i{idx:05d}"
                rng = np.random.default_rng([spec.seed, 13, idx])
                img = render_item(cat, color, pattern, float(shades[shade_i]), spec.image_shape, rng)
                path = out / "images" / f"{iid}.itf"
                save_itf(path, img)
                items.append(Item(iid, cat, str(path)))
                factors[iid] = Factors(style_name(s), color, pattern)
                cell.append(iid)
                idx += 1
            cells[(s, ci)] = cell
    sets, _ = _draw_sets(spec, cells, np.random.default_rng([spec.seed, 1]), spec.n_sets, "S")
    labeled, labels = _draw_sets(spec, cells, np.random.default_rng([spec.seed, 2]), spec.n_labeled_sets, "L")
    corpus = Corpus(items, sets, spec.categories)
    write_items_manifest(items, out / "items.tsv", relative_to=out)
    write_sets_manifest(sets, out / "sets.tsv")
    write_sidecar(factors, out / "factors.tsv")
    write_labeled_sets(labeled, labels, out / "labeled_sets.tsv")
    with open(out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return SyntheticCorpus(corpus, factors, labeled, labels)


def load_corpus_dir(path) -> Corpus:
    """Load ``items.tsv`` + ``sets.tsv`` from a corpus directory."""
    path = Path(path)
    cats = None
    spec_path = path / "spec.json"
    if spec_path.exists():
        with open(spec_path, encoding="utf-8") as fh:
            cats = json.load(fh).get("categories")
    return load_corpus(path / "items.tsv", path / "sets.tsv", cats)


def dominant_color(img: np.ndarray) -> str:
    """Nearest palette colour to the primary tone of the foreground.

    Patterned items mix the primary tone with a lighter secondary tone (the
    primary blended halfway toward white), so the darkest foreground tone is
    always the primary one, whatever its pixel share.
    """
    fg = np.any(img != BACKGROUND, axis=0)
    if not fg.any():
        raise ValueError("image has no foreground")
    tones = np.unique(img[:, fg].T, axis=0)
    primary = tones[np.argmin(tones.sum(axis=1))]
    names = list(COLORS)
    dists = [np.sum((np.array(COLORS[n]) - primary) ** 2) for n in names]
    return names[int(np.argmin(dists))]
