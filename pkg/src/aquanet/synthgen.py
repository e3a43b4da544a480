"""Procedural (image, mask) generator and the named test fixtures.

Scenes are piecewise-textured: a layout rule (horizontal bands or Voronoi
cells) assigns each pixel a class, and every class renders as a base color
plus an oriented sinusoidal ripple plus seeded Gaussian noise. Everything
is a pure function of the scene seed, so fixtures regenerate bit-identically
and carry a content hash in their manifest.

Fixtures:
  aqua16        16 train + 4 val scenes over a 6-class taxonomy (2 aquatic)
  consistency4  4 reference scenes plus perturbed re-annotations by 3 annotators
  atex-textures 13 two-band scenes yielding 208 uniform 32x32 water tiles
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import save_image, save_mask, write_manifest
from .errors import InvalidSpec
from .taxonomy import ClassTaxonomy, load_taxonomy

LAYOUTS = ("bands", "voronoi")

FIXTURE_NAMES = ("aqua16", "consistency4", "atex-textures")

_FIXTURE_TAXONOMY = {
    "ignore_id": 255,
    "classes": [
        {"id": 0, "name": "sea", "group": "natural", "aquatic": True},
        {"id": 1, "name": "river", "group": "natural", "aquatic": True},
        {"id": 2, "name": "sky", "group": "general", "aquatic": False},
        {"id": 3, "name": "terrain", "group": "general", "aquatic": False},
        {"id": 4, "name": "vegetation", "group": "general", "aquatic": False},
        {"id": 5, "name": "building", "group": "general", "aquatic": False},
    ],
}


@dataclass(frozen=True)
class TextureRecipe:
    base_color: tuple  # RGB in [0,1]
    ripple_freq: float  # cycles across the canvas
    ripple_angle: float  # radians
    ripple_amp: float = 0.08
    noise_amp: float = 0.04


# One recipe per fixture class, shared by all fixtures so a class looks the
# same in every scene. Base colors are mutually distant.
FIXTURE_RECIPES = {
    0: TextureRecipe((0.10, 0.28, 0.62), ripple_freq=6.0, ripple_angle=0.0),
    1: TextureRecipe((0.16, 0.52, 0.38), ripple_freq=9.0, ripple_angle=0.9),
    2: TextureRecipe((0.62, 0.78, 0.92), ripple_freq=2.0, ripple_angle=0.3),
    3: TextureRecipe((0.52, 0.42, 0.22), ripple_freq=4.0, ripple_angle=1.2),
    4: TextureRecipe((0.18, 0.40, 0.12), ripple_freq=7.0, ripple_angle=2.0),
    5: TextureRecipe((0.55, 0.30, 0.28), ripple_freq=3.0, ripple_angle=0.6),
}


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: tuple  # (H, W); both divisible by 32
    palette: tuple  # class ids, layout order
    recipes: dict  # class id -> TextureRecipe, one per palette entry
    layout: str = "bands"

    def validate(self) -> "SceneSpec":
        h, w = self.size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise InvalidSpec(f"canvas {h}x{w} must be a positive multiple of 32")
        if not self.palette or len(set(self.palette)) != len(self.palette):
            raise InvalidSpec(f"palette must be non-empty unique ids, got {self.palette}")
        missing = [c for c in self.palette if c not in self.recipes]
        if missing:
            raise InvalidSpec(f"no texture recipe for classes {missing}")
        if self.layout not in LAYOUTS:
            raise InvalidSpec(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        recipes = [self.recipes[c] for c in self.palette]
        if len(set(recipes)) != len(recipes):
            raise InvalidSpec("palette classes must have pairwise-distinct recipes")
        return self


def bands_mask(size: tuple, palette: tuple, boundaries=None) -> np.ndarray:
    """Horizontal bands top to bottom in palette order. ``boundaries`` are
    the n-1 interior row boundaries (defaults to an equal split)."""
    h, w = size
    n = len(palette)
    if boundaries is None:
        boundaries = [(i * h) // n for i in range(1, n)]
    edges = [0] + [int(min(max(b, 0), h)) for b in boundaries] + [h]
    mask = np.empty((h, w), dtype=np.int64)
    for i, cid in enumerate(palette):
        mask[edges[i]:edges[i + 1]] = cid
    return mask


def voronoi_mask(size: tuple, palette: tuple, rng: np.random.Generator) -> np.ndarray:
    """Each pixel takes the class of its nearest seeded site (one site per
    palette entry; ties go to the earlier entry)."""
    h, w = size
    sites = np.stack([rng.uniform(0, h, len(palette)),
                      rng.uniform(0, w, len(palette))], axis=1)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[None] - sites[:, 0, None, None]) ** 2 + \
         (xx[None] - sites[:, 1, None, None]) ** 2
    nearest = d2.argmin(axis=0)
    return np.asarray(palette, dtype=np.int64)[nearest]


def _texture(recipe: TextureRecipe, size: tuple, noise: np.ndarray) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx / w) * np.cos(recipe.ripple_angle) + (yy / h) * np.sin(recipe.ripple_angle)
    ripple = np.sin(2.0 * np.pi * recipe.ripple_freq * u)
    base = np.asarray(recipe.base_color, dtype=np.float64).reshape(3, 1, 1)
    return base + recipe.ripple_amp * ripple[None] + recipe.noise_amp * noise


def generate(spec: SceneSpec) -> tuple[torch.Tensor, np.ndarray]:
    """Render a scene: float32 image (3,H,W) in [0,1] and an int64 mask."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.layout == "bands":
        mask = bands_mask(spec.size, spec.palette)
    else:
        mask = voronoi_mask(spec.size, spec.palette, rng)
    noise = rng.standard_normal((3,) + tuple(spec.size))
    image = np.zeros((3,) + tuple(spec.size), dtype=np.float64)
    for cid in spec.palette:
        region = mask == cid
        tex = _texture(spec.recipes[cid], spec.size, noise)
        image[:, region] = tex[:, region]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(image), mask


def fixture_taxonomy() -> ClassTaxonomy:
    """The 6-class taxonomy every fixture uses."""
    return load_taxonomy(_FIXTURE_TAXONOMY)


def _write_taxonomy(root: Path) -> None:
    with open(root / "taxonomy.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(_FIXTURE_TAXONOMY, fh, sort_keys=False)


def content_hash(root) -> str:
    """sha256 over every file under root (sorted relative paths; the fixture
    manifest itself excluded)."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel == "fixture.json":
            continue
        digest.update(rel.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_fixture_manifest(root: Path, name: str, extra: dict | None = None) -> dict:
    doc = {"name": name, "content_hash": content_hash(root)}
    doc.update(extra or {})
    with open(root / "fixture.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def _dominant_label(mask: np.ndarray, taxonomy: ClassTaxonomy) -> int:
    """Most frequent class, preferring aquatic classes when any occur."""
    counts = np.bincount(mask[mask != taxonomy.ignore_id].ravel(),
                         minlength=taxonomy.num_classes)
    aquatic = taxonomy.aquatic_ids()
    if counts[aquatic].sum() > 0:
        sub = np.full_like(counts, -1)
        sub[aquatic] = counts[aquatic]
        return int(sub.argmax())
    return int(counts.argmax())


def _gen_aqua16(root: Path) -> dict:
    tax = fixture_taxonomy()
    rows = []
    for i in range(20):
        split = "train" if i < 16 else "val"
        rng = np.random.default_rng(1000 + i)
        # cycle classes so every class and both layouts recur in both splits
        anchor = i % tax.num_classes
        others = [c for c in range(tax.num_classes) if c != anchor]
        extra = rng.choice(others, size=int(rng.integers(1, 4)), replace=False)
        palette = tuple(sorted([anchor] + [int(c) for c in extra]))
        spec = SceneSpec(seed=2000 + i, size=(64, 64), palette=palette,
                         recipes=FIXTURE_RECIPES,
                         layout="bands" if i % 2 == 0 else "voronoi")
        image, mask = generate(spec)
        if i % 2 == 0:  # a small unlabeled patch in half the masks
            top, left = int(rng.integers(0, 58)), int(rng.integers(0, 56))
            mask[top:top + 4, left:left + 6] = tax.ignore_id
        name = f"img_{i:02d}"
        save_image(root / "images" / split / f"{name}.png", image)
        save_mask(root / "masks" / split / f"{name}.png", mask)
        rows.append({"name": name, "split": split, "annotator": "",
                     "primary_label": _dominant_label(mask, tax)})
    write_manifest(root, rows)
    _write_taxonomy(root)
    return {"n_train": 16, "n_val": 4}


_CONSISTENCY_SCENES = (
    # (name, palette top->bottom, primary label id, original annotator)
    ("img_00", (2, 0, 3), 0, "a1"),
    ("img_01", (2, 0, 4), 0, "a2"),
    ("img_02", (4, 0, 5), 0, "a3"),
    ("img_03", (2, 1, 3), 1, "a1"),
)


def _gen_consistency4(root: Path) -> dict:
    tax = fixture_taxonomy()
    size = (64, 64)
    annotators = ("a1", "a2", "a3")
    ref_rows = []
    images = {}
    for idx, (name, palette, primary, orig) in enumerate(_CONSISTENCY_SCENES):
        spec = SceneSpec(seed=3000 + idx, size=size, palette=palette,
                         recipes=FIXTURE_RECIPES, layout="bands")
        image, mask = generate(spec)
        images[name] = image
        save_image(root / "reference" / "images" / "test" / f"{name}.png", image)
        save_mask(root / "reference" / "masks" / "test" / f"{name}.png", mask)
        ref_rows.append({"name": name, "split": "test", "annotator": orig,
                         "primary_label": primary})
    write_manifest(root / "reference", ref_rows)
    _write_taxonomy(root / "reference")
    for annotator in annotators:
        rows = []
        for idx, (name, palette, primary, orig) in enumerate(_CONSISTENCY_SCENES):
            # re-annotations displace the band boundaries; an annotator
            # redoing their own image drifts less than redoing a stranger's
            delta = 1 if orig == annotator else 3
            h = size[0]
            n = len(palette)
            boundaries = [(i * h) // n + delta for i in range(1, n)]
            mask = bands_mask(size, palette, boundaries)
            sub = root / "redone" / annotator
            save_image(sub / "images" / "test" / f"{name}.png", images[name])
            save_mask(sub / "masks" / "test" / f"{name}.png", mask)
            rows.append({"name": name, "split": "test", "annotator": annotator,
                         "primary_label": primary})
        write_manifest(root / "redone" / annotator, rows)
        _write_taxonomy(root / "redone" / annotator)
    return {"n_reference": len(_CONSISTENCY_SCENES), "annotators": list(annotators)}


def _gen_atex_textures(root: Path) -> dict:
    tax = fixture_taxonomy()
    rows = []
    n_tiles = 0
    for i in range(13):
        spec = SceneSpec(seed=4000 + i, size=(128, 128), palette=(0, 1),
                         recipes=FIXTURE_RECIPES, layout="bands")
        image, mask = generate(spec)
        n_tiles += (128 // 32) ** 2
        name = f"tex_{i:02d}"
        save_image(root / "images" / "train" / f"{name}.png", image)
        save_mask(root / "masks" / "train" / f"{name}.png", mask)
        rows.append({"name": name, "split": "train", "annotator": "",
                     "primary_label": _dominant_label(mask, tax)})
    write_manifest(root, rows)
    _write_taxonomy(root)
    return {"n_images": 13, "n_tiles": n_tiles}


def generate_fixture(name: str, root) -> Path:
    """Write one named fixture dataset under root and stamp fixture.json
    with its content hash."""
    if name not in FIXTURE_NAMES:
        raise InvalidSpec(f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if name == "aqua16":
        extra = _gen_aqua16(root)
    elif name == "consistency4":
        extra = _gen_consistency4(root)
    else:
        extra = _gen_atex_textures(root)
    _write_fixture_manifest(root, name, extra)
    return root
