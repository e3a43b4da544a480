"""Dataset statistics: label frequency, frequency/pixel correlation,
spatial mode maps and annotator consistency.

All mask resampling here is nearest-neighbor (ids are categorical and must
never be interpolated). Reductions run in a fixed order so repeated runs
produce identical floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import metrics as M
from .data import SegDataset, load_mask
from .errors import (DegenerateVariance, EmptyDataset, MisalignedPair,
                     NoImagesForLabel)
from .taxonomy import GROUPS, ClassTaxonomy

MODE_MAP_SIZE = (512, 512)


@dataclass(frozen=True)
class ClassFrequency:
    id: int
    name: str
    group: str
    aquatic: bool
    image_count: int
    pixel_count: int
    pixel_fraction: float


@dataclass
class FrequencyStats:
    """Per-class image/pixel tallies plus the unlabeled and group shares.

    ``group_fractions`` carries one entry per taxonomy group and a
    ``waterbody`` aggregate (artificial + natural); together with
    ``unlabeled_fraction`` the shares cover every pixel.
    """

    per_class: list
    total_pixels: int
    unlabeled_pixels: int
    unlabeled_fraction: float
    group_fractions: dict
    n_images: int

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "total_pixels": self.total_pixels,
            "unlabeled_pixels": self.unlabeled_pixels,
            "unlabeled_fraction": self.unlabeled_fraction,
            "group_fractions": dict(self.group_fractions),
            "per_class": [
                {
                    "id": c.id,
                    "name": c.name,
                    "group": c.group,
                    "aquatic": c.aquatic,
                    "image_count": c.image_count,
                    "pixel_count": c.pixel_count,
                    "pixel_fraction": c.pixel_fraction,
                }
                for c in self.per_class
            ],
        }


def label_frequency(dataset: SegDataset, taxonomy: ClassTaxonomy) -> FrequencyStats:
    """Count, per class, the images containing it and its share of all pixels.

    Pixel fractions are taken over every pixel in the dataset including
    ignored ones, so per-class fractions plus the unlabeled fraction sum
    to 1.
    """
    if not dataset.samples:
        raise EmptyDataset("label_frequency needs at least one sample")
    k = taxonomy.num_classes
    pixel_counts = np.zeros(k, dtype=np.int64)
    image_counts = np.zeros(k, dtype=np.int64)
    unlabeled = 0
    total = 0
    for sample in dataset:
        mask = load_mask(sample.mask_path).numpy()
        total += mask.size
        valid = mask != taxonomy.ignore_id
        unlabeled += int((~valid).sum())
        counts = np.bincount(mask[valid].ravel(), minlength=k)
        pixel_counts += counts
        image_counts += counts > 0
    per_class = [
        ClassFrequency(
            id=c.id,
            name=c.name,
            group=c.group,
            aquatic=c.aquatic,
            image_count=int(image_counts[c.id]),
            pixel_count=int(pixel_counts[c.id]),
            pixel_fraction=float(pixel_counts[c.id] / total),
        )
        for c in taxonomy.classes
    ]
    group_fractions = {
        g: float(sum(pixel_counts[i] for i in taxonomy.group_ids(g)) / total)
        for g in GROUPS
    }
    group_fractions["waterbody"] = group_fractions.get("artificial", 0.0) + \
        group_fractions.get("natural", 0.0)
    return FrequencyStats(
        per_class=per_class,
        total_pixels=total,
        unlabeled_pixels=unlabeled,
        unlabeled_fraction=float(unlabeled / total),
        group_fractions=group_fractions,
        n_images=len(dataset),
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient of two equal-length sequences."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D sequences")
    if xa.size < 2:
        raise DegenerateVariance("correlation needs at least two points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVariance("zero variance in one of the sequences")
    return float((dx * dy).sum() / (sx * sy))


def frequency_pixel_correlation(stats: FrequencyStats) -> float:
    """Correlation between per-class image counts and pixel totals, over the
    classes that appear in at least one image."""
    present = [c for c in stats.per_class if c.image_count > 0]
    if len(present) < 2:
        raise DegenerateVariance("need at least two classes with nonzero counts")
    return pearson([c.image_count for c in present],
                   [c.pixel_count for c in present])


def resize_mask_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor id-preserving resize via floor index mapping."""
    mask = np.asarray(mask)
    h, w = mask.shape
    nh, nw = size
    rows = (np.arange(nh, dtype=np.int64) * h) // nh
    cols = (np.arange(nw, dtype=np.int64) * w) // nw
    return mask[np.ix_(rows, cols)]


@dataclass
class ModeMap:
    """Per-cell modal class id over all masks of one primary label."""

    label: int
    n_images: int
    grid: np.ndarray

    def __post_init__(self):
        assert self.grid.ndim == 2


def spatial_mode_map(dataset: SegDataset, label: int, taxonomy: ClassTaxonomy,
                     size: tuple[int, int] = MODE_MAP_SIZE) -> ModeMap:
    """Vote per cell across the nearest-resized masks of every image whose
    primary_label is ``label``. Ties break to the lowest class id; the
    ignore id is votable but loses every tie (it sorts last)."""
    masks = [load_mask(s.mask_path).numpy() for s in dataset
             if s.primary_label == label]
    if not masks:
        raise NoImagesForLabel(f"no image in the dataset has primary label {label}")
    k = taxonomy.num_classes
    votes = np.zeros((k + 1,) + size, dtype=np.int32)
    for mask in masks:
        resized = resize_mask_nearest(mask, size)
        slot = np.where(resized == taxonomy.ignore_id, k, resized)
        if slot.max() > k:
            raise NoImagesForLabel(
                f"mask contains id {resized.max()} outside the taxonomy")
        idx = slot[None].astype(np.int64)
        np.put_along_axis(votes, idx, np.take_along_axis(votes, idx, 0) + 1, 0)
    winner = votes.argmax(axis=0)
    grid = np.where(winner == k, taxonomy.ignore_id, winner).astype(np.int64)
    return ModeMap(label=label, n_images=len(masks), grid=grid)


@dataclass
class ConsistencyRow:
    annotator: str
    total_acc: float
    total_miou: float
    total_images: int
    individual_acc: Optional[float]
    individual_miou: Optional[float]
    individual_images: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def consistency_report(reference: SegDataset, reannotations: SegDataset,
                       annotator_map: dict, taxonomy: ClassTaxonomy) -> list[ConsistencyRow]:
    """Score each re-annotator against the reference masks.

    "total" pools every image the annotator re-annotated; "individual"
    restricts to the images that annotator_map attributes to the same
    annotator originally. Individual values are None when that subset is
    empty.
    """
    if not reannotations.samples:
        raise EmptyDataset("no re-annotated samples")
    ref_by_name = {s.name: s for s in reference}
    total_cm: dict = {}
    indiv_cm: dict = {}
    n_total: dict = {}
    n_indiv: dict = {}
    for sample in reannotations:
        if sample.annotator_id is None:
            raise MisalignedPair(f"re-annotation {sample.name!r} has no annotator id")
        ref = ref_by_name.get(sample.name)
        if ref is None:
            raise MisalignedPair(f"no reference mask for {sample.name!r}")
        gt = load_mask(ref.mask_path).numpy()
        pred = load_mask(sample.mask_path).numpy()
        if gt.shape != pred.shape:
            raise MisalignedPair(
                f"{sample.name!r}: reference {gt.shape} vs re-annotation {pred.shape}")
        a = sample.annotator_id
        cm = total_cm.setdefault(a, M.ConfusionMatrix(taxonomy.num_classes))
        M.accumulate(cm, pred, gt, taxonomy.ignore_id)
        n_total[a] = n_total.get(a, 0) + 1
        if annotator_map.get(sample.name) == a:
            cm = indiv_cm.setdefault(a, M.ConfusionMatrix(taxonomy.num_classes))
            M.accumulate(cm, pred, gt, taxonomy.ignore_id)
            n_indiv[a] = n_indiv.get(a, 0) + 1
    rows = []
    for a in sorted(total_cm):
        cm = total_cm[a]
        row = ConsistencyRow(
            annotator=a,
            total_acc=M.pixel_acc(cm),
            total_miou=M.miou(cm),
            total_images=n_total[a],
            individual_acc=None,
            individual_miou=None,
            individual_images=n_indiv.get(a, 0),
        )
        if a in indiv_cm:
            row.individual_acc = M.pixel_acc(indiv_cm[a])
            row.individual_miou = M.miou(indiv_cm[a])
        rows.append(row)
    return rows


def render_consistency_table(rows: list[ConsistencyRow]) -> str:
    """Aligned text table: annotator columns, total/individual acc and mIoU
    rows, values in %."""
    def pct(v):
        return "-" if v is None else f"{100.0 * v:.2f}"

    header = [""] + [r.annotator for r in rows]
    body = [
        ["total acc"] + [pct(r.total_acc) for r in rows],
        ["total miou"] + [pct(r.total_miou) for r in rows],
        ["individual acc"] + [pct(r.individual_acc) for r in rows],
        ["individual miou"] + [pct(r.individual_miou) for r in rows],
    ]
    widths = [max(len(header[i]), *(len(b[i]) for b in body)) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for cells in body:
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)
