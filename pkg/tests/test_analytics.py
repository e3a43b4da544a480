import numpy as np
import pytest

from aquanet.analytics import (MODE_MAP_SIZE, consistency_report,
                               frequency_pixel_correlation, label_frequency,
                               pearson, render_consistency_table,
                               resize_mask_nearest, spatial_mode_map)
from aquanet.data import SegDataset, SegSample, load_dataset, save_mask
from aquanet.errors import (DegenerateVariance, EmptyDataset, MisalignedPair,
                            NoImagesForLabel)
from aquanet.taxonomy import ClassDef, ClassTaxonomy

TAX = ClassTaxonomy(classes=(
    ClassDef(0, "sea", "natural", True),
    ClassDef(1, "canal", "artificial", True),
    ClassDef(2, "rock", "general", False),
))
IGNORE = TAX.ignore_id


def _dataset(tmp_path, masks, split="train", annotators=None, primaries=None):
    """Write masks as PNGs and wrap them in an in-memory SegDataset."""
    samples = []
    for i, mask in enumerate(masks):
        name = f"m{i:02d}"
        path = tmp_path / "masks" / split / f"{name}.png"
        save_mask(path, np.asarray(mask))
        samples.append(SegSample(
            name=name, image_path=path, mask_path=path, split=split,
            annotator_id=annotators[i] if annotators else None,
            primary_label=primaries[i] if primaries else None,
        ))
    return SegDataset(tmp_path, samples)


class TestLabelFrequency:
    def test_hand_tally(self, tmp_path):
        ds = _dataset(tmp_path, [
            [[0, 0], [1, IGNORE]],
            [[2, 2], [2, 2]],
        ])
        stats = label_frequency(ds, TAX)
        by_name = {c.name: c for c in stats.per_class}
        assert by_name["sea"].image_count == 1
        assert by_name["sea"].pixel_count == 2
        assert by_name["sea"].pixel_fraction == pytest.approx(2 / 8)
        assert by_name["canal"].pixel_fraction == pytest.approx(1 / 8)
        assert by_name["rock"].image_count == 1
        assert by_name["rock"].pixel_fraction == pytest.approx(4 / 8)
        assert stats.unlabeled_pixels == 1
        assert stats.unlabeled_fraction == pytest.approx(1 / 8)
        assert stats.n_images == 2 and stats.total_pixels == 8

    def test_group_fractions_with_waterbody_aggregate(self, tmp_path):
        ds = _dataset(tmp_path, [[[0, 1], [2, IGNORE]]])
        gf = label_frequency(ds, TAX).group_fractions
        assert gf["natural"] == pytest.approx(1 / 4)
        assert gf["artificial"] == pytest.approx(1 / 4)
        assert gf["general"] == pytest.approx(1 / 4)
        assert gf["waterbody"] == pytest.approx(1 / 2)

    def test_fractions_sum_to_one(self, aqua16_root, fixture_tax):
        stats = label_frequency(load_dataset(aqua16_root), fixture_tax)
        total = sum(c.pixel_fraction for c in stats.per_class)
        assert abs(total + stats.unlabeled_fraction - 1.0) <= 1e-9

    def test_single_class_image(self, tmp_path):
        ds = _dataset(tmp_path, [np.zeros((3, 3), dtype=int)])
        stats = label_frequency(ds, TAX)
        sea = stats.per_class[0]
        assert sea.image_count == 1 and sea.pixel_fraction == 1.0

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(EmptyDataset):
            label_frequency(SegDataset(tmp_path, []), TAX)


class TestPearson:
    def test_perfect_positive(self):
        assert pearson([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_negative(self):
        assert pearson([1, 2, 3], [5, 3, 1]) == pytest.approx(-1.0, abs=1e-12)

    def test_textbook_formula_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
            want = np.corrcoef(x, y)[0, 1]
            assert pearson(x, y) == pytest.approx(want, abs=1e-12)

    def test_degenerate_cases(self):
        with pytest.raises(DegenerateVariance):
            pearson([1.0], [2.0])
        with pytest.raises(DegenerateVariance):
            pearson([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])


class TestFrequencyPixelCorrelation:
    def test_proportional_is_one(self, tmp_path):
        # image counts (1, 2) track pixel counts -> positive correlation 1.0
        ds = _dataset(tmp_path, [
            [[0, 1], [1, 1]],
            [[1, 1], [1, 2]],
        ])
        stats = label_frequency(ds, TAX)
        present = [c for c in stats.per_class if c.image_count > 0]
        want = pearson([c.image_count for c in present],
                       [c.pixel_count for c in present])
        assert frequency_pixel_correlation(stats) == want

    def test_needs_two_present_classes(self, tmp_path):
        ds = _dataset(tmp_path, [np.zeros((2, 2), dtype=int)])
        with pytest.raises(DegenerateVariance):
            frequency_pixel_correlation(label_frequency(ds, TAX))


class TestResizeNearest:
    def test_exact_upscale_is_block_repeat(self):
        mask = np.array([[1, 2], [3, 4]])
        want = np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)
        assert np.array_equal(resize_mask_nearest(mask, (4, 4)), want)

    def test_downscale_picks_floor_cells(self):
        mask = np.arange(16).reshape(4, 4)
        got = resize_mask_nearest(mask, (2, 2))
        assert np.array_equal(got, [[0, 2], [8, 10]])

    def test_ids_preserved(self):
        rng = np.random.default_rng(0)
        mask = rng.integers(0, 5, (7, 9))
        out = resize_mask_nearest(mask, (13, 3))
        assert set(np.unique(out)) <= set(np.unique(mask))


class TestSpatialModeMap:
    def test_singleton_equals_resized_mask(self, tmp_path):
        rng = np.random.default_rng(4)
        mask = rng.integers(0, 3, (8, 8))
        ds = _dataset(tmp_path, [mask], primaries=[0])
        mode = spatial_mode_map(ds, 0, TAX, size=(16, 16))
        want = np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)
        assert np.array_equal(mode.grid, want)
        assert mode.n_images == 1 and mode.label == 0

    def test_default_size(self, tmp_path):
        ds = _dataset(tmp_path, [np.zeros((4, 4), dtype=int)], primaries=[0])
        assert spatial_mode_map(ds, 0, TAX).grid.shape == MODE_MAP_SIZE

    def test_tie_breaks_to_lowest_id(self, tmp_path):
        a = np.full((4, 4), 0)
        b = np.full((4, 4), 2)
        ds = _dataset(tmp_path, [b, a], primaries=[1, 1])
        mode = spatial_mode_map(ds, 1, TAX, size=(4, 4))
        assert (mode.grid == 0).all()

    def test_ignore_loses_ties_but_can_win(self, tmp_path):
        tied = [np.full((2, 2), IGNORE), np.full((2, 2), 2)]
        ds = _dataset(tmp_path, tied, primaries=[0, 0])
        assert (spatial_mode_map(ds, 0, TAX, size=(2, 2)).grid == 2).all()
        majority = [np.full((2, 2), IGNORE), np.full((2, 2), IGNORE),
                    np.full((2, 2), 2)]
        ds2 = _dataset(tmp_path / "b", majority, primaries=[0, 0, 0])
        assert (spatial_mode_map(ds2, 0, TAX, size=(2, 2)).grid == IGNORE).all()

    def test_vote_oracle(self, tmp_path):
        rng = np.random.default_rng(9)
        masks = [rng.integers(0, 3, (6, 6)) for _ in range(5)]
        for m in masks:
            m[rng.random((6, 6)) < 0.1] = IGNORE
        ds = _dataset(tmp_path, masks, primaries=[2] * 5)
        size = (12, 12)
        mode = spatial_mode_map(ds, 2, TAX, size=size)
        resized = [np.repeat(np.repeat(m, 2, axis=0), 2, axis=1) for m in masks]
        for i in range(size[0]):
            for j in range(size[1]):
                votes = {}
                for r in resized:
                    votes[r[i, j]] = votes.get(r[i, j], 0) + 1
                best = max(votes.values())
                # candidate order: real ids ascending, ignore last
                order = sorted(votes, key=lambda v: (v == IGNORE, v))
                want = next(v for v in order if votes[v] == best)
                assert mode.grid[i, j] == want, (i, j, votes)

    def test_order_invariance(self, tmp_path):
        rng = np.random.default_rng(10)
        masks = [rng.integers(0, 3, (4, 4)) for _ in range(4)]
        fwd = _dataset(tmp_path / "f", masks, primaries=[0] * 4)
        rev = _dataset(tmp_path / "r", masks[::-1], primaries=[0] * 4)
        a = spatial_mode_map(fwd, 0, TAX, size=(8, 8)).grid
        b = spatial_mode_map(rev, 0, TAX, size=(8, 8)).grid
        assert np.array_equal(a, b)

    def test_filters_by_primary_label(self, tmp_path):
        ds = _dataset(tmp_path, [np.zeros((2, 2), dtype=int),
                                 np.ones((2, 2), dtype=int)],
                      primaries=[0, 1])
        mode = spatial_mode_map(ds, 1, TAX, size=(2, 2))
        assert mode.n_images == 1 and (mode.grid == 1).all()

    def test_no_images_for_label(self, tmp_path):
        ds = _dataset(tmp_path, [np.zeros((2, 2), dtype=int)], primaries=[0])
        with pytest.raises(NoImagesForLabel):
            spatial_mode_map(ds, 2, TAX)


class TestConsistency:
    def _pair(self, tmp_path, ref_masks, re_masks, annotators, orig):
        ref = _dataset(tmp_path / "ref", ref_masks, split="test",
                       annotators=orig)
        re_ds = _dataset(tmp_path / "re", re_masks, split="test",
                         annotators=annotators)
        annotator_map = {s.name: a for s, a in zip(ref.samples, orig)}
        return ref, re_ds, annotator_map

    def test_identical_masks_score_perfect(self, tmp_path):
        masks = [[[0, 1], [2, 2]], [[1, 1], [0, 2]]]
        ref, re_ds, amap = self._pair(tmp_path, masks, masks,
                                      ["a1", "a1"], ["a1", "a2"])
        rows = consistency_report(ref, re_ds, amap, TAX)
        assert len(rows) == 1
        row = rows[0]
        assert row.total_acc == 1.0 and row.total_miou == 1.0
        assert row.individual_acc == 1.0 and row.individual_miou == 1.0
        assert row.total_images == 2 and row.individual_images == 1

    def test_two_image_oracle(self, tmp_path):
        from aquanet.metrics import ConfusionMatrix, accumulate, miou, pixel_acc
        ref_masks = [np.array([[0, 0], [1, 1]]), np.array([[2, 2], [2, 2]])]
        re_masks = [np.array([[0, 1], [1, 1]]), np.array([[2, 0], [2, 2]])]
        ref, re_ds, amap = self._pair(tmp_path, ref_masks, re_masks,
                                      ["a1", "a1"], ["a1", "a3"])
        row = consistency_report(ref, re_ds, amap, TAX)[0]
        cm = ConfusionMatrix(3)
        for r, p in zip(ref_masks, re_masks):
            accumulate(cm, p, r, IGNORE)
        assert row.total_acc == pixel_acc(cm)
        assert row.total_miou == miou(cm)
        icm = accumulate(ConfusionMatrix(3), re_masks[0], ref_masks[0], IGNORE)
        assert row.individual_acc == pixel_acc(icm)
        assert row.individual_miou == miou(icm)

    def test_individual_none_when_no_own_images(self, tmp_path):
        masks = [[[0, 1], [2, 2]]]
        ref, re_ds, amap = self._pair(tmp_path, masks, masks, ["a2"], ["a1"])
        row = consistency_report(ref, re_ds, amap, TAX)[0]
        assert row.individual_acc is None and row.individual_miou is None
        assert row.individual_images == 0

    def test_individual_equals_total_when_all_own(self, tmp_path):
        rng = np.random.default_rng(12)
        ref_masks = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
        re_masks = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
        ref, re_ds, amap = self._pair(tmp_path, ref_masks, re_masks,
                                      ["a1"] * 3, ["a1"] * 3)
        row = consistency_report(ref, re_ds, amap, TAX)[0]
        assert row.individual_acc == row.total_acc
        assert row.individual_miou == row.total_miou
        assert row.individual_images == row.total_images == 3

    def test_misaligned_pairs(self, tmp_path):
        masks = [[[0, 1], [2, 2]]]
        # missing annotator id
        ref, re_ds, amap = self._pair(tmp_path / "x", masks, masks,
                                      [None], ["a1"])
        with pytest.raises(MisalignedPair, match="annotator"):
            consistency_report(ref, re_ds, amap, TAX)
        # no matching reference name
        ref2, re2, amap2 = self._pair(tmp_path / "y", masks, masks,
                                      ["a1"], ["a1"])
        re2.samples[0] = re2.samples[0].__class__(
            **{**re2.samples[0].__dict__, "name": "stranger"})
        with pytest.raises(MisalignedPair, match="reference"):
            consistency_report(ref2, re2, amap2, TAX)
        # shape mismatch
        ref3, re3, amap3 = self._pair(
            tmp_path / "z", masks, [np.zeros((3, 3), dtype=int)],
            ["a1"], ["a1"])
        with pytest.raises(MisalignedPair, match="3, 3"):
            consistency_report(ref3, re3, amap3, TAX)

    def test_empty_reannotations(self, tmp_path):
        ref = _dataset(tmp_path, [[[0]]], annotators=["a1"])
        with pytest.raises(EmptyDataset):
            consistency_report(ref, SegDataset(tmp_path, []), {}, TAX)

    def test_render_table_layout(self, tmp_path):
        masks = [[[0, 1], [2, 2]]]
        ref, re_ds, amap = self._pair(tmp_path, masks, masks, ["a1"], ["a1"])
        text = render_consistency_table(consistency_report(ref, re_ds, amap, TAX))
        lines = text.splitlines()
        assert "a1" in lines[0]
        assert lines[1].strip().startswith("total acc") and "100.00" in lines[1]
        assert lines[3].strip().startswith("individual acc")
