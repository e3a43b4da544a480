import csv
import math

import numpy as np
import pytest
import torch

from aquanet import training
from aquanet.data import SegDataset, load_dataset
from aquanet.errors import (AllPixelsIgnored, ConfigInvalid, DivergedLoss,
                            EmptyDataset)
from aquanet.network import AquaNetConfig, build_model
from aquanet.training import (TrainConfig, augment, evaluate, loss_terms,
                              poly_lr, predict_mask, total_loss, train,
                              write_loss_log)

MICRO = dict(backbone_widths=(2, 2, 4, 4, 4), head_width=2,
             head_dilations=(1, 2), mod_hidden=2)
IGNORE = 255


def np_bilinear(x, out_h, out_w):
    """Independent bilinear resize (half-pixel centers, edge clamped)."""
    n, c, h, w = x.shape
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    sy, sx = h / out_h, w / out_w
    for i in range(out_h):
        fy = min(max((i + 0.5) * sy - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(fy))
        y1 = min(y0 + 1, h - 1)
        wy = fy - y0
        for j in range(out_w):
            fx = min(max((j + 0.5) * sx - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(fx))
            x1 = min(x0 + 1, w - 1)
            wx = fx - x0
            top = x[:, :, y0, x0] * (1 - wx) + x[:, :, y0, x1] * wx
            bot = x[:, :, y1, x0] * (1 - wx) + x[:, :, y1, x1] * wx
            out[:, :, i, j] = top * (1 - wy) + bot * wy
    return out


def np_mean_ce(logits, target, ignore_id):
    """Mean cross-entropy over non-ignored pixels, via explicit log-softmax."""
    n, k, h, w = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    total = 0.0
    count = 0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                t = target[b, i, j]
                if t == ignore_id:
                    continue
                total += -logsm[b, t, i, j]
                count += 1
    return total / count


def oracle_total_loss(p_final, p_aux, target, ignore_id, aux_weight):
    main = np_mean_ce(p_final, target, ignore_id)
    if aux_weight == 0:
        return main
    up = np_bilinear(p_aux, target.shape[-2], target.shape[-1])
    return main + aux_weight * np_mean_ce(up, target, ignore_id)


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(2.5e-4, 0, 500) == 2.5e-4
        assert poly_lr(2.5e-4, 500, 500) == 0.0

    def test_strictly_decreasing(self):
        vals = [poly_lr(0.01, it, 1000) for it in range(0, 1000, 10)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_doubling_invariance_exact(self):
        for it in (0, 1, 37, 250, 499):
            assert poly_lr(0.01, it, 500) == poly_lr(0.01, 2 * it, 1000)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            poly_lr(0.01, 501, 500)
        with pytest.raises(ValueError):
            poly_lr(0.01, -1, 500)
        with pytest.raises(ValueError):
            poly_lr(0.01, 0, 0)


class TestLoss:
    def test_oracle_fuzz(self):
        rng = np.random.default_rng(17)
        for _ in range(300):
            n, k = int(rng.integers(1, 3)), int(rng.integers(2, 5))
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            ah, aw = max(1, h // 2), max(1, w // 2)
            logits = rng.standard_normal((n, k, h, w)) * 3
            aux = rng.standard_normal((n, k, ah, aw)) * 3
            target = rng.integers(0, k, (n, h, w))
            target[rng.random((n, h, w)) < 0.2] = IGNORE
            if (target != IGNORE).sum() == 0:
                target[0, 0, 0] = 0
            aw_term = float(rng.choice([0.0, 0.4, 1.0]))
            got = total_loss(torch.from_numpy(logits), torch.from_numpy(aux),
                             torch.from_numpy(target), IGNORE, aw_term)
            want = oracle_total_loss(logits, aux, target, IGNORE, aw_term)
            assert got.item() >= 0
            assert abs(got.item() - want) < 1e-10

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        logits = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
        aux = torch.from_numpy(rng.standard_normal((1, 3, 2, 2)))
        target = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        assert total_loss(logits, aux, target, IGNORE).item() >= 0

    def test_all_ignored(self):
        logits = torch.zeros(1, 2, 2, 2)
        target = torch.full((1, 2, 2), IGNORE)
        with pytest.raises(AllPixelsIgnored):
            total_loss(logits, logits, target, IGNORE)

    def test_aux_weight_zero_skips_aux(self):
        logits = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        aux = torch.full((1, 2, 2, 2), float("nan"), dtype=torch.float64)
        target = torch.zeros(1, 4, 4, dtype=torch.long)
        loss = total_loss(logits, aux, target, IGNORE, aux_weight=0.0)
        assert math.isfinite(loss.item())
        assert loss.item() == pytest.approx(math.log(2))

    def test_unbatched_equals_batched(self):
        rng = np.random.default_rng(2)
        logits = torch.from_numpy(rng.standard_normal((3, 4, 4)))
        aux = torch.from_numpy(rng.standard_normal((3, 2, 2)))
        target = torch.from_numpy(rng.integers(0, 3, (4, 4)))
        a = total_loss(logits, aux, target, IGNORE)
        b = total_loss(logits.unsqueeze(0), aux.unsqueeze(0),
                       target.unsqueeze(0), IGNORE)
        assert torch.equal(a, b)

    def test_loss_terms_split(self):
        rng = np.random.default_rng(3)
        logits = torch.from_numpy(rng.standard_normal((1, 2, 4, 4)))
        aux = torch.from_numpy(rng.standard_normal((1, 2, 2, 2)))
        target = torch.from_numpy(rng.integers(0, 2, (1, 4, 4)))
        main, aux_term = loss_terms(logits, aux, target, IGNORE, 0.4)
        combo = total_loss(logits, aux, target, IGNORE, 0.4)
        assert combo.item() == pytest.approx(
            main.item() + 0.4 * aux_term.item(), abs=1e-12)


class TestTrainConfig:
    def test_round_trip(self):
        cfg = TrainConfig(base_lr=0.02, crop=64, scale_range=(0.75, 1.25))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [
        {"base_lr": 0.0},
        {"scale_range": (2.0, 0.5)},
        {"scale_range": (0.0, 1.0)},
        {"hflip_prob": 1.5},
        {"max_iters": -1},
        {"batch_size": 0},
        {"crop": 0},
        {"aux_weight": -1.0},
    ])
    def test_validate_rejects(self, bad):
        with pytest.raises(ConfigInvalid):
            TrainConfig(**bad).validate()


class TestAugment:
    CFG = TrainConfig(crop=16, scale_range=(0.75, 1.25), hflip_prob=0.5)

    def test_deterministic_per_seed(self):
        image, mask = torch.rand(3, 24, 24), torch.randint(0, 4, (24, 24))
        a = augment(image, mask, np.random.default_rng(5), self.CFG, IGNORE)
        b = augment(image, mask, np.random.default_rng(5), self.CFG, IGNORE)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_output_geometry_and_value_set(self):
        image = torch.rand(3, 24, 24)
        mask = torch.randint(0, 4, (24, 24))
        allowed = set(mask.unique().tolist()) | {IGNORE}
        for trial in range(100):
            img, msk = augment(image, mask, np.random.default_rng(trial),
                               self.CFG, IGNORE)
            assert img.shape == (3, 16, 16) and msk.shape == (16, 16)
            assert set(msk.unique().tolist()) <= allowed

    def test_identity_settings_give_plain_crop(self):
        cfg = TrainConfig(crop=8, scale_range=(1.0, 1.0), hflip_prob=0.0)
        image, mask = torch.rand(3, 12, 12), torch.randint(0, 4, (12, 12))
        img, msk = augment(image, mask, np.random.default_rng(0), cfg, IGNORE)
        found = False
        for top in range(5):
            for left in range(5):
                if torch.equal(msk, mask[top:top + 8, left:left + 8]):
                    found = torch.equal(img, image[:, top:top + 8, left:left + 8])
        assert found

    def test_padding_uses_ignore_and_channel_mean(self):
        cfg = TrainConfig(crop=8, scale_range=(1.0, 1.0), hflip_prob=0.0)
        image = torch.rand(3, 4, 4)
        mask = torch.randint(0, 2, (4, 4))
        img, msk = augment(image, mask, np.random.default_rng(0), cfg, IGNORE)
        assert (msk == IGNORE).sum() == 8 * 8 - 4 * 4
        mean = image.mean(dim=(-2, -1))
        assert torch.allclose(img[:, 7, 7], mean)

    def test_misaligned_inputs(self):
        with pytest.raises(ValueError):
            augment(torch.rand(3, 8, 8), torch.zeros(9, 9),
                    np.random.default_rng(0), self.CFG, IGNORE)


class TestSgdSemantics:
    def test_zero_lr_step_is_identity(self):
        w = torch.nn.Parameter(torch.tensor([1.5]))
        opt = torch.optim.SGD([w], lr=0.0, momentum=0.9, weight_decay=1e-4)
        (w * 3.0).sum().backward()
        opt.step()
        assert w.item() == 1.5

    def test_single_step_matches_hand_update(self):
        # loss = (w*x - y)^2 -> dL/dw = 2x(wx - y)
        x, y, lr = 2.0, 1.0, 0.1
        w = torch.nn.Parameter(torch.tensor([0.5]))
        opt = torch.optim.SGD([w], lr=lr, momentum=0.0, weight_decay=0.0)
        ((w * x - y) ** 2).sum().backward()
        opt.step()
        want = 0.5 - lr * 2 * x * (0.5 * x - y)
        assert w.item() == pytest.approx(want, abs=1e-7)


class TestTrainLoop:
    @pytest.fixture()
    def quick_cfg(self):
        return TrainConfig(base_lr=0.01, max_iters=5, batch_size=1, crop=32,
                           scale_range=(0.75, 1.25), seed=0)

    def test_zero_iters_equals_fresh_init(self, aqua16_root, fixture_tax,
                                          quick_cfg, tmp_path):
        import dataclasses
        ds = load_dataset(aqua16_root)
        cfg = dataclasses.replace(quick_cfg, max_iters=0)
        res = train(AquaNetConfig(**MICRO), cfg, ds, fixture_tax,
                    out_dir=tmp_path)
        fresh = build_model(AquaNetConfig(**MICRO), fixture_tax, seed=0)
        got, want = res.model.state_dict(), fresh.state_dict()
        assert all(torch.equal(got[k], want[k]) for k in want)
        assert res.log_rows == []
        assert res.checkpoint_path.exists()

    def test_deterministic_across_runs(self, aqua16_root, fixture_tax, quick_cfg):
        ds = load_dataset(aqua16_root)
        r1 = train(AquaNetConfig(**MICRO), quick_cfg, ds, fixture_tax)
        r2 = train(AquaNetConfig(**MICRO), quick_cfg, ds, fixture_tax)
        assert r1.log_rows == r2.log_rows
        s1, s2 = r1.model.state_dict(), r2.model.state_dict()
        assert all(torch.equal(s1[k], s2[k]) for k in s1)

    def test_log_csv_round_trips_exactly(self, aqua16_root, fixture_tax,
                                         quick_cfg, tmp_path):
        ds = load_dataset(aqua16_root)
        res = train(AquaNetConfig(**MICRO), quick_cfg, ds, fixture_tax,
                    out_dir=tmp_path)
        with open(res.log_path, newline="") as fh:
            parsed = [{"iter": int(r["iter"]), "lr": float(r["lr"]),
                       "loss_main": float(r["loss_main"]),
                       "loss_aux": float(r["loss_aux"]),
                       "loss_total": float(r["loss_total"])}
                      for r in csv.DictReader(fh)]
        assert parsed == res.log_rows

    def test_diverged_loss_guard(self, aqua16_root, fixture_tax, quick_cfg,
                                 monkeypatch):
        ds = load_dataset(aqua16_root)

        def blowup(*args, **kwargs):
            inf = torch.tensor(float("inf"), requires_grad=True)
            return inf, torch.zeros(())

        monkeypatch.setattr(training, "loss_terms", blowup)
        with pytest.raises(DivergedLoss, match="iteration 0"):
            train(AquaNetConfig(**MICRO), quick_cfg, ds, fixture_tax)

    def test_empty_dataset(self, aqua16_root, fixture_tax, quick_cfg):
        empty = SegDataset(aqua16_root, [])
        with pytest.raises(EmptyDataset):
            train(AquaNetConfig(**MICRO), quick_cfg, empty, fixture_tax)

    def test_log_fn_sees_every_row(self, aqua16_root, fixture_tax, quick_cfg):
        ds = load_dataset(aqua16_root)
        seen = []
        res = train(AquaNetConfig(**MICRO), quick_cfg, ds, fixture_tax,
                    log_fn=seen.append)
        assert seen == res.log_rows and len(seen) == 5


class _ConstantModel(torch.nn.Module):
    """Predicts one fixed class everywhere, regardless of the image."""

    def __init__(self, num_classes, winner):
        super().__init__()
        self.num_classes = num_classes
        self.winner = winner

    def forward(self, x):
        n, _, h, w = x.shape
        logits = torch.zeros(n, self.num_classes, h, w)
        logits[:, self.winner] = 1.0
        return logits, logits[:, :, ::8, ::8]


class TestEvaluate:
    def test_constant_predictor_matches_hand_tally(self, aqua16_root, fixture_tax):
        from aquanet.data import load_mask
        ds = load_dataset(aqua16_root).subset("val")
        rep = evaluate(_ConstantModel(6, winner=0), ds, fixture_tax)
        masks = np.stack([load_mask(s.mask_path).numpy() for s in ds])
        valid = masks != IGNORE
        assert rep.acc == pytest.approx(
            (masks[valid] == 0).mean(), abs=1e-12)
        inter = ((masks == 0) & valid).sum()
        union = valid.sum()  # predictions cover every valid pixel
        assert rep.per_class_iou["sea"] == pytest.approx(inter / union, abs=1e-12)

    def test_split_filter_and_empty(self, aqua16_root, fixture_tax):
        ds = load_dataset(aqua16_root)
        with pytest.raises(EmptyDataset):
            evaluate(_ConstantModel(6, 0), ds, fixture_tax, split="test")

    def test_predict_mask_restores_odd_sizes(self, fixture_tax):
        model = build_model(AquaNetConfig(**MICRO), fixture_tax, seed=0)
        pred = predict_mask(model, torch.rand(3, 50, 70))
        assert pred.shape == (50, 70)
        assert pred.max() < 6 and pred.min() >= 0

    def test_evaluate_restores_training_mode(self, aqua16_root, fixture_tax):
        ds = load_dataset(aqua16_root).subset("val")
        model = _ConstantModel(6, 0)
        model.train()
        evaluate(model, ds, fixture_tax)
        assert model.training


class TestWriteLossLog:
    def test_repr_floats(self, tmp_path):
        rows = [{"iter": 0, "lr": 0.1 + 0.2, "loss_main": 1 / 3,
                 "loss_aux": 0.0, "loss_total": 1 / 3}]
        path = write_loss_log(tmp_path / "log.csv", rows)
        text = path.read_text()
        assert repr(1 / 3) in text and repr(0.1 + 0.2) in text
