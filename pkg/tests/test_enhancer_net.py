import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from octpipe._torch import count_params, zero_parameters
from octpipe.checkpoint import BLOB_FILE, MANIFEST_FILE, SPEC_FILE, CheckpointError
from octpipe.enhancer_net import (
    PERCEPTUAL_WEIGHT,
    RMSE_WEIGHT,
    TAP_LAYERS,
    EnhancerLossWeights,
    EnhancerSpec,
    EnhancerTrainConfig,
    ExtractorSpec,
    NetEnhancer,
    PerceptualExtractor,
    build_enhancer,
    combined_loss,
    enhance_with_net,
    load_enhancer,
    perceptual_loss,
    rmse_loss,
    save_enhancer,
    train_enhancer,
)

SMALL = EnhancerSpec(width_scale=0.25)


def tap_oracle(extractor, img):
    """Feature taps recomputed from the raw conv weights (VGG19 pooling points)."""
    h = torch.as_tensor(img, dtype=torch.float32)[None, None].expand(1, 3, -1, -1)
    pools = {2, 4, 8, 12}
    taps = []
    for i, conv in enumerate(extractor.convs, start=1):
        h = F.relu(F.conv2d(h, conv.weight, conv.bias, padding=1))
        if i in TAP_LAYERS:
            taps.append(h)
        if i in pools:
            h = F.max_pool2d(h, 2)
    return taps


class TestArchitecture:
    def test_full_width_parameter_band(self):
        n = count_params(build_enhancer(EnhancerSpec()), trainable=True)
        assert 675_000 <= n <= 1_125_000

    def test_zero_weights_give_half(self):
        net = build_enhancer(SMALL)
        zero_parameters(net)
        out = enhance_with_net(net, np.random.default_rng(0).random((32, 24)))
        np.testing.assert_array_equal(out, 0.5)

    def test_shape_and_open_range(self):
        net = build_enhancer(SMALL, seed=3)
        x = torch.rand(2, 1, 64, 64)
        with torch.no_grad():
            y = net(x)
        assert y.shape == x.shape
        assert float(y.min()) > 0.0 and float(y.max()) < 1.0

    def test_indivisible_input(self):
        net = build_enhancer(SMALL)
        with pytest.raises(ValueError):
            enhance_with_net(net, np.zeros((30, 32)))

    def test_seeded_construction(self):
        a, b = build_enhancer(SMALL, seed=5), build_enhancer(SMALL, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestExtractor:
    def test_sixteen_convs_and_five_shrinking_taps(self):
        ex = PerceptualExtractor()
        assert len(ex.convs) == 16
        feats = ex(torch.rand(1, 1, 64, 64))
        assert len(feats) == 5
        sizes = [f.shape[-1] for f in feats]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))

    def test_frozen(self):
        ex = PerceptualExtractor()
        assert count_params(ex, trainable=True) == 0
        ex.train()
        assert not ex.training

    def test_taps_match_oracle(self):
        ex = PerceptualExtractor(ExtractorSpec(seed=4))
        img = np.random.default_rng(1).random((64, 64))
        with torch.no_grad():
            got = ex(torch.as_tensor(img, dtype=torch.float32)[None, None])
            ref = tap_oracle(ex, img)
        for g, r in zip(got, ref):
            torch.testing.assert_close(g, r)

    def test_load_weights_from_checkpoint(self, tmp_path):
        from octpipe.checkpoint import save_checkpoint
        src = PerceptualExtractor(ExtractorSpec(seed=11))
        save_checkpoint(tmp_path / "vgg", src, "extractor", src.spec.to_dict())
        loaded = PerceptualExtractor(ExtractorSpec(seed=0), weights_path=tmp_path / "vgg")
        for a, b in zip(src.parameters(), loaded.parameters()):
            assert torch.equal(a, b)


class TestLosses:
    def test_weights(self):
        assert (RMSE_WEIGHT, PERCEPTUAL_WEIGHT) == (1.0, 0.01)
        with pytest.raises(ValueError):
            EnhancerLossWeights(-1.0, 0.0)

    def test_rmse_examples(self):
        assert float(rmse_loss(np.ones((4, 4)), np.ones((4, 4)))) == 0.0
        assert float(rmse_loss(np.zeros((4, 4)), np.ones((4, 4)))) == pytest.approx(1.0, abs=1e-12)

    def test_rmse_against_summation(self, rng):
        a, b = rng.random((9, 7)), rng.random((9, 7))
        ref = (sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size) ** 0.5
        assert float(rmse_loss(a, b)) == pytest.approx(ref, abs=1e-9)

    def test_rmse_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse_loss(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_perceptual_identity(self):
        ex = PerceptualExtractor()
        x = np.random.default_rng(2).random((32, 32))
        assert float(perceptual_loss(x, x, ex)) == 0.0

    def test_perceptual_against_recomputed_taps(self):
        ex = PerceptualExtractor(ExtractorSpec(seed=7))
        r = np.random.default_rng(64)
        x, y = r.random((64, 64)), r.random((64, 64))
        with torch.no_grad():
            fx, fy = tap_oracle(ex, x), tap_oracle(ex, y)
            ref = np.mean([float(torch.sqrt(torch.mean((a - b) ** 2))) for a, b in zip(fx, fy)])
            got = float(perceptual_loss(torch.tensor(x, dtype=torch.float32),
                                        torch.tensor(y, dtype=torch.float32), ex))
        assert got >= 0
        assert got == pytest.approx(ref, rel=1e-6)

    def test_combined_is_weighted_sum(self):
        ex = PerceptualExtractor()
        r = np.random.default_rng(3)
        x = torch.tensor(r.random((32, 32)), dtype=torch.float32)
        y = torch.tensor(r.random((32, 32)), dtype=torch.float32)
        with torch.no_grad():
            total = combined_loss(x, y, ex)
            parts = rmse_loss(x, y) + 0.01 * perceptual_loss(x, y, ex)
        assert float(total) == float(parts)


def _pairs(n=1, size=32, seed=0):
    from octpipe.enhance import enhance_volume
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    base = np.stack([np.clip(0.3 + 0.4 * np.sin(6 * y + k) * x + 0.05 * r.random((size, size)), 0, 1)
                     for k in range(n)])
    return base, enhance_volume(base)


class TestTraining:
    def test_single_pair_loss_drops(self):
        x, y = _pairs(1)
        res = train_enhancer(x, y, SMALL, EnhancerTrainConfig(steps=200, lr=1e-4))
        assert len(res.step_losses) == 200
        assert res.step_losses[-1] < res.step_losses[0]
        assert len(res.epoch_losses) == 200

    def test_same_seed_same_curve(self):
        x, y = _pairs(2)
        cfg = EnhancerTrainConfig(steps=6, lr=1e-3, seed=9)
        a = train_enhancer(x, y, SMALL, cfg)
        b = train_enhancer(x, y, SMALL, cfg)
        assert a.step_losses == b.step_losses
        for pa, pb in zip(a.network.parameters(), b.network.parameters()):
            assert torch.equal(pa, pb)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_enhancer(np.zeros((0, 32, 32)), np.zeros((0, 32, 32)), SMALL)

    def test_unpaired_shapes(self):
        with pytest.raises(ValueError):
            train_enhancer(np.zeros((1, 32, 32)), np.zeros((1, 32, 16)), SMALL)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = build_enhancer(SMALL, seed=2)
        path = save_enhancer(net, tmp_path / "enh", seed=2)
        back = load_enhancer(path)
        assert back.spec == net.spec
        img = np.random.default_rng(0).random((32, 32))
        np.testing.assert_array_equal(enhance_with_net(back, img), enhance_with_net(net, img))

    def test_layout(self, tmp_path):
        net = build_enhancer(SMALL)
        path = save_enhancer(net, tmp_path / "enh", seed=0)
        meta = json.loads((path / SPEC_FILE).read_text())
        assert meta["kind"] == "enhancer" and meta["seed"] == 0
        manifest = json.loads((path / MANIFEST_FILE).read_text())
        blob = (path / BLOB_FILE).read_bytes()
        end = 0
        for entry in manifest:
            assert entry["offset"] == end
            assert entry["nbytes"] == 4 * int(np.prod(entry["shape"]))
            end += entry["nbytes"]
        assert end == len(blob)
        first = manifest[0]
        arr = np.frombuffer(blob, "<f4", count=first["nbytes"] // 4).reshape(first["shape"])
        np.testing.assert_array_equal(arr, dict(net.named_parameters())[first["name"]].detach().numpy())

    def test_wrong_kind(self, tmp_path):
        from octpipe.checkpoint import save_checkpoint
        ex = PerceptualExtractor()
        save_checkpoint(tmp_path / "x", ex, "extractor", ex.spec.to_dict())
        with pytest.raises(CheckpointError):
            load_enhancer(tmp_path / "x")

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_enhancer(tmp_path)


class TestNetEnhancerEstimator:
    def test_fit_transform(self):
        x, _ = _pairs(2)
        est = NetEnhancer(width_scale=0.25, steps=4, lr=1e-3, random_state=1).fit(x)
        out = est.transform(x)
        assert out.shape == x.shape
        assert len(est.loss_curve_) == 4
        assert est.get_params()["steps"] == 4

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            NetEnhancer().transform(np.zeros((1, 32, 32)))
