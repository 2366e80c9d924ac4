import itertools

import numpy as np
import pytest
import torch

from octpipe._torch import count_params
from octpipe.checkpoint import BLOB_FILE, CheckpointError
from octpipe.onhnet import (
    JACCARD_EPS,
    EnsemblerSpec,
    FeUnitType,
    ONHNetSegmenter,
    SegCnnSpec,
    SegTrainConfig,
    argmax_labels,
    build_ensembler,
    build_fe_unit,
    build_onh_net,
    build_seg_cnn,
    fe_param_count,
    jaccard_loss,
    load_onh_net,
    load_seg_cnn,
    one_hot,
    predict_proba,
    save_onh_net,
    save_seg_cnn,
    segment,
    train_ensembler,
    train_seg_cnn,
)

TINY = 0.03


def _tiny_cnns(seed=0):
    return [build_seg_cnn(SegCnnSpec(fe_type=t, width_scale=TINY), seed + t) for t in (1, 2, 3)]


def _toy_data(n=2, shape=(8, 8, 8), seed=0):
    r = np.random.default_rng(seed)
    depth = np.arange(shape[1])[None, :, None]
    labels = np.broadcast_to(np.clip(depth // 2, 0, 5), shape).copy()
    vols = [np.clip(labels / 6 + 0.05 * r.random(shape), 0, 1) for _ in range(n)]
    return np.stack(vols), np.stack([labels] * n)


def _hand_count_fe(t, cin, c):
    def conv(k, ci, co):
        return k * ci * co + co
    if t == 3:
        widths, total, ci = (c, 2 * c, 3 * c), 0, cin
        for w in widths:
            total += conv(27, ci, w) + conv(1, ci, w)
            ci = w
        return total + 2 * ci
    return (conv(1, cin, c) + conv(9, cin, c) + 2 * conv(9, c, c)
            + conv(27, cin, c) + 2 * conv(27, c, c) + 2 * c)


class TestFeUnits:
    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_preserves_spatial_dims(self, t):
        unit = build_fe_unit(t, 4, scale=0.25)
        out = unit(torch.rand(1, 4, 8, 8, 8))
        assert out.shape[2:] == (8, 8, 8)
        expected = 12 if t != 3 else 36
        assert out.shape[1] == expected

    def test_type1_and_type2_agree_on_zero_input(self):
        a = build_fe_unit(1, 3, 0.25)
        b = build_fe_unit(2, 3, 0.25)
        b.load_state_dict(a.state_dict())
        a.eval(); b.eval()
        x = torch.zeros(1, 3, 4, 4, 4)
        torch.testing.assert_close(a(x), b(x), rtol=0, atol=0)

    @pytest.mark.parametrize("t,cin", list(itertools.product([1, 2, 3], [1, 8, 97])))
    def test_closed_form_count(self, t, cin):
        unit = build_fe_unit(t, cin, 1.0)
        n = count_params(unit)
        assert n == _hand_count_fe(t, cin, 48)
        assert n == fe_param_count(t, cin, 1.0)

    def test_frozen_reference_counts(self):
        assert count_params(build_fe_unit(1, 1)) == 168_096
        assert count_params(build_fe_unit(3, 1)) == 518_304

    def test_anisotropic_kernels(self):
        unit = build_fe_unit(1, 2)
        shapes = [tuple(c.weight.shape[2:]) for c in unit.planar]
        # (D, H, W) layout: 3x3 in H x W, 3x3 in H x D, 3x3 in W x D
        assert sorted(shapes) == sorted([(1, 3, 3), (3, 3, 1), (3, 1, 3)])


class TestSegCnn:
    @pytest.mark.parametrize("t,lo,hi", [(1, 5.4e6, 9.0e6), (2, 5.4e6, 9.0e6), (3, 9.3e6, 15.5e6)])
    def test_full_width_parameter_band(self, t, lo, hi):
        n = count_params(build_seg_cnn(SegCnnSpec(fe_type=t)), trainable=True)
        assert lo <= n <= hi

    @pytest.mark.parametrize("shape", [(4, 8, 8), (8, 12, 4), (12, 4, 16)])
    def test_shape_homomorphism(self, shape):
        net = build_seg_cnn(SegCnnSpec(width_scale=TINY)).eval()
        with torch.no_grad():
            p = net(torch.rand(1, 1, *shape))
        assert p.shape == (1, 8, *shape)
        torch.testing.assert_close(p.sum(1), torch.ones(1, *shape), atol=1e-5, rtol=0)

    def test_indivisible_dims(self):
        net = build_seg_cnn(SegCnnSpec(width_scale=TINY))
        with pytest.raises(ValueError):
            net(torch.rand(1, 1, 6, 8, 8))

    def test_eval_forward_deterministic(self):
        net = build_seg_cnn(SegCnnSpec(width_scale=0.1), seed=4).eval()
        x = torch.rand(1, 1, 8, 16, 16)
        with torch.no_grad():
            assert torch.equal(net(x), net(x))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SegCnnSpec(fe_type=4)
        with pytest.raises(ValueError):
            SegCnnSpec(num_classes=6)

    def test_full_size_volume(self):
        net = build_seg_cnn(SegCnnSpec(width_scale=TINY)).eval()
        vol = np.random.default_rng(0).random((48, 112, 88))
        probs, labels = segment(net, vol)
        assert probs.shape == (48, 112, 88, 8)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)
        assert labels.shape == (48, 112, 88)


class TestOnhNet:
    def test_full_width_counts(self):
        cnns = [build_seg_cnn(SegCnnSpec(fe_type=t)) for t in (1, 2, 3)]
        onh = build_onh_net(cnns)
        total = count_params(onh)
        assert 0.75 * 28.86e6 <= total <= 1.25 * 28.86e6
        assert count_params(onh, trainable=True) == count_params(onh.ensembler)
        assert count_params(onh, trainable=False) == sum(count_params(c) for c in cnns)
        assert 0.75 * 2.06e6 <= count_params(onh.ensembler) <= 1.25 * 2.06e6

    def test_concatenates_pre_softmax_maps(self):
        cnns = _tiny_cnns()
        onh = build_onh_net(cnns, EnsemblerSpec(width_scale=TINY)).eval()
        x = torch.rand(1, 1, 4, 8, 8)
        feats = onh.cnn_logits(x)
        assert feats.shape == (1, 24, 4, 8, 8)
        with torch.no_grad():
            torch.testing.assert_close(feats[:, 8:16], cnns[1].logits(x))

    def test_needs_matching_cnn_count(self):
        with pytest.raises(ValueError):
            build_onh_net(_tiny_cnns()[:2], EnsemblerSpec(width_scale=TINY))

    def test_eval_disables_dropout(self):
        onh = build_onh_net(_tiny_cnns(), EnsemblerSpec(width_scale=TINY, dropout=0.5)).eval()
        x = torch.rand(1, 1, 4, 8, 8)
        with torch.no_grad():
            assert torch.equal(onh(x), onh(x))

    def test_train_mode_keeps_cnns_frozen(self):
        onh = build_onh_net(_tiny_cnns(), EnsemblerSpec(width_scale=TINY)).train()
        assert onh.ensembler.training
        assert not any(c.training for c in onh.cnns)

    def test_ensembler_training_leaves_cnn_blobs_identical(self, tmp_path):
        cnns = _tiny_cnns()
        for i, c in enumerate(cnns):
            save_seg_cnn(c, tmp_path / f"before{i}")
        onh = build_onh_net(cnns, EnsemblerSpec(width_scale=TINY))
        ens_before = [p.detach().clone() for p in onh.ensembler.parameters()]
        X, Y = _toy_data()
        train_ensembler(onh, X, Y, SegTrainConfig(epochs=2, optimizer="adam", lr=1e-2))
        for i, c in enumerate(onh.cnns):
            save_seg_cnn(c, tmp_path / f"after{i}")
            assert ((tmp_path / f"before{i}" / BLOB_FILE).read_bytes()
                    == (tmp_path / f"after{i}" / BLOB_FILE).read_bytes())
        assert any(not torch.equal(a, b) for a, b in zip(ens_before, onh.ensembler.parameters()))

    def test_ensembler_training_with_augmentation_also_freezes(self):
        from octpipe.pipeline.augment import AugmentSpec
        onh = build_onh_net(_tiny_cnns(), EnsemblerSpec(width_scale=TINY))
        before = [p.detach().clone() for p in onh.cnns.parameters()]
        buffers = [b.clone() for b in onh.cnns.buffers()]
        X, Y = _toy_data()
        train_ensembler(onh, X, Y, SegTrainConfig(epochs=1, optimizer="adam", augment=AugmentSpec()))
        assert all(torch.equal(a, b) for a, b in zip(before, onh.cnns.parameters()))
        assert all(torch.equal(a, b) for a, b in zip(buffers, onh.cnns.buffers()))


class TestJaccard:
    def test_perfect_prediction(self):
        g = torch.randint(0, 8, (1, 4, 4, 4))
        assert float(jaccard_loss(one_hot(g), g)) == pytest.approx(0.0, abs=1e-6)

    def test_disjoint_prediction(self):
        g = torch.randint(0, 8, (1, 4, 4, 4))
        p = one_hot((g + 1) % 8)
        assert float(jaccard_loss(p, g)) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_probabilities_on_single_class(self):
        # 2x2x1 volume, every voxel class 3, p = 1/8 everywhere
        g = torch.full((1, 1, 2, 2), 3)
        p = torch.full((1, 8, 1, 2, 2), 1 / 8, dtype=torch.float64)
        inter = 4 * (1 / 8)
        union = 4 * (1 / 8) + 4 - inter
        expected = 1 - inter / (union + JACCARD_EPS)
        assert float(jaccard_loss(p, g)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1 - 0.5 / 4.0, abs=1e-7)

    def test_averages_only_present_classes(self):
        g = torch.tensor([0, 0, 1, 1]).reshape(1, 1, 1, 4)
        p = one_hot(torch.tensor([0, 0, 0, 1]).reshape(1, 1, 1, 4)).double()
        # class 0: 2/3 overlap, class 1: 1/2 overlap
        expected = ((1 - 2 / (3 + JACCARD_EPS)) + (1 - 1 / (2 + JACCARD_EPS))) / 2
        assert float(jaccard_loss(p, g)) == pytest.approx(expected, abs=1e-12)

    def test_bounded(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(20):
            p = torch.softmax(torch.randn(1, 8, 2, 3, 4, generator=gen) * 3, dim=1)
            g = torch.randint(0, 8, (1, 2, 3, 4), generator=gen)
            assert 0.0 <= float(jaccard_loss(p, g)) <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            jaccard_loss(torch.rand(1, 8, 2, 2, 2), torch.zeros(1, 2, 2, 3, dtype=torch.long))


class TestArgmax:
    def test_against_loop(self, rng):
        probs = rng.random((3, 4, 5, 8))
        labels = argmax_labels(probs)
        for idx in itertools.product(range(3), range(4), range(5)):
            vals = list(probs[idx])
            assert labels[idx] == vals.index(max(vals))

    def test_uniform_ties_go_to_class_zero(self):
        np.testing.assert_array_equal(argmax_labels(np.full((2, 2, 2, 8), 1 / 8)), 0)

    def test_partial_tie_picks_lowest(self):
        p = np.zeros((1, 1, 1, 8))
        p[..., [2, 5]] = 0.5
        assert argmax_labels(p)[0, 0, 0] == 2


class TestTraining:
    def test_same_seed_same_curves(self):
        X, Y = _toy_data()
        curves = []
        for _ in range(2):
            net = build_seg_cnn(SegCnnSpec(width_scale=TINY), seed=1)
            curves.append(train_seg_cnn(net, X, Y, SegTrainConfig(epochs=2, seed=3)).step_losses)
        assert curves[0] == curves[1]

    def test_empty_data(self):
        net = build_seg_cnn(SegCnnSpec(width_scale=TINY))
        with pytest.raises(ValueError):
            train_seg_cnn(net, np.zeros((0, 8, 8, 8)), np.zeros((0, 8, 8, 8), dtype=int))

    def test_unknown_optimizer(self):
        X, Y = _toy_data(1)
        net = build_seg_cnn(SegCnnSpec(width_scale=TINY))
        with pytest.raises(ValueError):
            train_seg_cnn(net, X, Y, SegTrainConfig(epochs=1, optimizer="rmsprop"))

    def test_non_finite_loss_aborts(self):
        from octpipe._torch import NonFiniteLossError
        X, Y = _toy_data(1)
        net = build_seg_cnn(SegCnnSpec(width_scale=TINY))
        with torch.no_grad():
            net.classifier.bias.fill_(float("nan"))
        with pytest.raises(NonFiniteLossError):
            train_seg_cnn(net, X, Y, SegTrainConfig(epochs=1))


class TestCheckpoints:
    def test_seg_cnn_round_trip(self, tmp_path):
        net = build_seg_cnn(SegCnnSpec(fe_type=3, width_scale=TINY), seed=2)
        back = load_seg_cnn(save_seg_cnn(net, tmp_path / "c"))
        x = np.random.default_rng(0).random((1, 4, 8, 8))
        np.testing.assert_array_equal(predict_proba(back, x), predict_proba(net, x))

    def test_onh_round_trip(self, tmp_path):
        onh = build_onh_net(_tiny_cnns(), EnsemblerSpec(width_scale=TINY), seed=5)
        back = load_onh_net(save_onh_net(onh, tmp_path / "onh"))
        x = np.random.default_rng(1).random((1, 4, 8, 8))
        np.testing.assert_array_equal(predict_proba(back, x), predict_proba(onh, x))
        assert count_params(back, trainable=True) == count_params(onh.ensembler)

    def test_kind_checked(self, tmp_path):
        save_seg_cnn(build_seg_cnn(SegCnnSpec(width_scale=TINY)), tmp_path / "c")
        with pytest.raises(CheckpointError):
            load_onh_net(tmp_path / "c")


class TestSegmenterEstimator:
    def test_fit_predict_score(self):
        X, Y = _toy_data()
        est = ONHNetSegmenter(width_scale=TINY, cnn_epochs=1, ensemble_epochs=1, random_state=0)
        est.fit(X, Y)
        assert est.predict(X).shape == X.shape
        assert est.predict_proba(X).shape == X.shape + (8,)
        assert 0.0 <= est.score(X, Y) <= 1.0
        assert est.get_params()["cnn_epochs"] == 1

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ONHNetSegmenter().predict(np.zeros((1, 4, 4, 4)))
