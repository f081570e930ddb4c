import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity
from sklearn.metrics import roc_auc_score

from lgad import metrics as ME
from lgad.ald import model_mask
from lgad.config import TrainingConfig
from lgad.data import gen_glyph_dataset
from lgad.tensor import ShapeError
from lgad.training import dataset_for, eval_pairs, train


@pytest.fixture(scope="module")
def trained():
    cfg = TrainingConfig(n_images=300, n_pairs=256, n_test_pairs=64, epochs=2, hidden_widths=(32,),
                         latent_dim=8)
    tr, te = dataset_for(cfg)
    model, _, _ = train(cfg, tr)
    return cfg, model, te


class TestPixelMetrics:
    def test_identical_cap(self):
        x = np.random.default_rng(0).random((28, 28))
        assert ME.rmse(x, x) == 0.0
        assert ME.psnr(x, x) == 99.0

    def test_mse_001_is_20db(self):
        a = np.zeros((10, 10))
        assert ME.psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_black_white(self):
        a, b = np.zeros((8, 8)), np.ones((8, 8))
        assert ME.rmse(a, b) == 1.0 and ME.psnr(a, b) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ME.psnr(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_ssim_identity_and_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((28, 28)), rng.random((28, 28))
        assert ME.ssim(a, a) == 1.0
        assert ME.ssim(a, b) == ME.ssim(b, a)

    def test_ssim_checkerboard_inverse_negative(self):
        x = (np.indices((14, 14)).sum(axis=0) % 2).astype(float)
        assert ME.ssim(x, 1 - x) < 0

    def test_ssim_matches_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.random((28, 28))
            b = np.clip(a + 0.2 * rng.standard_normal((28, 28)), 0, 1)
            ref = structural_similarity(a, b, win_size=7, data_range=1.0, gaussian_weights=False)
            assert ME.ssim(a, b) == pytest.approx(ref, abs=1e-12)

    def test_ssim_too_small(self):
        with pytest.raises(ShapeError):
            ME.ssim(np.zeros((6, 6)), np.zeros((6, 6)))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((3, 12, 12)), rng.random((3, 12, 12))
        np.testing.assert_allclose(ME.ssim_batch(a, b), [ME.ssim(x, y) for x, y in zip(a, b)])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (9, 9), elements=st.floats(0, 1)), arrays(np.float64, (9, 9), elements=st.floats(0, 1)))
def test_psnr_rmse_consistent(a, b):
    r = ME.rmse(a, b)
    if r > 1e-5:
        assert ME.psnr(a, b) == pytest.approx(20 * np.log10(1 / r), abs=1e-9)
    assert ME.ssim(a, b) == pytest.approx(ME.ssim(b, a), abs=1e-12)
    assert ME.ssim(a, a) == 1.0


class TestProbe:
    def test_separable(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-3, 1, (100, 2)), rng.normal(3, 1, (100, 2))])
        y = np.repeat([0, 1], 100)
        rep = ME.train_probe(x, y)
        assert rep.accuracy == 1.0 and rep.auc == 1.0

    def test_shuffled_labels_near_chance(self):
        ds = gen_glyph_dataset(600, seed=0)
        feats = ds.flat()[:, ::7]
        y = np.random.default_rng(0).permutation(ds.labels)
        assert abs(ME.train_probe(feats, y).accuracy - 0.1) <= 0.1

    def test_report_invariants(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(200, 5)), rng.integers(0, 4, 200)
        rep = ME.train_probe(x, y, seed=3)
        for v in (rep.accuracy, rep.precision, rep.recall, rep.f1, rep.auc):
            assert 0.0 <= v <= 1.0
        assert rep.confusion.sum() == 40
        assert rep.confusion.shape == (4, 4)

    def test_single_class(self):
        with pytest.raises(ValueError):
            ME.train_probe(np.ones((10, 2)), np.zeros(10, dtype=int))

    def test_same_seed_same_report(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(100, 3)), rng.integers(0, 3, 100)
        assert ME.train_probe(x, y, 5).to_dict() == ME.train_probe(x, y, 5).to_dict()

    def test_auc_against_reference(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, 300)
        s = rng.random((300, 4))
        s[np.arange(300), y] += 0.3
        ref = np.mean([roc_auc_score(y == k, s[:, k]) for k in range(4)])
        assert ME.auc_ovr(s, y, 4) == pytest.approx(ref)


class TestModelEvaluation:
    def test_reconstruction_report(self, trained):
        cfg, model, te = trained
        pairs = eval_pairs(cfg, te)
        rep = ME.evaluate_reconstruction(model, pairs)
        assert rep.n == 64 and np.isfinite(rep.psnr_mean)
        np.testing.assert_allclose(rep.psnr, 20 * np.log10(1 / rep.rmse))

    def test_constant_baseline(self, trained):
        cfg, _, te = trained
        pairs = eval_pairs(cfg, te)
        base = ME.constant_baseline(pairs)
        mse = ((pairs.x_t - 0.5) ** 2).mean(axis=(1, 2))
        assert base.psnr_mean == pytest.approx(np.mean(10 * np.log10(1 / mse)))

    def test_evaluation_does_not_mutate(self, trained):
        cfg, model, te = trained
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        ME.evaluate_reconstruction(model, eval_pairs(cfg, te))
        ME.probe_parts(model, te.images, te.labels)
        for k, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_tau_extremes(self, trained):
        _, model, te = trained
        rows = ME.sweep_tau(model, te.images, te.labels, taus=(1e-9, 0.5, 1 - 1e-9))
        assert rows[0]["variant_fraction"] == 1.0
        assert rows[0]["accuracy"] == rows[0]["z_accuracy"]
        assert rows[2]["variant_fraction"] == 0.0
        assert abs(rows[2]["accuracy"] - 0.1) <= 0.1

    def test_default_sweep_rows(self, trained, tmp_path):
        _, model, te = trained
        rows = ME.sweep_tau(model, te.images, te.labels)
        ME.write_rows(rows, tmp_path / "s.csv")
        assert len((tmp_path / "s.csv").read_text().splitlines()) == 10

    def test_swap(self, trained, tmp_path):
        _, model, te = trained
        x1, x2 = te.images[0], te.images[1]
        same = ME.swap_latents(model, x1, x1)
        for img in same[1:]:
            np.testing.assert_array_equal(img, same[0])
        out = ME.swap_latents(model, x1, x2)
        recon = ME.encode_images(model, np.stack([x1, x2]))
        from lgad.nn import decode
        from lgad.tensor import Tensor
        plain = decode(model, Tensor(recon)).data.reshape(2, 28, 28)
        np.testing.assert_array_equal(out[0], plain[0])
        np.testing.assert_array_equal(out[1], plain[1])
        assert all(np.all((o >= 0) & (o <= 1)) for o in out)
        ME.write_swap_grid(model, x1, x2, tmp_path / "g.pgm")
        assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")

    def test_magnitudes_respect_mask(self, trained):
        _, model, te = trained
        model.alpha.data = np.array([2.0, -2.0, 2.0, -2.0], dtype=model.alpha.dtype)
        rows = ME.latent_magnitudes(model, te.images[:30], n_rotations=4, n_probe_images=2)
        assert len(rows) == 8
        M = model_mask(model).data
        for r in rows:
            assert r["mask"] == M[r["dim"]]
            assert (r["mean_abs_z_i"] if r["mask"] else r["mean_abs_z_v"]) == 0.0
