import numpy as np
import pytest

from lgad.ald import partition_latent
from lgad.config import TrainingConfig
from lgad.data import PairSet, gen_glyph_dataset, make_pair_set
from lgad.nn import Adam, encode, init_model
from lgad.tensor import ShapeError, Tape, Tensor, finite_difference_check
from lgad.training import (CheckpointError, LossWeights, compute_losses, load_checkpoint,
                           read_tensors, save_checkpoint, train)


def toy_batch(n=3, side=3, seed=0, angle=0.9):
    rng = np.random.default_rng(seed)
    x = rng.random((n, side, side))
    xt = np.rot90(x, 1, axes=(1, 2)).copy()
    return PairSet(x, xt, np.full(n, angle), np.zeros(n, dtype=np.int64)).batch(np.arange(n))


def toy_model(**kw):
    m = init_model(4, (3, 3), (5,), seed=1, **kw).astype(np.float64)
    m.alpha.data = np.array([2.0, -2.0])
    return m


@pytest.fixture(scope="module")
def small_cfg():
    return TrainingConfig(n_images=100, n_pairs=64, epochs=1, batch=32, hidden_widths=(16,),
                          latent_dim=8)


@pytest.fixture(scope="module")
def small_ds():
    return gen_glyph_dataset(100, seed=0)


class TestLosses:
    def test_identity_element_zeroes_latent_terms(self):
        m = init_model(8, (28, 28), (16,), seed=0)
        ds = gen_glyph_dataset(20, seed=0)
        b = PairSet(ds.images[:4], ds.images[:4].copy(), np.zeros(4), ds.labels[:4]).batch(np.arange(4))
        terms = compute_losses(m, b)
        assert terms.inv.item() == 0.0 and terms.const.item() == 0.0

    def test_recon_only_weights(self):
        m = toy_model()
        terms = compute_losses(m, toy_batch(), LossWeights(1.0, 0.0, 0.0))
        assert terms.total.item() == terms.recon.item()

    def test_all_variant_plain_autoencoder(self):
        m = toy_model()
        m.alpha.data = np.array([5.0, 5.0])
        b = toy_batch()
        terms = compute_losses(m, b, LossWeights(1.0, 0.0, 0.0))
        assert terms.total.item() == terms.recon.item()
        np.testing.assert_array_equal(partition_latent(terms.z, terms.mask).z_i.data, 0.0)

    def test_sum_reduction(self):
        m = toy_model()
        b = toy_batch()
        terms = compute_losses(m, b)
        err = terms.x_hat.data - b.x_t.data
        assert terms.recon.item() == pytest.approx((err ** 2).sum() / len(b))

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(1.0, -1.0, 1.0)
        with pytest.raises(ValueError):
            LossWeights(float("nan"), 1.0, 1.0)

    def test_non_finite_names_term(self):
        m = toy_model()
        m.decoder[-1].b.data[:] = np.nan
        with pytest.raises(FloatingPointError, match="L_recon"):
            compute_losses(m, toy_batch())

    @pytest.mark.parametrize("operator", ["geometric", "learned"])
    def test_total_gradient_matches_fd(self, operator):
        m = toy_model(operator=operator, operator_hidden=4)
        b = toy_batch()
        frozen = Tensor(encode(m, b.x_t).data)
        params = [p for k, p in m.parameters().items() if k != "alpha"]
        chk = finite_difference_check(lambda _: compute_losses(m, b, target=frozen).total, params)
        assert chk.allclose, chk.max_rel_error

    @pytest.mark.parametrize("term", ["inv", "const"])
    def test_target_branch_gets_no_gradient(self, term):
        m = toy_model()
        with Tape() as tape:
            terms = compute_losses(m, toy_batch())
            grads = tape.backward(getattr(terms, term))
            assert terms.target_trace
            for h in terms.target_trace + [terms.z_target_raw]:
                assert tape.node_of(h) is not None
                np.testing.assert_array_equal(grads[h], 0.0)

    def test_alpha_receives_gradient(self):
        m = toy_model()
        with Tape() as tape:
            terms = compute_losses(m, toy_batch())
            g = tape.backward(terms.total, [m.alpha])[m.alpha]
        assert np.any(g != 0)


class TestTrain:
    def test_smoke(self, small_cfg, small_ds):
        model, rep, opt = train(small_cfg, small_ds)
        assert [r["epoch"] for r in rep.records] == [1]
        assert np.isfinite(rep.records[0]["L_total"])
        assert opt.t == 2

    def test_deterministic(self, small_cfg, small_ds, tmp_path):
        cfg = TrainingConfig(**{**small_cfg.to_dict(), "epochs": 2, "hidden_widths": (16,)})
        _, a, oa = train(cfg, small_ds)
        m, b, ob = train(cfg, small_ds)
        a.to_csv(tmp_path / "a.csv")
        b.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert [r["epoch"] for r in b.records] == [1, 2]

    def test_report_files(self, small_cfg, small_ds, tmp_path):
        _, rep, _ = train(small_cfg, small_ds)
        rep.to_csv(tmp_path / "r.csv")
        rep.to_json(tmp_path / "r.json")
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "epoch,L_total,L_recon,L_inv,L_const,variant_fraction"
        assert "wall_time" not in (tmp_path / "r.json").read_text()


class TestCheckpoint:
    def _trained(self):
        m = init_model(8, (6, 6), (10,), seed=2, operator="learned", operator_hidden=5)
        opt = Adam()
        ps = make_pair_set(gen_glyph_dataset(20, size=6, seed=0), 8, seed=0)
        with Tape() as tape:
            terms = compute_losses(m, ps.batch(np.arange(8)))
            params = m.parameters()
            g = tape.backward(terms.total, list(params.values()))
        opt.step(params, {k: g[p] for k, p in params.items()})
        return m, opt

    def test_round_trip_bitwise(self, tmp_path):
        m, opt = self._trained()
        save_checkpoint(m, opt, tmp_path / "m.ckpt")
        m2, opt2 = load_checkpoint(tmp_path / "m.ckpt")
        for (k, p), q in zip(m.parameters().items(), m2.parameters().values()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=k)
        x = Tensor(np.random.default_rng(0).random((4, 36)).astype(np.float32))
        np.testing.assert_array_equal(encode(m, x).data, encode(m2, x).data)
        assert opt2.t == opt.t and set(opt2.m) == set(opt.m)
        assert m2.operator.kind == "learned" and m2.tau == m.tau

    def test_save_is_deterministic(self, tmp_path):
        m, opt = self._trained()
        save_checkpoint(m, opt, tmp_path / "a")
        save_checkpoint(m, opt, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncated(self, tmp_path):
        m, opt = self._trained()
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, opt, p)
        p.write_bytes(p.read_bytes()[:-37])
        with pytest.raises(CheckpointError, match="corrupt"):
            read_tensors(p)

    def test_checksum(self, tmp_path):
        m, opt = self._trained()
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, opt, p)
        buf = bytearray(p.read_bytes())
        buf[len(buf) // 2] ^= 0xFF
        p.write_bytes(bytes(buf))
        with pytest.raises(CheckpointError, match="checksum"):
            read_tensors(p)

    def test_version_and_magic(self, tmp_path):
        m, opt = self._trained()
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, opt, p)
        buf = bytearray(p.read_bytes())
        buf[4] = 9
        p.write_bytes(bytes(buf))
        with pytest.raises(CheckpointError, match="version"):
            read_tensors(p)
        p.write_bytes(b"NOPE" + bytes(buf[4:]))
        with pytest.raises(CheckpointError, match="not an LGAD"):
            read_tensors(p)

    def test_latent_dim_mismatch(self, tmp_path):
        m, opt = self._trained()
        save_checkpoint(m, opt, tmp_path / "m.ckpt")
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "m.ckpt", expect_latent_dim=16)
