import struct

import numpy as np
import pytest

from calclust.dataio import (
    MixtureSpec, bayes_accuracy, check_companion, checkpoint_bytes, gen_mixture, load_checkpoint,
    read_csv, read_features, read_labels, save_checkpoint, write_features, write_labels,
)
from calclust.errors import FormatError, InvalidInputError
from calclust.kmeans import kmeans
from calclust.metrics import hungarian_acc
from calclust.numerics import Rng
from calclust.trainer import TrainConfig, initialize, predict, train


class TestFeatureFiles:
    def test_round_trip_f32_exact(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(7, 3))
        path = tmp_path / "f.cdcf"
        write_features(path, x)
        back = read_features(path)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, x.astype(np.float32).astype(np.float64))

    def test_header_layout(self, tmp_path):
        path = tmp_path / "f.cdcf"
        write_features(path, np.ones((2, 5)))
        raw = path.read_bytes()
        assert raw[:4] == b"CDCF"
        assert struct.unpack("<IQQ", raw[4:24]) == (1, 2, 5)
        assert len(raw) == 24 + 2 * 5 * 4
        assert raw[24:28] == struct.pack("<f", 1.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.cdcf"
        write_features(path, np.ones((1, 1)))
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError) as err:
            read_features(path)
        assert err.value.offset == 0

    def test_truncated(self, tmp_path):
        path = tmp_path / "f.cdcf"
        write_features(path, np.ones((3, 2)))
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(FormatError, match="expected 24 bytes, 23 available"):
            read_features(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "f.cdcf"
        write_features(path, np.ones((1, 2)))
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_features(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "f.cdcf"
        path.write_bytes(b"CDCF" + struct.pack("<IQQ", 9, 0, 0))
        with pytest.raises(FormatError, match="version"):
            read_features(path)

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_features(tmp_path / "f.cdcf", [[np.nan]])


class TestLabelFiles:
    def test_round_trip(self, tmp_path):
        y = np.array([3, 0, -1, 2**31 - 1])
        path = tmp_path / "l.cdcl"
        write_labels(path, y)
        np.testing.assert_array_equal(read_labels(path), y)

    def test_empty_is_valid(self, tmp_path):
        path = tmp_path / "l.cdcl"
        write_labels(path, [])
        assert path.read_bytes() == b"CDCL" + struct.pack("<Q", 0)
        assert read_labels(path).size == 0

    def test_truncated(self, tmp_path):
        path = tmp_path / "l.cdcl"
        write_labels(path, [1, 2])
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(FormatError):
            read_labels(path)

    def test_companion_mismatch(self):
        with pytest.raises(InvalidInputError):
            check_companion(np.zeros((3, 2)), np.zeros(2))


class TestCsv:
    def test_with_labels(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("d0,d1,label\n1.5,2,0\n3,4,1\n")
        x, y = read_csv(path)
        np.testing.assert_array_equal(x, [[1.5, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(y, [0, 1])

    def test_without_labels(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("d0\n1\n2\n")
        x, y = read_csv(path)
        assert x.shape == (2, 1) and y is None

    def test_bad_header(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(FormatError):
            read_csv(path)


class TestMixture:
    def test_deterministic_bytes(self, tmp_path):
        spec = MixtureSpec(200, 5, 4, 3.0, seed=11)
        for name in ("a", "b"):
            x, y = gen_mixture(spec)
            write_features(tmp_path / f"{name}.cdcf", x)
            write_labels(tmp_path / f"{name}.cdcl", y)
        assert (tmp_path / "a.cdcf").read_bytes() == (tmp_path / "b.cdcf").read_bytes()
        assert (tmp_path / "a.cdcl").read_bytes() == (tmp_path / "b.cdcl").read_bytes()

    @pytest.mark.parametrize("n,c", [(100, 3), (1001, 10), (7, 7)])
    def test_balanced(self, n, c):
        _, y = gen_mixture(MixtureSpec(n, 4, c, 1.0))
        counts = np.bincount(y, minlength=c)
        assert counts.max() - counts.min() <= 1

    def test_center_distances(self):
        _, _, centers = gen_mixture(MixtureSpec(20, 12, 5, 6.5), return_centers=True)
        dist = np.linalg.norm(centers[:, None] - centers[None], axis=2)
        off = dist[~np.eye(5, dtype=bool)]
        np.testing.assert_allclose(off, 6.5, rtol=1e-12)

    def test_unit_variance_within_component(self):
        x, y, centers = gen_mixture(MixtureSpec(20000, 3, 2, 4.0, seed=2), return_centers=True)
        resid = x - centers[y]
        np.testing.assert_allclose(resid.var(axis=0), 1.0, atol=0.05)

    def test_invalid_spec(self):
        with pytest.raises(InvalidInputError):
            gen_mixture(MixtureSpec(1, 2, 2, 1.0))
        with pytest.raises(InvalidInputError):
            gen_mixture(MixtureSpec(10, 2, 2, -1.0))

    def test_zero_separation_kmeans_near_chance(self):
        spec = MixtureSpec(10_000, 64, 10, 0.0, seed=3)
        x, y = gen_mixture(spec)
        acc, _ = hungarian_acc(kmeans(x, 10, Rng(0)).assignment, y)
        assert 0.05 <= acc <= 0.20

    def test_separation_eight_kmeans_recovers(self):
        spec = MixtureSpec(10_000, 64, 10, 8.0, seed=0)
        x, y = gen_mixture(spec)
        assert bayes_accuracy(spec, n_mc=50_000) >= 0.99
        # single k-means++ runs merge two components about half the time
        acc, _ = hungarian_acc(kmeans(x, 10, Rng(0), n_init=10).assignment, y)
        assert acc >= 0.99

    def test_bayes_accuracy_limits(self):
        assert bayes_accuracy(MixtureSpec(10, 4, 2, 0.0), n_mc=20_000) == pytest.approx(0.5, abs=0.02)
        assert bayes_accuracy(MixtureSpec(10, 4, 2, 20.0), n_mc=20_000) == 1.0


def small_state(seed=0, **kw):
    x, _ = gen_mixture(MixtureSpec(120, 4, 3, 6.0, seed=seed))
    cfg = TrainConfig(epochs=1, batch_size=60, sub_batch=30, mini_clusters=6, n_classes=3, hidden=4,
                      init_restarts=2, seed=seed, **kw)
    state, _ = train(x, cfg)
    return x, state


class TestCheckpoint:
    @pytest.mark.parametrize("kw", [{}, {"encoder": "identity"}, {"normalize_inputs": False}, {"single_head": True}])
    def test_round_trip_bytes_and_predictions(self, tmp_path, kw):
        x, state = small_state(**kw)
        path = tmp_path / "m.cdck"
        save_checkpoint(path, state)
        back = load_checkpoint(path)
        assert checkpoint_bytes(back) == path.read_bytes()
        np.testing.assert_array_equal(predict(back, x), predict(state, x))
        np.testing.assert_array_equal(back.rng.normal(5), state.rng.normal(5))
        assert back.epoch == state.epoch and back.predict_head == state.predict_head

    def test_header(self, tmp_path):
        _, state = small_state()
        raw = checkpoint_bytes(state)
        assert raw[:4] == b"CDCK"
        assert struct.unpack("<I", raw[4:8]) == (1,)
        assert raw[8:40] == state.config_digest

    def test_truncation_anywhere_rejected(self, tmp_path):
        _, state = small_state()
        raw = checkpoint_bytes(state)
        path = tmp_path / "m.cdck"
        for cut in (3, 8, 40, 60, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.cdck"
        path.write_bytes(b"CDCF" + b"\0" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_initial_state_serialises(self, tmp_path):
        x, _ = gen_mixture(MixtureSpec(50, 3, 2, 6.0))
        state = initialize(x, TrainConfig(batch_size=50, sub_batch=25, mini_clusters=5, n_classes=2, hidden=3,
                                          init_restarts=1))
        save_checkpoint(tmp_path / "i.cdck", state)
        np.testing.assert_array_equal(predict(load_checkpoint(tmp_path / "i.cdck"), x), predict(state, x))
