import numpy as np
import pytest

from bitbudget.data import generate_calibration, markov_table
from bitbudget.errors import InputError, ParameterError


class TestCalibration:
    def test_deterministic(self):
        a = generate_calibration(32, num_sequences=16, seq_len=10, seed=4)
        b = generate_calibration(32, num_sequences=16, seq_len=10, seed=4)
        np.testing.assert_array_equal(a.train, b.train)
        c = generate_calibration(32, num_sequences=16, seq_len=10, seed=5)
        assert not np.array_equal(a.train, c.train)

    def test_batch_count(self):
        cal = generate_calibration(256, num_sequences=128, seq_len=16)
        batches = cal.batches(8)
        assert len(batches) == 16
        assert all(b.shape == (8, 16) for b in batches)

    def test_batches_restartable(self):
        cal = generate_calibration(64, num_sequences=20, seq_len=8)
        np.testing.assert_array_equal(cal.batches(6)[2], cal.batches(6)[2])
        assert cal.batches(6)[-1].shape[0] == 2

    @pytest.mark.parametrize("source", ["markov", "uniform_random"])
    def test_ids_in_range(self, source):
        cal = generate_calibration(16, num_sequences=32, seq_len=20, source=source)
        assert cal.train.min() >= 0 and cal.train.max() < 16

    def test_holdout_split_is_disjoint_tail(self):
        full = generate_calibration(64, num_sequences=40, seq_len=8, seed=2)
        cal = generate_calibration(64, num_sequences=40, seq_len=8, seed=2, holdout_fraction=0.25)
        assert cal.train.shape[0] == 30 and cal.holdout.shape[0] == 10
        np.testing.assert_array_equal(np.concatenate([cal.train, cal.holdout]), full.train)

    def test_transition_rows(self):
        table = markov_table(16, seed=0)
        np.testing.assert_allclose(table.sum(axis=1), 1.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_markov_bigrams_match_table(self, seed):
        # 1000 sequences x 100 transitions = 1e5 bigrams over 8 states
        cal = generate_calibration(8, num_sequences=1000, seq_len=101, seed=seed)
        t = cal.train
        counts = np.zeros((8, 8))
        np.add.at(counts, (t[:, :-1].ravel(), t[:, 1:].ravel()), 1)
        visits = counts.sum(axis=1)
        empirical = counts / np.maximum(visits, 1)[:, None]
        row_err = np.abs(empirical - cal.transition).max(axis=1)
        # rarely visited states carry few samples; bound them through the visit weighting
        assert row_err[visits >= 2000].max() <= 0.02
        assert (visits / visits.sum() * row_err).sum() <= 0.01

    def test_file_source(self, tmp_path):
        path = tmp_path / "tokens.txt"
        path.write_text("1 2 3 4\n\n5 6 7 0 1\n2 2 2 2\n")
        cal = generate_calibration(8, num_sequences=3, seq_len=4, source="file", path=path)
        np.testing.assert_array_equal(cal.train, [[1, 2, 3, 4], [5, 6, 7, 0], [2, 2, 2, 2]])

    @pytest.mark.parametrize("text", ["1 2 9\n", "1 x 2\n", "1 2\n"])
    def test_file_errors(self, tmp_path, text):
        path = tmp_path / "tokens.txt"
        path.write_text(text)
        with pytest.raises(InputError):
            generate_calibration(8, num_sequences=1, seq_len=3, source="file", path=path)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(num_sequences=0), dict(seq_len=1), dict(holdout_fraction=1.0), dict(source="web"),
         dict(num_sequences=2, holdout_fraction=0.1)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            generate_calibration(8, **kwargs)
