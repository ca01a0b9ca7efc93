import numpy as np
import pytest

from modasr import ctc, nn, psd
from modasr.errors import ConfigurationError

BLANK = 0


def posterior_with_blank_probs(blank_probs, k=3, seed=0):
    """Rows with the requested blank probability; the rest of the mass is
    spread unevenly over the other symbols."""
    rng = np.random.default_rng(seed)
    rows = []
    for pb in blank_probs:
        rest = rng.uniform(0.2, 1.0, size=k - 1)
        rest = rest / rest.sum() * (1.0 - pb)
        rows.append(np.concatenate([[pb], rest]))
    return ctc.PosteriorSeq.from_probs(np.array(rows), BLANK)


def random_posterior(t_len, k, seed):
    rng = np.random.default_rng(seed)
    return ctc.PosteriorSeq(nn.log_softmax_rows(rng.standard_normal((t_len, k)) * 2.5), BLANK)


class TestPsdFilter:
    def test_eight_frame_example(self):
        post = posterior_with_blank_probs([0.99, 0.98, 0.30, 0.97, 0.96, 0.97, 0.40, 0.99])
        out = psd.psd_filter(post, psd.PsdConfig(blank_threshold=0.5, mode="separator"))
        assert out.num_frames == 5
        np.testing.assert_array_equal(out.source_indices, [psd.SEPARATOR, 2, psd.SEPARATOR, 6, psd.SEPARATOR])
        # retained rows are bit-identical copies
        assert out.log_probs[1].tobytes() == post.log_probs[2].tobytes()
        assert out.log_probs[3].tobytes() == post.log_probs[6].tobytes()

    def test_all_frames_dominated_leaves_single_separator(self):
        post = posterior_with_blank_probs([0.9, 0.95, 0.99])
        out = psd.psd_filter(post, psd.PsdConfig())
        assert out.num_frames == 1
        assert out.source_indices[0] == psd.SEPARATOR
        np.testing.assert_array_equal(np.exp(out.log_probs[0]), [1.0, 0.0, 0.0])

    def test_threshold_one_is_identity(self):
        post = random_posterior(10, 4, seed=3)
        out = psd.psd_filter(post, psd.PsdConfig(blank_threshold=1.0))
        assert out.num_frames == 10
        assert out.log_probs.tobytes() == post.log_probs.tobytes()
        np.testing.assert_array_equal(out.source_indices, np.arange(10))

    def test_drop_all_removes_runs_entirely(self):
        post = posterior_with_blank_probs([0.99, 0.3, 0.99, 0.4])
        out = psd.psd_filter(post, psd.PsdConfig(mode="drop_all"))
        assert out.num_frames == 2
        np.testing.assert_array_equal(out.source_indices, [1, 3])

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            psd.PsdConfig(blank_threshold=1.5)
        with pytest.raises(ConfigurationError):
            psd.PsdConfig(mode="bogus")


class TestCompressionRatio:
    def test_identity_case(self):
        post = random_posterior(6, 3, seed=1)
        assert psd.compression_ratio(post, psd.PsdConfig(blank_threshold=1.0)) == 1.0

    def test_eight_frame_example(self):
        post = posterior_with_blank_probs([0.99, 0.98, 0.30, 0.97, 0.96, 0.97, 0.40, 0.99])
        assert psd.compression_ratio(post, psd.PsdConfig()) == pytest.approx(5 / 8)


class TestLosslessness:
    def test_greedy_invariance_500_cases(self):
        cfg = psd.PsdConfig(blank_threshold=0.5, mode="separator")
        rng = np.random.default_rng(12345)
        for _ in range(500):
            t_len = int(rng.integers(1, 20))
            k = int(rng.integers(2, 6))
            post = random_posterior(t_len, k, seed=int(rng.integers(0, 1 << 30)))
            compact = psd.psd_filter(post, cfg)
            filtered = ctc.PosteriorSeq(compact.log_probs, BLANK)
            assert ctc.greedy_decode(filtered) == ctc.greedy_decode(post)

    def test_drop_all_counterexample_is_lossy(self):
        # argmax path a . a: dropping the middle frame merges the repeat
        rows = [[0.2, 0.8], [0.9, 0.1], [0.2, 0.8]]
        post = ctc.PosteriorSeq.from_probs(rows, BLANK)
        assert ctc.greedy_decode(post) == [1, 1]
        compact = psd.psd_filter(post, psd.PsdConfig(mode="drop_all"))
        dropped = ctc.PosteriorSeq(compact.log_probs, BLANK)
        assert ctc.greedy_decode(dropped) == [1]  # documented divergence

    def test_separator_mode_keeps_the_same_counterexample_intact(self):
        rows = [[0.2, 0.8], [0.9, 0.1], [0.2, 0.8]]
        post = ctc.PosteriorSeq.from_probs(rows, BLANK)
        compact = psd.psd_filter(post, psd.PsdConfig(mode="separator"))
        kept = ctc.PosteriorSeq(compact.log_probs, BLANK)
        assert ctc.greedy_decode(kept) == [1, 1]


class TestIdempotence:
    def test_refilter_is_identity(self):
        cfg = psd.PsdConfig()
        rng = np.random.default_rng(77)
        for _ in range(100):
            post = random_posterior(int(rng.integers(1, 15)), 4,
                                    seed=int(rng.integers(0, 1 << 30)))
            once = psd.psd_filter(post, cfg)
            twice = psd.psd_filter(once, cfg)
            assert once.log_probs.tobytes() == twice.log_probs.tobytes()
            np.testing.assert_array_equal(once.source_indices, twice.source_indices)


class TestOrderPreservation:
    def test_retained_indices_strictly_increasing(self):
        rng = np.random.default_rng(55)
        for _ in range(100):
            post = random_posterior(int(rng.integers(1, 25)), 5,
                                    seed=int(rng.integers(0, 1 << 30)))
            out = psd.psd_filter(post, psd.PsdConfig())
            kept = out.source_indices[out.source_indices != psd.SEPARATOR]
            assert np.all(np.diff(kept) > 0)

    def test_distributions_of_separators_are_one_hot(self):
        post = posterior_with_blank_probs([0.99, 0.3, 0.99])
        out = psd.psd_filter(post, psd.PsdConfig())
        dist = out.as_distributions()
        np.testing.assert_array_equal(dist[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(dist.sum(axis=1), 1.0, atol=1e-10)
