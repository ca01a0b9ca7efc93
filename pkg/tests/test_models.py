import numpy as np
import pytest

from modasr import ctc, models, nn, psd
from modasr.errors import ConfigurationError, DataError, InfeasibleAlignmentError


@pytest.fixture
def inventory():
    return models.PhonemeInventory.build(["ow", "k", "ey", "n"])


@pytest.fixture
def vocab():
    return models.WordVocab(words=["okay", "no", "neko"])


def tiny_a2p(inventory, seed=0):
    return models.A2PModel(feature_dim=4, inventory=inventory,
                           num_layers=2, cell_dim=6, proj_dim=3, seed=seed)


def tiny_p2w_ctc(inventory, vocab, seed=0):
    return models.P2WCtcModel(inventory, vocab, num_layers=1, cell_dim=6, seed=seed)


def tiny_s2s(inventory, vocab, seed=0):
    return models.P2WS2SModel(inventory, vocab, enc_layers=1, enc_cell=5,
                              dec_cell=4, embed_dim=3, attn_dim=4, seed=seed)


class TestInventoryVocab:
    def test_reserved_ids_distinct(self, inventory):
        assert inventory.blank_id != inventory.wb_id
        assert inventory.symbols[inventory.wb_id] == "wb"
        assert inventory.size == 6

    def test_vocab_reserved_ids(self, vocab):
        assert len({vocab.blank_id, vocab.sos_id, vocab.eos_id}) == 3
        assert vocab.size == 6

    def test_round_trip_dicts(self, inventory, vocab):
        assert models.PhonemeInventory.from_dict(inventory.to_dict()) == inventory
        assert models.WordVocab.from_dict(vocab.to_dict()) == vocab


class TestInsertWb:
    def test_lexicon_example(self, inventory):
        ow, k, ey = 0, 1, 2
        out = models.insert_wb([[ow, k, ey]], inventory.wb_id)
        assert out == [ow, k, ey, inventory.wb_id]

    def test_empty(self, inventory):
        assert models.insert_wb([], inventory.wb_id) == []

    def test_two_words(self, inventory):
        a, n = 0, 3
        out = models.insert_wb([[a], [a, n]], inventory.wb_id)
        wb = inventory.wb_id
        assert out == [a, wb, a, n, wb]

    def test_round_trip(self, inventory):
        rng = np.random.default_rng(0)
        for _ in range(50):
            words = [[int(p) for p in rng.integers(0, 4, size=rng.integers(1, 5))]
                     for _ in range(rng.integers(0, 4))]
            flat = models.insert_wb(words, inventory.wb_id)
            assert models.split_at_wb(flat, inventory.wb_id) == words


class TestA2PModel:
    def test_untrained_model_uniform_rows(self, inventory):
        model = tiny_a2p(inventory)
        post = model.posteriors(np.random.default_rng(0).standard_normal((7, 4)))
        np.testing.assert_allclose(np.exp(post.log_probs),
                                   1.0 / inventory.size, atol=1e-12)

    def test_rows_normalize(self, inventory):
        model = tiny_a2p(inventory)
        for p in model.out.parameters():
            p.value[...] = np.random.default_rng(1).standard_normal(p.value.shape)
        post = model.posteriors(np.random.default_rng(2).standard_normal((5, 4)))
        np.testing.assert_allclose(np.exp(post.log_probs).sum(axis=1), 1.0, atol=1e-10)

    def test_feature_dim_mismatch(self, inventory):
        model = tiny_a2p(inventory)
        with pytest.raises(ConfigurationError):
            model.posteriors(np.zeros((5, 3)))

    def test_ctc_training_gradient_exact(self, inventory):
        model = tiny_a2p(inventory)
        for p in model.out.parameters():
            p.value[...] = np.random.default_rng(3).uniform(-0.1, 0.1, p.value.shape)
        feats = np.random.default_rng(4).standard_normal((5, 4))
        labels = [0, inventory.wb_id]

        def loss():
            logp, cache = model.forward_batch(feats[:, None, :])
            val, grad = ctc.ctc_loss(
                ctc.PosteriorSeq(logp[:, 0, :], inventory.blank_id), labels)
            model.backward_batch(grad[:, None, :], cache)
            return val

        assert nn.gradient_check(loss, model.parameters()) < 1e-4

    def test_checkpoint_round_trip(self, inventory, tmp_path):
        model = tiny_a2p(inventory, seed=9)
        path = tmp_path / "a2p.npz"
        model.save(path)
        back = models.A2PModel.load(path)
        assert back.param_bytes() == model.param_bytes()
        assert back.inventory == inventory


class TestP2WCtc:
    def test_one_hot_input_shapes(self, inventory, vocab):
        model = tiny_p2w_ctc(inventory, vocab)
        rows = models.one_hot_rows([0, 1, inventory.wb_id], inventory.size)
        post = model.posteriors(rows)
        assert post.log_probs.shape == (3, vocab.size)
        np.testing.assert_allclose(np.exp(post.log_probs).sum(axis=1), 1.0, atol=1e-10)

    def test_infeasible_target_propagates(self, inventory, vocab):
        model = tiny_p2w_ctc(inventory, vocab)
        rows = models.one_hot_rows([0], inventory.size)
        post = model.posteriors(rows)
        with pytest.raises(InfeasibleAlignmentError):
            ctc.ctc_loss(post, [0, 1])

    def test_word_ctc_gradient_exact(self, inventory, vocab):
        model = tiny_p2w_ctc(inventory, vocab)
        for p in model.out.parameters():
            p.value[...] = np.random.default_rng(5).uniform(-0.1, 0.1, p.value.shape)
        rows = models.one_hot_rows([0, inventory.wb_id, 1, inventory.wb_id],
                                   inventory.size)
        targets = [0, 2]

        def loss():
            logp, cache = model.forward_batch(rows[:, None, :])
            val, grad = ctc.ctc_loss(
                ctc.PosteriorSeq(logp[:, 0, :], vocab.blank_id), targets)
            model.backward_batch(grad[:, None, :], cache)
            return val

        assert nn.gradient_check(loss, model.parameters()) < 1e-4


class TestS2S:
    def test_zero_weight_encoder_gives_zero_hidden(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab)
        for p in model.encoder.parameters():
            p.value[...] = 0.0
        hidden, _ = model.encode(models.one_hot_rows([0, 1], inventory.size))
        np.testing.assert_array_equal(hidden, 0.0)

    def test_single_row_encode(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab)
        hidden, _ = model.encode(models.one_hot_rows([2], inventory.size))
        assert hidden.shape == (1, model.enc_out_dim)

    def test_uniform_attention_over_identical_states(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab)
        hidden = np.tile(np.random.default_rng(1).standard_normal(model.enc_out_dim),
                         (4, 1))
        _, weights, _, _ = model.decode_step(hidden, None, vocab.sos_id)
        np.testing.assert_allclose(weights, 0.25, atol=1e-12)

    def test_attention_weights_sum_to_one(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab)
        hidden = np.random.default_rng(2).standard_normal((6, model.enc_out_dim))
        _, weights, _, _ = model.decode_step(hidden, None, vocab.sos_id)
        assert abs(weights.sum() - 1.0) < 1e-12

    def test_invalid_prev_id_raises(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab)
        hidden = np.zeros((2, model.enc_out_dim))
        with pytest.raises(DataError):
            model.decode_step(hidden, None, vocab.size)

    def test_teacher_forced_gradient_exact_end_to_end(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab, seed=3)
        # non-zero output layer so the log-softmax backward is exercised
        for p in model.out.parameters():
            p.value[...] = np.random.default_rng(6).uniform(-0.1, 0.1, p.value.shape)
        rows = models.one_hot_rows([0, 1, inventory.wb_id], inventory.size)
        targets = [0, 2]

        def loss():
            return model.loss_on_rows(rows, targets)

        assert nn.gradient_check(loss, model.parameters()) < 1e-4

    def test_beam_one_equals_greedy_rollout(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab, seed=4)
        for p in model.parameters():
            p.value[...] = np.random.default_rng(7).uniform(-0.4, 0.4, p.value.shape)
        hidden, _ = model.encode(models.one_hot_rows([0, 2], inventory.size))
        best, _ = model.beam_decode(hidden, beam_width=1, max_len=4)[0]

        words, state, prev = [], None, vocab.sos_id
        for _ in range(4):
            state, _, logp, _ = model.decode_step(hidden, state, prev)
            choices = list(logp[: vocab.n_words]) + [logp[vocab.eos_id]]
            pick = int(np.argmax(choices))
            if pick == vocab.n_words:
                break
            words.append(pick)
            prev = pick
        # greedy rollout must be one of the beam-1 candidates; with beam 1 the
        # search expands exactly the greedy prefix, so the top hypothesis is
        # the best eos-closure of that prefix
        prefix_ok = best == words[: len(best)]
        assert prefix_ok

    def test_wide_beam_matches_exhaustive_enumeration(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab, seed=5)
        for p in model.parameters():
            p.value[...] = np.random.default_rng(8).uniform(-0.5, 0.5, p.value.shape)
        hidden, _ = model.encode(models.one_hot_rows([1, 2, 0], inventory.size))
        max_len = 3
        n = vocab.n_words

        def score_sequence(words):
            state, prev, total = None, vocab.sos_id, 0.0
            for w in list(words) + [vocab.eos_id]:
                state, _, logp, _ = model.decode_step(hidden, state, prev)
                total += float(logp[w])
                prev = w
            return total

        import itertools
        exhaustive = []
        for length in range(max_len + 1):
            for combo in itertools.product(range(n), repeat=length):
                exhaustive.append((score_sequence(combo), list(combo)))
        exhaustive.sort(key=lambda e: (-e[0], e[1]))

        hyps = model.beam_decode(hidden, beam_width=n ** max_len, max_len=max_len)
        assert hyps[0][0] == exhaustive[0][1]
        assert hyps[0][1] == pytest.approx(exhaustive[0][0], rel=1e-10)

    def test_separator_only_input_yields_terminated_hypothesis(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab)
        sep = np.zeros((1, inventory.size))
        sep[0, inventory.blank_id] = 1.0
        hidden, _ = model.encode(sep)
        hyps = model.beam_decode(hidden, beam_width=2, max_len=3)
        assert len(hyps) >= 1

    def test_single_pair_loss_decreases_monotonically(self, inventory, vocab):
        model = tiny_s2s(inventory, vocab, seed=11)
        opt = nn.Sgd(model.parameters(), lr=1e-3, clip_norm=5.0)
        rows = models.one_hot_rows([0, 1, inventory.wb_id], inventory.size)
        targets = [0]
        losses = []
        for _ in range(50):
            losses.append(model.loss_on_rows(rows, targets))
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_checkpoint_round_trip(self, inventory, vocab, tmp_path):
        model = tiny_s2s(inventory, vocab, seed=12)
        path = tmp_path / "s2s.npz"
        model.save(path)
        back = models.P2WS2SModel.load(path)
        assert back.param_bytes() == model.param_bytes()


class TestDirectA2W:
    def test_init_copies_a2p_body_bit_exactly(self, inventory, vocab):
        a2p = tiny_a2p(inventory, seed=21)
        direct = models.DirectA2WModel.init_from_a2p(a2p, vocab)
        for mine, theirs in zip(direct.stack.parameters(), a2p.stack.parameters()):
            assert mine.value.tobytes() == theirs.value.tobytes()

    def test_zero_init_output_layer_uniform(self, inventory, vocab):
        a2p = tiny_a2p(inventory, seed=22)
        direct = models.DirectA2WModel.init_from_a2p(a2p, vocab)
        post = direct.posteriors(np.random.default_rng(0).standard_normal((4, 4)))
        np.testing.assert_allclose(np.exp(post.log_probs), 1.0 / vocab.size, atol=1e-12)

    def test_checkpoint_round_trip(self, inventory, vocab, tmp_path):
        a2p = tiny_a2p(inventory, seed=23)
        direct = models.DirectA2WModel.init_from_a2p(a2p, vocab)
        path = tmp_path / "direct.npz"
        direct.save(path)
        back = models.load_any_model(path)
        assert isinstance(back, models.DirectA2WModel)
        assert back.param_bytes() == direct.param_bytes()


class TestStack:
    def _stack(self, inventory, vocab, threshold=0.5, kind="ctc", seed=31):
        a2p = tiny_a2p(inventory, seed=seed)
        rng = np.random.default_rng(seed + 1)
        for p in a2p.out.parameters():
            p.value[...] = rng.uniform(-1.0, 1.0, p.value.shape)
        if kind == "ctc":
            p2w = tiny_p2w_ctc(inventory, vocab, seed=seed + 2)
            for p in p2w.out.parameters():
                p.value[...] = rng.uniform(-1.0, 1.0, p.value.shape)
        else:
            p2w = tiny_s2s(inventory, vocab, seed=seed + 2)
        return models.A2WStack(a2p, psd.PsdConfig(blank_threshold=threshold), p2w, kind)

    def test_identity_filter_equals_direct_composition(self, inventory, vocab):
        stack = self._stack(inventory, vocab, threshold=1.0)
        feats = np.random.default_rng(41).standard_normal((9, 4))
        result = models.stack_forward(feats, stack)
        post = stack.a2p.posteriors(feats)
        word_post = stack.p2w.posteriors(np.exp(post.log_probs))
        assert result.words == ctc.greedy_decode(word_post)
        assert result.compression_ratio == 1.0

    def test_deterministic_given_input(self, inventory, vocab):
        stack = self._stack(inventory, vocab)
        feats = np.random.default_rng(42).standard_normal((8, 4))
        r1 = models.stack_forward(feats, stack)
        r2 = models.stack_forward(feats, stack)
        assert r1.words == r2.words
        assert r1.score == r2.score

    def test_s2s_kind_runs(self, inventory, vocab):
        stack = self._stack(inventory, vocab, kind="s2s")
        feats = np.random.default_rng(43).standard_normal((8, 4))
        result = models.stack_forward(feats, stack, beam_width=2, max_len=4)
        assert isinstance(result.words, list)

    def test_hard_input_uses_one_hot_rows(self, inventory, vocab):
        stack = self._stack(inventory, vocab)
        feats = np.random.default_rng(44).standard_normal((8, 4))
        result = models.stack_forward(feats, stack, hard_input=True)
        rows = models.compact_to_rows(result.compact, hard_input=True)
        assert set(np.unique(rows)) <= {0.0, 1.0}
        np.testing.assert_array_equal(rows.sum(axis=1), 1.0)

    def test_dim_mismatch_rejected(self, inventory, vocab):
        a2p = tiny_a2p(inventory)
        other_inventory = models.PhonemeInventory.build(["a", "b"])
        p2w = tiny_p2w_ctc(other_inventory, vocab)
        with pytest.raises(ConfigurationError):
            models.A2WStack(a2p, psd.PsdConfig(), p2w, "ctc")
