import math

import pytest
import torch

import tan_ntm.model as M
from tan_ntm.model import (ModelConfig, NonFiniteLossError, TANNTM, Variant, aggregate_context,
                           alignment_matrix, check_finite, dirichlet_prior_params, document_topic_proportions,
                           gaussian_kl, load_glove, reconstruction_loss, sample_latent, topic_context_matrix,
                           topic_embeddings, topic_word_distribution)

from conftest import random_batch, tiny_model

D64 = torch.float64


class TestEmbedding:
    def test_rows_match_matrix(self):
        m = tiny_model()
        ids = torch.tensor([[7, 7, 3]])
        emb = m.embedding(ids)[0]
        assert torch.equal(emb[0], m.embedding.weight[7])
        assert torch.equal(emb[0], emb[1])

    def test_out_of_range_index_fails(self):
        m = tiny_model()
        with pytest.raises(IndexError):
            m.embedding(torch.tensor([[31]]))

    def test_glove_rows_copied(self, tmp_path):
        f = tmp_path / "glove.txt"
        f.write_text("apple 0.5 -1.0 2.0\nzzz 9 9 9\npear 1 2 3\n")
        mat, hits = load_glove(f, ["pear", "fig", "apple"], 3, seed=1)
        assert hits == 2
        assert mat[1].tolist() == [1.0, 2.0, 3.0]
        assert mat[3].tolist() == [0.5, -1.0, 2.0]
        assert mat[2].abs().max() <= 0.05 and mat[0].abs().max() <= 0.05
        model = TANNTM(ModelConfig(vocab_size=3, embed_dim=3, hidden_dim=4, attn_dim=2, num_topics=2), mat)
        assert torch.equal(model.embedding.weight[1].detach(), torch.tensor([1.0, 2.0, 3.0]))

    def test_glove_dim_mismatch(self, tmp_path):
        f = tmp_path / "glove.txt"
        f.write_text("apple 0.5 -1.0\n")
        with pytest.raises(ValueError):
            load_glove(f, ["apple"], 3)


class TestEncoder:
    def test_shapes_full_hidden_size(self):
        torch.manual_seed(0)
        m = TANNTM(ModelConfig(vocab_size=20, embed_dim=16, hidden_dim=450, attn_dim=8, num_topics=3))
        ids, lengths, _ = random_batch(20, [6, 4], dtype=torch.float32)
        hidden, final = m.encode_sequence(ids, lengths)
        assert hidden.shape == (2, 6, 450) and final.shape == (2, 450)

    def test_padding_positions_zero_and_final_state_at_length(self):
        m = tiny_model()
        ids, lengths, _ = random_batch(30, [5, 2])
        hidden, final = m.encode_sequence(ids, lengths)
        assert torch.all(hidden[1, 2:] == 0)
        assert torch.allclose(final[1], hidden[1, 1])
        assert torch.allclose(final[0], hidden[0, 4])

    def test_zero_length_gives_zero_memory(self):
        m = tiny_model()
        ids = torch.tensor([[3, 4, 5], [0, 0, 0]])
        hidden, final = m.encode_sequence(ids, torch.tensor([3, 0]))
        assert torch.all(hidden[1] == 0) and torch.all(final[1] == 0)

    def test_order_sensitive(self):
        m = tiny_model()
        a, _ = m.encode_sequence(torch.tensor([[3, 9, 4]]), torch.tensor([3]))
        b, _ = m.encode_sequence(torch.tensor([[9, 3, 4]]), torch.tensor([3]))
        assert not torch.allclose(a, b)


class TestTopicWord:
    def test_zero_decoder_uniform(self):
        T_w = topic_word_distribution(torch.zeros(3, 8, dtype=D64))
        assert torch.allclose(T_w, torch.full((3, 8), 1 / 8, dtype=D64))

    def test_row_shift_invariance(self):
        D = torch.randn(3, 8, dtype=D64)
        shifted = D + torch.tensor([[1.0], [-5.0], [100.0]], dtype=D64)
        assert torch.allclose(topic_word_distribution(D), topic_word_distribution(shifted))

    def test_rows_sum_to_one(self):
        T_w = topic_word_distribution(torch.randn(5, 40) * 10)
        assert torch.allclose(T_w.sum(1), torch.ones(5), atol=1e-6)


class TestTopicEmbeddings:
    E = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]], dtype=D64)

    def test_hand_computed_product(self):
        T_w = torch.tensor([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25], [1.0, 0, 0, 0]], dtype=D64)
        # row 0: 0.1*1 + 0.2*3 + 0.3*5 + 0.4*7 = 5.0 and 0.1*2 + 0.2*4 + 0.3*6 + 0.4*8 = 6.0
        expected = torch.tensor([[5.0, 6.0], [4.0, 5.0], [1.0, 2.0]], dtype=D64)
        assert torch.allclose(topic_embeddings(T_w, self.E), expected, atol=1e-12)

    def test_one_hot_selects_word(self):
        T_w = torch.zeros(1, 4, dtype=D64)
        T_w[0, 2] = 1
        assert torch.equal(topic_embeddings(T_w, self.E)[0], self.E[2])

    def test_uniform_gives_mean(self):
        T_w = torch.full((1, 4), 0.25, dtype=D64)
        assert torch.allclose(topic_embeddings(T_w, self.E)[0], self.E.mean(0))


class TestAttention:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.W_A = torch.randn(6, 8 + 10, generator=g, dtype=D64)
        self.v_A = torch.randn(6, generator=g, dtype=D64)
        self.T_E = torch.randn(4, 8, generator=g, dtype=D64)

    def test_single_token_all_ones(self):
        Mb = torch.randn(2, 3, 10, dtype=D64)
        A = alignment_matrix(self.T_E, Mb, torch.tensor([1, 1]), self.W_A, self.v_A)
        assert A.shape == (2, 3, 4)
        assert torch.equal(A[:, 0], torch.ones(2, 4, dtype=D64))
        assert torch.all(A[:, 1:] == 0)

    def test_identical_states_uniform(self):
        Mb = torch.randn(1, 1, 10, dtype=D64).expand(1, 5, 10)
        A = alignment_matrix(self.T_E, Mb, torch.tensor([4]), self.W_A, self.v_A)
        assert torch.allclose(A[0, :4], torch.full((4, 4), 0.25, dtype=D64))
        assert torch.all(A[0, 4] == 0)

    def test_matches_explicit_concatenation(self):
        Mb = torch.randn(1, 3, 10, dtype=D64)
        A = alignment_matrix(self.T_E, Mb, torch.tensor([3]), self.W_A, self.v_A)
        scores = torch.empty(3, 4, dtype=D64)
        for j in range(3):
            for k in range(4):
                scores[j, k] = self.v_A @ torch.tanh(self.W_A @ torch.cat([self.T_E[k], Mb[0, j]]))
        assert torch.allclose(A[0], torch.softmax(scores, dim=0), atol=1e-12)

    def test_chunked_scores_match_full_grid(self, monkeypatch):
        Mb = torch.randn(2, 5, 10, dtype=D64)
        full = M.additive_scores(self.T_E, Mb, self.W_A, self.v_A)
        monkeypatch.setattr(M, "_SCORE_CHUNK_ELEMS", 2 * 5 * 6 * 3)
        with torch.no_grad():
            chunked = M.additive_scores(self.T_E, Mb, self.W_A, self.v_A)
        assert torch.allclose(full, chunked, atol=1e-14)

    def test_all_padded_errors(self):
        with pytest.raises(ValueError):
            alignment_matrix(self.T_E, torch.zeros(1, 3, 10, dtype=D64), torch.tensor([0]), self.W_A, self.v_A)


class TestContextMatrix:
    def test_single_position(self):
        A = torch.ones(1, 1, 4, dtype=D64)
        h = torch.randn(1, 1, 10, dtype=D64)
        C = topic_context_matrix(A, h)
        assert torch.allclose(C[0], h[0, 0].expand(4, 10))

    def test_rows_convex_combinations(self):
        A = torch.softmax(torch.randn(1, 5, 3, dtype=D64), dim=1)
        Mb = torch.randn(1, 5, 2, dtype=D64)
        C = topic_context_matrix(A, Mb)[0]
        lo, hi = Mb[0].min(0).values, Mb[0].max(0).values
        assert torch.all(C >= lo - 1e-12) and torch.all(C <= hi + 1e-12)


class TestDocumentTopics:
    def test_constant_logits_uniform(self):
        T_E = torch.ones(4, 3, dtype=D64)
        E = torch.ones(6, 3, dtype=D64)
        t_d = document_topic_proportions(torch.tensor([[1.0, 0, 2, 0, 0, 1]], dtype=D64), E, T_E)
        assert torch.allclose(t_d, torch.full((1, 4), 0.25, dtype=D64))

    def test_simplex_and_scale_invariance(self):
        g = torch.Generator().manual_seed(1)
        E, T_E = torch.randn(6, 3, generator=g, dtype=D64), torch.randn(4, 3, generator=g, dtype=D64)
        bow = torch.tensor([[1.0, 0, 2, 0, 0, 1]], dtype=D64)
        t_d = document_topic_proportions(bow, E, T_E)
        assert torch.all(t_d > 0) and torch.isclose(t_d.sum(), torch.tensor(1.0, dtype=D64))
        assert torch.allclose(document_topic_proportions(7.5 * bow, E, T_E), t_d, atol=1e-14)

    def test_zero_bow_errors(self):
        with pytest.raises(ValueError):
            document_topic_proportions(torch.zeros(1, 6), torch.ones(6, 3), torch.ones(4, 3))


class TestAggregate:
    C = torch.arange(12, dtype=D64).reshape(1, 4, 3)

    def test_one_hot_variants_agree(self):
        t_d = torch.tensor([[0.0, 0.0, 1.0, 0.0]], dtype=D64)
        assert torch.equal(aggregate_context(self.C, t_d, Variant.W_TAN), self.C[:, 2])
        assert torch.equal(aggregate_context(self.C, t_d, Variant.T_TAN), self.C[:, 2])

    def test_uniform_weighted_is_mean(self):
        t_d = torch.full((1, 4), 0.25, dtype=D64)
        assert torch.allclose(aggregate_context(self.C, t_d, Variant.W_TAN), self.C.mean(1))

    def test_top_selects_argmax_lowest_on_tie(self):
        t_d = torch.tensor([[0.1, 0.4, 0.4, 0.1]], dtype=D64)
        assert torch.equal(aggregate_context(self.C, t_d, Variant.T_TAN), self.C[:, 1])

    def test_other_variants_rejected(self):
        with pytest.raises(ValueError):
            aggregate_context(self.C, torch.ones(1, 4), Variant.ONLY_LSTM)


class TestInferenceHead:
    def test_zero_weights_zero_output(self):
        m = tiny_model()
        for lin in (m.fc_mu, m.fc_logvar):
            torch.nn.init.zeros_(lin.weight)
            torch.nn.init.zeros_(lin.bias)
        m.eval()
        mu, logvar = m.inference_head(torch.randn(3, 10, dtype=D64))
        assert torch.all(mu == 0) and torch.all(logvar == 0)

    def test_shapes_fifty_topics(self):
        torch.manual_seed(0)
        m = TANNTM(ModelConfig(vocab_size=20, embed_dim=4, hidden_dim=6, attn_dim=3, num_topics=50))
        mu, logvar = m.inference_head(torch.randn(7, 6))
        assert mu.shape == logvar.shape == (7, 50)

    def test_affine_on_frozen_statistics(self):
        m = tiny_model()
        from conftest import randomize_bn_stats
        randomize_bn_stats(m)
        m.eval()
        u = torch.randn(2, 10, dtype=D64)
        for a in (0.0, 1.0, -2.5):
            mu, _ = m.inference_head(a * u)
            bn = m.bn_mu
            normed = (a * u - bn.running_mean) / torch.sqrt(bn.running_var + bn.eps) * bn.weight + bn.bias
            assert torch.allclose(mu, normed @ m.fc_mu.weight.T + m.fc_mu.bias, atol=1e-12)

    def test_bn_settings(self):
        m = tiny_model()
        for bn in (m.bn_mu, m.bn_logvar, m.bn_dec):
            assert bn.eps == 1e-3 and math.isclose(bn.momentum, 0.001)


class TestSampling:
    def test_tiny_variance_returns_mean(self):
        mu = torch.randn(4, 5, dtype=D64)
        z = sample_latent(mu, torch.full_like(mu, -80.0), torch.Generator().manual_seed(0))
        assert torch.allclose(z, mu, atol=1e-15)

    def test_seeded_samples_repeat(self):
        mu, lv = torch.zeros(3, 5), torch.zeros(3, 5)
        a = sample_latent(mu, lv, torch.Generator().manual_seed(9))
        b = sample_latent(mu, lv, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_eval_mode_is_mean(self):
        mu = torch.randn(2, 3)
        assert sample_latent(mu, torch.zeros(2, 3), sample=False) is mu

    def test_monte_carlo_mean(self):
        n = 100_000
        mu = torch.tensor([0.5, -1.0, 2.0], dtype=D64)
        logvar = torch.tensor([0.0, 1.0, -1.0], dtype=D64)
        z = sample_latent(mu.expand(n, 3), logvar.expand(n, 3), torch.Generator().manual_seed(0))
        sigma = (0.5 * logvar).exp()
        assert torch.all((z.mean(0) - mu).abs() <= 3 * sigma / math.sqrt(n))


class TestDecoder:
    def test_zero_decoder_uniform_in_eval(self):
        m = tiny_model()
        with torch.no_grad():
            m.D.zero_()
            m.dec_bias.zero_()
        m.eval()
        x = m.decode_bow(torch.randn(3, 4, dtype=D64))
        assert torch.allclose(x, torch.full((3, 30), 1 / 30, dtype=D64))

    def test_output_on_simplex(self):
        m = tiny_model()
        m.train()
        x = m.decode_bow(torch.randn(5, 4, dtype=D64))
        assert torch.allclose(x.sum(1), torch.ones(5, dtype=D64)) and torch.all(x >= 0)

    def test_dropout_expectation_matches_eval(self):
        # inverted dropout: averaging train-mode logits over masks (normalization frozen) recovers eval logits
        m = tiny_model()
        from conftest import randomize_bn_stats
        randomize_bn_stats(m)
        m.eval()
        z = torch.randn(1, 4, dtype=D64)
        eval_logits = m.decode_logits(z)
        m.drop.train()
        torch.manual_seed(0)
        n = 40_000
        samples = m.decode_logits(z.expand(n, 4))
        mean, std = samples.mean(0), samples.std(0)
        assert torch.all((mean - eval_logits[0]).abs() <= 5 * std / math.sqrt(n) + 1e-12)


class TestPrior:
    def test_symmetric_zero_mean(self):
        mu, var = dirichlet_prior_params(0.02, 50)
        assert torch.allclose(mu, torch.zeros(50, dtype=D64))
        # (1/a)(1 - 2/K) + (1/K^2) * K/a = 50 * 0.96 + 1
        assert torch.allclose(var, torch.full((50,), 49.0, dtype=D64))

    def test_two_topics_plug_in(self):
        _, var = dirichlet_prior_params([1.0, 1.0], 2)
        assert torch.allclose(var, torch.tensor([0.5, 0.5], dtype=D64))

    def test_three_topics_plug_in(self):
        mu, var = dirichlet_prior_params([1.0, 2.0, 4.0], 3)
        # mean of logs = log 2; var_k = (1/a_k)/3 + (1 + 0.5 + 0.25)/9
        assert torch.allclose(mu, torch.log(torch.tensor([0.5, 1.0, 2.0], dtype=D64)))
        expected = torch.tensor([1 / 3 + 1.75 / 9, 0.5 / 3 + 1.75 / 9, 0.25 / 3 + 1.75 / 9], dtype=D64)
        assert torch.allclose(var, expected)

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            dirichlet_prior_params(0.0, 3)
        with pytest.raises(ValueError):
            dirichlet_prior_params([1.0, 1.0], 3)


class TestLoss:
    def test_kl_zero_at_prior(self):
        pm, pv = dirichlet_prior_params([0.3, 1.0, 2.0, 0.5], 4)
        kl = gaussian_kl(pm[None], pv.log()[None], pm, pv)
        assert torch.allclose(kl, torch.zeros(1, dtype=D64), atol=1e-14)

    def test_recon_uniform(self):
        bow = torch.tensor([[2.0, 0, 3, 1]], dtype=D64)
        rec = reconstruction_loss(bow, torch.full((1, 4), 0.25, dtype=D64))
        assert torch.isclose(rec[0], torch.tensor(6 * math.log(4), dtype=D64), rtol=1e-8)

    def test_nonfinite_loss_aborts(self):
        m = tiny_model()
        ids, lengths, bow = random_batch(30, [3, 2])
        with torch.no_grad():
            m.fc_logvar.bias.fill_(float("inf"))
        trace = m(ids, lengths, bow)
        with pytest.raises(NonFiniteLossError, match="non-finite loss"):
            check_finite(trace, "unit test")


class TestForward:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_trace_shapes(self, variant):
        torch.manual_seed(0)
        m = TANNTM(ModelConfig(vocab_size=25, embed_dim=6, hidden_dim=7, attn_dim=5, num_topics=50, variant=variant))
        ids, lengths, bow = random_batch(25, [4] * 100, dtype=torch.float32)
        tr = m(ids, lengths, bow)
        assert tr.z.shape == (100, 50) and tr.x_rec.shape == (100, 25) and tr.total.dim() == 0
        if variant.topic_attention:
            assert tr.A.shape == (100, 4, 50) and tr.C_T.shape == (100, 50, 7) and tr.t_d.shape == (100, 50)
        elif variant is Variant.VANILLA_ATTN:
            assert tr.A.shape == (100, 4, 1) and tr.C_T is None
        else:
            assert tr.A is None

    def test_only_lstm_uses_final_state(self):
        m = tiny_model(Variant.ONLY_LSTM)
        ids, lengths, bow = random_batch(30, [5, 3])
        _, final = m.encode_sequence(ids, lengths)
        assert torch.equal(m.context(ids, lengths, bow)["c"], final)

    def test_vanilla_attention_queries_with_final_state(self):
        m = tiny_model(Variant.VANILLA_ATTN)
        ids, lengths, bow = random_batch(30, [5])
        hidden, final = m.encode_sequence(ids, lengths)
        scores = torch.stack([m.v_A @ torch.tanh(m.W_A @ torch.cat([final[0], hidden[0, j]])) for j in range(5)])
        expected = torch.softmax(scores, 0) @ hidden[0]
        assert torch.allclose(m.context(ids, lengths, bow)["c"][0], expected, atol=1e-12)

    def test_weighted_and_top_coincide_for_one_hot_proportions(self, monkeypatch):
        def one_hot(bow, word_emb, T_E):
            t = document_topic_proportions(bow, word_emb, T_E)
            return torch.nn.functional.one_hot(t.argmax(-1), t.shape[-1]).to(t.dtype)

        monkeypatch.setattr(M, "document_topic_proportions", one_hot)
        ids, lengths, bow = random_batch(30, [5, 3, 4])
        traces = []
        for variant in (Variant.W_TAN, Variant.T_TAN):
            m = tiny_model(variant, seed=3)
            m.eval()
            traces.append(m(ids, lengths, bow))
        assert torch.equal(traces[0].c, traces[1].c)
        assert torch.equal(traces[0].total, traces[1].total)

    def test_eval_forward_deterministic(self):
        m = tiny_model()
        m.eval()
        ids, lengths, bow = random_batch(30, [5, 3])
        assert torch.equal(m(ids, lengths, bow).total, m(ids, lengths, bow).total)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=0)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=5, dropout_rate=1.0)
        assert ModelConfig(vocab_size=5, num_topics=4).prior_alpha == 0.25
        assert ModelConfig(vocab_size=5, variant="wtan").variant is Variant.W_TAN
