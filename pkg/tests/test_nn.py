import numpy as np
import pytest

from demrep import nn
from demrep.errors import ConfigError, ContractError, DataError, DivergenceError
from demrep.sequencing import SequenceFrame


def make_frame(steps, mask, targets=None, frame_len=None):
    steps = np.asarray(steps, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    t = np.zeros(len(mask)) if targets is None else np.asarray(targets, dtype=float)
    return SequenceFrame(steps, mask, t * mask, [None] * len(mask),
                         np.where(mask, np.arange(len(mask)), -1))


class TestInit:
    def test_deterministic(self):
        a = nn.init_model("NS", "trad", 2, 16, 4, seed=11)
        b = nn.init_model("NS", "trad", 2, 16, 4, seed=11)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])

    def test_ns_layer_inventory(self):
        m = nn.init_model("NS", "trad", 2, 16, 4, seed=0)
        # three linear stages (two token projections count as the first) plus
        # the attention projections
        assert set(m.params) == {"tok1_w", "tok1_b", "tok2_w", "tok2_b",
                                 "q_w", "k_w", "v_w",
                                 "emb_w", "emb_b", "out_w", "out_b"}
        assert m.params["emb_w"].shape == (16, 4)
        assert m.params["out_w"].shape == (4, 1)

    def test_seq_layer_inventory(self):
        m = nn.init_model("Seq", "pe", 8, 16, 4, seed=0)
        assert set(m.params) == {"lstm_wx", "lstm_wh", "lstm_b",
                                 "emb_w", "emb_b", "out_w", "out_b"}
        assert m.params["lstm_wx"].shape == (8, 64)
        assert m.params["lstm_wh"].shape == (16, 64)

    def test_embed_must_be_smaller_than_hidden(self):
        with pytest.raises(ConfigError):
            nn.init_model("NS", "trad", 2, 8, 8, seed=0)

    def test_bad_ordering(self):
        with pytest.raises(ConfigError):
            nn.init_model("RNN", "trad", 2, 8, 4, seed=0)

    def test_weight_init_within_fan_in_bound(self):
        m = nn.init_model("Seq", "trad", 2, 32, 8, seed=5)
        assert np.abs(m.params["lstm_wh"]).max() <= 1 / np.sqrt(32)
        assert np.abs(m.params["lstm_wx"]).max() <= 1 / np.sqrt(2)


class TestAttention:
    def test_single_token_is_v_projection(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=(1, 4))
        v_w = rng.normal(size=(4, 4))
        out = nn.self_attention(t, np.eye(4), np.eye(4), v_w)
        assert np.allclose(out, t @ v_w)

    def test_identical_tokens_identity_projections(self):
        token = np.array([[1.0, -2.0, 0.5], [1.0, -2.0, 0.5]])
        out = nn.self_attention(token, np.eye(3), np.eye(3), np.eye(3))
        assert np.allclose(out, token)

    def test_weights_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        tokens = rng.normal(size=(3, 4))
        w = nn.attention_weights(tokens, rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert (w >= 0).all()

    def test_empty_tokens_rejected(self):
        with pytest.raises(ContractError):
            nn.self_attention(np.empty((0, 3)), np.eye(3), np.eye(3), np.eye(3))


class TestLstmStep:
    def test_all_zero(self):
        h, c = nn.lstm_step(np.zeros(2), np.zeros(3), np.zeros(3),
                            np.zeros((2, 12)), np.zeros((3, 12)), np.zeros(12))
        assert np.array_equal(h, np.zeros(3)) and np.array_equal(c, np.zeros(3))

    def test_carry_cell_through_half_gates(self):
        # zero weights: f = i = o = 0.5, candidate = 0, so c' = 0.5 c
        h, c = nn.lstm_step(np.zeros(1), np.zeros(1), np.array([1.0]),
                            np.zeros((1, 4)), np.zeros((1, 4)), np.zeros(4))
        assert c[0] == pytest.approx(0.5)
        assert h[0] == pytest.approx(0.23105857863000488, abs=1e-12)

    def test_saturated_forget_gate_preserves_cell(self):
        # forget bias -> +inf keeps c; input gate bias -> -inf blocks writes
        b = np.zeros(4)
        b[1] = 30.0   # forget
        b[0] = -30.0  # input
        c0 = np.array([0.73])
        h, c = nn.lstm_step(np.array([0.2]), np.array([0.1]), c0,
                            np.zeros((1, 4)), np.zeros((1, 4)), b)
        assert c[0] == pytest.approx(0.73, abs=1e-9)


class TestForward:
    def test_zero_weight_model_outputs_bias(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=0)
        for name in m.params:
            m.params[name] = np.zeros_like(m.params[name])
        m.params["out_b"] = np.array([2.5])
        preds = nn.forward(m, np.random.default_rng(0).normal(size=(6, 2)))
        assert np.allclose(preds, 2.5)

    def test_seq_masking_counts_contributions(self):
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=1)
        rng = np.random.default_rng(2)
        steps = np.zeros((6, 2))
        steps[:3] = rng.normal(size=(3, 2))
        mask = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
        targets = rng.normal(size=6) * mask
        frame = make_frame(steps, mask, targets)
        preds = nn.forward(m, [frame])
        assert preds.shape == (1, 6)
        assert (preds[0, 3:] == 0).all()
        manual = np.mean((preds[0, :3] - targets[:3]) ** 2)
        assert nn.masked_mse_loss(m, [frame], targets[None, :]) == pytest.approx(manual)

    def test_ns_hand_computed_affine_chain(self):
        # tiny fixed weights, hand arithmetic through the whole NS stack
        m = nn.init_model("NS", "trad", 2, 2, 1, seed=0)
        m.params["tok1_w"] = np.array([[1.0, 0.0]])
        m.params["tok1_b"] = np.array([0.0, 0.0])
        m.params["tok2_w"] = np.array([[1.0, 0.0]])
        m.params["tok2_b"] = np.array([0.0, 0.0])
        m.params["q_w"] = np.zeros((2, 2))   # uniform attention
        m.params["k_w"] = np.zeros((2, 2))
        m.params["v_w"] = np.eye(2)
        m.params["emb_w"] = np.array([[2.0], [0.0]])
        m.params["emb_b"] = np.array([1.0])
        m.params["out_w"] = np.array([[3.0]])
        m.params["out_b"] = np.array([-1.0])
        x = np.array([[0.5, 0.25]])
        # tokens (0.5,0) and (0.25,0); uniform attention + identity V pools
        # to (0.375, 0); emb = relu(2*0.375 + 1) = 1.75; out = 3*1.75 - 1
        assert nn.forward(m, x)[0] == pytest.approx(4.25)

    def test_shape_mismatch(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=1)
        with pytest.raises(ContractError):
            nn.forward(m, np.zeros((3, 5)))


class TestTrain:
    def test_constant_target_loss_decreases(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(40, 2))
        y = np.full(40, 3.0)
        hist = nn.train(m, x, y, nn.TrainConfig(epochs=50, seed=5))
        assert hist[-1] < hist[0]

    def test_zero_learning_rate_constant_history(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        hist = nn.train(m, x, y, nn.TrainConfig(learning_rate=0.0, epochs=5, seed=6))
        assert len(set(hist)) == 1

    def test_linear_task_mse_ratio(self):
        m = nn.init_model("NS", "trad", 2, 16, 8, seed=7)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(50, 2))
        y = x @ np.array([1.0, -2.0]) + 0.5
        hist = nn.train(m, x, y, nn.TrainConfig(epochs=200, seed=9))
        assert hist[-1] < 0.1 * hist[0]

    def test_history_length_equals_epochs(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=1)
        hist = nn.train(m, np.zeros((4, 2)), np.zeros(4), nn.TrainConfig(epochs=7, seed=1))
        assert len(hist) == 7

    def test_deterministic_weights(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        results = []
        for _ in range(2):
            m = nn.init_model("NS", "trad", 2, 8, 4, seed=12)
            nn.train(m, x, y, nn.TrainConfig(epochs=10, seed=13))
            results.append({k: v.copy() for k, v in m.params.items()})
        for name in results[0]:
            assert np.array_equal(results[0][name], results[1][name])

    def test_seq_training_runs_and_improves(self):
        rng = np.random.default_rng(14)
        frames = []
        for _ in range(8):
            steps = rng.normal(size=(10, 2))
            mask = np.ones(10, dtype=bool)
            targets = steps[:, 0] * 2.0
            frames.append(make_frame(steps, mask, targets))
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=15)
        hist = nn.train(m, frames, config=nn.TrainConfig(epochs=60, seed=16))
        assert hist[-1] < hist[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported_with_epoch(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=3)
        x = np.full((8, 2), 1e160)
        y = np.zeros(8)
        with pytest.raises(DivergenceError, match="epoch"):
            nn.train(m, x, y, nn.TrainConfig(epochs=2, seed=1))


class TestMaskedLossInvariance:
    def test_padding_randomization_bit_equal(self):
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=20)
        rng = np.random.default_rng(21)
        steps = np.zeros((12, 2))
        steps[:5] = rng.normal(size=(5, 2))
        mask = np.zeros(12, dtype=bool)
        mask[:5] = True
        targets = rng.normal(size=12) * mask
        loss_a = nn.masked_mse_loss(m, (steps, mask), targets)
        noisy = steps.copy()
        noisy[5:] = rng.normal(size=(7, 2)) * 100
        loss_b = nn.masked_mse_loss(m, (noisy, mask), targets)
        assert loss_a == loss_b  # bitwise

    def test_padding_randomization_gradients_bit_equal(self):
        m = nn.init_model("Seq", "trad", 2, 6, 3, seed=22)
        rng = np.random.default_rng(23)
        steps = np.zeros((9, 2))
        steps[:4] = rng.normal(size=(4, 2))
        mask = np.zeros(9, dtype=bool)
        mask[:4] = True
        targets = rng.normal(size=9) * mask
        _, g1, _, _ = nn._loss_and_grads_seq(m, steps[None], mask[None], targets[None])
        noisy = steps.copy()
        noisy[4:] = rng.normal(size=(5, 2)) * 50
        _, g2, _, _ = nn._loss_and_grads_seq(m, noisy[None], mask[None], targets[None])
        for name in g1:
            assert np.array_equal(g1[name], g2[name])


class TestExtractEmbedding:
    def test_ns_shape_and_determinism(self):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=30)
        x = np.array([3.2, 1.0])
        e1 = nn.extract_embedding(m, x)
        e2 = nn.extract_embedding(m, x)
        assert e1.shape == (4,)
        assert np.array_equal(e1, e2)

    def test_equal_histories_equal_embeddings(self):
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=31)
        rng = np.random.default_rng(32)
        steps = rng.normal(size=(6, 2))
        mask = np.ones(6, dtype=bool)
        a = nn.extract_embedding(m, (steps, mask))
        b = nn.extract_embedding(m, (steps.copy(), mask.copy()))
        assert np.array_equal(a, b)
        assert a.shape == (4,)

    def test_zero_valid_steps_rejected(self):
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=33)
        with pytest.raises(ContractError):
            nn.extract_embedding(m, (np.zeros((5, 2)), np.zeros(5, dtype=bool)))

    def test_seq_embedding_is_last_valid_step(self):
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=34)
        rng = np.random.default_rng(35)
        steps = np.zeros((10, 2))
        steps[:4] = rng.normal(size=(4, 2))
        mask = np.zeros(10, dtype=bool)
        mask[:4] = True
        frame_emb = nn.extract_embedding(m, (steps, mask))
        per_step = nn.step_embeddings(m, [make_frame(steps, mask)])
        assert np.array_equal(frame_emb, per_step[0, 3])


class TestGradCheck:
    def test_linear_model_below_1e6(self):
        rng = np.random.default_rng(40)
        lin = nn.LinearRegressor(3, 5, seed=41)
        err = nn.grad_check(lin, rng.normal(size=(8, 3)), rng.normal(size=8))
        assert err < 1e-6

    def test_attention_model_below_1e4(self):
        rng = np.random.default_rng(42)
        m = nn.init_model("NS", "trad", 2, 6, 3, seed=43)
        err = nn.grad_check(m, rng.normal(size=(5, 2)), rng.normal(size=5))
        assert err < 1e-4

    def test_lstm_masked_sequence_below_1e4(self):
        rng = np.random.default_rng(44)
        m = nn.init_model("Seq", "trad", 2, 6, 3, seed=45)
        steps = rng.normal(size=(5, 2))
        mask = np.array([1, 1, 1, 0, 0], dtype=bool)
        steps[~mask] = 0
        targets = rng.normal(size=5) * mask
        err = nn.grad_check(m, (steps, mask), targets)
        assert err < 1e-4


class TestPersistence:
    @pytest.mark.parametrize("ordering", ["NS", "Seq"])
    def test_roundtrip_bitwise(self, tmp_path, ordering):
        m = nn.init_model(ordering, "pe", 8, 12, 5, seed=50)
        path = tmp_path / "m.model.txt"
        nn.save_model(m, path)
        back = nn.load_model(path)
        assert back.ordering == ordering
        assert back.encoder_kind == "pe"
        assert (back.input_dim, back.hidden_dim, back.embed_dim) == (8, 12, 5)
        for name in m.params:
            assert np.array_equal(m.params[name], back.params[name])

    def test_tampered_file_rejected(self, tmp_path):
        m = nn.init_model("NS", "trad", 2, 8, 4, seed=51)
        path = tmp_path / "m.model.txt"
        nn.save_model(m, path)
        text = path.read_text().replace("hidden_dim 8", "hidden_dim 9")
        path.write_text(text)
        with pytest.raises(DataError, match="hash"):
            nn.load_model(path)

    def test_missing_file(self):
        with pytest.raises(DataError, match="not found"):
            nn.load_model("/nonexistent/m.model.txt")

    def test_loaded_model_predicts_identically(self, tmp_path):
        m = nn.init_model("Seq", "trad", 2, 8, 4, seed=52)
        rng = np.random.default_rng(53)
        steps = rng.normal(size=(6, 2))
        mask = np.ones(6, dtype=bool)
        path = tmp_path / "m.model.txt"
        nn.save_model(m, path)
        back = nn.load_model(path)
        assert np.array_equal(nn.forward(m, (steps, mask)), nn.forward(back, (steps, mask)))
