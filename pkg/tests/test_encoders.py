import numpy as np
import pytest
from hypothesis import given, strategies as st

from demrep.encoders import (Encoder, EncoderConfig, TextEmbedder, encode_pe,
                             encode_text, encode_trad, fallback_embed, render_text)
from demrep.errors import ConfigError, ContractError, TransportError

LN_76 = 4.330733340286331  # ln(76), frozen from high-precision evaluation


class TestTrad:
    def test_zero_age_female(self):
        assert encode_trad(0, 0).values == (0.0, 0.0)

    def test_age_75_male(self):
        v = encode_trad(75, 1)
        assert v.values[0] == pytest.approx(LN_76, abs=1e-12)
        assert v.values[1] == 1.0

    def test_zero_age_male(self):
        assert encode_trad(0, 1).values == (0.0, 1.0)

    def test_negative_age_rejected(self):
        with pytest.raises(ContractError):
            encode_trad(-1, 0)

    def test_strictly_increasing_in_age(self):
        values = [encode_trad(a, 0).values[0] for a in range(0, 130)]
        assert all(b > a for a, b in zip(values, values[1:]))


class TestPe:
    def test_pos0_female(self):
        assert encode_pe(0, 0, 4).values == (0.0, 1.0, 0.0, 1.0)

    def test_pos0_male_shifts_by_one(self):
        assert encode_pe(0, 1, 4).values == (1.0, 2.0, 1.0, 2.0)

    def test_age50_dim0_is_sin50(self):
        v = encode_pe(50, 0, 4)
        assert v.values[0] == pytest.approx(-0.2623748537039288, abs=1e-12)

    def test_odd_d_model_rejected(self):
        with pytest.raises(ConfigError):
            encode_pe(10, 0, 5)

    def test_fractional_age_floored(self):
        assert encode_pe(50.9, 0, 8).values == encode_pe(50, 0, 8).values

    @given(st.integers(0, 130), st.integers(0, 1), st.sampled_from([2, 4, 8, 32]))
    def test_entries_within_g_pm_1(self, age, g, d_model):
        v = np.array(encode_pe(age, g, d_model).values)
        assert (v >= g - 1 - 1e-12).all() and (v <= g + 1 + 1e-12).all()

    @given(st.integers(0, 130), st.sampled_from([2, 4, 8, 32]))
    def test_gender_shift_is_ones_to_one_ulp(self, age, d_model):
        # (sin + 1) - sin cannot be bitwise 1.0 in IEEE-754; one ulp is the
        # achievable exactness for the additive gender shift
        male = np.array(encode_pe(age, 1, d_model).values)
        female = np.array(encode_pe(age, 0, d_model).values)
        np.testing.assert_allclose(male - female, 1.0, rtol=0, atol=2 ** -52)


class TestRenderText:
    def test_male_75(self):
        assert render_text(75, 1) == "Male, 75 years old"

    def test_female_0(self):
        assert render_text(0, 0) == "Female, 0 years old"

    def test_custom_template(self):
        assert render_text(30, 1, "{age}y {gender}") == "30y Male"


class TestFallbackEmbed:
    def test_unit_norm(self):
        v = fallback_embed("anything at all", 16)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)

    def test_deterministic(self):
        a = fallback_embed("Male, 75 years old", 16)
        b = fallback_embed("Male, 75 years old", 16)
        assert np.array_equal(a, b)

    def test_distinct_texts_distinct_vectors(self):
        a = fallback_embed("Male, 75 years old", 16)
        b = fallback_embed("Male, 76 years old", 16)
        assert not np.array_equal(a, b)

    def test_near_orthogonal(self):
        a = fallback_embed("a", 64)
        b = fallback_embed("b", 64)
        assert abs(float(a @ b)) < 0.9

    def test_min_dim(self):
        with pytest.raises(ConfigError):
            fallback_embed("x", 4)


class TestEncodeText:
    def test_deterministic_pair(self):
        emb = TextEmbedder(EncoderConfig(kind="txt", embedder="fallback"))
        a = encode_text(40, 1, emb)
        b = encode_text(40, 1, emb)
        assert a.values == b.values
        assert a.dim == 16

    def test_fallback_unit_norm(self):
        emb = TextEmbedder(EncoderConfig(kind="txt", fallback_dim=16))
        v = np.array(encode_text(75, 1, emb).values)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)

    def test_remote_unreachable_downgrades_and_records(self):
        cfg = EncoderConfig(kind="txt", embedder="remote",
                            remote_url="http://127.0.0.1:1", remote_timeout=0.2)
        emb = TextEmbedder(cfg)
        v = emb.embed(["Male, 75 years old"])
        assert v.shape == (1, 16)
        assert emb.mode_used() == "fallback"
        assert emb.downgrades

    def test_remote_unreachable_without_fallback_raises(self):
        cfg = EncoderConfig(kind="txt", embedder="remote", allow_fallback=False,
                            remote_url="http://127.0.0.1:1", remote_timeout=0.2)
        with pytest.raises(TransportError):
            TextEmbedder(cfg).embed(["x"])


@pytest.fixture()
def stub_service():
    """Minimal in-process HTTP double for the embedding service."""
    import http.server
    import json
    import threading

    class Handler(http.server.BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_GET(self):
            if self.path == "/health":
                body = json.dumps({"status": "ok", "model_version": "stub-1"}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(body)

        def do_POST(self):
            if self.path != "/embed":
                self.send_response(404)
                self.end_headers()
                return
            length = int(self.headers["Content-Length"])
            texts = json.loads(self.rfile.read(length))["texts"]
            vectors = []
            for text in texts:
                v = fallback_embed(text, 384)
                vectors.append([float(x) for x in v])
            body = json.dumps({"vectors": vectors, "model_version": "stub-1"}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(body)

    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestRemoteEmbedder:
    def test_remote_mode_uses_service(self, stub_service):
        cfg = EncoderConfig(kind="txt", embedder="remote", remote_url=stub_service)
        emb = TextEmbedder(cfg)
        vectors = emb.embed(["Male, 75 years old", "Female, 30 years old"])
        assert emb.mode_used() == "remote"
        assert vectors.shape == (2, 384)
        assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-6)
        # order-preserving: re-request in swapped order
        swapped = emb.embed(["Female, 30 years old", "Male, 75 years old"])
        assert np.array_equal(swapped[0], vectors[1])
        assert np.array_equal(swapped[1], vectors[0])

    def test_encoder_dim_matches_remote(self, stub_service):
        cfg = EncoderConfig(kind="txt", embedder="remote", remote_url=stub_service)
        enc = Encoder(cfg)
        assert enc.dim == 384
        assert enc.encode(40, 1).shape == (384,)


class TestEncoderFacade:
    @pytest.mark.parametrize("kind,dim", [("trad", 2), ("pe", 32), ("txt", 16)])
    def test_dims(self, kind, dim):
        enc = Encoder(EncoderConfig(kind=kind))
        assert enc.dim == dim
        assert enc.encode(40, 1).shape == (dim,)

    def test_encode_rows_matches_single(self):
        enc = Encoder(EncoderConfig(kind="pe", d_model=8))
        rows = enc.encode_rows(np.array([10.0, 20.0]), np.array([0, 1]))
        assert np.array_equal(rows[0], enc.encode(10, 0))
        assert np.array_equal(rows[1], enc.encode(20, 1))

    def test_pure(self):
        enc = Encoder(EncoderConfig(kind="trad"))
        assert np.array_equal(enc.encode(33, 1), enc.encode(33, 1))

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            Encoder(EncoderConfig(kind="onehot"))
