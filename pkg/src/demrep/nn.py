"""Dense network machinery for the demographic pretraining models.

Two architectures, selected by the input ordering scheme:

* NS (row-wise): the encoded row is split into an age-derived and a
  gender-derived token, each linearly projected to hidden width; a
  single-head scaled dot-product self-attention mixes the two tokens; the
  mean-pooled output feeds two linear layers with a ReLU between them.
* Seq (frame-wise): a single-layer LSTM consumes 120-step frames; each
  step's hidden state feeds the same two-linear ReLU head, predicting the
  comorbidity target at every valid step.

Everything runs in float64 with hand-written backpropagation (including
backpropagation through time) so gradients can be verified against central
finite differences. Training is plain minibatch Adam with global-norm
gradient clipping; padded steps never contribute to loss or gradients.

The embedding a downstream consumer extracts is the ReLU output of the
penultimate linear layer: for NS computed from the pooled attention
output, for Seq from the LSTM hidden state at the requested step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, DivergenceError
from .sequencing import SequenceFrame

MODEL_FORMAT = "demrep-model v1"

_NS_PARAM_ORDER = ["tok1_w", "tok1_b", "tok2_w", "tok2_b",
                   "q_w", "k_w", "v_w",
                   "emb_w", "emb_b", "out_w", "out_b"]
_SEQ_PARAM_ORDER = ["lstm_wx", "lstm_wh", "lstm_b",
                    "emb_w", "emb_b", "out_w", "out_b"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")


@dataclass
class GdpModel:
    ordering: str           # NS | Seq
    encoder_kind: str       # trad | pe | txt
    input_dim: int
    hidden_dim: int
    embed_dim: int
    seed: int
    params: dict[str, np.ndarray]
    version: str = "1"

    @property
    def param_order(self) -> list[str]:
        return _NS_PARAM_ORDER if self.ordering == "NS" else _SEQ_PARAM_ORDER

    @property
    def token_split(self) -> int:
        # Leading token takes the ceil half: for trad this is exactly the
        # log-age coordinate, leaving the gender bit as the second token.
        return self.input_dim - self.input_dim // 2


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(ordering: str, encoder_kind: str, input_dim: int,
               hidden_dim: int = 32, embed_dim: int = 8, seed: int = 0) -> GdpModel:
    if ordering not in ("NS", "Seq"):
        raise ConfigError(f"unknown ordering {ordering!r}")
    if input_dim < 1 or hidden_dim < 1 or embed_dim < 1:
        raise ConfigError("model dims must be positive")
    if embed_dim >= hidden_dim:
        raise ConfigError("embed_dim must be smaller than hidden_dim")
    rng = np.random.default_rng(seed)
    h, e = hidden_dim, embed_dim
    params: dict[str, np.ndarray] = {}
    if ordering == "NS":
        d1 = input_dim - input_dim // 2
        d2 = input_dim // 2
        if d2 == 0:
            raise ConfigError("NS models need input_dim >= 2 to form two tokens")
        params["tok1_w"] = _uniform(rng, (d1, h), d1)
        params["tok1_b"] = np.zeros(h)
        params["tok2_w"] = _uniform(rng, (d2, h), d2)
        params["tok2_b"] = np.zeros(h)
        for gate in ("q", "k", "v"):
            # biasless projections: a key bias is a softmax no-op anyway
            params[f"{gate}_w"] = _uniform(rng, (h, h), h)
    else:
        params["lstm_wx"] = _uniform(rng, (input_dim, 4 * h), input_dim)
        params["lstm_wh"] = _uniform(rng, (h, 4 * h), h)
        # Chrono-style gate biases: per-unit time constants log-spaced up to
        # ~half the frame length, so the stack starts with a spectrum of
        # fast and slow memory instead of uniformly short horizons.
        b = np.zeros(4 * h)
        t_const = np.exp(rng.uniform(0.0, math.log(60.0), h))
        b[h:2 * h] = np.log(t_const)
        b[:h] = -np.log(t_const)
        params["lstm_b"] = b
    params["emb_w"] = _uniform(rng, (h, e), h)
    params["emb_b"] = np.zeros(e)
    params["out_w"] = _uniform(rng, (e, 1), e)
    params["out_b"] = np.zeros(1)
    return GdpModel(ordering, encoder_kind, input_dim, hidden_dim, embed_dim, seed, params)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention(tokens: np.ndarray, q_w, k_w, v_w) -> np.ndarray:
    """softmax(QK^T / sqrt(d)) V over the token axis of an (m, d) matrix."""
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ContractError("attention expects an (m, d) token matrix with m >= 1")
    q = tokens @ q_w
    k = tokens @ k_w
    v = tokens @ v_w
    weights = _softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return weights @ v


def attention_weights(tokens: np.ndarray, q_w, k_w) -> np.ndarray:
    q = tokens @ q_w
    k = tokens @ k_w
    return _softmax_rows(q @ k.T / math.sqrt(q.shape[1]))


def lstm_step(x: np.ndarray, h: np.ndarray, c: np.ndarray,
              wx: np.ndarray, wh: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM cell update; gate layout along the 4H axis is [i, f, g, o]."""
    hid = h.shape[-1]
    z = x @ wx + h @ wh + b
    i = _sigmoid(z[..., :hid])
    f = _sigmoid(z[..., hid:2 * hid])
    g = np.tanh(z[..., 2 * hid:3 * hid])
    o = _sigmoid(z[..., 3 * hid:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


# ---------------------------------------------------------------------------
# NS forward/backward


def _ns_forward(model: GdpModel, x: np.ndarray, want_cache: bool = False):
    p = model.params
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise ContractError(f"expected input dim {model.input_dim}, got {x.shape[1]}")
    d1 = model.token_split
    t1 = x[:, :d1] @ p["tok1_w"] + p["tok1_b"]
    t2 = x[:, d1:] @ p["tok2_w"] + p["tok2_b"]
    tokens = np.stack([t1, t2], axis=1)                     # (B, 2, H)
    q = tokens @ p["q_w"]
    k = tokens @ p["k_w"]
    v = tokens @ p["v_w"]
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(model.hidden_dim)
    attn = _softmax_rows(scores)                            # (B, 2, 2)
    mixed = attn @ v                                        # (B, 2, H)
    pooled = mixed.mean(axis=1)                             # (B, H)
    emb_pre = pooled @ p["emb_w"] + p["emb_b"]
    emb = np.maximum(emb_pre, 0.0)
    preds = (emb @ p["out_w"] + p["out_b"])[:, 0]
    if not want_cache:
        return preds
    cache = dict(x=x, tokens=tokens, q=q, k=k, v=v, attn=attn, mixed=mixed,
                 pooled=pooled, emb_pre=emb_pre, emb=emb)
    return preds, cache


def _ns_backward(model: GdpModel, cache: dict, dpreds: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    x, tokens = cache["x"], cache["tokens"]
    grads = {}
    grads["out_w"] = cache["emb"].T @ dpreds[:, None]
    grads["out_b"] = np.array([dpreds.sum()])
    demb = dpreds[:, None] @ p["out_w"].T
    demb_pre = demb * (cache["emb_pre"] > 0)
    grads["emb_w"] = cache["pooled"].T @ demb_pre
    grads["emb_b"] = demb_pre.sum(axis=0)
    dpooled = demb_pre @ p["emb_w"].T
    dmixed = np.repeat(dpooled[:, None, :] / 2.0, 2, axis=1)
    dattn = dmixed @ cache["v"].transpose(0, 2, 1)
    dv = cache["attn"].transpose(0, 2, 1) @ dmixed
    attn = cache["attn"]
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(model.hidden_dim)
    dq = dscores @ cache["k"]
    dk = dscores.transpose(0, 2, 1) @ cache["q"]
    grads["q_w"] = np.einsum("bti,btj->ij", tokens, dq)
    grads["k_w"] = np.einsum("bti,btj->ij", tokens, dk)
    grads["v_w"] = np.einsum("bti,btj->ij", tokens, dv)
    dtokens = dq @ p["q_w"].T + dk @ p["k_w"].T + dv @ p["v_w"].T
    d1 = model.token_split
    grads["tok1_w"] = x[:, :d1].T @ dtokens[:, 0, :]
    grads["tok1_b"] = dtokens[:, 0, :].sum(axis=0)
    grads["tok2_w"] = x[:, d1:].T @ dtokens[:, 1, :]
    grads["tok2_b"] = dtokens[:, 1, :].sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Seq forward/backward (batched LSTM over frames)


def _seq_forward(model: GdpModel, steps: np.ndarray, mask: np.ndarray,
                 want_cache: bool = False):
    p = model.params
    steps = np.asarray(steps, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if steps.ndim == 2:
        steps = steps[None, :, :]
        mask = mask[None, :]
    if steps.shape[2] != model.input_dim:
        raise ContractError(f"expected input dim {model.input_dim}, got {steps.shape[2]}")
    batch, t_len, _ = steps.shape
    hid = model.hidden_dim
    # Steps past the last valid step of every frame never reach the loss.
    t_eff = int(np.max(np.where(mask.any(axis=0))[0])) + 1 if mask.any() else 0
    h = np.zeros((batch, hid))
    c = np.zeros((batch, hid))
    hs = np.zeros((batch, t_len, hid))
    cache_steps = []
    for t in range(t_eff):
        z = steps[:, t] @ p["lstm_wx"] + h @ p["lstm_wh"] + p["lstm_b"]
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid:2 * hid])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        o = _sigmoid(z[:, 3 * hid:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        if want_cache:
            cache_steps.append(dict(x=steps[:, t], h_prev=h, c_prev=c, i=i, f=f,
                                    g=g, o=o, c=c_new, tanh_c=tanh_c))
        h, c = h_new, c_new
        hs[:, t] = h
    emb_pre = hs @ p["emb_w"] + p["emb_b"]
    emb = np.maximum(emb_pre, 0.0)
    preds = (emb @ p["out_w"] + p["out_b"])[..., 0] * mask
    if not want_cache:
        return preds
    cache = dict(steps=steps, mask=mask, t_eff=t_eff, hs=hs,
                 emb_pre=emb_pre, emb=emb, per_step=cache_steps)
    return preds, cache


def _seq_backward(model: GdpModel, cache: dict, dpreds: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    mask = cache["mask"]
    t_eff = cache["t_eff"]
    dpreds = dpreds * mask
    grads = {name: np.zeros_like(p[name]) for name in _SEQ_PARAM_ORDER}
    emb, emb_pre, hs = cache["emb"], cache["emb_pre"], cache["hs"]
    grads["out_w"] = np.einsum("bte,bt->e", emb, dpreds)[:, None]
    grads["out_b"] = np.array([dpreds.sum()])
    demb = dpreds[..., None] * p["out_w"][:, 0]
    demb_pre = demb * (emb_pre > 0)
    grads["emb_w"] = np.einsum("bth,bte->he", hs, demb_pre)
    grads["emb_b"] = demb_pre.sum(axis=(0, 1))
    dh_head = demb_pre @ p["emb_w"].T                      # (B, T, H)

    hid = model.hidden_dim
    batch = mask.shape[0]
    dh_next = np.zeros((batch, hid))
    dc_next = np.zeros((batch, hid))
    for t in range(t_eff - 1, -1, -1):
        s = cache["per_step"][t]
        dh = dh_head[:, t] + dh_next
        do = dh * s["tanh_c"]
        dc = dc_next + dh * s["o"] * (1.0 - s["tanh_c"] ** 2)
        di = dc * s["g"]
        dg = dc * s["i"]
        df = dc * s["c_prev"]
        dz = np.concatenate([
            di * s["i"] * (1.0 - s["i"]),
            df * s["f"] * (1.0 - s["f"]),
            dg * (1.0 - s["g"] ** 2),
            do * s["o"] * (1.0 - s["o"]),
        ], axis=1)
        grads["lstm_wx"] += s["x"].T @ dz
        grads["lstm_wh"] += s["h_prev"].T @ dz
        grads["lstm_b"] += dz.sum(axis=0)
        dh_next = dz @ p["lstm_wh"].T
        dc_next = dc * s["f"]
    return grads


# ---------------------------------------------------------------------------
# Public forward / loss / training


def forward(model: GdpModel, batch) -> np.ndarray:
    """Predictions: (B,) per row for NS; (B, T) per step, zeroed on padding, for Seq."""
    if model.ordering == "NS":
        return _ns_forward(model, batch)
    steps, mask = _frames_to_arrays(batch)
    return _seq_forward(model, steps, mask)


def _frames_to_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple):
        return np.asarray(batch[0], dtype=float), np.asarray(batch[1], dtype=bool)
    if isinstance(batch, SequenceFrame):
        batch = [batch]
    steps = np.stack([f.steps for f in batch])
    mask = np.stack([f.valid_mask for f in batch])
    return steps, mask


def _loss_and_grads_ns(model, x, targets):
    preds, cache = _ns_forward(model, x, want_cache=True)
    diff = preds - targets
    unit_sq = diff ** 2                       # per-row squared error
    loss = float(np.mean(unit_sq))
    grads = _ns_backward(model, cache, 2.0 * diff / diff.size)
    return loss, grads, unit_sq, np.ones(diff.size)


def _loss_and_grads_seq(model, steps, mask, targets):
    steps = np.asarray(steps, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=float)
    if steps.ndim == 2:
        steps, mask, targets = steps[None], mask[None], targets[None]
    preds, cache = _seq_forward(model, steps, mask, want_cache=True)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ContractError("batch of frames has no valid steps")
    diff = (preds - targets * mask)
    unit_sq = (diff ** 2).sum(axis=1)         # per-frame squared error
    loss = float(unit_sq.sum() / n_valid)
    grads = _seq_backward(model, cache, 2.0 * diff * mask / n_valid)
    return loss, grads, unit_sq, mask.sum(axis=1).astype(float)


def masked_mse_loss(model: GdpModel, batch, targets) -> float:
    """Mean squared error over rows (NS) or valid steps (Seq)."""
    if model.ordering == "NS":
        preds = _ns_forward(model, np.asarray(batch, dtype=float))
        return float(np.mean((preds - np.asarray(targets, dtype=float)) ** 2))
    steps, mask = _frames_to_arrays(batch)
    preds = _seq_forward(model, steps, mask)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[None, :]
    diff = preds - targets * mask
    return float((diff ** 2).sum() / mask.sum())


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
        self.t += 1
        correct1 = 1.0 - cfg.beta1 ** self.t
        correct2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            g = g * scale
            self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train(model: GdpModel, data, targets=None, config: TrainConfig | None = None) -> list[float]:
    """Fit the masked MSE objective in place; returns per-epoch mean loss.

    NS: data is an (n, d) row matrix, targets an (n,) vector.
    Seq: data is a list of SequenceFrame (targets embedded in the frames).
    """
    config = config or TrainConfig()
    config.validate()
    if model.ordering == "NS":
        x = np.asarray(data, dtype=float)
        y = np.asarray(targets, dtype=float)
        if x.shape[0] < 1:
            raise ContractError("training needs at least one example")
        n = x.shape[0]
    else:
        frames: list[SequenceFrame] = list(data)
        if not frames:
            raise ContractError("training needs at least one frame")
        steps_all = np.stack([f.steps for f in frames])
        mask_all = np.stack([f.valid_mask for f in frames])
        targets_all = np.stack([f.targets for f in frames])
        n = len(frames)

    optimizer = _Adam(model.params, config)
    history: list[float] = []
    # Per-example squared errors land in slots indexed by original position,
    # so the epoch mean sums in a fixed order regardless of the shuffle
    # (keeps zero-learning-rate histories bitwise constant).
    slot_sq = np.zeros(n)
    slot_count = np.zeros(n)
    for epoch in range(config.epochs):
        rng = np.random.default_rng(_stable_seed(config.seed, "epoch-shuffle", epoch))
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if model.ordering == "NS":
                loss, grads, unit_sq, unit_count = _loss_and_grads_ns(model, x[idx], y[idx])
            else:
                loss, grads, unit_sq, unit_count = _loss_and_grads_seq(
                    model, steps_all[idx], mask_all[idx], targets_all[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            slot_sq[idx] = unit_sq
            slot_count[idx] = unit_count
            optimizer.step(model.params, grads)
        history.append(float(slot_sq.sum() / slot_count.sum()))
    return history


def _stable_seed(seed: int, *parts) -> int:
    text = "/".join([str(seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


# ---------------------------------------------------------------------------
# Embedding extraction


def extract_embedding(model: GdpModel, data) -> np.ndarray:
    """Embedding vector(s) of length embed_dim.

    NS: data is one encoded row or an (n, d) matrix. Seq: data is a
    SequenceFrame (or (steps, mask) tuple); the embedding is taken at the
    last valid step.
    """
    p = model.params
    if model.ordering == "NS":
        x = np.asarray(data, dtype=float)
        single = x.ndim == 1
        _, cache = _ns_forward(model, x, want_cache=True)
        return cache["emb"][0] if single else cache["emb"]
    steps, mask = _frames_to_arrays(data)
    single = steps.ndim == 2
    if single:
        steps = steps[None, :, :]
        mask = mask[None, :]
    if not mask.any(axis=1).all():
        raise ContractError("cannot embed a frame with zero valid steps")
    _, cache = _seq_forward(model, steps, mask, want_cache=True)
    last = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
    emb = cache["emb"][np.arange(mask.shape[0]), last]
    return emb[0] if (single or isinstance(data, SequenceFrame)) else emb


def step_embeddings(model: GdpModel, frames: list[SequenceFrame]) -> np.ndarray:
    """(B, T, E) per-step embeddings for mapping frame steps back to rows."""
    if model.ordering != "Seq":
        raise ContractError("step embeddings are defined for Seq models only")
    steps, mask = _frames_to_arrays(frames)
    _, cache = _seq_forward(model, steps, mask, want_cache=True)
    return cache["emb"]


# ---------------------------------------------------------------------------
# Gradient verification


class LinearRegressor:
    """Plain two-layer linear chain used to verify the gradient machinery."""

    def __init__(self, input_dim: int, hidden_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": _uniform(rng, (input_dim, hidden_dim), input_dim),
            "b1": np.zeros(hidden_dim),
            "w2": _uniform(rng, (hidden_dim, 1), hidden_dim),
            "b2": np.zeros(1),
        }

    def loss_and_grads(self, x, targets):
        p = self.params
        x = np.asarray(x, dtype=float)
        targets = np.asarray(targets, dtype=float)
        hidden = x @ p["w1"] + p["b1"]
        preds = (hidden @ p["w2"] + p["b2"])[:, 0]
        diff = preds - targets
        loss = float(np.mean(diff ** 2))
        dpred = 2.0 * diff / diff.size
        grads = {
            "w2": hidden.T @ dpred[:, None],
            "b2": np.array([dpred.sum()]),
        }
        dhidden = dpred[:, None] @ p["w2"].T
        grads["w1"] = x.T @ dhidden
        grads["b1"] = dhidden.sum(axis=0)
        return loss, grads

    def loss(self, x, targets):
        return self.loss_and_grads(x, targets)[0]


def _model_loss_and_grads(model, batch, targets):
    if isinstance(model, LinearRegressor):
        return model.loss_and_grads(batch, targets)
    if model.ordering == "NS":
        loss, grads, _, _ = _loss_and_grads_ns(model, np.asarray(batch, dtype=float),
                                               np.asarray(targets, dtype=float))
    else:
        steps, mask = _frames_to_arrays(batch)
        loss, grads, _, _ = _loss_and_grads_seq(model, steps, mask, targets)
    return loss, grads


def _model_loss(model, batch, targets):
    if isinstance(model, LinearRegressor):
        return model.loss(batch, targets)
    return masked_mse_loss(model, batch, targets)


def grad_check(model, batch, targets, eps: float = 1e-5) -> float:
    """Max over parameter tensors of the relative gap between analytic
    gradients and central finite differences (f(p+eps) - f(p-eps)) / 2 eps."""
    _, analytic = _model_loss_and_grads(model, batch, targets)
    numeric: dict[str, np.ndarray] = {}
    for name in analytic:
        param = model.params[name]
        num = np.zeros_like(param)
        flat = param.reshape(-1)
        num_flat = num.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + eps
            up = _model_loss(model, batch, targets)
            flat[j] = original - eps
            down = _model_loss(model, batch, targets)
            flat[j] = original
            num_flat[j] = (up - down) / (2.0 * eps)
        numeric[name] = num
    # Per-tensor relative error, floored at a fraction of the model-wide
    # gradient scale so near-zero tensors compare against noise sensibly.
    global_scale = max(max(float(np.abs(g).max(initial=0.0)) for g in analytic.values()),
                       max(float(np.abs(g).max(initial=0.0)) for g in numeric.values()))
    if global_scale == 0.0:
        return 0.0
    worst = 0.0
    for name in analytic:
        scale = max(float(np.abs(analytic[name]).max(initial=0.0)),
                    float(np.abs(numeric[name]).max(initial=0.0)),
                    1e-6 * global_scale)
        worst = max(worst, float(np.abs(analytic[name] - numeric[name]).max()) / scale)
    return worst


# ---------------------------------------------------------------------------
# Persistence: versioned self-describing text with a content hash


def dump_model_text(model: GdpModel) -> str:
    lines = [MODEL_FORMAT,
             f"ordering {model.ordering}",
             f"encoder {model.encoder_kind}",
             f"input_dim {model.input_dim}",
             f"hidden_dim {model.hidden_dim}",
             f"embed_dim {model.embed_dim}",
             f"seed {model.seed}",
             f"params {len(model.param_order)}"]
    for name in model.param_order:
        arr = model.params[name]
        shape = arr.shape if arr.ndim == 2 else (1, arr.shape[0])
        lines.append(f"param {name} {shape[0]} {shape[1]}")
        mat = arr.reshape(shape)
        for row in mat:
            lines.append(" ".join(repr(float(v)) for v in row))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body + f"hash {digest}\n"


def save_model(model: GdpModel, path: str | Path) -> None:
    Path(path).write_text(dump_model_text(model), encoding="utf-8")


def load_model(path: str | Path) -> GdpModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != MODEL_FORMAT:
        raise DataError(f"{path}: unrecognized model format")
    if not lines[-1].startswith("hash "):
        raise DataError(f"{path}: missing content hash")
    body = "\n".join(lines[:-1]) + "\n"
    expected = lines[-1].split()[1]
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if actual != expected:
        raise DataError(f"{path}: content hash mismatch; file corrupted or edited")

    header: dict[str, str] = {}
    idx = 1
    while idx < len(lines) and not lines[idx].startswith("param "):
        key, value = lines[idx].split(" ", 1)
        header[key] = value
        idx += 1
    try:
        ordering = header["ordering"]
        encoder_kind = header["encoder"]
        input_dim = int(header["input_dim"])
        hidden_dim = int(header["hidden_dim"])
        embed_dim = int(header["embed_dim"])
        seed = int(header["seed"])
    except KeyError as exc:
        raise DataError(f"{path}: missing header field {exc}") from exc

    params: dict[str, np.ndarray] = {}
    while idx < len(lines) and lines[idx].startswith("param "):
        _, name, rows_s, cols_s = lines[idx].split()
        rows, cols = int(rows_s), int(cols_s)
        mat = np.array([[float(v) for v in lines[idx + 1 + r].split()] for r in range(rows)])
        if mat.shape != (rows, cols):
            raise DataError(f"{path}: shape mismatch in param {name}")
        params[name] = mat[0] if rows == 1 and name.endswith("_b") else mat
        idx += 1 + rows
    model = GdpModel(ordering, encoder_kind, input_dim, hidden_dim, embed_dim, seed, params)
    expected_names = set(model.param_order)
    if set(params) != expected_names:
        raise DataError(f"{path}: parameter set does not match {ordering} architecture")
    return model
