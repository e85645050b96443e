"""Sequence-to-sequence imputation model with hand-written gradients.

A bidirectional LSTM encoder feeds a multi-head scaled-dot-product
attention block; the decoder LSTM consumes the attention context
concatenated with its own previous state (which also remains the
recurrent state) and a linear head emits one value per time step. The
loss is the mean absolute error over the whole sequence. Forward,
backward and Adam are plain numpy; gradients are verified against finite
differences in the test suite.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .params import LayerSpec, ModelParams, canonical_bytes

__all__ = [
    "Mas2sConfig",
    "SeqBatch",
    "AdamState",
    "init_params",
    "param_specs",
    "param_count",
    "to_model_params",
    "from_model_params",
    "lstm_cell",
    "bilstm_encode",
    "multi_head_attention",
    "decoder_step",
    "forward",
    "mae_loss",
    "backward",
    "adam_update",
    "train_local",
    "impute",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class Mas2sConfig:
    input_features: int = 7  # six wind features plus the mask channel
    hidden_size: int = 128
    heads: int = 2
    key_dim: int = 32
    sequence_length: int = 96

    def __post_init__(self):
        for name in ("input_features", "hidden_size", "heads", "key_dim", "sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class SeqBatch:
    """Model inputs (batch, T, F) with a 0/1 mask channel last; targets (batch, T)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 3 or self.targets.ndim != 2:
            raise ValueError("inputs must be (batch, T, F), targets (batch, T)")
        if self.inputs.shape[:2] != self.targets.shape:
            raise ValueError("inputs and targets disagree on (batch, T)")
        if not (np.isfinite(self.inputs).all() and np.isfinite(self.targets).all()):
            raise ValueError("non-finite data")
        mask = self.inputs[:, :, -1]
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("mask channel must be 0/1")

    def __len__(self) -> int:
        return self.inputs.shape[0]


_GATES = ("f", "i", "o", "c")


def _layer_order(cfg: Mas2sConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, f = cfg.hidden_size, cfg.input_features
    dk = cfg.key_dim
    order: list[tuple[str, tuple[int, ...]]] = []
    for side in ("enc_fwd", "enc_bwd"):
        for g in _GATES:
            order.append((f"{side}.W_{g}", (h, h + f)))
        for g in _GATES:
            order.append((f"{side}.b_{g}", (h,)))
    for m in range(cfg.heads):
        order.append((f"attn.h{m}.W_q", (dk, h)))
        order.append((f"attn.h{m}.W_k", (dk, 2 * h)))
        order.append((f"attn.h{m}.W_v", (dk, 2 * h)))
    order.append(("attn.W_o", (h, cfg.heads * dk)))
    for g in _GATES:
        order.append((f"dec.W_{g}", (h, 3 * h)))
    for g in _GATES:
        order.append((f"dec.b_{g}", (h,)))
    order.append(("out.W_d", (1, h)))
    order.append(("out.b_d", (1,)))
    return order


def param_specs(cfg: Mas2sConfig) -> list[LayerSpec]:
    return [LayerSpec(name, shape) for name, shape in _layer_order(cfg)]


def param_count(cfg: Mas2sConfig) -> int:
    """Closed form: two encoder LSTMs + head projections + decoder LSTM + output."""
    h, f, nh, dk = cfg.hidden_size, cfg.input_features, cfg.heads, cfg.key_dim
    enc = 2 * (4 * h * (h + f) + 4 * h)
    attn = nh * (dk * h + 2 * dk * 2 * h) + h * nh * dk
    dec = 4 * h * 3 * h + 4 * h
    out = h + 1
    return enc + attn + dec + out


def init_params(cfg: Mas2sConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    for name, shape in _layer_order(cfg):
        if name.split(".")[-1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[-1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def to_model_params(params: dict[str, np.ndarray], cfg: Mas2sConfig) -> ModelParams:
    return ModelParams((LayerSpec(name, shape), params[name]) for name, shape in _layer_order(cfg))


def from_model_params(mp: ModelParams) -> dict[str, np.ndarray]:
    return {spec.name: np.array(arr) for spec, arr in mp.layers}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gates(params: dict, prefix: str):
    return (
        params[f"{prefix}.W_f"],
        params[f"{prefix}.W_i"],
        params[f"{prefix}.W_o"],
        params[f"{prefix}.W_c"],
        params[f"{prefix}.b_f"],
        params[f"{prefix}.b_i"],
        params[f"{prefix}.b_o"],
        params[f"{prefix}.b_c"],
    )


def _cell_forward(z, c_prev, weights):
    w_f, w_i, w_o, w_c, b_f, b_i, b_o, b_c = weights
    f = _sigmoid(z @ w_f.T + b_f)
    i = _sigmoid(z @ w_i.T + b_i)
    o = _sigmoid(z @ w_o.T + b_o)
    g = np.tanh(z @ w_c.T + b_c)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (z, f, i, o, g, c_prev, tc)


def _cell_backward(dh, dc_next, cache, weights, grads, prefix):
    w_f, w_i, w_o, w_c = weights[:4]
    z, f, i, o, g, c_prev, tc = cache
    do = dh * tc
    dc = dh * o * (1.0 - tc * tc) + dc_next
    da_f = dc * c_prev * f * (1.0 - f)
    da_i = dc * g * i * (1.0 - i)
    da_o = do * o * (1.0 - o)
    da_g = dc * i * (1.0 - g * g)
    grads[f"{prefix}.W_f"] += da_f.T @ z
    grads[f"{prefix}.W_i"] += da_i.T @ z
    grads[f"{prefix}.W_o"] += da_o.T @ z
    grads[f"{prefix}.W_c"] += da_g.T @ z
    grads[f"{prefix}.b_f"] += da_f.sum(axis=0)
    grads[f"{prefix}.b_i"] += da_i.sum(axis=0)
    grads[f"{prefix}.b_o"] += da_o.sum(axis=0)
    grads[f"{prefix}.b_c"] += da_g.sum(axis=0)
    dz = da_f @ w_f + da_i @ w_i + da_o @ w_o + da_g @ w_c
    return dz, dc * f


def lstm_cell(x_t, h_prev, c_prev, weights: dict[str, np.ndarray]):
    """One gate update; `weights` holds W_f/W_i/W_o/W_c and b_f/b_i/b_o/b_c."""
    z = np.concatenate([h_prev, x_t], axis=-1)
    packed = (
        weights["W_f"], weights["W_i"], weights["W_o"], weights["W_c"],
        weights["b_f"], weights["b_i"], weights["b_o"], weights["b_c"],
    )
    h, c, _ = _cell_forward(np.atleast_2d(z), np.atleast_2d(c_prev), packed)
    if np.ndim(x_t) == 1:
        return h[0], c[0]
    return h, c


def bilstm_encode(x: np.ndarray, params: dict, cfg: Mas2sConfig) -> np.ndarray:
    """Hidden sequence (batch, T, 2*hidden): forward then backward states."""
    h_seq, _, _ = _encode(np.atleast_3d(x) if x.ndim == 2 else x, params, cfg)
    return h_seq


def _encode(x: np.ndarray, params: dict, cfg: Mas2sConfig):
    batch, t_len, _ = x.shape
    h = cfg.hidden_size
    fwd_w = _gates(params, "enc_fwd")
    bwd_w = _gates(params, "enc_bwd")
    h_seq = np.zeros((batch, t_len, 2 * h))
    fwd_cache, bwd_cache = [None] * t_len, [None] * t_len

    state = np.zeros((batch, h))
    cell = np.zeros((batch, h))
    for t in range(t_len):
        z = np.concatenate([state, x[:, t, :]], axis=1)
        state, cell, cache = _cell_forward(z, cell, fwd_w)
        fwd_cache[t] = cache
        h_seq[:, t, :h] = state

    state = np.zeros((batch, h))
    cell = np.zeros((batch, h))
    for t in range(t_len - 1, -1, -1):
        z = np.concatenate([state, x[:, t, :]], axis=1)
        state, cell, cache = _cell_forward(z, cell, bwd_w)
        bwd_cache[t] = cache
        h_seq[:, t, h:] = state

    return h_seq, fwd_cache, bwd_cache


def multi_head_attention(s_prev: np.ndarray, h_seq: np.ndarray, params: dict, cfg: Mas2sConfig):
    """Attention context for one decoder step; returns (context, weights per head)."""
    squeeze = s_prev.ndim == 1
    s = np.atleast_2d(s_prev)
    hs = h_seq[None, ...] if h_seq.ndim == 2 else h_seq
    ctx, alphas = [], []
    root = math.sqrt(cfg.key_dim)
    for m in range(cfg.heads):
        q = s @ params[f"attn.h{m}.W_q"].T
        k = hs @ params[f"attn.h{m}.W_k"].T
        v = hs @ params[f"attn.h{m}.W_v"].T
        scores = np.einsum("bd,btd->bt", q, k) / root
        scores -= scores.max(axis=1, keepdims=True)
        alpha = np.exp(scores)
        alpha /= alpha.sum(axis=1, keepdims=True)
        ctx.append(np.einsum("bt,btd->bd", alpha, v))
        alphas.append(alpha)
    out = np.concatenate(ctx, axis=1) @ params["attn.W_o"].T
    if squeeze:
        return out[0], [a[0] for a in alphas]
    return out, alphas


def decoder_step(context: np.ndarray, s_prev: np.ndarray, cell_prev: np.ndarray, params: dict):
    """One decoder update: LSTM over [context || s_prev], then the linear head."""
    x_dec = np.concatenate([np.atleast_2d(context), np.atleast_2d(s_prev)], axis=1)
    z = np.concatenate([np.atleast_2d(s_prev), x_dec], axis=1)
    s_new, cell_new, _ = _cell_forward(z, np.atleast_2d(cell_prev), _gates(params, "dec"))
    y = s_new @ params["out.W_d"].T + params["out.b_d"]
    if np.ndim(s_prev) == 1:
        return s_new[0], float(y[0, 0]), cell_new[0]
    return s_new, y[:, 0], cell_new


def forward(x: np.ndarray, params: dict, cfg: Mas2sConfig):
    """Full pipeline over a (batch, T, F) input; returns (Y_hat, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.input_features:
        raise ValueError(f"expected (batch, T, {cfg.input_features}) input, got {x.shape}")
    batch, t_len, _ = x.shape
    h, nh, dk = cfg.hidden_size, cfg.heads, cfg.key_dim
    root = math.sqrt(dk)

    h_seq, fwd_cache, bwd_cache = _encode(x, params, cfg)
    keys = [h_seq @ params[f"attn.h{m}.W_k"].T for m in range(nh)]
    values = [h_seq @ params[f"attn.h{m}.W_v"].T for m in range(nh)]

    dec_w = _gates(params, "dec")
    s = np.zeros((batch, h))
    cell = np.zeros((batch, h))
    y_hat = np.zeros((batch, t_len))
    steps = []
    for t in range(t_len):
        qs, alphas, ctx = [], [], []
        for m in range(nh):
            q = s @ params[f"attn.h{m}.W_q"].T
            scores = np.einsum("bd,btd->bt", q, keys[m]) / root
            scores -= scores.max(axis=1, keepdims=True)
            alpha = np.exp(scores)
            alpha /= alpha.sum(axis=1, keepdims=True)
            ctx.append(np.einsum("bt,btd->bd", alpha, values[m]))
            qs.append(q)
            alphas.append(alpha)
        cat = np.concatenate(ctx, axis=1)
        c_att = cat @ params["attn.W_o"].T
        s_prev = s
        x_dec = np.concatenate([c_att, s_prev], axis=1)
        z = np.concatenate([s_prev, x_dec], axis=1)
        s, cell, cell_cache = _cell_forward(z, cell, dec_w)
        y_hat[:, t] = (s @ params["out.W_d"].T + params["out.b_d"])[:, 0]
        steps.append({"q": qs, "alpha": alphas, "cat": cat, "s_prev": s_prev, "s": s, "cache": cell_cache})

    cache = {
        "x": x, "h_seq": h_seq, "fwd_cache": fwd_cache, "bwd_cache": bwd_cache,
        "keys": keys, "values": values, "steps": steps, "y_hat": y_hat,
        "params": params, "cfg": cfg,
    }
    return y_hat, cache


def mae_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean absolute error over every time step, averaged over the batch."""
    y_hat = np.atleast_2d(y_hat)
    y = np.atleast_2d(y)
    if y_hat.shape != y.shape:
        raise ValueError("shape mismatch")
    return float(np.abs(y - y_hat).mean())


def backward(cache: dict, y: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the sequence MAE through the model.

    The subgradient of |.| at zero is taken as 0.
    """
    params, cfg = cache["params"], cache["cfg"]
    x, h_seq = cache["x"], cache["h_seq"]
    batch, t_len, _ = x.shape
    h, nh, dk = cfg.hidden_size, cfg.heads, cfg.key_dim
    root = math.sqrt(dk)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))

    grads = {name: np.zeros(shape) for name, shape in _layer_order(cfg)}
    dy_all = np.sign(cache["y_hat"] - y) / (batch * t_len)

    dec_w = _gates(params, "dec")
    w_d = params["out.W_d"]
    dkey = [np.zeros((batch, t_len, dk)) for _ in range(nh)]
    dval = [np.zeros((batch, t_len, dk)) for _ in range(nh)]
    ds_carry = np.zeros((batch, h))
    dcell_carry = np.zeros((batch, h))

    for t in range(t_len - 1, -1, -1):
        step = cache["steps"][t]
        dy = dy_all[:, t : t + 1]
        grads["out.W_d"] += dy.T @ step["s"]
        grads["out.b_d"] += dy.sum(axis=0)
        ds = dy @ w_d + ds_carry
        dz, dcell_carry = _cell_backward(ds, dcell_carry, step["cache"], dec_w, grads, "dec")
        ds_prev = dz[:, :h] + dz[:, 2 * h :]
        dc_att = dz[:, h : 2 * h]

        grads["attn.W_o"] += dc_att.T @ step["cat"]
        dcat = dc_att @ params["attn.W_o"]
        for m in range(nh):
            dctx = dcat[:, m * dk : (m + 1) * dk]
            alpha = step["alpha"][m]
            dalpha = np.einsum("bd,btd->bt", dctx, cache["values"][m])
            dval[m] += alpha[:, :, None] * dctx[:, None, :]
            dscores = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
            dq = np.einsum("bt,btd->bd", dscores, cache["keys"][m]) / root
            dkey[m] += dscores[:, :, None] * step["q"][m][:, None, :] / root
            grads[f"attn.h{m}.W_q"] += dq.T @ step["s_prev"]
            ds_prev += dq @ params[f"attn.h{m}.W_q"]
        ds_carry = ds_prev

    dh_seq = np.zeros((batch, t_len, 2 * h))
    for m in range(nh):
        grads[f"attn.h{m}.W_k"] += np.einsum("btd,bte->de", dkey[m], h_seq)
        grads[f"attn.h{m}.W_v"] += np.einsum("btd,bte->de", dval[m], h_seq)
        dh_seq += dkey[m] @ params[f"attn.h{m}.W_k"]
        dh_seq += dval[m] @ params[f"attn.h{m}.W_v"]

    fwd_w = _gates(params, "enc_fwd")
    dh_carry = np.zeros((batch, h))
    dcell = np.zeros((batch, h))
    for t in range(t_len - 1, -1, -1):
        dh = dh_seq[:, t, :h] + dh_carry
        dz, dcell = _cell_backward(dh, dcell, cache["fwd_cache"][t], fwd_w, grads, "enc_fwd")
        dh_carry = dz[:, :h]

    bwd_w = _gates(params, "enc_bwd")
    dh_carry = np.zeros((batch, h))
    dcell = np.zeros((batch, h))
    for t in range(t_len):  # reverse of the backward direction's processing order
        dh = dh_seq[:, t, h:] + dh_carry
        dz, dcell = _cell_backward(dh, dcell, cache["bwd_cache"][t], bwd_w, grads, "enc_bwd")
        dh_carry = dz[:, :h]

    return grads


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; returns fresh params and state, inputs untouched."""
    new = AdamState(
        learning_rate=state.learning_rate, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps, step=state.step + 1,
    )
    t = new.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new.m[name] = m
        new.v[name] = v
    return out, new


def train_local(
    data: SeqBatch,
    params: dict[str, np.ndarray],
    epochs: int,
    state: AdamState,
    cfg: Mas2sConfig,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> tuple[dict[str, np.ndarray], AdamState, list[float]]:
    """Minibatch Adam for `epochs` passes; returns one mean loss per epoch."""
    losses = []
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            y_hat, fw_cache = forward(data.inputs[idx], params, cfg)
            epoch_losses.append(mae_loss(y_hat, data.targets[idx]))
            grads = backward(fw_cache, data.targets[idx])
            params, state = adam_update(params, grads, state)
        losses.append(float(np.mean(epoch_losses)))
    return params, state, losses


def impute(
    x: np.ndarray,
    params: dict[str, np.ndarray],
    cfg: Mas2sConfig,
    overwrite_observed: bool = True,
) -> np.ndarray:
    """Complete series: model output, with observed positions copied back in."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None, ...]
    y_hat, _ = forward(x, params, cfg)
    if overwrite_observed:
        missing = x[:, :, -1]
        y_hat = np.where(missing == 1.0, y_hat, x[:, :, 0])
    return y_hat[0] if single else y_hat


def save_checkpoint(path: str | Path, params: ModelParams, cfg: Mas2sConfig) -> None:
    """JSON config header (length-prefixed) followed by the canonical bytes."""
    header = json.dumps(
        {"config": asdict(cfg), "layers": [{"name": s.name, "shape": list(s.shape)} for s in params.specs]},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        fh.write(canonical_bytes(params))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Mas2sConfig]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack(">I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    cfg = Mas2sConfig(**header["config"])
    layers = []
    pos = 0
    for entry in header["layers"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        name_bytes = name.encode("utf-8")
        if body[pos : pos + len(name_bytes)] != name_bytes:
            raise ValueError(f"checkpoint body out of sync at layer {name!r}")
        pos += len(name_bytes)
        (count,) = struct.unpack(">I", body[pos : pos + 4])
        pos += 4
        vals = np.frombuffer(body[pos : pos + 4 * count], dtype="<f4").astype(np.float64)
        pos += 4 * count
        layers.append((LayerSpec(name, shape), vals.reshape(shape)))
    return ModelParams(layers), cfg
