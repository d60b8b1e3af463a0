"""Desk-scale conditional sequence model.

Shared token embeddings, a single-layer gated recurrent (update/reset) cell
for both encoder and decoder, and a softmax output head.  Gradients are
computed analytically with backprop through time; the central correctness
check of the package compares them against central finite differences for
every loss in the family.

Checkpoint layout (``save_checkpoint``): a numpy ``.npz`` container with one
entry per parameter tensor (names and shapes as in ``init_params``) plus a
``__meta__`` entry holding a JSON string with ``format_version``, the model
dims, and a config echo.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import BOS_ID, EOS_ID, PAD_ID

CHECKPOINT_VERSION = 1

GATE_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int
    hidden_dim: int

    def __post_init__(self):
        if min(self.vocab_size, self.emb_dim, self.hidden_dim) < 1:
            raise ModelError("model dimensions must be positive")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, E, H = cfg.vocab_size, cfg.emb_dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"emb": (V, E)}
    for pfx in ("enc", "dec"):
        for g in GATE_NAMES:
            shapes[f"{pfx}_{g}"] = (E, H) if g.startswith("W") else (H, H) if g.startswith("U") else (H,)
    shapes["out_W"] = (H, V)
    shapes["out_b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-0.08, 0.08) init for every tensor, seeded."""
    return {
        name: rng.uniform(-0.08, 0.08, size=shape)
        for name, shape in param_shapes(cfg).items()
    }


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru_forward(params, pfx, xs, h0):
    """xs: (B, T, E), h0: (B, H) -> hs: (B, T, H) plus caches."""
    B, T, _ = xs.shape
    H = h0.shape[1]
    hs = np.empty((B, T, H))
    caches = []
    h = h0
    Wz, Uz, bz = params[f"{pfx}_Wz"], params[f"{pfx}_Uz"], params[f"{pfx}_bz"]
    Wr, Ur, br = params[f"{pfx}_Wr"], params[f"{pfx}_Ur"], params[f"{pfx}_br"]
    Wh, Uh, bh = params[f"{pfx}_Wh"], params[f"{pfx}_Uh"], params[f"{pfx}_bh"]
    for t in range(T):
        x = xs[:, t]
        z = _sigmoid(x @ Wz + h @ Uz + bz)
        r = _sigmoid(x @ Wr + h @ Ur + br)
        hh = np.tanh(x @ Wh + (r * h) @ Uh + bh)
        h_new = (1.0 - z) * h + z * hh
        caches.append((x, h, z, r, hh))
        hs[:, t] = h_new
        h = h_new
    return hs, caches


def _gru_backward(params, pfx, caches, d_hs, grads):
    """d_hs: (B, T, H) additive gradients on each output state.

    Accumulates parameter gradients into ``grads``; returns (dxs, dh0).
    """
    B, T, H = d_hs.shape
    E = caches[0][0].shape[1]
    Wz, Uz = params[f"{pfx}_Wz"], params[f"{pfx}_Uz"]
    Wr, Ur = params[f"{pfx}_Wr"], params[f"{pfx}_Ur"]
    Wh, Uh = params[f"{pfx}_Wh"], params[f"{pfx}_Uh"]
    dxs = np.zeros((B, T, E))
    dh = np.zeros((B, H))
    for t in reversed(range(T)):
        x, h, z, r, hh = caches[t]
        dh = dh + d_hs[:, t]
        dz = dh * (hh - h)
        dhh = dh * z
        dh_prev = dh * (1.0 - z)
        dhh_pre = dhh * (1.0 - hh * hh)
        grads[f"{pfx}_Wh"] += x.T @ dhh_pre
        grads[f"{pfx}_Uh"] += (r * h).T @ dhh_pre
        grads[f"{pfx}_bh"] += dhh_pre.sum(axis=0)
        drh = dhh_pre @ Uh.T
        dr = drh * h
        dh_prev = dh_prev + drh * r
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        grads[f"{pfx}_Wz"] += x.T @ dz_pre
        grads[f"{pfx}_Uz"] += h.T @ dz_pre
        grads[f"{pfx}_bz"] += dz_pre.sum(axis=0)
        grads[f"{pfx}_Wr"] += x.T @ dr_pre
        grads[f"{pfx}_Ur"] += h.T @ dr_pre
        grads[f"{pfx}_br"] += dr_pre.sum(axis=0)
        dh_prev = dh_prev + dz_pre @ Uz.T + dr_pre @ Ur.T
        dxs[:, t] = dhh_pre @ Wh.T + dz_pre @ Wz.T + dr_pre @ Wr.T
        dh = dh_prev
    return dxs, dh


def encode_source_batch(params, sources: np.ndarray):
    """sources: (B, S) id array -> (h0 (B, H), cache)."""
    if sources.ndim != 2 or sources.shape[1] == 0:
        raise ModelError("empty source")
    xs = params["emb"][sources]
    B = sources.shape[0]
    H = params["enc_Uz"].shape[0]
    hs, caches = _gru_forward(params, "enc", xs, np.zeros((B, H)))
    return hs[:, -1], (sources, caches)


def encode_source(params, source: Sequence[int]) -> np.ndarray:
    """Final encoder state for a single source sequence."""
    if len(source) == 0:
        raise ModelError("empty source")
    h0, _ = encode_source_batch(params, np.asarray([source], dtype=np.int64))
    return h0[0]


def decoder_logprobs_batch(params, h0: np.ndarray, cond: np.ndarray):
    """Teacher-forced log-prob rows for conditioning sequences.

    cond: (B, T) ids ending with eos.  Row t is the log-softmax of the output
    projection of the state after consuming bos + cond[:, :t].
    Returns (logp (B, T, V), cache).
    """
    B, T = cond.shape
    inputs = np.concatenate([np.full((B, 1), BOS_ID, dtype=np.int64), cond[:, :-1]], axis=1)
    xs = params["emb"][inputs]
    hs, caches = _gru_forward(params, "dec", xs, h0)
    logits = hs @ params["out_W"] + params["out_b"]
    logp = logits - logsumexp(logits, axis=2, keepdims=True)
    return logp, (inputs, hs, caches, logp)


def teacher_forced_logprobs(params, h0: np.ndarray, cond: Sequence[int]) -> np.ndarray:
    """Single-sequence provider backend: (T, V) log-prob rows."""
    if not cond or cond[-1] != EOS_ID:
        raise ModelError("conditioning sequence must end with eos")
    logp, _ = decoder_logprobs_batch(params, h0[None, :], np.asarray([cond], dtype=np.int64))
    return logp[0]


def loss_and_grads(
    params,
    sources: np.ndarray,
    passes: Sequence[tuple[np.ndarray, np.ndarray, float]],
):
    """Loss and analytic gradient for a group of same-shape examples.

    ``passes`` is a list of (cond (B, T), targets (B, T, V), gamma); the loss
    is the sum over passes of the cross-entropy of the teacher-forced rows
    against the target rows minus gamma times the row entropies.  Target rows
    may carry arbitrary nonnegative mass (loss weights folded in).  Returns
    (loss, grads, diagnostics) where diagnostics holds the summed row
    entropies of the first pass.
    """
    grads = zero_grads(params)
    h0, (src_ids, enc_caches) = encode_source_batch(params, sources)
    dh0_total = np.zeros_like(h0)
    loss = 0.0
    first_entropy = 0.0
    first_logp = None
    for idx, (cond, targets, gamma) in enumerate(passes):
        logp, (inputs, hs, caches, _) = decoder_logprobs_batch(params, h0, cond)
        p = np.exp(logp)
        ent = -np.sum(p * logp, axis=2)
        if idx == 0:
            first_entropy = float(ent.sum())
            first_logp = logp
        loss += -float(np.sum(targets * logp)) - gamma * float(ent.sum())
        mass = targets.sum(axis=2, keepdims=True)
        dlogits = mass * p - targets
        if gamma:
            dlogits = dlogits + gamma * p * (logp + ent[:, :, None])
        grads["out_W"] += np.einsum("bth,btv->hv", hs, dlogits)
        grads["out_b"] += dlogits.sum(axis=(0, 1))
        d_hs = dlogits @ params["out_W"].T
        dxs, dh0 = _gru_backward(params, "dec", caches, d_hs, grads)
        np.add.at(grads["emb"], inputs, dxs)
        dh0_total += dh0
    _, enc_dxs, _ = _backward_encoder(params, enc_caches, dh0_total, grads)
    np.add.at(grads["emb"], src_ids, enc_dxs)
    return loss, grads, {"entropy": first_entropy, "first_logp": first_logp}


def _backward_encoder(params, enc_caches, dh_last, grads):
    B, H = dh_last.shape
    T = len(enc_caches)
    d_hs = np.zeros((B, T, H))
    d_hs[:, -1] = dh_last
    dxs, dh0 = _gru_backward(params, "enc", enc_caches, d_hs, grads)
    return grads, dxs, dh0


def loss_value(params, sources: np.ndarray, passes) -> float:
    """Same objective as ``loss_and_grads`` without the backward pass; used
    by finite-difference checks."""
    h0, _ = encode_source_batch(params, sources)
    loss = 0.0
    for cond, targets, gamma in passes:
        logp, _ = decoder_logprobs_batch(params, h0, cond)
        loss += -float(np.sum(targets * logp))
        if gamma:
            p = np.exp(logp)
            loss -= gamma * float(-np.sum(p * logp))
    return loss


def make_provider(params, h0: np.ndarray):
    """Caching LogProbProvider bound to one encoded source."""
    cache: dict[tuple[int, ...], np.ndarray] = {}

    def provider(seq: tuple[int, ...]) -> np.ndarray:
        if seq not in cache:
            cache[seq] = teacher_forced_logprobs(params, h0, seq)
        return cache[seq]

    return provider


def beam_search(params, source: Sequence[int], beam_size: int, max_len: int) -> tuple[int, ...]:
    """Length-capped beam search over teacher-forced log-probs.

    Returns the content tokens (eos stripped) of the highest-scoring finished
    hypothesis; ties break toward shorter, then lexicographically smaller
    sequences.  Falls back to the best unfinished hypothesis at max_len.
    bos and pad are never emitted.
    """
    if beam_size < 1:
        raise ModelError("beam_size must be >= 1")
    h0 = encode_source(params, source)
    H = h0.shape[0]
    V = params["out_b"].shape[0]
    banned = [PAD_ID, BOS_ID]

    def step(h, token):
        x = params["emb"][token][None, :]
        hs, _ = _gru_forward(params, "dec", x[:, None, :], h[None, :])
        h_new = hs[0, -1]
        logits = h_new @ params["out_W"] + params["out_b"]
        logp = logits - logsumexp(logits)
        logp[banned] = -np.inf
        return h_new, logp

    # hypotheses: (score, prefix, hidden, finished)
    beams = [(0.0, (), h0, False)]
    finished: list[tuple[float, tuple[int, ...]]] = []
    token = BOS_ID
    for _ in range(max_len + 1):
        candidates = []
        for score, prefix, h, _ in beams:
            prev = prefix[-1] if prefix else BOS_ID
            h_new, logp = step(h, prev)
            for v in range(V):
                if not np.isfinite(logp[v]):
                    continue
                candidates.append((score + logp[v], prefix + (v,), h_new, v == EOS_ID))
        candidates.sort(key=lambda c: (-c[0], len(c[1]), c[1]))
        kept = []
        for c in candidates:
            if c[3]:
                finished.append((c[0], c[1]))
            else:
                kept.append(c)
            if len(kept) >= beam_size:
                break
        beams = kept
        if not beams:
            break
        if len(beams[0][1]) >= max_len:
            break
    if finished:
        best = min(finished, key=lambda c: (-c[0], len(c[1]), c[1]))
        return best[1][:-1]
    best = min(beams, key=lambda c: (-c[0], len(c[1]), c[1]))
    return best[1]


def greedy_decode(params, source: Sequence[int], max_len: int) -> tuple[int, ...]:
    return beam_search(params, source, beam_size=1, max_len=max_len)


def save_checkpoint(path, params, config_echo: dict) -> None:
    meta = dict(config_echo)
    meta["format_version"] = CHECKPOINT_VERSION
    arrays = dict(params)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError("unsupported checkpoint version")
    params = {k: data[k] for k in data.files if k != "__meta__"}
    return params, meta
