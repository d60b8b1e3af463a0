"""Training loop: loss compilation into decoder passes, Adam updates,
validation-based early stopping, and evaluation reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics, model, sampling, token_smooth
from .corpus import EOS_ID, Batch, Example, Vocabulary, make_batches

LOSS_KINDS = ("mle", "mle_ent", "tok", "seq", "tok_seq")
REPORT_COLUMNS = ("step", "loss", "mle_component", "smooth_component",
                  "mean_sample_distance", "mean_entropy")


class TrainingDiverged(RuntimeError):
    pass


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mle"
    tau_seq: float = 0.9
    tau_tok: float = 0.8
    alpha: float = 0.5
    alpha1: float = 0.5
    alpha2: float = 0.5
    beta: float = 0.1
    gamma: float = 0.0
    num_samples: int = 1
    lazy: bool = False
    reward: str = "hamming"
    subvocab: str = "refs"
    multi_ref: bool = False
    top_k: int | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise TrainingError(f"unknown loss kind: {self.kind}")
        for name in ("alpha", "alpha1", "alpha2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TrainingError(f"{name} must be in [0,1]")
        if self.tau_seq <= 0 or self.tau_tok <= 0:
            raise TrainingError("temperatures must be > 0")
        if self.gamma < 0 or self.beta < 0:
            raise TrainingError("gamma and beta must be >= 0")
        if self.num_samples < 1:
            raise TrainingError("num_samples must be >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    decay: float = 1.0          # per-epoch multiplicative decay
    clip: float = 5.0           # global-norm gradient clip
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or not 0 < self.decay <= 1.0:
            raise TrainingError("invalid optimizer config")


class Adam:
    def __init__(self, params, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = model.zero_grads(params)
        self.v = model.zero_grads(params)
        self.t = 0

    def step(self, params, grads, lr):
        cfg = self.cfg
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = cfg.clip / norm if cfg.clip and norm > cfg.clip else 1.0
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for k in params:
            g = grads[k] * scale
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + cfg.eps)


def _onehot_rows(cond: np.ndarray, V: int, weight) -> np.ndarray:
    B, T = cond.shape
    rows = np.zeros((B, T, V))
    b, t = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    rows[b, t, cond] = 1.0
    w = np.asarray(weight, dtype=float)
    return rows * (float(w) if w.ndim == 0 else w.reshape(-1, 1, 1))


def _example_rng(seed: int, epoch: int, batch_idx: int, ex_idx: int) -> np.random.Generator:
    # hierarchical stream split so per-example sampling is order-independent
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch_idx, ex_idx]))


def draw_samples(ex: Example, batch: Batch, cfg: LossConfig, vocab: Vocabulary,
                 rng, idf=None) -> list[sampling.WeightedSample]:
    """Samples over the content tokens of the target (eos re-appended later)."""
    content = ex.target[:-1]
    sub = sampling.resolve_subvocab(cfg.subvocab, ex, batch, vocab)
    if cfg.reward == "hamming":
        return sampling.uniform_samples(content, cfg.tau_seq, sub, rng, cfg.num_samples)
    reward_fn = metrics.RewardFn(cfg.reward, multi_ref=cfg.multi_ref, idf=idf)
    refs = [r[:-1] for r in ex.references]
    if not cfg.multi_ref and len(refs) > 1:
        refs = [refs[int(rng.integers(len(refs)))]]
    return sampling.importance_sample(
        content, refs, lambda y: reward_fn.score(y, refs),
        tau=cfg.tau_seq, proposal_tau=cfg.tau_seq, sub=sub, rng=rng, L=cfg.num_samples,
    )


def compile_passes(
    targets_seq: np.ndarray,
    sample_sets: Sequence[Sequence[sampling.WeightedSample]] | None,
    cfg: LossConfig,
    vocab: Vocabulary,
    emb: token_smooth.EmbeddingTable | None,
    tok_cache: dict | None,
) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Build the decoder passes (cond, target rows, gamma) for a group of
    same-length examples; sample_sets[b] are example b's weighted samples."""
    B, T = targets_seq.shape
    V = vocab.size

    def smooth_rows(seqs: np.ndarray) -> np.ndarray:
        params = token_smooth.TokenSmoothParams(
            tau=cfg.tau_tok, beta=cfg.beta, alpha=1.0, top_k=cfg.top_k)
        return np.stack([
            token_smooth.build_smoothed_targets(seq, params, emb, vocab.freq, tok_cache)
            for seq in seqs
        ])

    if cfg.kind == "mle":
        return [(targets_seq, _onehot_rows(targets_seq, V, 1.0), 0.0)]
    if cfg.kind == "mle_ent":
        return [(targets_seq, _onehot_rows(targets_seq, V, 1.0), cfg.gamma)]
    if cfg.kind == "tok":
        if emb is None:
            raise TrainingError("token smoothing requires embeddings")
        rows = cfg.alpha * smooth_rows(targets_seq) + (1 - cfg.alpha) * _onehot_rows(targets_seq, V, 1.0)
        return [(targets_seq, rows, 0.0)]

    # sequence-smoothed families
    L = cfg.num_samples
    sample_conds = []
    weights = []
    for l in range(L):
        cond = np.stack([
            np.concatenate([np.asarray(sample_sets[b][l].sequence), [EOS_ID]])
            for b in range(B)
        ])
        sample_conds.append(cond.astype(np.int64))
        weights.append(np.array([sample_sets[b][l].weight for b in range(B)]))

    if cfg.kind == "seq":
        a = cfg.alpha
        star_rows = _onehot_rows(targets_seq, V, 1.0 - a)
        if cfg.lazy:
            for cond, w in zip(sample_conds, weights):
                star_rows += _onehot_rows(cond, V, a * w)
            return [(targets_seq, star_rows, 0.0)]
        passes = [(targets_seq, star_rows, 0.0)]
        for cond, w in zip(sample_conds, weights):
            passes.append((cond, _onehot_rows(cond, V, a * w), 0.0))
        return passes

    # tok_seq
    if emb is None:
        raise TrainingError("combined smoothing requires embeddings")
    a1, a2 = cfg.alpha1, cfg.alpha2

    def tok_mixed(cond, weight):
        rows = a2 * smooth_rows(cond) + (1 - a2) * _onehot_rows(cond, V, 1.0)
        return rows * np.asarray(weight).reshape(-1, 1, 1)

    star_rows = tok_mixed(targets_seq, np.full(B, 1.0 - a1))
    if cfg.lazy:
        for cond, w in zip(sample_conds, weights):
            star_rows += tok_mixed(cond, a1 * w)
        return [(targets_seq, star_rows, 0.0)]
    passes = [(targets_seq, star_rows, 0.0)]
    for cond, w in zip(sample_conds, weights):
        passes.append((cond, tok_mixed(cond, a1 * w), 0.0))
    return passes


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def add(self, step, loss, mle_c, smooth_c, mean_dist, mean_ent):
        self.rows.append((step, loss, mle_c, smooth_c, mean_dist, mean_ent))

    def save_csv(self, path, header_line: str | None = None):
        with open(path, "w", encoding="utf-8") as f:
            if header_line:
                f.write(header_line.rstrip("\n") + "\n")
            f.write(",".join(REPORT_COLUMNS) + "\n")
            for r in self.rows:
                f.write(f"{r[0]},{r[1]:.6f},{r[2]:.6f},{r[3]:.6f},{r[4]:.4f},{r[5]:.6f}\n")


def train(
    params: dict,
    dataset: Sequence[Example],
    vocab: Vocabulary,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    epochs: int,
    batch_size: int,
    seed: int,
    embeddings: token_smooth.EmbeddingTable | None = None,
    idf: metrics.IdfTable | None = None,
    valid_set: Sequence[Example] | None = None,
    early_metric: str = "loss",
    patience: int = 5,
    max_decode_len: int = 32,
) -> tuple[dict, TrainReport]:
    """Mini-batch training with Adam; aborts on non-finite loss.

    Per-batch loss is the mean over examples.  With a validation set, keeps
    the best parameters under ``early_metric`` ("loss" or "bleu") and stops
    after ``patience`` epochs without improvement.
    """
    opt = Adam(params, opt_cfg)
    report = TrainReport()
    tok_cache: dict = {}
    step = 0
    best_metric = None
    best_params = None
    stale = 0
    for epoch in range(epochs):
        lr = opt_cfg.lr * (opt_cfg.decay**epoch)
        batches = make_batches(dataset, batch_size, seed=seed * 100003 + epoch)
        for b_idx, batch in enumerate(batches):
            groups: dict[tuple[int, int], list[int]] = {}
            for i, ex in enumerate(batch.examples):
                groups.setdefault((len(ex.source), len(ex.target)), []).append(i)
            total = model.zero_grads(params)
            loss_sum = mle_sum = ent_sum = dist_sum = 0.0
            n_samples = 0
            for key, idxs in sorted(groups.items()):
                exs = [batch.examples[i] for i in idxs]
                sources = np.asarray([ex.source for ex in exs], dtype=np.int64)
                targets = np.asarray([ex.target for ex in exs], dtype=np.int64)
                sample_sets = None
                if loss_cfg.kind in ("seq", "tok_seq"):
                    sample_sets = []
                    for j, ex in zip(idxs, exs):
                        rng = _example_rng(seed, epoch, b_idx, j)
                        ss = draw_samples(ex, batch, loss_cfg, vocab, rng, idf)
                        sample_sets.append(ss)
                        dist_sum += sum(s.distance for s in ss)
                        n_samples += len(ss)
                passes = compile_passes(targets, sample_sets, loss_cfg, vocab,
                                        embeddings, tok_cache)
                loss, grads, diag = model.loss_and_grads(params, sources, passes)
                # first pass is always conditioned on the ground truth
                mle_sum += _batch_nll(diag["first_logp"], targets)
                ent_sum += diag["entropy"]
                loss_sum += loss
                for k in total:
                    total[k] += grads[k]
            B = len(batch.examples)
            loss_mean = loss_sum / B
            if not math.isfinite(loss_mean):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            for k in total:
                total[k] /= B
            opt.step(params, total, lr)
            T_total = sum(len(ex.target) for ex in batch.examples)
            report.add(step, loss_mean, mle_sum / B, loss_sum / B - mle_sum / B,
                       dist_sum / max(n_samples, 1), ent_sum / T_total)
            step += 1
        if valid_set is not None:
            metric = _validation_metric(params, valid_set, vocab, early_metric, max_decode_len)
            better = best_metric is None or (
                metric < best_metric if early_metric == "loss" else metric > best_metric)
            if better:
                best_metric, stale = metric, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_params is not None:
        params.update(best_params)
    return params, report


def _batch_nll(logp, targets):
    B, T = targets.shape
    b, t = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    return -float(logp[b, t, targets].sum())


def _validation_metric(params, valid_set, vocab, kind, max_decode_len):
    if kind == "loss":
        total = 0.0
        for ex in valid_set:
            h0, _ = model.encode_source_batch(params, np.asarray([ex.source], dtype=np.int64))
            logp, _ = model.decoder_logprobs_batch(
                params, h0, np.asarray([ex.target], dtype=np.int64))
            total += _batch_nll(logp, np.asarray([ex.target]))
        return total / len(valid_set)
    if kind == "bleu":
        pairs = []
        for ex in valid_set:
            cand = model.greedy_decode(params, ex.source, max_decode_len)
            pairs.append((list(cand), [list(r[:-1]) for r in ex.references]))
        return metrics.corpus_bleu4(pairs)
    raise TrainingError(f"unknown early-stopping metric: {kind}")


def evaluate(params, dataset: Sequence[Example], vocab: Vocabulary,
             beam_size: int, max_decode_len: int = 32,
             idf: metrics.IdfTable | None = None) -> dict:
    """Beam-decode a dataset and report corpus BLEU-4, mean sentence BLEU-4,
    mean CIDEr-D, mean length and exact-sequence accuracy."""
    if idf is None:
        idf = metrics.build_idf([[r[:-1] for r in ex.references] for ex in dataset])
    pairs = []
    sent_bleu = cid = length = exact = 0.0
    for ex in dataset:
        cand = list(model.beam_search(params, ex.source, beam_size, max_decode_len))
        refs = [list(r[:-1]) for r in ex.references]
        pairs.append((cand, refs))
        sent_bleu += metrics.sentence_bleu4(cand, refs)
        cid += metrics.cider(cand, refs, idf)
        length += len(cand)
        exact += float(tuple(cand) == ex.target[:-1])
    n = len(dataset)
    return {
        "corpus_bleu4": metrics.corpus_bleu4(pairs),
        "mean_sentence_bleu4": sent_bleu / n,
        "mean_cider": cid / n,
        "mean_length": length / n,
        "sequence_accuracy": exact / n,
    }
