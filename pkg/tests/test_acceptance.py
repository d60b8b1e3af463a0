"""Acceptance suite: one test per headline criterion.

Each test prints a single PASS line with the measured quantities (visible with
``pytest -s``); the pytest verdict itself is the pass/fail record.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from seqsmooth.corpus import EOS_ID, Example, build_vocabulary
from seqsmooth.losses import combined_loss, mle_loss, seq_loss, token_loss
from seqsmooth.metrics import build_idf, cider, hamming, sentence_bleu4
from seqsmooth.model import (
    ModelConfig, beam_search, encode_source, init_params, loss_and_grads,
    loss_value, make_provider, teacher_forced_logprobs,
)
from seqsmooth.sampling import (
    distance_prior, exact_reward_distribution, importance_sample,
    stratified_sample_batch, uniform_samples,
)
from seqsmooth.token_smooth import EmbeddingTable, TokenSmoothParams, build_smoothed_targets
from seqsmooth.training import (
    LossConfig, OptimizerConfig, compile_passes, evaluate, train,
)


def _report(name, detail):
    print(f"PASS {name}: {detail}")


def neg_hamming(y_star):
    return lambda y: -float(hamming(y, y_star))


# --------------------------------------------------------------------------
# 1. Sampler exactness: TV(empirical, exact) < 0.01 at 10^6 draws in < 60 s.
# --------------------------------------------------------------------------
def test_sampler_exactness():
    y_star = (4, 5, 6)
    sub = (4, 5, 6, 7)
    tau = 0.9
    n = 1_000_000
    exact = exact_reward_distribution(y_star, neg_hamming(y_star), tau, sub)
    t0 = time.time()
    seqs, _, _ = stratified_sample_batch(y_star, tau, sub, np.random.default_rng(0), n)
    elapsed = time.time() - t0
    offsets = {v: i for i, v in enumerate(sub)}
    codes = np.zeros(n, dtype=np.int64)
    for t in range(3):
        codes = codes * 4 + np.vectorize(offsets.get)(seqs[:, t])
    counts = np.bincount(codes, minlength=64) / n
    exact_vec = np.array([exact[s] for s in itertools.product(sub, repeat=3)])
    tv = 0.5 * float(np.abs(counts - exact_vec).sum())
    assert tv < 0.01
    assert elapsed < 60.0
    _report("sampler-exactness", f"tv={tv:.5f} elapsed={elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. Partition-function closed form and distance marginal, both to 1e-10.
# --------------------------------------------------------------------------
def test_partition_closed_form():
    worst_z = worst_m = 0.0
    for T in (1, 2, 3, 4):
        for V in (2, 3, 4, 5):
            for tau in (0.3, 0.9, 2.0):
                sub = tuple(range(4, 4 + V))
                y_star = sub[:1] * T
                Z = sum(math.exp(-hamming(s, y_star) / tau)
                        for s in itertools.product(sub, repeat=T))
                closed = ((V - 1) * math.exp(-1.0 / tau) + 1.0) ** T
                worst_z = max(worst_z, abs(Z - closed))
                prior = distance_prior(T, V, tau)
                marg = np.zeros(T + 1)
                for s in itertools.product(sub, repeat=T):
                    marg[hamming(s, y_star)] += math.exp(-hamming(s, y_star) / tau) / Z
                worst_m = max(worst_m, float(np.abs(marg - prior.probs).max()))
    assert worst_z < 1e-10
    assert worst_m < 1e-10
    _report("partition-closed-form", f"max_Z_err={worst_z:.2e} max_marginal_err={worst_m:.2e}")


# --------------------------------------------------------------------------
# 3. Importance-sampling consistency: 1% at L=10^5; error non-increasing in L
#    averaged over 5 seeds.
# --------------------------------------------------------------------------
def test_importance_sampling_consistency():
    sub = (4, 5, 6, 7)
    y_star = (4, 5, 6)
    tau = 0.9
    reward = lambda y: sentence_bleu4(y, [y_star])
    rng = np.random.default_rng(123)
    logits = rng.normal(size=(3, 4))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    col = {v: i for i, v in enumerate(sub)}

    def nll(seq):
        return -sum(logp[t, col[v]] for t, v in enumerate(seq))

    exact = exact_reward_distribution(y_star, reward, tau, sub)
    truth = sum(p * nll(s) for s, p in exact.items())
    ls = (100, 1_000, 10_000, 100_000)
    errors = np.zeros((5, len(ls)))
    for i, seed in enumerate(range(5)):
        for j, L in enumerate(ls):
            out = importance_sample(y_star, [y_star], reward, tau, tau, sub,
                                    np.random.default_rng(seed), L=L)
            est = sum(s.weight * nll(s.sequence) for s in out)
            errors[i, j] = abs(est - truth) / abs(truth)
    mean = errors.mean(axis=0)
    assert (errors[:, -1] < 0.01).all()
    assert all(mean[j + 1] <= mean[j] for j in range(len(ls) - 1))
    _report("importance-sampling",
            f"mean_rel_err={[f'{e:.4f}' for e in mean]} over L={list(ls)}")


# --------------------------------------------------------------------------
# 4. Gradient correctness for every loss in the family, 200 coordinates each,
#    max relative error < 1e-4, whole check < 5 min.
# --------------------------------------------------------------------------
def test_gradient_correctness_all_losses():
    t0 = time.time()
    vocab = build_vocabulary([" ".join(f"g{i}" for i in range(8))], 1)
    assert vocab.size == 12
    content = tuple(vocab.index[f"g{i}"] for i in range(8))
    params0 = init_params(ModelConfig(12, 8, 8), np.random.default_rng(0))
    sources = np.asarray([[content[0], content[1], EOS_ID],
                          [content[2], content[3], EOS_ID]], dtype=np.int64)
    targets = np.asarray([content[:4] + (EOS_ID,),
                          content[2:6] + (EOS_ID,)], dtype=np.int64)
    emb = EmbeddingTable.random(vocab, 6)
    rng = np.random.default_rng(7)
    sets = [uniform_samples(tuple(t[:-1]), 0.9, content, rng, 2) for t in targets]
    configs = {
        "mle": LossConfig(kind="mle"),
        "mle_ent": LossConfig(kind="mle_ent", gamma=0.5),
        "tok": LossConfig(kind="tok", alpha=0.6, tau_tok=0.8, beta=0.1),
        "seq_exact": LossConfig(kind="seq", alpha=0.5, num_samples=2, lazy=False),
        "seq_lazy": LossConfig(kind="seq", alpha=0.5, num_samples=2, lazy=True),
        "tok_seq": LossConfig(kind="tok_seq", alpha1=0.5, alpha2=0.5, num_samples=2),
    }
    h = 1e-5
    worst = {}
    for name, cfg in configs.items():
        sample_sets = sets if cfg.kind in ("seq", "tok_seq") else None
        passes = compile_passes(targets, sample_sets, cfg, vocab, emb, {})
        params = {k: v.copy() for k, v in params0.items()}
        _, grads, _ = loss_and_grads(params, sources, passes)
        coords = []
        for pname, g in grads.items():
            for idx in zip(*np.unravel_index(np.argsort(-np.abs(g), axis=None), g.shape)):
                coords.append((abs(float(g[idx])), pname, idx))
        coords.sort(reverse=True)
        coords = [(p, i) for a, p, i in coords if a >= 1e-3][:200]
        assert len(coords) == 200
        max_rel = 0.0
        for pname, idx in coords:
            orig = params[pname][idx]
            params[pname][idx] = orig + h
            up = loss_value(params, sources, passes)
            params[pname][idx] = orig - h
            down = loss_value(params, sources, passes)
            params[pname][idx] = orig
            fd = (up - down) / (2 * h)
            g = float(grads[pname][idx])
            max_rel = max(max_rel, abs(fd - g) / max(abs(fd), abs(g)))
        assert max_rel < 1e-4, f"{name}: max relative error {max_rel:.2e}"
        worst[name] = max_rel
    elapsed = time.time() - t0
    assert elapsed < 300.0
    _report("gradient-correctness",
            " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" elapsed={elapsed:.0f}s")


# --------------------------------------------------------------------------
# 5. Reduction lattice: combined loss hits MLE / Tok / Seq at boundary alphas
#    to 1e-12; tau -> 1e-6 drives Tok and Seq to within 1e-6 of MLE.
# --------------------------------------------------------------------------
def test_reduction_lattice():
    vocab = build_vocabulary([" ".join(f"g{i}" for i in range(8))], 1)
    content = tuple(vocab.index[f"g{i}"] for i in range(8))
    params = init_params(ModelConfig(vocab.size, 8, 8), np.random.default_rng(1))
    emb = EmbeddingTable.random(vocab, 6)
    h0 = encode_source(params, (content[0], EOS_ID))
    provider = make_provider(params, h0)
    y_star = content[:4] + (EOS_ID,)
    rng = np.random.default_rng(2)
    samples = uniform_samples(y_star[:-1], 0.9, content, rng, 3)
    samples = [replace(s, sequence=s.sequence + (EOS_ID,)) for s in samples]

    def builder(tau, beta):
        p = TokenSmoothParams(tau=tau, beta=beta, alpha=1.0)
        return lambda seq: build_smoothed_targets(seq, p, emb, vocab.freq)

    b = builder(0.8, 0.1)
    m = mle_loss(y_star, provider)
    for lazy in (False, True):
        assert abs(combined_loss(y_star, samples, provider, b, 0.0, 0.0, lazy) - m) < 1e-12
        assert abs(combined_loss(y_star, samples, provider, b, 0.0, 0.4, lazy)
                   - token_loss(y_star, provider, b(y_star), 0.4)) < 1e-12
        assert abs(combined_loss(y_star, samples, provider, b, 0.7, 0.0, lazy)
                   - seq_loss(y_star, samples, provider, 0.7, lazy)) < 1e-12
    # temperature limits: both smoothings collapse onto the Dirac target
    b_cold = builder(1e-6, 0.0)
    tok_gap = abs(token_loss(y_star, provider, b_cold(y_star), 1.0) - m)
    cold = uniform_samples(y_star[:-1], 1e-6, content, np.random.default_rng(3), 3)
    cold = [replace(s, sequence=s.sequence + (EOS_ID,)) for s in cold]
    seq_gap = abs(seq_loss(y_star, cold, provider, 1.0, lazy=False) - m)
    assert tok_gap < 1e-6 and seq_gap < 1e-6
    _report("reduction-lattice", f"tok_gap={tok_gap:.1e} seq_gap={seq_gap:.1e}")


# --------------------------------------------------------------------------
# 6. Lazy-vs-exact: identical losses when samples equal the ground truth;
#    lazy epoch < 60% of exact wall time at L=3 on the copy task.
# --------------------------------------------------------------------------
def test_lazy_vs_exact_contract():
    vocab = build_vocabulary([" ".join(f"g{i}" for i in range(8))], 1)
    content = tuple(vocab.index[f"g{i}"] for i in range(8))
    params = init_params(ModelConfig(vocab.size, 8, 8), np.random.default_rng(4))
    h0 = encode_source(params, (content[0], EOS_ID))
    provider = make_provider(params, h0)
    y_star = content[:5] + (EOS_ID,)
    forced = uniform_samples(y_star[:-1], 1e-9, content, np.random.default_rng(0), 3)
    forced = [replace(s, sequence=s.sequence + (EOS_ID,)) for s in forced]
    assert all(s.sequence == y_star for s in forced)
    gap = abs(seq_loss(y_star, forced, provider, 0.6, lazy=True)
              - seq_loss(y_star, forced, provider, 0.6, lazy=False))
    assert gap <= 1e-12

    # timing: one epoch of seq smoothing with L=3 on a copy task
    rng = np.random.default_rng(11)
    data = []
    for _ in range(1024):
        toks = tuple(int(content[i]) for i in rng.integers(0, 8, size=12))
        if len(set(toks)) < 2:
            continue
        seq = toks + (EOS_ID,)
        data.append(Example(seq, seq, (seq,)))
    times = {}
    for lazy in (False, True):
        p = init_params(ModelConfig(vocab.size, 48, 192), np.random.default_rng(5))
        cfg = LossConfig(kind="seq", alpha=0.5, num_samples=3, lazy=lazy)
        t0 = time.time()
        train(p, data, vocab, cfg, OptimizerConfig(lr=1e-3),
              epochs=1, batch_size=32, seed=0)
        times[lazy] = time.time() - t0
    ratio = times[True] / times[False]
    assert ratio < 0.6
    _report("lazy-vs-exact",
            f"forced_gap={gap:.1e} lazy={times[True]:.1f}s exact={times[False]:.1f}s "
            f"ratio={ratio:.2f}")


# --------------------------------------------------------------------------
# 7. End-to-end learnability on the reversal task, 3 seeds.
# --------------------------------------------------------------------------
def _reversal_world(seed, n_train=2000, n_test=200, T=8, V=20):
    vocab = build_vocabulary([" ".join(f"w{i}" for i in range(V))], 1)
    ids = np.array([vocab.index[f"w{i}"] for i in range(V)])
    rng = np.random.default_rng(seed)
    seen = set()
    data = []
    while len(data) < n_train + n_test:
        toks = tuple(int(t) for t in ids[rng.integers(0, V, size=T)])
        if len(set(toks)) < 2 or toks in seen:
            continue
        seen.add(toks)
        tgt = toks[::-1] + (EOS_ID,)
        data.append(Example(toks + (EOS_ID,), tgt, (tgt,)))
    return vocab, data[:n_train], data[n_train:]


def _train_reversal(seed, loss_cfg, epochs, emb=None):
    vocab, train_set, test_set = _reversal_world(seed)
    params = init_params(ModelConfig(vocab.size, 32, 160), np.random.default_rng(seed))
    params, _ = train(params, train_set, vocab, loss_cfg,
                      OptimizerConfig(lr=5e-3, decay=0.98),
                      epochs=epochs, batch_size=32, seed=seed, embeddings=emb)
    return evaluate(params, test_set, vocab, beam_size=1, max_decode_len=12)


def test_end_to_end_learnability():
    lines = []
    for seed in (0, 1, 2):
        mle = _train_reversal(seed, LossConfig(kind="mle"), epochs=70)
        assert mle["sequence_accuracy"] >= 0.95, f"seed {seed}: {mle}"
        vocab, _, _ = _reversal_world(seed)
        cfg = LossConfig(kind="tok_seq", reward="hamming", subvocab="refs",
                         tau_seq=0.9, tau_tok=0.3, alpha1=0.5, alpha2=0.5,
                         num_samples=16, lazy=True)
        smooth = _train_reversal(seed, cfg, epochs=70,
                                 emb=EmbeddingTable.random(vocab, 16))
        assert smooth["corpus_bleu4"] >= mle["corpus_bleu4"] - 0.02, \
            f"seed {seed}: tok_seq {smooth['corpus_bleu4']:.4f} vs mle {mle['corpus_bleu4']:.4f}"
        lines.append(f"seed{seed}: mle_acc={mle['sequence_accuracy']:.3f} "
                     f"mle_bleu={mle['corpus_bleu4']:.4f} "
                     f"tokseq_bleu={smooth['corpus_bleu4']:.4f}")
    _report("end-to-end-learnability", "; ".join(lines))


# --------------------------------------------------------------------------
# 8. Metric self-tests.
# --------------------------------------------------------------------------
def test_metric_self_tests():
    rng = np.random.default_rng(42)
    for _ in range(50):
        y = rng.integers(0, 30, size=rng.integers(4, 12)).tolist()
        assert sentence_bleu4(y, [y]) == pytest.approx(1.0)
    y = [1, 2, 3, 4, 5]
    idf = build_idf([[y], [[6, 7]], [[8, 9]]])
    assert cider(y, [y], idf) == pytest.approx(10.0)
    for _ in range(10_000):
        a, b, c = (rng.integers(0, 12, size=6).tolist() for _ in range(3))
        assert hamming(a, b) == hamming(b, a)
        assert (hamming(a, b) == 0) == (a == b)
        assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
    _report("metric-self-tests", "bleu_identity=1.0 cider_identity=10.0 "
            "hamming axioms on 10^4 triples")


# --------------------------------------------------------------------------
# 9. Beam search with exhaustive width equals enumeration argmax on toys.
# --------------------------------------------------------------------------
def test_beam_search_optimality_on_toys():
    rng = np.random.default_rng(99)
    for instance in range(20):
        V = int(rng.integers(5, 10))       # up to 5 non-special tokens
        max_len = int(rng.integers(1, 4))
        params = init_params(ModelConfig(V, 4, 4), np.random.default_rng(1000 + instance))
        alphabet = [1] + list(range(4, V))  # every token beam may emit, minus eos
        source = (int(rng.integers(4, V)), EOS_ID)
        h0 = encode_source(params, source)
        best, best_key = None, None
        for T in range(1, max_len + 1):
            for content in itertools.product(alphabet, repeat=T - 1):
                seq = content + (EOS_ID,)
                rows = teacher_forced_logprobs(params, h0, seq)
                score = sum(rows[t, c] for t, c in enumerate(seq))
                key = (-score, len(seq), seq)
                if best_key is None or key < best_key:
                    best, best_key = content, key
        got = beam_search(params, source, beam_size=100_000, max_len=max_len)
        assert got == best, f"instance {instance}: {got} != {best}"
    _report("beam-optimality", "20/20 instances match enumeration argmax")
