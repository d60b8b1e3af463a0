"""Command-line entry point.

Subcommands: build-vocab, augment, train, evaluate, sampler-check.
Every command is a pure function of (config, seed, input files); reruns are
byte-identical except for the timestamp confined to the artifact header line.
Exit codes: 0 success, 2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import datetime
import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import metrics, model, sampling, token_smooth, training
from .config import ConfigError, ExperimentConfig
from .corpus import CorpusError, UNK_ID, Vocabulary, build_vocabulary, load_corpus, make_batches
from .model import ModelConfig
from .training import TrainingDiverged, TrainingError


def _header(cfg: ExperimentConfig) -> str:
    ts = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return f"# generated {ts} config={cfg.echo()}"


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"run.seed={args.seed}"])
    return cfg


def _require(value, name):
    if value is None:
        raise ConfigError(f"missing required config value: {name}")
    return value


def cmd_build_vocab(args) -> int:
    cfg = _load_config(args)
    corpus_path = _require(args.corpus or cfg.paths.train, "paths.train")
    out = Path(args.out) / "vocab.txt" if cfg.paths.vocab is None else Path(cfg.paths.vocab)
    min_count = args.min_count or cfg.run.min_count

    def token_stream():
        with open(corpus_path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if line:
                    for col in line.split("\t"):
                        yield col

    vocab = build_vocabulary(token_stream(), min_count)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    total = sum(vocab.freq)
    coverage = 1.0 - (vocab.freq[UNK_ID] / total if total else 0.0)
    print(_header(cfg))
    print(f"vocab_size={vocab.size} coverage={coverage:.6f} out={out}")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    vocab = Vocabulary.load(_require(cfg.paths.vocab, "paths.vocab"))
    dataset = load_corpus(_require(cfg.paths.train, "paths.train"), vocab, cfg.run.max_len)
    idf = None
    if cfg.loss.reward == "cider":
        idf = metrics.build_idf([[r[:-1] for r in ex.references] for ex in dataset])
    batches = make_batches(dataset, cfg.run.batch_size, cfg.run.seed)
    out = Path(args.out) / "augment.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write(_header(cfg) + "\n")
        ex_id = 0
        for b_idx, batch in enumerate(batches):
            for j, ex in enumerate(batch.examples):
                rng = training._example_rng(cfg.run.seed, 0, b_idx, j)
                samples = training.draw_samples(ex, batch, cfg.loss, vocab, rng, idf)
                for s in samples:
                    record = {
                        "example_id": ex_id,
                        "sample": vocab.decode(s.sequence),
                        "distance": s.distance,
                        "log_q": round(s.log_q, 9),
                        "reward": round(s.reward, 9),
                        "weight": round(s.weight, 9),
                    }
                    f.write(json.dumps(record) + "\n")
                ex_id += 1
    print(f"wrote {out}")
    return 0


def _embedding_table(cfg, vocab):
    if cfg.paths.embeddings:
        return token_smooth.EmbeddingTable.load(cfg.paths.embeddings, vocab)
    return token_smooth.EmbeddingTable.random(vocab, cfg.model.embeddings_dim)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    vocab = Vocabulary.load(_require(cfg.paths.vocab, "paths.vocab"))
    train_set = load_corpus(_require(cfg.paths.train, "paths.train"), vocab, cfg.run.max_len)
    valid_set = load_corpus(cfg.paths.valid, vocab, cfg.run.max_len) if cfg.paths.valid else None
    emb = None
    if cfg.loss.kind in ("tok", "tok_seq"):
        emb = _embedding_table(cfg, vocab)
    idf = None
    if cfg.loss.kind in ("seq", "tok_seq") and cfg.loss.reward == "cider":
        idf = metrics.build_idf([[r[:-1] for r in ex.references] for ex in train_set])
    rng = np.random.default_rng(cfg.run.seed)
    params = model.init_params(
        ModelConfig(vocab.size, cfg.model.emb_dim, cfg.model.hidden_dim), rng)
    params, report = training.train(
        params, train_set, vocab, cfg.loss, cfg.optimizer,
        epochs=cfg.run.epochs, batch_size=cfg.run.batch_size, seed=cfg.run.seed,
        embeddings=emb, idf=idf, valid_set=valid_set,
        early_metric=cfg.run.early_metric, patience=cfg.run.patience,
        max_decode_len=cfg.run.max_len,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "checkpoint.npz"
    model.save_checkpoint(ckpt, params, {"config": cfg.to_dict()})
    report_path = Path(cfg.paths.report) if cfg.paths.report else out / "report.csv"
    report.save_csv(report_path, header_line=_header(cfg))
    print(f"wrote {ckpt} and {report_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    ckpt = args.checkpoint or cfg.paths.checkpoint
    if ckpt is None or not Path(ckpt).exists():
        raise TrainingError(f"missing checkpoint: {ckpt}")
    params, _ = model.load_checkpoint(ckpt)
    vocab = Vocabulary.load(_require(cfg.paths.vocab, "paths.vocab"))
    test_set = load_corpus(_require(cfg.paths.test or cfg.paths.train, "paths.test"),
                           vocab, cfg.run.max_len)
    beam = args.beam_size or cfg.run.beam_size
    result = training.evaluate(params, test_set, vocab, beam, cfg.run.max_len)
    print(_header(cfg))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_sampler_check(args) -> int:
    cfg = _load_config(args)
    T, V, tau = args.length, args.sub_size, cfg.loss.tau_seq
    sub = tuple(range(4, 4 + V))
    y_star = tuple(sub[0] for _ in range(T))
    if V**T > sampling.ENUMERATION_BOUND:
        raise TrainingError("instance too large for enumeration")
    exact = sampling.exact_reward_distribution(
        y_star, lambda y: -float(metrics.hamming(y, y_star)), tau, sub)
    prior = sampling.distance_prior(T, V, tau)
    rng = np.random.default_rng(cfg.run.seed)
    samples, dists, _ = sampling.stratified_sample_batch(y_star, tau, sub, rng, args.draws)
    # empirical distribution via base-V integer encoding
    offsets = {v: i for i, v in enumerate(sub)}
    codes = np.zeros(args.draws, dtype=np.int64)
    for t in range(T):
        codes = codes * V + np.vectorize(offsets.get)(samples[:, t])
    counts = np.bincount(codes, minlength=V**T) / args.draws
    exact_vec = np.empty(V**T)
    dist_vec = np.empty(V**T, dtype=np.int64)
    for i, seq in enumerate(itertools.product(sub, repeat=T)):
        exact_vec[i] = exact[seq]
        dist_vec[i] = metrics.hamming(seq, y_star)
    tv = 0.5 * float(np.abs(counts - exact_vec).sum())
    # per-stratum uniformity
    pvals = []
    all_counts = np.bincount(codes, minlength=V**T)
    for d in range(1, T + 1):
        idx = np.flatnonzero(dist_vec == d)
        observed = all_counts[idx]
        if observed.sum() == 0 or len(idx) < 2:
            continue
        pvals.append(float(stats.chisquare(observed).pvalue))
    # partition function residual
    enum_log = float(np.log(sum(math.exp(-metrics.hamming(s, y_star) / tau)
                                for s in itertools.product(sub, repeat=T))))
    residual = abs(math.exp(enum_log) - math.exp(prior.log_partition()))
    print(_header(cfg))
    print(f"tv_distance={tv:.6f}")
    print(f"chi2_pvalues={[round(p, 4) for p in pvals]}")
    print(f"partition_residual={residual:.3e}")
    print(f"prior_prob_sum={float(prior.probs.sum()):.15f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqsmooth")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override, repeatable")

    p = sub.add_parser("build-vocab", help="count tokens and write the vocabulary file")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--min-count", type=int, default=None)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("augment", help="dump weighted samples as JSON lines")
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model with the configured loss")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="beam-decode a dataset and report metrics")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--beam-size", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sampler-check", help="audit the stratified sampler on a toy instance")
    common(p)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--sub-size", type=int, default=4)
    p.add_argument("--draws", type=int, default=100_000)
    p.set_defaults(func=cmd_sampler_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, TrainingError, OSError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
