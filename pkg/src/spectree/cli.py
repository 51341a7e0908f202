"""Command-line interface.

Exit codes: 0 success, 1 runtime failure (including equivalence mismatches),
2 usage error.  ``SPECTREE_SEED`` replaces the default seed of every command
that takes ``--seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import formats
from .boost_tuning import PromptSample, collective_boost_tune, generate_samples, ngram_factory
from .engine import GenerationRequest, RunMetrics, compare_equivalence, run_incremental, run_speculative
from .errors import SpecTreeError
from .scheduler import LearnedScheduler, collect_samples, measure_cost_profile, mlp_train, training_loss
from .speculator import SpecConfig
from .transformer import ModelConfig, ModelWeights, init_random_weights

log = logging.getLogger("spectree")
tokenizer = formats.ByteTokenizer()


def default_seed() -> int:
    return int(os.environ.get("SPECTREE_SEED", "0"))


def _prompts(path, llm: ModelWeights) -> list[list[int]]:
    if llm.config.vocab_size < tokenizer.vocab_size:
        raise ValueError(f"model vocabulary {llm.config.vocab_size} is smaller than the byte tokenizer's 258")
    return [tokenizer.tokenize(p) for p in formats.read_prompts(path)]


def _requests(args, llm) -> list[GenerationRequest]:
    eos = None if args.no_eos else tokenizer.EOS
    return [GenerationRequest(tuple(p), args.max_tokens, eos) for p in _prompts(args.corpus, llm)]


def _policy(args, llm, pool):
    if getattr(args, "scheduler", None):
        predictor = formats.load_predictor(args.scheduler)
        if args.profile:
            profile = formats.load_profile(args.profile)
        else:
            log.info("no --profile given; measuring one with 5 reps")
            profile = measure_cost_profile(llm, pool, reps=5)
        return LearnedScheduler(predictor, profile), "scheduler"
    depth = getattr(args, "fixed_depth", None) or args.depth
    return SpecConfig(args.beam_width, depth), f"fixed-{args.beam_width}x{depth}"


def cmd_gen_model(args) -> int:
    config = ModelConfig(args.layers, args.heads, args.dmodel, args.vocab, args.lmax, args.ffn_mult)
    weights = init_random_weights(config, args.seed if args.seed is not None else default_seed())
    formats.save_weights(args.out, weights)
    log.info("wrote %s (%d parameters)", args.out, config.num_parameters())
    return 0


def cmd_decode(args) -> int:
    llm = formats.load_weights(args.llm)
    requests = _requests(args, llm)
    total = RunMetrics()
    rows = []
    if args.mode == "incremental":
        mode = "incremental"
        for req in requests:
            toks, m = run_incremental(llm, req)
            total = total + m
            rows.append(toks)
    else:
        if not args.pool:
            raise ValueError("--pool is required for speculative decoding")
        pool, _ = formats.load_pool(args.pool)
        policy, mode = _policy(args, llm, pool)
        mode = f"speculative-{mode}"
        for req in requests:
            toks, m = run_speculative(llm, pool, policy, req)
            total = total + m
            rows.append(toks)
    if args.out:
        formats.write_jsonl(args.out, ({"tokens": t, "text": tokenizer.detokenize(t).decode("utf-8", "replace")}
                                       for t in rows))
    record = formats.metrics_record(mode, len(requests), total)
    _emit(args.metrics, record)
    return 0


def cmd_compare(args) -> int:
    llm = formats.load_weights(args.llm)
    pool, _ = formats.load_pool(args.pool)
    policy, mode = _policy(args, llm, pool)
    requests = _requests(args, llm)
    report = compare_equivalence(llm, pool, policy, requests)
    for r in report.results:
        if not r.passed:
            print(f"prompt {r.index}: first mismatch at token {r.first_mismatch}", file=sys.stderr)
    record = formats.metrics_record(f"compare-{mode}", len(requests), report.speculative, report.mismatches)
    record["incremental"] = formats.metrics_record("incremental", len(requests), report.incremental)
    _emit(args.metrics, record)
    return report.exit_code


def _continuations(args, llm, prompts, out_dir: Path) -> list[PromptSample]:
    """LLM continuations, reused from ``continuations.jsonl`` when the model and horizon match."""
    digest = hashlib.sha256(formats.weights_to_bytes(llm)).hexdigest()[:16]
    cache_path = out_dir / "continuations.jsonl"
    if cache_path.exists():
        rows = formats.read_jsonl(cache_path)
        if rows and rows[0].get("llm") == digest and rows[0].get("horizon") == args.horizon \
                and [r["prompt"] for r in rows[1:]] == prompts:
            log.info("reusing cached continuations from %s", cache_path)
            return [PromptSample(tuple(r["prompt"]), tuple(r["continuation"])) for r in rows[1:]]
    samples = generate_samples(llm, prompts, args.horizon)
    formats.write_jsonl(cache_path, [{"llm": digest, "horizon": args.horizon}] +
                        [{"prompt": list(s.prompt), "continuation": list(s.llm_continuation)} for s in samples])
    return samples


def cmd_boost_tune(args) -> int:
    llm = formats.load_weights(args.llm)
    prompts = _prompts(args.corpus, llm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = _continuations(args, llm, prompts, out)
    if args.kind == "ngram":
        factory = ngram_factory(args.order, args.alpha, llm.config.vocab_size)
    else:
        from .finetune import transformer_factory

        if not args.ssm:
            raise ValueError("--ssm base weights are required for transformer SSMs")
        factory = transformer_factory(formats.load_weights(args.ssm), args.epochs, args.lr)
    k = float("inf") if args.k <= 0 else args.k
    pool = collective_boost_tune(args.pool_size, samples, factory, k)
    formats.save_pool(out, pool.ssms, k, pool.residual_counts)
    print(json.dumps({"pool_size": len(pool.ssms), "residual_counts": pool.residual_counts}))
    return 0


def cmd_collect_samples(args) -> int:
    llm = formats.load_weights(args.llm)
    pool, _ = formats.load_pool(args.pool)
    prompts = _prompts(args.corpus, llm)
    samples = collect_samples(llm, pool, prompts, args.max_tokens, None if args.no_eos else tokenizer.EOS)
    formats.save_samples(args.out, samples)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def cmd_train_scheduler(args) -> int:
    samples = formats.load_samples(args.samples)
    seed = args.seed if args.seed is not None else default_seed()
    predictor = mlp_train(samples, epochs=args.epochs, lr=args.lr, seed=seed)
    formats.save_predictor(args.out, predictor)
    print(json.dumps({"samples": len(samples), "train_mse": training_loss(predictor, samples)}))
    return 0


def cmd_profile_cost(args) -> int:
    llm = formats.load_weights(args.llm)
    pool, _ = formats.load_pool(args.pool)
    seed = args.seed if args.seed is not None else default_seed()
    profile = measure_cost_profile(llm, pool, reps=args.reps, context_len=args.context_len, seed=seed)
    formats.save_profile(args.out, profile)
    return 0


def cmd_bench(args) -> int:
    llm = formats.load_weights(args.llm)
    pool, _ = formats.load_pool(args.pool)
    policy, mode = _policy(args, llm, pool)
    requests = _requests(args, llm)
    total = RunMetrics()
    mismatches = 0
    for req in requests:
        toks, m = run_speculative(llm, pool, policy, req)
        total = total + m
        if args.check and toks != run_incremental(llm, req)[0]:
            mismatches += 1
    _emit(args.metrics, formats.metrics_record(f"bench-{mode}", len(requests), total, mismatches))
    return 1 if mismatches else 0


def _emit(path, record: dict) -> None:
    if path:
        formats.write_metrics(path, record)
    print(json.dumps(record))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectree", description="Speculative decoding with token tree verification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded random transformer")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--dmodel", type=int, required=True)
    p.add_argument("--vocab", type=int, default=258)
    p.add_argument("--lmax", type=int, default=256)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    def corpus_args(p, corpus_flag="--corpus"):
        p.add_argument("--llm", required=True)
        p.add_argument(corpus_flag, dest="corpus", required=True, help="JSONL with a 'prompt' field per line")
        p.add_argument("--max-tokens", type=int, default=64)
        p.add_argument("--no-eos", action="store_true", help="ignore the tokenizer's EOS token")

    def policy_args(p):
        p.add_argument("--beam-width", type=int, default=1, choices=(1, 2, 4))
        p.add_argument("--depth", type=int, default=16, choices=(1, 2, 4, 8, 16))
        p.add_argument("--scheduler", help="predictor file; overrides the fixed configuration")
        p.add_argument("--profile", help="cost profile JSON for --scheduler")

    p = sub.add_parser("decode", help="decode a prompt file")
    corpus_args(p, "--prompt-file")
    p.add_argument("--mode", choices=("incremental", "speculative"), default="incremental")
    p.add_argument("--pool")
    policy_args(p)
    p.add_argument("--metrics")
    p.add_argument("--out", help="write generated tokens as JSONL")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("compare", help="check speculative output against incremental output")
    corpus_args(p)
    p.add_argument("--pool", required=True)
    policy_args(p)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("boost-tune", help="collectively boost-tune an SSM pool")
    p.add_argument("--llm", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--pool-size", type=int, default=5)
    p.add_argument("--k", type=int, default=4, help="mark horizon; <= 0 disables marking")
    p.add_argument("--horizon", type=int, default=16, help="LLM continuation length per prompt")
    p.add_argument("--kind", choices=("ngram", "transformer"), default="ngram")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--ssm", help="base weights for transformer SSMs")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--out", required=True, help="pool directory")
    p.set_defaults(func=cmd_boost_tune)

    p = sub.add_parser("collect-samples", help="dump scheduler training samples as JSONL")
    corpus_args(p)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect_samples)

    p = sub.add_parser("train-scheduler", help="fit the matching-length predictor")
    p.add_argument("--samples", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_scheduler)

    p = sub.add_parser("profile-cost", help="measure per-configuration latencies")
    p.add_argument("--llm", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--context-len", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile_cost)

    p = sub.add_parser("bench", help="speculative decoding metrics over a corpus")
    corpus_args(p)
    p.add_argument("--pool", required=True)
    policy_args(p)
    p.add_argument("--fixed-depth", type=int, choices=(1, 2, 4, 8, 16))
    p.add_argument("--check", action=argparse.BooleanOptionalAction, default=True,
                   help="also run incremental decoding and count mismatches")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_bench)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SpecTreeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
