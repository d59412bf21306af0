"""Command-line surface tying the pipeline together.

Subcommands: align, prepare, train, translate, bleu, grad-check,
gen-synthetic.  Every command that writes artifacts also writes a
manifest.json with the resolved settings next to its outputs.  Exit codes:
0 success, 1 runtime/I-O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import align as al
from . import pipeline as pl
from .bleu import bleu
from .checkpoint import load_checkpoint
from .model import translate_greedy
from .pipeline import RunConfig, write_manifest
from .synthetic import SyntheticSpec, gen_synthetic, shift_cipher

log = logging.getLogger("chunkmt")


def _add_corpus_args(p):
    p.add_argument("--source", required=True, help="source text, one sentence per line")
    p.add_argument("--target", required=True, help="target text, one sentence per line")
    p.add_argument("--no-lowercase", dest="lowercase", action="store_false", default=None,
                   help="keep the corpus casing (default: lowercase)")


def _config_from_args(args) -> RunConfig:
    """defaults <- config file <- explicit CLI flags."""
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        name: getattr(args, name, None)
        for name in (
            "hidden_dim", "char_embed_dim", "batch_size", "learning_rate", "tau",
            "alpha", "em_iterations", "max_chunk_chars", "patience",
            "eval_interval", "seed", "max_epochs", "lowercase",
        )
    }
    return config.override(**overrides)


def _ingest(args, config):
    pairs, _ = pl.ingest_corpus(args.source, args.target, config)
    if not pairs:
        raise pl.CorpusError("corpus is empty after dropping empty lines")
    return pairs


def cmd_align(args) -> int:
    config = _config_from_args(args)
    pairs = _ingest(args, config)
    posteriors = al.align_corpus(pairs, config.em_iterations, config.alpha)
    al.export_posteriors([p.forward for p in posteriors], args.out_forward)
    al.export_posteriors([p.backward for p in posteriors], args.out_backward)
    write_manifest(args.out_forward + ".manifest.json", "align", {
        "source": args.source, "target": args.target,
        "out_forward": args.out_forward, "out_backward": args.out_backward,
        "em_iterations": config.em_iterations, "alpha": config.alpha,
        "lowercase": config.lowercase,
    })
    print(f"wrote posteriors for {len(posteriors)} sentence pairs")
    return 0


def cmd_prepare(args) -> int:
    config = _config_from_args(args)
    pairs = _ingest(args, config)
    posteriors = al.load_posterior_pairs(args.forward, args.backward)
    if len(posteriors) != len(pairs):
        raise al.PosteriorFormatError(
            f"{len(posteriors)} posterior records for {len(pairs)} sentence pairs"
        )
    sequences, dropped = al.build_training_corpus(pairs, posteriors, config.tau)
    al.write_chunked_sequences(sequences, args.out)
    write_manifest(args.out + ".manifest.json", "prepare", {
        "source": args.source, "target": args.target,
        "forward": args.forward, "backward": args.backward,
        "tau": config.tau, "lowercase": config.lowercase, "dropped": dropped,
    })
    print(f"wrote {len(sequences)} chunked sequences ({dropped} dropped)")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    pairs = _ingest(args, config)
    posteriors = None
    if args.posteriors_forward or args.posteriors_backward:
        if not (args.posteriors_forward and args.posteriors_backward):
            raise ValueError("--posteriors-forward and --posteriors-backward go together")
        posteriors = al.load_posterior_pairs(args.posteriors_forward, args.posteriors_backward)
        if len(posteriors) != len(pairs):
            raise al.PosteriorFormatError(
                f"{len(posteriors)} posterior records for {len(pairs)} sentence pairs"
            )
    result = pl.train_from_corpus(config, pairs, args.heldout, out_dir=args.out_dir,
                                  posteriors=posteriors)
    for epoch, xent in result.trajectory:
        print(f"epoch {epoch}: heldout {xent:.4f} nats/symbol")
    if result.trajectory:
        print(f"best heldout {result.best_xent:.4f} nats/symbol")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _read_oracle(path):
    """Per input sentence: tab-separated chunk{US}slot decisions."""
    oracles = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            decisions = []
            line = line.rstrip("\n")
            if line:
                for cell in line.split("\t"):
                    chunk, _, slot = cell.partition(al.US)
                    decisions.append((chunk, int(slot) if slot else None))
            oracles.append(decisions)
    return oracles


def cmd_translate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    oracles = _read_oracle(args.oracle) if args.oracle else None
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    cache: dict = {}
    try:
        with open(args.input, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                tokens = line.split()
                if not tokens:
                    out.write("\n")
                    continue
                oracle = None
                if oracles is not None:
                    if i >= len(oracles) or len(oracles[i]) != len(tokens):
                        raise ValueError(
                            f"oracle line {i + 1} does not match the {len(tokens)}-token sentence"
                        )
                    oracle = oracles[i]
                text = translate_greedy(params, tokens, args.max_chunk_chars,
                                        oracle=oracle, cache=cache)
                out.write(text + "\n")
    finally:
        if args.output:
            out.close()
    if args.output:
        write_manifest(args.output + ".manifest.json", "translate", {
            "checkpoint": args.checkpoint, "input": args.input,
            "output": args.output, "max_chunk_chars": args.max_chunk_chars,
            "oracle": args.oracle,
        })
    return 0


def _read_token_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def cmd_bleu(args) -> int:
    hyps = _read_token_lines(args.hypotheses)
    refs = _read_token_lines(args.references)
    report = bleu(hyps, refs, args.max_n)
    if args.json:
        print(report.to_json())
    else:
        for line in report.lines():
            print(line)
    return 0


def cmd_grad_check(args) -> int:
    from .verification import run_suite

    report = run_suite(seed=args.seed)
    for line in report.lines():
        print(line)
    if report.max_error < args.threshold:
        print(f"OK: max relative error {report.max_error:.3e} < {args.threshold:g}")
        return 0
    print(f"FAILED: max relative error {report.max_error:.3e} >= {args.threshold:g}")
    return 1


def cmd_gen_synthetic(args) -> int:
    cipher = None if args.cipher_shift == 0 else shift_cipher(args.alphabet, args.cipher_shift)
    spec = SyntheticSpec(
        vocab_size=args.vocab_size,
        n_sentences=args.sentences,
        len_range=(args.min_len, args.max_len),
        rule=args.rule,
        cipher=cipher,
        seed=args.seed,
        alphabet=args.alphabet,
        token_len_range=(args.min_token_len, args.max_token_len),
    )
    sources, targets = gen_synthetic(spec)
    with open(args.out_source, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(s) + "\n" for s in sources)
    with open(args.out_target, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(t) + "\n" for t in targets)
    write_manifest(args.out_source + ".manifest.json", "gen-synthetic", {
        "vocab_size": spec.vocab_size, "sentences": spec.n_sentences,
        "len_range": list(spec.len_range), "rule": spec.rule,
        "cipher_shift": args.cipher_shift, "seed": spec.seed,
        "alphabet": spec.alphabet, "token_len_range": list(spec.token_len_range),
        "out_source": args.out_source, "out_target": args.out_target,
    })
    print(f"wrote {len(sources)} sentence pairs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunkmt",
        description="Character-level translation with insertion-based reordering.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="estimate and export alignment posteriors")
    _add_corpus_args(p)
    p.add_argument("--out-forward", required=True)
    p.add_argument("--out-backward", required=True)
    p.add_argument("--em-iterations", type=int, dest="em_iterations")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("prepare", help="build chunked training sequences from posteriors")
    _add_corpus_args(p)
    p.add_argument("--forward", required=True, help="forward posterior file")
    p.add_argument("--backward", required=True, help="backward posterior file")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="align, build sequences, and train a model")
    _add_corpus_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--heldout", type=int, default=0, help="held-out sentence count")
    p.add_argument("--posteriors-forward", help="import external forward posteriors")
    p.add_argument("--posteriors-backward", help="import external backward posteriors")
    for name, typ in (
        ("hidden-dim", int), ("char-embed-dim", int), ("batch-size", int),
        ("learning-rate", float), ("tau", float), ("alpha", float),
        ("em-iterations", int), ("max-chunk-chars", int), ("patience", int),
        ("eval-interval", int), ("seed", int), ("max-epochs", int),
    ):
        p.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a source file with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="default: stdout")
    p.add_argument("--max-chunk-chars", type=int, dest="max_chunk_chars")
    p.add_argument("--oracle", help="forced (chunk, slot) decisions per sentence, for verification")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("bleu", help="corpus BLEU of a hypothesis file against a reference")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--max-n", type=int, default=4, dest="max_n")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bleu)

    p = sub.add_parser("grad-check", help="run the 64-bit gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("gen-synthetic", help="generate a seeded synthetic parallel corpus")
    p.add_argument("--out-source", required=True)
    p.add_argument("--out-target", required=True)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--sentences", type=int, default=1000)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--rule", choices=("identity", "reverse", "swap_halves"), default="identity")
    p.add_argument("--cipher-shift", type=int, default=0, help="0 keeps characters unchanged")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alphabet", default="abcdefghij")
    p.add_argument("--min-token-len", type=int, default=2)
    p.add_argument("--max-token-len", type=int, default=4)
    p.set_defaults(func=cmd_gen_synthetic)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
