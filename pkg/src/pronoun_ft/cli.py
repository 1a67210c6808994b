"""Command-line interface.

Exit codes: 0 on success, 1 when arguments, configuration or input files are
invalid (checked before any work starts), 2 when a run fails afterwards.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

log = logging.getLogger("pronoun_ft")


class ValidationError(Exception):
    pass


def _need_file(path, flag):
    if path is None or not os.path.isfile(path):
        raise ValidationError(f"{flag}: file not found: {path}")
    return path


def _need_prefix(prefix, flag):
    for ext in (".src", ".tgt"):
        _need_file(prefix + ext, flag)
    return prefix


def _config(args):
    from .config import ConfigError, ExperimentConfig, load_config

    if getattr(args, "config", None) is None:
        return ExperimentConfig()
    _need_file(args.config, "--config")
    try:
        return load_config(args.config)
    except ConfigError as err:
        raise ValidationError(str(err)) from None


def _loss_spec(cfg, loss, mask):
    from .experiment import LOSS_KINDS, MASKS

    return dataclasses.replace(cfg.loss, kind=LOSS_KINDS[loss], mask_policy=MASKS[mask])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args):
    from .corpus import build_vocab, generate_synthetic, write_parallel

    cfg = _config(args)
    corpus_cfg = cfg.corpus
    overrides = {k: v for k, v in (("num_docs", args.num_docs), ("seed", args.seed)) if v is not None}
    if overrides:
        corpus_cfg = dataclasses.replace(corpus_cfg, **overrides)
    try:
        corpus_cfg.validate()
    except ValueError as err:
        raise ValidationError(f"corpus: {err}") from None
    corpus = generate_synthetic(corpus_cfg)
    paths = write_parallel(corpus, args.out)
    if args.vocab_out:
        build_vocab(corpus, "joint").save(args.vocab_out)
    print(f"wrote {len(corpus)} pairs in {len(corpus.doc_starts)} documents to {args.out}.*")
    return paths


def cmd_train(args):
    from .corpus import Vocab, read_prefix
    from .experiment import train_baseline
    from .model import ModelConfig
    from .trainer import derive_seed, encode_corpus
    from .extract import load_inventory

    cfg = _config(args)
    _need_prefix(args.data, "--data")
    _need_file(args.vocab, "--vocab")
    train = read_prefix(args.data)
    vocab = Vocab.load(args.vocab)
    hyper = cfg.train if args.steps is None else dataclasses.replace(cfg.train, max_steps=args.steps)
    if args.context == "random":
        train = train.with_random_context(derive_seed(cfg.experiment.random_context_seed, "train"))
    model_cfg = ModelConfig(vocab_size=len(vocab), mode=args.mode, **dataclasses.asdict(cfg.model))
    try:
        model_cfg.validate()
    except ValueError as err:
        raise ValidationError(f"model: {err}") from None
    inventory = load_inventory(args.inventory)
    examples = encode_corpus(train, vocab, args.mode, model_cfg.max_len, inventory.pronouns)
    seed = cfg.experiment.seed if args.seed is None else args.seed
    avg = train_baseline(examples, model_cfg, hyper, seed, args.out, cfg.experiment.average_last,
                         meta={"mode": args.mode, "context": args.context})
    print(f"trained {avg.step} steps; averaged model at {os.path.join(args.out, 'model.ckpt')}")


def cmd_translate(args):
    from .corpus import Vocab, read_prefix
    from .experiment import translate_corpus, write_lines
    from .model import load_checkpoint

    _need_file(args.checkpoint, "--checkpoint")
    _need_prefix(args.data, "--data")
    _need_file(args.vocab, "--vocab")
    corpus = read_prefix(args.data)
    vocab = Vocab.load(args.vocab)
    model = load_checkpoint(args.checkpoint).to_model()
    if args.context == "random":
        corpus = corpus.with_random_context(args.seed)
    hyps = translate_corpus(model, corpus, vocab, args.max_len, context=args.context)
    write_lines(args.out, hyps)
    print(f"translated {len(hyps)} sentences to {args.out}")


def _read_tokens(path):
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def cmd_align(args):
    from .align import align_corpus, write_pharaoh

    hyps = _read_tokens(_need_file(args.hyp, "--hyp"))
    refs = _read_tokens(_need_file(args.ref, "--ref"))
    if len(hyps) != len(refs):
        raise ValidationError(f"--hyp has {len(hyps)} lines but --ref has {len(refs)}")
    table, alignments = align_corpus(hyps, refs, args.iterations, args.null)
    write_pharaoh(alignments, args.out)
    if args.table:
        table.write_tsv(args.table)
    print(f"aligned {len(alignments)} sentence pairs to {args.out}")


def cmd_extract(args):
    from .align import read_pharaoh
    from .corpus import read_prefix, write_parallel
    from .extract import build_targeted_subset, find_pronoun_mismatches, load_inventory, sample_random_subset
    from .extract import write_mismatch_report

    corpus = read_prefix(_need_prefix(args.data, "--data"))
    hyps = _read_tokens(_need_file(args.hyp, "--hyp"))
    alignments = read_pharaoh(_need_file(args.align, "--align"))
    if args.inventory is not None:
        _need_file(args.inventory, "--inventory")
    if not len(corpus) == len(hyps) == len(alignments):
        raise ValidationError(
            f"line counts differ: corpus {len(corpus)}, --hyp {len(hyps)}, --align {len(alignments)}"
        )
    inventory = load_inventory(args.inventory)
    records = find_pronoun_mismatches(hyps, corpus.targets, alignments, inventory, not args.aligned_only)
    subset = build_targeted_subset(corpus, hyps, alignments, inventory, records)
    write_parallel(subset, args.out)
    write_mismatch_report(records, args.report or args.out + ".mismatches.tsv")
    if args.random_out:
        write_parallel(sample_random_subset(corpus, len(subset), args.seed), args.random_out)
    print(f"{len(records)} mismatched pronouns in {len(subset)} of {len(corpus)} sentences")


def cmd_finetune(args):
    from .corpus import Vocab, read_prefix
    from .experiment import finetune_model, finetune_plan
    from .extract import load_inventory
    from .model import load_checkpoint
    from .trainer import encode_corpus

    cfg = _config(args)
    _need_file(args.checkpoint, "--checkpoint")
    _need_prefix(args.data, "--data")
    _need_prefix(args.subset, "--subset")
    _need_file(args.vocab, "--vocab")
    schedule = cfg.schedule
    if args.upsample is not None:
        if args.upsample < 1:
            raise ValidationError("--upsample must be >= 1")
        schedule = dataclasses.replace(schedule, upsample_factor=args.upsample)
    base = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    if base.config.vocab_size != len(vocab):
        raise ValidationError(f"--vocab has {len(vocab)} entries, checkpoint expects {base.config.vocab_size}")
    inventory = load_inventory(args.inventory)
    mode, max_len = base.config.mode, base.config.max_len

    def enc(c):
        return encode_corpus(c, vocab, mode, max_len, inventory.pronouns)

    full, subset = read_prefix(args.data), read_prefix(args.subset)
    if len(subset) == 0:
        raise ValidationError(f"--subset {args.subset} is empty")
    spec = _loss_spec(cfg, args.loss, args.mask)
    mixed = enc(full.concatenated(subset)) if args.variant == "ft-shuffled" else None
    plan = finetune_plan(args.variant, enc(full), enc(subset), spec, schedule, mixed)
    seed = cfg.experiment.seed if args.seed is None else args.seed
    avg, records = finetune_model(base, plan, cfg.finetune, seed, args.out, cfg.experiment.average_last,
                                  meta={"variant": args.variant, "loss": args.loss, "mask": args.mask})
    for r in records:
        last = r.stats[-1]
        print(f"epoch {r.epoch} {r.label}: total {last.total:.4f} gen {last.generative:.4f} disc {last.discriminative:.4f}")
    print(f"averaged model at {os.path.join(args.out, 'model.ckpt')}")


def cmd_evaluate(args):
    from .experiment import evaluate_hyps
    from .extract import load_inventory
    from .metrics import parse_report

    hyps = _read_tokens(_need_file(args.hyp, "--hyp"))
    refs = _read_tokens(_need_file(args.ref, "--ref"))
    if args.inventory is not None:
        _need_file(args.inventory, "--inventory")
    if len(hyps) != len(refs):
        raise ValidationError(f"--hyp has {len(hyps)} lines but --ref has {len(refs)}")
    lines = evaluate_hyps(hyps, refs, load_inventory(args.inventory).pronouns)
    vals = parse_report("\n".join(lines))
    print(f"BLEU {vals['bleu']:.2f}   pronoun macro P / R / F1 "
          f"{vals['macro_precision']:.4f} / {vals['macro_recall']:.4f} / {vals['macro_f1']:.4f}")
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def cmd_gradcheck(args):
    from .gradcheck import format_table, run_gradcheck

    if args.trials < 1:
        raise ValidationError("--trials must be >= 1")
    results = run_gradcheck(range(args.seed, args.seed + args.trials))
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(f'{r.level}:{r.name}' for r in failed)}")
        return 2
    print("all gradient checks passed")
    return 0


def cmd_experiment(args):
    from .experiment import VARIANTS, run_experiment

    cfg = _config(args)
    if args.variant not in VARIANTS:
        raise ValidationError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    if args.seed is not None:
        cfg = cfg.replace(experiment=dataclasses.replace(cfg.experiment, seed=args.seed))
    result = run_experiment(args.workdir, cfg, args.variant, args.mode, args.loss, args.mask)
    print(f"{args.variant}: BLEU {result['bleu']:.2f}  pronoun macro-F1 {result['macro_f1']:.2f} (points)")
    print("\n".join(result["report"]))
    if args.json:
        print(json.dumps({"variant": args.variant, "bleu": result["bleu"], "macro_f1": result["macro_f1"]}))


def cmd_config_reference(args):
    from .config import reference_page

    text = reference_page()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="pronoun-ft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic parallel corpus")
    p.add_argument("--out", required=True, help="output prefix (.src/.tgt/.docs/.prn)")
    p.add_argument("--config")
    p.add_argument("--num-docs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-out", help="also write the joint vocabulary here")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a baseline from scratch and average its last checkpoints")
    p.add_argument("--data", required=True, help="training corpus prefix")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("sen2sen", "concat"), default="sen2sen")
    p.add_argument("--context", choices=("prev", "random"), default="prev")
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--inventory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="greedy-decode a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus prefix to translate")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="hypothesis file")
    p.add_argument("--context", choices=("prev", "random", "none"), default="prev")
    p.add_argument("--seed", type=int, default=77, help="seed for --context random")
    p.add_argument("--max-len", type=int, default=40)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("align", help="IBM Model 1 alignment of hypotheses to references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="Pharaoh alignment file")
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--table", help="also write the translation table as TSV")
    p.add_argument("--null", action="store_true", help="add a NULL reference word that absorbs unmatched tokens")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("extract-prn", help="build the pronoun-targeted subset")
    p.add_argument("--data", required=True, help="corpus prefix the hypotheses translate")
    p.add_argument("--hyp", required=True)
    p.add_argument("--align", required=True)
    p.add_argument("--out", required=True, help="output prefix for the subset")
    p.add_argument("--report", help="mismatch TSV (default: <out>.mismatches.tsv)")
    p.add_argument("--inventory")
    p.add_argument("--aligned-only", action="store_true", help="ignore unaligned reference pronouns")
    p.add_argument("--random-out", help="also write a size-matched random subset")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("finetune", help="fine-tune a baseline on full data plus a subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="full training corpus prefix")
    p.add_argument("--subset", required=True, help="subset prefix")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="ft-alt-2x",
                   choices=("ft-alt-2x", "ft-alt-1x", "ft-random-subset", "ft-subset-only", "ft-shuffled",
                            "increased-training"))
    p.add_argument("--loss", choices=("clm", "mm", "nll"), default="mm")
    p.add_argument("--mask", choices=("all", "pronoun"), default="all")
    p.add_argument("--upsample", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--inventory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="BLEU and pronoun precision / recall / F1")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--inventory")
    p.add_argument("--out", help="write the structured report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run a named variant end to end in a work directory")
    p.add_argument("variant")
    p.add_argument("--workdir", default="work")
    p.add_argument("--config")
    p.add_argument("--mode", choices=("sen2sen", "concat"), default="sen2sen")
    p.add_argument("--loss", choices=("clm", "mm", "nll"), default="clm")
    p.add_argument("--mask", choices=("all", "pronoun"), default="all")
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true", help="also print a one-line JSON summary")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("config-reference", help="print every config key with its default")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config_reference)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; report those as validation errors
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        rc = args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, MemoryError):
        raise
    except Exception as err:  # anything after validation is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return rc if isinstance(rc, int) else 0


if __name__ == "__main__":
    sys.exit(main())
