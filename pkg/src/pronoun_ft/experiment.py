"""End-to-end pipeline: data, baselines, extraction, fine-tuning variants, evaluation.

Every stage writes into its own directory under a shared work directory and
drops a ``stage.json`` marker holding the digest of the configuration it
depends on; a stage whose marker matches is reused instead of recomputed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time

from . import loss as L
from .align import align_corpus, write_pharaoh
from .config import ExperimentConfig
from .corpus import (
    ParallelCorpus,
    Vocab,
    build_vocab,
    generate_synthetic,
    read_prefix,
    write_parallel,
)
from .extract import (
    build_targeted_subset,
    find_pronoun_mismatches,
    load_inventory,
    sample_random_subset,
    write_mismatch_report,
)
from .metrics import corpus_bleu, parse_report, pronoun_prf, report_lines
from .model import (
    Checkpoint,
    ModelConfig,
    Seq2Seq,
    concat_input,
    init_model,
    load_checkpoint,
    save_checkpoint,
    translate_batch,
)
from .trainer import (
    Trainer,
    average_params,
    derive_seed,
    encode_corpus,
    ScheduleSpec,
    run_epochs,
    schedule_plan,
)

log = logging.getLogger(__name__)

BASELINES = ("baseline-sen2sen", "baseline-concat", "concat-random-context")
FINETUNES = (
    "ft-subset-only",
    "ft-shuffled",
    "ft-alt-1x",
    "ft-alt-2x",
    "ft-random-subset",
    "increased-training",
)
VARIANTS = BASELINES + FINETUNES

LOSS_KINDS = {"clm": "clm", "mm": "hybrid-mm", "nll": "hybrid-nll"}
MASKS = {"all": "all-tokens", "pronoun": "pronoun-only"}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def translate_corpus(model: Seq2Seq, corpus: ParallelCorpus, vocab: Vocab, decode_max_len=40,
                     context: str = "prev", batch_size: int = 200):
    """Greedy translations (token lists) of every source sentence.

    ``context`` only matters for concat models: ``prev`` uses the corpus'
    previous sentence, ``none`` an empty one. Random context is obtained by
    passing ``corpus.with_random_context(seed)``.
    """
    mode = model.config.mode
    max_len = model.config.max_len
    sources = []
    for i, s in enumerate(corpus.sources):
        if mode == "concat":
            prev = corpus.context(i) if context != "none" else []
            s = concat_input(prev, s, max_len)
        sources.append(vocab.encode(s))
    # decode in length-sorted chunks to limit padding
    order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
    out = [None] * len(sources)
    model.eval()
    for k in range(0, len(order), batch_size):
        idx = order[k : k + batch_size]
        hyps = translate_batch(model, [sources[i] for i in idx], decode_max_len)
        for i, h in zip(idx, hyps):
            out[i] = vocab.decode(h)
    return out


def evaluate_hyps(hyps, refs, pronouns) -> list:
    """Report lines (``key = value``) with BLEU and the pronoun scores."""
    return report_lines(corpus_bleu(hyps, refs), pronoun_prf(hyps, refs, pronouns))


def write_lines(path, sentences):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write((s if isinstance(s, str) else " ".join(s)) + "\n")
    os.replace(tmp, path)


def fresh_dir(path):
    os.makedirs(path, exist_ok=True)
    for f in os.listdir(path):
        os.remove(os.path.join(path, f))
    return path


def train_baseline(examples, config: ModelConfig, hyper, seed: int, out_dir, average_last: int = 10, meta=None):
    """Train from scratch with CLM, then save and return the average of the last checkpoints."""
    model = init_model(config, seed)
    trainer = Trainer(model, hyper, seed, fresh_dir(os.path.join(out_dir, "ckpt")), meta=meta)
    saved = trainer.train_steps(examples, L.LossSpec(kind="clm"))
    avg = average_params([load_checkpoint(p) for p in saved[-average_last:]], average_last)
    save_checkpoint(avg, os.path.join(out_dir, "model.ckpt"))
    return avg


def finetune_plan(variant: str, full, subset, spec, schedule: ScheduleSpec, mixed=None) -> list:
    """Epoch plan ``(label, examples, spec, passes)`` of a fine-tuning variant.

    ``subset`` is the targeted subset, or the random one for ft-random-subset;
    ``mixed`` is the concatenation of full data and subset, used by ft-shuffled.
    Full-data epochs of the alternating schedules always use CLM.
    """
    epochs = schedule.total_epochs
    if variant == "ft-subset-only":
        return [("P", subset, spec, 1)] * epochs
    if variant == "ft-shuffled":
        return [("D+P", mixed, spec, 1)] * epochs
    if variant == "increased-training":
        return [("D", full, spec, 1)] * epochs
    if variant in ("ft-alt-1x", "ft-alt-2x", "ft-random-subset"):
        factor = 1 if variant == "ft-alt-1x" else schedule.upsample_factor
        sched = dataclasses.replace(schedule, upsample_factor=factor)
        return schedule_plan(full, subset, sched, spec, L.LossSpec(kind="clm"))
    raise ValueError(f"not a fine-tuning variant: {variant!r}")


def finetune_model(base: Checkpoint, plan, hyper, seed: int, out_dir, average_last: int = 10, meta=None):
    """Run ``plan`` from ``base`` (fresh optimizer), save and return the averaged epoch checkpoints."""
    if any(not ex for _, ex, _, _ in plan):
        raise ValueError("fine-tuning plan contains an empty corpus")
    trainer = Trainer(base.to_model(), hyper, seed, fresh_dir(os.path.join(out_dir, "ckpt")), meta=meta)
    records = run_epochs(trainer, plan)
    ckpts = [load_checkpoint(r.checkpoint) for r in records]
    avg = average_params(ckpts, average_last)
    save_checkpoint(avg, os.path.join(out_dir, "model.ckpt"))
    return avg, records


class Workspace:
    def __init__(self, root, cfg: ExperimentConfig):
        self.root = os.fspath(root)
        self.cfg = cfg
        self.inventory = load_inventory()
        os.makedirs(self.root, exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    # -- stage bookkeeping -------------------------------------------------

    def _fresh(self, stage: str, digest: str) -> bool:
        marker = self.path(stage, "stage.json")
        if not os.path.exists(marker):
            return False
        with open(marker) as fh:
            return json.load(fh).get("digest") == digest

    def _mark(self, stage: str, digest: str, **extra):
        os.makedirs(self.path(stage), exist_ok=True)
        with open(self.path(stage, "stage.json"), "w") as fh:
            json.dump({"digest": digest, **extra}, fh, sort_keys=True, indent=1)

    # -- data ----------------------------------------------------------------

    def _key(self, *items) -> str:
        return hashlib.sha256(repr(items).encode()).hexdigest()[:16]

    def data_digest(self):
        ex = self.cfg.experiment
        return self._key(self.cfg.digest("corpus"), ex.test_docs, ex.test_seed)

    def baseline_digest(self):
        ex = self.cfg.experiment
        return self._key(
            self.data_digest(), self.cfg.digest("model", "train"), ex.seed, ex.average_last,
            ex.random_context_seed, ex.decode_max_len,
        )

    def extract_digest(self):
        ex = self.cfg.experiment
        return self._key(self.baseline_digest(), ex.align_iterations, ex.align_null, ex.unaligned_is_mismatch)

    def ensure_data(self):
        stage, digest = "data", self.data_digest()
        if not self._fresh(stage, digest):
            corpus_cfg = self.cfg.corpus
            train = generate_synthetic(corpus_cfg)
            test_cfg = dataclasses.replace(
                corpus_cfg, num_docs=self.cfg.experiment.test_docs, seed=self.cfg.experiment.test_seed
            )
            test = generate_synthetic(test_cfg)
            write_parallel(train, self.path(stage, "train"))
            write_parallel(test, self.path(stage, "test"))
            build_vocab(train.concatenated(test), "joint").save(self.path(stage, "vocab.txt"))
            self._mark(stage, digest, train_pairs=len(train), test_pairs=len(test))
        train = read_prefix(self.path(stage, "train"))
        test = read_prefix(self.path(stage, "test"))
        vocab = Vocab.load(self.path(stage, "vocab.txt"))
        return train, test, vocab

    # -- models --------------------------------------------------------------

    def model_config(self, vocab, mode) -> ModelConfig:
        shape = dataclasses.asdict(self.cfg.model)
        return ModelConfig(vocab_size=len(vocab), mode=mode, **shape)

    def _with_context(self, corpus: ParallelCorpus, context: str, label: str) -> ParallelCorpus:
        if context == "random":
            return corpus.with_random_context(derive_seed(self.cfg.experiment.random_context_seed, label))
        return corpus

    def encode(self, corpus, vocab, mode):
        return encode_corpus(corpus, vocab, mode, self.cfg.model.max_len, self.inventory.pronouns)

    def ensure_baseline(self, mode: str, context: str = "prev") -> str:
        name = {("sen2sen", "prev"): "baseline-sen2sen", ("concat", "prev"): "baseline-concat"}.get(
            (mode, context), "concat-random-context"
        )
        digest = self.baseline_digest()
        if self._fresh(name, digest):
            return self.path(name, "model.ckpt")
        train, test, vocab = self.ensure_data()
        train = self._with_context(train, context, "train")
        t0 = time.time()
        avg = train_baseline(
            self.encode(train, vocab, mode),
            self.model_config(vocab, mode),
            self.cfg.train,
            derive_seed(self.cfg.experiment.seed, name),
            self.path(name),
            self.cfg.experiment.average_last,
            meta={"variant": name, "context": context},
        )
        self.evaluate_to(name, avg.to_model(), test, vocab, context)
        self._mark(name, digest, seconds=round(time.time() - t0, 1))
        return self.path(name, "model.ckpt")

    # -- decoding and evaluation ---------------------------------------------

    def translate(self, model: Seq2Seq, corpus: ParallelCorpus, vocab: Vocab):
        return translate_corpus(model, corpus, vocab, self.cfg.experiment.decode_max_len)

    def evaluate_to(self, stage, model, test, vocab, context="prev") -> dict:
        test = self._with_context(test, context, "test")
        hyps = self.translate(model, test, vocab)
        write_lines(self.path(stage, "test.hyp"), hyps)
        lines = evaluate_hyps(hyps, test.targets, self.inventory.pronouns)
        with open(self.path(stage, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        vals = parse_report("\n".join(lines))
        return {"bleu": vals["bleu"], "macro_f1": 100 * vals["macro_f1"], "report": lines}

    # -- extraction ------------------------------------------------------------

    def ensure_subset(self, mode: str):
        stage = f"extract-{mode}"
        base = self.ensure_baseline(mode)
        digest = self.extract_digest()
        if not self._fresh(stage, digest):
            train, _, vocab = self.ensure_data()
            model = load_checkpoint(base).to_model()
            hyps = self.translate(model, train, vocab)
            refs = train.targets
            table, alignments = align_corpus(
                hyps, refs, self.cfg.experiment.align_iterations, self.cfg.experiment.align_null
            )
            os.makedirs(self.path(stage), exist_ok=True)
            write_lines(self.path(stage, "train.hyp"), hyps)
            write_pharaoh(alignments, self.path(stage, "train.align"))
            records = find_pronoun_mismatches(
                hyps, refs, alignments, self.inventory, self.cfg.experiment.unaligned_is_mismatch
            )
            write_mismatch_report(records, self.path(stage, "mismatches.tsv"))
            subset = build_targeted_subset(train, hyps, alignments, self.inventory, records)
            write_parallel(subset, self.path(stage, "prn"))
            rand = sample_random_subset(train, len(subset), derive_seed(self.cfg.experiment.seed, "rand", mode))
            write_parallel(rand, self.path(stage, "rand"))
            self._mark(stage, digest, subset_size=len(subset), mismatches=len(records), corpus_size=len(train))
        return read_prefix(self.path(stage, "prn")), read_prefix(self.path(stage, "rand"))

    # -- fine-tuning -----------------------------------------------------------

    def finetune(self, variant: str, mode: str, loss: str = "clm", mask: str = "all") -> dict:
        if variant not in FINETUNES:
            raise ValueError(f"not a fine-tuning variant: {variant}")
        spec = dataclasses.replace(self.cfg.loss, kind=LOSS_KINDS[loss], mask_policy=MASKS[mask])
        name = f"{variant}-{mode}-{loss}-{mask}"
        digest = self._key(self.extract_digest(), self.cfg.digest("finetune", "schedule", "loss"), loss, mask)
        if self._fresh(name, digest):
            return self._read_result(name)
        train, test, vocab = self.ensure_data()
        base_path = self.ensure_baseline(mode)
        subset, rand = self.ensure_subset(mode)
        if len(subset) == 0:
            raise RuntimeError(f"{name}: the targeted subset is empty, nothing to fine-tune on")
        part = rand if variant == "ft-random-subset" else subset
        mixed = self.encode(train.concatenated(subset), vocab, mode) if variant == "ft-shuffled" else None
        plan = finetune_plan(
            variant, self.encode(train, vocab, mode), self.encode(part, vocab, mode), spec, self.cfg.schedule, mixed
        )
        t0 = time.time()
        avg, records = finetune_model(
            load_checkpoint(base_path),
            plan,
            self.cfg.finetune,
            derive_seed(self.cfg.experiment.seed, name),
            self.path(name),
            self.cfg.experiment.average_last,
            meta={"variant": name},
        )
        result = self.evaluate_to(name, avg.to_model(), test, vocab)
        self._write_manifest(name, base_path, loss, mask, mode, [r.label for r in records], subset)
        self._mark(name, digest, seconds=round(time.time() - t0, 1))
        return result

    def _write_manifest(self, name, base_path, loss, mask, mode, pattern, subset):
        data = {
            "variant": name,
            "mode": mode,
            "loss": loss,
            "mask": mask,
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.experiment.seed,
            "epoch_pattern": pattern,
            "subset_size": len(subset),
            "inputs": {
                "train.src": sha256_file(self.path("data", "train.src")),
                "train.tgt": sha256_file(self.path("data", "train.tgt")),
                "test.src": sha256_file(self.path("data", "test.src")),
                "test.tgt": sha256_file(self.path("data", "test.tgt")),
                "baseline": sha256_file(base_path),
            },
            "outputs": {"model.ckpt": sha256_file(self.path(name, "model.ckpt"))},
        }
        with open(self.path(name, "manifest.json"), "w") as fh:
            json.dump(data, fh, sort_keys=True, indent=1)
        with open(self.path(name, "config.txt"), "w") as fh:
            fh.write(self.cfg.to_text())

    def _read_result(self, name) -> dict:
        with open(self.path(name, "report.txt"), encoding="utf-8") as fh:
            text = fh.read()
        vals = parse_report(text)
        return {"bleu": vals["bleu"], "macro_f1": 100 * vals["macro_f1"], "report": text.splitlines()}

    def baseline_result(self, mode: str, context: str = "prev") -> dict:
        self.ensure_baseline(mode, context)
        name = {("sen2sen", "prev"): "baseline-sen2sen", ("concat", "prev"): "baseline-concat"}.get(
            (mode, context), "concat-random-context"
        )
        return self._read_result(name)


def run_experiment(workdir, cfg: ExperimentConfig, variant: str, mode="sen2sen", loss="clm", mask="all") -> dict:
    ws = Workspace(workdir, cfg)
    if variant == "baseline-sen2sen":
        return ws.baseline_result("sen2sen")
    if variant == "baseline-concat":
        return ws.baseline_result("concat")
    if variant == "concat-random-context":
        return ws.baseline_result("concat", "random")
    if variant in FINETUNES:
        return ws.finetune(variant, mode, loss, mask)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
