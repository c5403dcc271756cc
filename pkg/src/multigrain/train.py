"""Training loop, split evaluation, and checkpoint wiring.

One epoch walks shuffled minibatches, backprops the combined report/tag
loss, clips the global gradient norm, and steps Adam. Every epoch ends
with a machine-parseable log line; ``last.ckpt`` always holds the newest
state (parameters, optimizer moments, rng streams, epoch counter) so a
run can resume exactly, and ``best.ckpt`` tracks the best validation
BLEU-4 (falling back to the final epoch when there is no val split).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, load_params_into, save_checkpoint
from .config import RunConfig
from .corpus import Sample, Vocabulary, batch_iter, load_samples, make_batch
from .errors import ConfigError, DataError, NumericError
from .metrics import EvalReport, evaluate_generations
from .model import ReportModel
from .optim import Adam, clip_global_norm
from .tensor import Tape

LogFn = Callable[[str], None]


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6f}"


def epoch_log_line(epoch: int, train_loss: float, val_loss: Optional[float],
                   val_bleu4: Optional[float], val_recall: Optional[float]) -> str:
    return "\t".join([
        "epoch", str(epoch),
        "train_loss", _fmt(train_loss),
        "val_loss", _fmt(val_loss),
        "val_bleu4", _fmt(val_bleu4),
        "val_recall", _fmt(val_recall),
    ])


def parse_log_line(line: str) -> dict:
    """Key/value cells back to typed fields; '-' reads as None."""
    cells = line.rstrip("\n").split("\t")
    out: dict = {}
    for i in range(0, len(cells) - 1, 2):
        key, raw = cells[i], cells[i + 1]
        if raw == "-":
            out[key] = None
        elif key == "epoch":
            out[key] = int(raw)
        else:
            try:
                out[key] = float(raw)
            except ValueError:
                out[key] = raw
    return out


def load_split(data_dir: Path, split: str) -> list[Sample]:
    return load_samples(Path(data_dir) / f"{split}.jsonl")


def load_vocab(data_dir: Path) -> Vocabulary:
    return Vocabulary.load(Path(data_dir) / "vocab.txt")


def generate_reports(model: ReportModel, samples: Sequence[Sample], vocab: Vocabulary,
                     beam: int = 1) -> list[str]:
    texts = []
    for sample in samples:
        ids, _ = model.generate(sample.grid, beam=beam)
        texts.append(vocab.decode(ids))
    return texts


def evaluate_model(model: ReportModel, samples: Sequence[Sample], vocab: Vocabulary,
                   beam: int = 1) -> tuple[EvalReport, list[str]]:
    """Greedy (or beam) generation over a split plus its metric bundle."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    texts = generate_reports(model, samples, vocab, beam)
    return evaluate_generations(texts, samples), texts


def split_loss(model: ReportModel, samples: Sequence[Sample], vocab: Vocabulary,
               cfg: RunConfig, lambda_tag: Optional[float] = None) -> float:
    """Teacher-forced loss over a split, eval mode, predicted tags."""
    total = 0.0
    count = 0
    lam = cfg.train.lambda_tag if lambda_tag is None else lambda_tag
    for start in range(0, len(samples), cfg.train.batch_size):
        batch = make_batch(samples[start:start + cfg.train.batch_size], vocab,
                           cfg.model.tag_vocab, cfg.model.max_len)
        loss, _ = model.batch_loss(batch, teacher_tags=False, train=False,
                                   lambda_tag=lam)
        total += float(loss.data) * len(batch.sample_ids)
        count += len(batch.sample_ids)
    return total / max(count, 1)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[RunConfig, ReportModel, Vocabulary]:
    """Rebuild a model exactly as a checkpoint describes it."""
    cfg = RunConfig.from_dict(ckpt.config)
    cfg.validate()
    vocab_tokens = ckpt.meta.get("vocab")
    if not vocab_tokens:
        raise ConfigError("checkpoint carries no vocabulary")
    vocab = Vocabulary(vocab_tokens)
    model = ReportModel(cfg.model, len(vocab), seed=cfg.train.seed)
    load_params_into(model.params(), ckpt.param_arrays())
    if ckpt.rng_state:
        model.hub.load_state(ckpt.rng_state)
    return cfg, model, vocab


def _write_diagnostic(out_dir: Path, payload: dict) -> None:
    try:
        (out_dir / "diagnostic.json").write_text(json.dumps(payload, indent=2) + "\n")
    except OSError:
        pass


class TrainResult:
    def __init__(self, epochs_run: int, best_metric: Optional[float], best_path: Path,
                 last_path: Path, final_train_loss: Optional[float]):
        self.epochs_run = epochs_run
        self.best_metric = best_metric
        self.best_path = best_path
        self.last_path = last_path
        self.final_train_loss = final_train_loss


def run_training(cfg: RunConfig, data_dir: Path, out_dir: Path,
                 resume: bool = False, log: Optional[LogFn] = None) -> TrainResult:
    cfg.validate()
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_samples = load_split(data_dir, "train")
    if not train_samples:
        raise DataError(f"no training samples under {data_dir}")
    val_path = data_dir / "val.jsonl"
    val_samples = load_samples(val_path) if val_path.exists() else []
    vocab = load_vocab(data_dir)

    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train.log"

    model = ReportModel(cfg.model, len(vocab), seed=cfg.train.seed)
    pretrain_epochs = cfg.train.tag_pretrain_epochs
    if pretrain_epochs > 0 and not cfg.model.use_alignment:
        raise ConfigError("tag_pretrain_epochs requires alignment to be enabled")
    # two-phase mode: the tag pathway trains alone first, then stays frozen,
    # and the tag term leaves the main loss for good
    tag_pathway = model.tag_pathway_params() if pretrain_epochs > 0 else {}
    lambda_tag = 0.0 if tag_pathway else cfg.train.lambda_tag
    trainable = {k: p for k, p in model.params().items() if k not in tag_pathway}
    adam = Adam(trainable, lr=cfg.train.lr, beta1=cfg.train.beta1,
                beta2=cfg.train.beta2, eps=cfg.train.adam_eps)

    start_epoch = 0
    best_metric: Optional[float] = None
    stale = 0
    if resume:
        ckpt = load_checkpoint(last_path)
        # a resumed run may extend the epoch budget; everything else must match
        saved_cfg = {k: dict(v) for k, v in ckpt.config.items()}
        live_cfg = {k: dict(v) for k, v in cfg.to_dict().items()}
        saved_cfg["train"].pop("epochs", None)
        live_cfg["train"].pop("epochs", None)
        if saved_cfg != live_cfg:
            raise ConfigError("resume config does not match the checkpointed run")
        load_params_into(model.params(), ckpt.param_arrays())
        adam.load_state({"t": ckpt.opt_step, "m": ckpt.moment_arrays("m"),
                         "v": ckpt.moment_arrays("v")})
        if ckpt.rng_state:
            model.hub.load_state(ckpt.rng_state)
        start_epoch = ckpt.epoch
        best_metric = ckpt.meta.get("best_metric")
        stale = int(ckpt.meta.get("stale_epochs", 0))

    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8")

    def emit(line: str) -> None:
        log_fh.write(line + "\n")
        log_fh.flush()
        if log is not None:
            log(line)

    meta_base = {"vocab": vocab.id_to_token}

    def save(path: Path, epoch: int, extra: dict) -> None:
        save_checkpoint(path, cfg.to_dict(), model.params(), epoch=epoch,
                        rng_state=model.hub.state(), opt=adam,
                        meta={**meta_base, **extra})

    teacher_limit = cfg.train.teacher_tags_frac * cfg.train.epochs
    final_train_loss: Optional[float] = None
    completed = start_epoch
    try:
        if tag_pathway and not resume:
            head_adam = Adam(tag_pathway, lr=cfg.train.lr, beta1=cfg.train.beta1,
                             beta2=cfg.train.beta2, eps=cfg.train.adam_eps)
            for epoch in range(pretrain_epochs):
                losses = []
                for step, batch in enumerate(batch_iter(
                        train_samples, vocab, cfg.model.tag_vocab,
                        cfg.train.batch_size, cfg.train.seed, epoch, cfg.model.max_len)):
                    with Tape() as tape:
                        probs = model.tag_probs(batch.grids)
                        loss = model.tags.loss(probs, batch.tag_hot)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        _write_diagnostic(out_dir, {
                            "reason": "non-finite tag pretraining loss",
                            "epoch": epoch, "step": step,
                            "batch": batch.sample_ids,
                        })
                        raise NumericError(
                            f"non-finite loss at pretrain epoch {epoch} step {step}; "
                            "see diagnostic.json")
                    tape.backward(loss)
                    tape.reset()
                    clip_global_norm(tag_pathway, cfg.train.grad_clip)
                    head_adam.step()
                    losses.append(value)
                emit(f"pretrain\t{epoch}\ttag_loss\t{np.mean(losses):.6f}")
        for p in tag_pathway.values():
            p.requires_grad = False

        if cfg.train.epochs == 0:
            save(last_path, 0, {"best_metric": None, "stale_epochs": 0})
            save(best_path, 0, {"best_metric": None})
            emit("epoch\t0\ttrain_loss\t-\tval_loss\t-\tval_bleu4\t-\tval_recall\t-")
            return TrainResult(0, None, best_path, last_path, None)

        for epoch in range(start_epoch, cfg.train.epochs):
            teacher_tags = epoch < teacher_limit
            losses = []
            for step, batch in enumerate(batch_iter(
                    train_samples, vocab, cfg.model.tag_vocab,
                    cfg.train.batch_size, cfg.train.seed, epoch, cfg.model.max_len)):
                with Tape() as tape:
                    loss, _ = model.batch_loss(batch, teacher_tags=teacher_tags,
                                               train=True, lambda_tag=lambda_tag)
                value = float(loss.data)
                if not math.isfinite(value):
                    _write_diagnostic(out_dir, {
                        "reason": "non-finite training loss",
                        "epoch": epoch, "step": step,
                        "batch": batch.sample_ids,
                    })
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}; see diagnostic.json")
                tape.backward(loss)
                tape.reset()
                clip_global_norm(model.params(), cfg.train.grad_clip)
                adam.step()
                losses.append(value)
            train_loss = float(np.mean(losses))
            final_train_loss = train_loss

            val_loss = None
            val_bleu4 = None
            val_recall = None
            if val_samples:
                val_loss = split_loss(model, val_samples, vocab, cfg, lambda_tag=lambda_tag)
                due = cfg.train.eval_every > 0 and (
                    (epoch + 1) % cfg.train.eval_every == 0 or epoch + 1 == cfg.train.epochs)
                if due:
                    report, _ = evaluate_model(model, val_samples, vocab)
                    val_bleu4 = report.bleu[3]
                    val_recall = report.abnormality_recall
                    if best_metric is None or val_bleu4 > best_metric:
                        best_metric = val_bleu4
                        stale = 0
                        save(best_path, epoch + 1, {"best_metric": best_metric})
                    else:
                        stale += 1

            completed = epoch + 1
            emit(epoch_log_line(epoch, train_loss, val_loss, val_bleu4, val_recall))
            save(last_path, completed, {"best_metric": best_metric, "stale_epochs": stale})

            if cfg.train.patience > 0 and val_samples and stale >= cfg.train.patience:
                emit(f"early_stop\t{epoch}\tstale\t{stale}")
                break

        if completed > start_epoch and (not val_samples or best_metric is None):
            # no validation signal: the final state is the best we know
            save(best_path, completed, {"best_metric": best_metric})
        # wall time stays out of the log file so identical seeds give
        # byte-identical logs
        emit(f"done\tepochs\t{completed - start_epoch}")
    finally:
        log_fh.close()
    return TrainResult(completed - start_epoch, best_metric, best_path, last_path,
                       final_train_loss)
