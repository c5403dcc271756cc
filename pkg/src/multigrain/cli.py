"""Command-line harness: gen-data, train, eval, generate, ablate.

Every command resolves a RunConfig (preset or config file, then flag
overrides), validates it, and echoes the result as ``config.json`` next
to its outputs. Exit codes: 0 success, 2 configuration or checkpoint
problems, 3 data problems, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import copy
import subprocess
import sys
from pathlib import Path

import numpy as np

from .attention import ProbeLog
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, resolve_preset
from .corpus import (
    TAG_NAMES,
    Vocabulary,
    build_vocab,
    corpus_stats,
    generate_corpus,
    load_samples,
    save_samples,
    split_corpus,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MultigrainError,
    NumericError,
)
from .metrics import EVAL_HEADER
from .train import evaluate_model, load_split, model_from_checkpoint, run_training

PAPER_REFERENCE_ROWS = [
    # fixed reference scores printed for context; not produced by this code
    ("reference-baseline", 0.138),
    ("reference-full-n3", 0.173),
]


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config_path = getattr(args, "config", None)
    preset = getattr(args, "preset", None)
    if config_path and preset:
        raise ConfigError("pass either --config or --preset, not both")
    if config_path:
        cfg = load_config(config_path)
    else:
        cfg = resolve_preset(preset or "desk")
    norm = getattr(args, "norm", None)
    if norm:
        cfg.model.norm_mode = norm
    n_rounds = getattr(args, "n_rounds", None)
    if n_rounds is not None:
        cfg.model.n_rounds = n_rounds
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        cfg.train.epochs = epochs
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg.corpus.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    _echo_config(cfg, out)

    samples = generate_corpus(cfg.corpus)
    splits = split_corpus(samples, cfg.corpus)
    for name, part in splits.items():
        if part:
            save_samples(out / f"{name}.jsonl", part)
    if not splits["train"]:
        raise DataError("the split ratios leave the training set empty")
    vocab = build_vocab(splits["train"], cfg.corpus.min_freq)
    vocab.save(out / "vocab.txt")

    stats = corpus_stats(samples)
    print("\t".join([
        "samples", str(stats["samples"]),
        "abnormal_fraction", f"{stats['abnormal_fraction']:.4f}",
        "vocab_size", str(len(vocab)),
        "train", str(len(splits["train"])),
        "val", str(len(splits["val"])),
        "test", str(len(splits["test"])),
        "max_report_tokens", str(stats["max_report_tokens"]),
    ]))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    _echo_config(cfg, out)
    result = run_training(cfg, Path(args.data), out, resume=args.resume, log=print)
    print("\t".join(["best_checkpoint", str(result.best_path)]))
    return 0


def _check_vocab_match(vocab: Vocabulary, data_dir: Path) -> None:
    vocab_file = data_dir / "vocab.txt"
    if vocab_file.exists():
        disk = Vocabulary.load(vocab_file)
        if disk.id_to_token != vocab.id_to_token:
            raise ConfigError(
                "checkpoint vocabulary does not match the data directory's vocab.txt")


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(Path(args.ckpt))
    cfg, model, vocab = model_from_checkpoint(ckpt)
    data_dir = Path(args.data)
    _check_vocab_match(vocab, data_dir)
    samples = load_split(data_dir, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    report, texts = evaluate_model(model, samples, vocab, beam=args.beam)
    print(EVAL_HEADER)
    print(report.format_row(f"{args.split}@{Path(args.ckpt).name}"))
    if args.out:
        out = Path(args.out)
        _echo_config(cfg, out)
        (out / f"eval_{args.split}.txt").write_text(report.to_kv_text(), encoding="utf-8")
        with open(out / f"generations_{args.split}.txt", "w", encoding="utf-8") as fh:
            for sample, text in zip(samples, texts):
                fh.write(f"{sample.sample_id}\t{text}\n")
    return 0


def _find_sample(data_dir: Path, sample_id: str):
    for split in ("train", "val", "test"):
        path = data_dir / f"{split}.jsonl"
        if not path.exists():
            continue
        for sample in load_samples(path):
            if sample.sample_id == sample_id:
                return sample
    raise DataError(f"sample {sample_id!r} not found under {data_dir}")


def _dump_attention(probes: ProbeLog, out_dir: Path, n_heads: int) -> list[Path]:
    """Write head-averaged alignment weights and gate summaries as TSV."""
    att_dir = out_dir / "attention"
    att_dir.mkdir(parents=True, exist_ok=True)
    written = []

    round_keys = sorted({k.rsplit(".h", 1)[0] for k in probes.keys()
                         if ".tags_over_regions.h" in k})
    for base in round_keys:
        heads = [probes.get(f"{base}.h{i}")[0] for i in range(n_heads)]
        mean = np.mean([h[0] for h in heads], axis=0)  # (N_T, keys)
        path = att_dir / (base.replace(".", "_") + ".tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# rows: selected tag slots; columns: attended keys; head-averaged\n")
            for row in mean:
                fh.write("\t".join(f"{v:.6f}" for v in row) + "\n")
        written.append(path)

    lambda_keys = sorted(k for k in probes.keys() if ".lambda" in k)
    if lambda_keys:
        path = att_dir / "fuse_lambda.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("source\tposition\tmean_gate\n")
            for key in lambda_keys:
                gates = probes.get(key)[0]  # (1, T, d)
                for pos, row in enumerate(gates[0]):
                    fh.write(f"{key}\t{pos}\t{float(row.mean()):.6f}\n")
        written.append(path)
    return written


def cmd_generate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(Path(args.ckpt))
    cfg, model, vocab = model_from_checkpoint(ckpt)
    data_dir = Path(args.data)
    _check_vocab_match(vocab, data_dir)
    sample = _find_sample(data_dir, args.sample_id)

    ids, score = model.generate(sample.grid, beam=args.beam)
    text = vocab.decode(ids)
    print(f"sample\t{sample.sample_id}")
    print(f"beam\t{args.beam}")
    print(f"score\t{score:.6f}")
    print(f"generated\t{text}")
    print(f"reference\t{sample.report}")
    names = ",".join(TAG_NAMES[t] for t in sample.tags) if sample.tags else "-"
    print(f"gold_tags\t{names}")

    if args.dump_attention:
        out = Path(args.out) if args.out else Path(".")
        probes = ProbeLog()
        tokens = np.asarray(ids, dtype=np.int64)[None, :]
        model.logits(sample.grid[None, ...], tokens, train=False, probes=probes)
        for path in _dump_attention(probes, out, cfg.model.n_heads):
            print(f"wrote\t{path}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    _echo_config(cfg, out)

    if args.data:
        data_dir = Path(args.data)
    else:
        data_dir = out / "corpus"
        if not (data_dir / "train.jsonl").exists():
            _echo_config(cfg, data_dir)
            samples = generate_corpus(cfg.corpus)
            splits = split_corpus(samples, cfg.corpus)
            for name, part in splits.items():
                if part:
                    save_samples(data_dir / f"{name}.jsonl", part)
            build_vocab(splits["train"], cfg.corpus.min_freq).save(data_dir / "vocab.txt")

    n_values = [int(v) for v in args.n_values.split(",") if v.strip()]
    if not n_values:
        raise ConfigError("--n-values must name at least one round count")

    rows: list[tuple[str, RunConfig, Path]] = []
    base = copy.deepcopy(cfg)
    base.model.use_alignment = False
    rows.append(("baseline", base, out / "baseline"))
    for k in n_values:
        variant = copy.deepcopy(cfg)
        variant.model.use_alignment = True
        variant.model.n_rounds = k
        rows.append((f"align-n{k}", variant, out / f"align_n{k}"))

    if args.parallel:
        procs = []
        for label, row_cfg, row_dir in rows:
            row_dir.mkdir(parents=True, exist_ok=True)
            cfg_path = row_dir / "config.json"
            cfg_path.write_text(row_cfg.to_json(), encoding="utf-8")
            procs.append((label, subprocess.Popen(
                [sys.executable, "-m", "multigrain", "train",
                 "--config", str(cfg_path), "--data", str(data_dir),
                 "--out", str(row_dir)],
                stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)))
        for label, proc in procs:
            _, err = proc.communicate()
            if proc.returncode != 0:
                raise MultigrainError(
                    f"ablation row {label!r} failed:\n{err.decode(errors='replace')}")
    else:
        for label, row_cfg, row_dir in rows:
            run_training(row_cfg, data_dir, row_dir, resume=False, log=None)

    print(EVAL_HEADER)
    lines = [EVAL_HEADER]
    for label, row_cfg, row_dir in rows:
        ckpt = load_checkpoint(row_dir / "best.ckpt")
        _, model, vocab = model_from_checkpoint(ckpt)
        samples = load_split(data_dir, "test")
        report, _ = evaluate_model(model, samples, vocab)
        line = report.format_row(label)
        print(line)
        lines.append(line)
    for label, bleu4 in PAPER_REFERENCE_ROWS:
        line = "\t".join([label, "-", "-", "-", f"{bleu4:.3f}", "-", "-", "paper, not reproduced"])
        print(line)
        lines.append(line)
    (out / "ablate.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multigrain",
        description="train and probe a grid-image report generator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="path to a RunConfig JSON file")
        p.add_argument("--preset", choices=["desk", "paper"], help="named base configuration")
        p.add_argument("--seed", type=int, default=None, help="override the relevant seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    common(p)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    p.add_argument("--norm", choices=["plain", "mcln"], help="layer-norm conditioning mode")
    p.add_argument("--n-rounds", type=int, dest="n_rounds", help="alignment round count")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    p.add_argument("--out", help="optional directory for metric and generation files")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="decode one report from one sample")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--sample-id", required=True, dest="sample_id")
    p.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    p.add_argument("--dump-attention", action="store_true", dest="dump_attention",
                   help="write alignment weights and gate summaries as TSV")
    p.add_argument("--out", help="directory for attention dumps (default: cwd)")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("ablate", help="train and compare alignment variants")
    common(p)
    p.add_argument("--data", help="shared corpus directory (generated if omitted)")
    p.add_argument("--n-values", default="1,2,3", dest="n_values",
                   help="comma-separated alignment round counts")
    p.add_argument("--norm", choices=["plain", "mcln"], help="layer-norm conditioning mode")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--parallel", action="store_true",
                   help="train rows in separate processes")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
