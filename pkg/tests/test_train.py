"""Training loop: logging, checkpoints, resume, determinism."""

import json

import numpy as np
import pytest

from conftest import tiny_model_config
from multigrain.config import RunConfig, TrainConfig
from multigrain.corpus import CorpusSpec, build_vocab, generate_corpus, save_samples, split_corpus
from multigrain.errors import ConfigError, NumericError
from multigrain.model import ReportModel
from multigrain.tensor import Tensor
from multigrain.train import (
    epoch_log_line,
    evaluate_model,
    load_vocab,
    model_from_checkpoint,
    parse_log_line,
    run_training,
)
from multigrain.checkpoint import load_checkpoint


def tiny_run_config(spec, **train_overrides):
    cfg = RunConfig(model=tiny_model_config(max_len=96, dtype="f32"),
                    corpus=spec,
                    train=TrainConfig(epochs=2, batch_size=8, lr=1e-3,
                                      teacher_tags_frac=1.0, seed=13))
    for key, val in train_overrides.items():
        setattr(cfg.train, key, val)
    return cfg


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinydata")
    spec = CorpusSpec(count=24, grid=4, tag_vocab=6, p_abnormal=0.4,
                      seed=909, split=(16 / 24, 4 / 24, 4 / 24))
    splits = split_corpus(generate_corpus(spec), spec)
    for name, part in splits.items():
        save_samples(out / f"{name}.jsonl", part)
    build_vocab(splits["train"]).save(out / "vocab.txt")
    return out, spec


def test_log_line_roundtrip():
    line = epoch_log_line(3, 1.25, 2.5, 0.125, 0.75)
    parsed = parse_log_line(line)
    assert parsed["epoch"] == 3
    assert parsed["train_loss"] == pytest.approx(1.25)
    assert parsed["val_bleu4"] == pytest.approx(0.125)

    dashes = epoch_log_line(0, 1.0, None, None, None)
    parsed = parse_log_line(dashes)
    assert parsed["val_loss"] is None


def test_run_training_writes_artifacts(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    out = tmp_path / "run"
    result = run_training(tiny_run_config(spec), data_dir, out)

    assert (out / "train.log").exists()
    assert (out / "last.ckpt").exists()
    assert (out / "best.ckpt").exists()
    assert result.epochs_run == 2
    assert result.final_train_loss is not None

    lines = (out / "train.log").read_text().splitlines()
    epoch_lines = [l for l in lines if l.startswith("epoch\t")]
    assert len(epoch_lines) == 2
    assert lines[-1] == "done\tepochs\t2"
    for line in epoch_lines:
        assert parse_log_line(line)["train_loss"] > 0


def test_training_log_is_deterministic(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    run_training(tiny_run_config(spec), data_dir, tmp_path / "a")
    run_training(tiny_run_config(spec), data_dir, tmp_path / "b")
    log_a = (tmp_path / "a" / "train.log").read_bytes()
    log_b = (tmp_path / "b" / "train.log").read_bytes()
    assert log_a == log_b


def test_resume_extends_bitwise(tmp_path, tiny_data):
    data_dir, spec = tiny_data

    out_full = tmp_path / "full"
    run_training(tiny_run_config(spec, epochs=4), data_dir, out_full)

    out_split = tmp_path / "split"
    run_training(tiny_run_config(spec, epochs=2), data_dir, out_split)
    run_training(tiny_run_config(spec, epochs=4), data_dir, out_split, resume=True)

    full = load_checkpoint(out_full / "last.ckpt")
    part = load_checkpoint(out_split / "last.ckpt")
    assert full.epoch == part.epoch == 4
    assert full.opt_step == part.opt_step
    fa, pa = full.param_arrays(), part.param_arrays()
    assert set(fa) == set(pa)
    for name in fa:
        np.testing.assert_array_equal(fa[name], pa[name], err_msg=name)


def test_resume_rejects_changed_model(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    out = tmp_path / "run"
    run_training(tiny_run_config(spec), data_dir, out)
    changed = tiny_run_config(spec, epochs=4)
    changed.model.n_rounds = 1
    with pytest.raises(ConfigError):
        run_training(changed, data_dir, out, resume=True)


def test_resume_after_completion_is_a_no_op(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    out = tmp_path / "run"
    run_training(tiny_run_config(spec), data_dir, out)
    before = load_checkpoint(out / "last.ckpt").param_arrays()
    result = run_training(tiny_run_config(spec), data_dir, out, resume=True)
    assert result.epochs_run == 0
    after = load_checkpoint(out / "last.ckpt").param_arrays()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])


def test_zero_epochs_saves_initial_state(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    out = tmp_path / "run"
    result = run_training(tiny_run_config(spec, epochs=0), data_dir, out)
    assert result.epochs_run == 0
    assert (out / "last.ckpt").exists()
    assert (out / "best.ckpt").exists()
    log = (out / "train.log").read_text()
    assert "train_loss\t-" in log


def test_early_stop_when_metric_stalls(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    out = tmp_path / "run"
    # a learning rate this small freezes the model, so the validation
    # metric never improves after the first measurement
    cfg = tiny_run_config(spec, epochs=6, lr=1e-12, patience=1, eval_every=1)
    result = run_training(cfg, data_dir, out)
    assert result.epochs_run < 6
    assert "early_stop\t" in (out / "train.log").read_text()


def pathway_split(arrays):
    frozen = {k: v for k, v in arrays.items()
              if k.startswith("patch.") or k in ("tags.w", "tags.b")}
    rest = {k: v for k, v in arrays.items() if k not in frozen}
    return frozen, rest


def test_tag_pretraining_logs_then_freezes_pathway(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    cfg = tiny_run_config(spec, tag_pretrain_epochs=12)
    run_training(cfg, data_dir, tmp_path / "full")
    run_training(tiny_run_config(spec, tag_pretrain_epochs=12, epochs=0),
                 data_dir, tmp_path / "head_only")

    lines = (tmp_path / "full" / "train.log").read_text().splitlines()
    pre = [l for l in lines if l.startswith("pretrain\t")]
    assert len(pre) == 12
    assert lines.index(pre[-1]) < lines.index(next(l for l in lines if l.startswith("epoch\t")))
    first = float(pre[0].split("\t")[3])
    last = float(pre[-1].split("\t")[3])
    assert last < first

    # the pathway stops moving once the main phase starts; the rest does not
    after_main = load_checkpoint(tmp_path / "full" / "last.ckpt").param_arrays()
    after_pre = load_checkpoint(tmp_path / "head_only" / "last.ckpt").param_arrays()
    frozen_a, rest_a = pathway_split(after_main)
    frozen_b, rest_b = pathway_split(after_pre)
    for name in frozen_a:
        np.testing.assert_array_equal(frozen_a[name], frozen_b[name])
    assert any(not np.array_equal(rest_a[name], rest_b[name]) for name in rest_a)


def test_resume_with_pretrained_pathway_is_bitwise(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    straight = tmp_path / "straight"
    resumed = tmp_path / "resumed"
    run_training(tiny_run_config(spec, tag_pretrain_epochs=4, epochs=4), data_dir, straight)
    run_training(tiny_run_config(spec, tag_pretrain_epochs=4, epochs=2), data_dir, resumed)
    result = run_training(tiny_run_config(spec, tag_pretrain_epochs=4, epochs=4),
                          data_dir, resumed, resume=True)
    assert result.epochs_run == 2
    a = load_checkpoint(straight / "last.ckpt").param_arrays()
    b = load_checkpoint(resumed / "last.ckpt").param_arrays()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_pretraining_requires_alignment(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    cfg = tiny_run_config(spec, tag_pretrain_epochs=2)
    cfg.model.use_alignment = False
    with pytest.raises(ConfigError):
        run_training(cfg, data_dir, tmp_path / "run")


def test_checkpoint_rebuilds_model_and_evaluates(tmp_path, tiny_data):
    data_dir, spec = tiny_data
    out = tmp_path / "run"
    run_training(tiny_run_config(spec), data_dir, out)

    cfg, model, vocab = model_from_checkpoint(load_checkpoint(out / "last.ckpt"))
    assert cfg.model.d == 8
    assert vocab.id_to_token == load_vocab(data_dir).id_to_token

    from multigrain.corpus import load_samples
    test_samples = load_samples(data_dir / "test.jsonl")
    report, texts = evaluate_model(model, test_samples, vocab)
    assert len(texts) == len(test_samples)
    assert 0.0 <= report.rouge_l <= 1.0
    assert len(report.bleu) == 4


def test_nonfinite_loss_writes_diagnostic(tmp_path, tiny_data, monkeypatch):
    data_dir, spec = tiny_data
    out = tmp_path / "run"

    def poisoned(self, batch, teacher_tags=True, train=True, lambda_tag=0.5):
        bad = float("nan")
        return Tensor(np.float64(bad)), {"report": bad, "total": bad}

    monkeypatch.setattr(ReportModel, "batch_loss", poisoned)
    with pytest.raises(NumericError, match="epoch 0 step 0"):
        run_training(tiny_run_config(spec), data_dir, out)
    diag = json.loads((out / "diagnostic.json").read_text())
    assert diag["epoch"] == 0
    assert diag["batch"]


def test_single_sample_overfit_drives_loss_down(tmp_path):
    # memorize one report: loss under 0.05 within 300 epochs
    out_dir = tmp_path / "one"
    out_dir.mkdir()
    spec = CorpusSpec(count=1, grid=4, tag_vocab=6, p_abnormal=1.0,
                      seed=31, split=(1.0, 0.0, 0.0))
    samples = generate_corpus(spec)
    save_samples(out_dir / "train.jsonl", samples)
    build_vocab(samples).save(out_dir / "vocab.txt")

    cfg = tiny_run_config(spec, epochs=300, lr=3e-3, batch_size=1, eval_every=0)
    result = run_training(cfg, out_dir, tmp_path / "run")
    assert result.final_train_loss < 0.05
