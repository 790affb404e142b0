import pytest

from fd2 import cli
from fd2.config import PipelineConfig, dump
from fd2.errors import ConfigError, StateError
from fd2.pipeline import RunManifest, fingerprint_tree, run_pipeline

TINY = ["image_size = 48", "num_classes = 3", "toy_train_per_class = 6", "toy_val_per_class = 2",
        "toy_test_per_class = 2", "channels = 4,8", "num_attention_maps = 2", "pretrain_epochs = 1",
        "pretrain_batch = 8", "ipc = 2", "distill_steps = 2", "student_epochs = 2", "student_batch = 4",
        "student_arch = convnet3"]


def tiny_config(out, **kw):
    return PipelineConfig(image_size=48, num_classes=3, toy_train_per_class=6, toy_val_per_class=2,
                          toy_test_per_class=2, channels=(4, 8), num_attention_maps=2, pretrain_epochs=1,
                          pretrain_batch=8, ipc=2, distill_steps=2, student_epochs=2, student_batch=4,
                          student_arch="convnet3", out_dir=str(out), **kw)


def test_missing_upstream_names_the_producer(tmp_path):
    with pytest.raises(StateError, match="stage 'pretrain'"):
        run_pipeline(tiny_config(tmp_path), ["distill"])
    with pytest.raises(ConfigError):
        run_pipeline(tiny_config(tmp_path), ["bake"])


def test_full_pipeline_is_reproducible(tmp_path):
    stages = ["pretrain", "distill", "softlabel", "eval", "metrics"]
    a = run_pipeline(tiny_config(tmp_path / "a"), stages)
    b = run_pipeline(tiny_config(tmp_path / "b"), stages)
    produced = [p for _, p, _ in a.artifacts]
    assert produced == ["teacher.fd2c", "distilled", "softlabels.fd2l", "eval.txt", "metrics.txt", "projection.txt"]
    assert a.artifacts == b.artifacts
    assert fingerprint_tree(tmp_path / "a" / "distilled") == fingerprint_tree(tmp_path / "b" / "distilled")
    text = (tmp_path / "a" / "manifest.txt").read_text()
    back = RunManifest.from_text(text)
    assert back.artifacts == a.artifacts and back.seeds == {"seed": 0}
    assert set(back.timings) == set(stages)


def test_rerunning_a_stage_keeps_earlier_artifacts(tmp_path):
    cfg = tiny_config(tmp_path)
    first = run_pipeline(cfg, ["pretrain", "distill"])
    again = run_pipeline(cfg, ["distill"])
    assert again.artifacts == first.artifacts


def test_cli_verify_theory_needs_no_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("dataset_kind = folder\ndataset_path = /nonexistent\n")
    assert cli.main(["verify-theory", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 6


def test_cli_reports_missing_teacher(tmp_path, capsys):
    assert cli.main(["distill", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "teacher.fd2c" in err and "pretrain" in err


def test_cli_rejects_bad_config(tmp_path, capsys):
    assert cli.main(["pretrain", "--set", "lambda=2", "--out", str(tmp_path)]) == 2
    assert "lambda" in capsys.readouterr().err


def test_cli_overrides_and_config_file(tmp_path):
    path = tmp_path / "c.cfg"
    dump(PipelineConfig(seed=3, lam=0.2), path)
    args = cli.build_parser().parse_args(["run", "--config", str(path), "--seed", "5", "--set", "ipc=7",
                                          "--no-deterministic", "--out", "x", "--stages", "pretrain,distill"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.lam, cfg.ipc, cfg.deterministic, cfg.out_dir) == (5, 0.2, 7, False, "x")
    assert args.stages == "pretrain,distill"


def test_cli_gen_toy_data_and_tiny_run(tmp_path, capsys):
    data = tmp_path / "toy"
    assert cli.main(["gen-toy-data", "--out", str(data)] + sum((["--set", s] for s in TINY), [])) == 0
    assert sorted(p.name for p in data.iterdir()) == ["test", "train", "val"]
    sets = sum((["--set", s] for s in TINY + ["dataset_kind = folder", f"dataset_path = {data}"]), [])
    code = cli.main(["run", "--out", str(tmp_path / "run"), "--stages", "pretrain,distill,softlabel,eval"] + sets)
    assert code == 0
    assert "top1 = " in capsys.readouterr().out
