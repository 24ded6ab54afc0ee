import json

from warpgrad.cli import main


def test_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "bilinear_sample", "--seed", "1"]) == 0
    assert "bilinear_sample" in capsys.readouterr().out


def test_gradcheck_report_is_deterministic(capsys):
    main(["gradcheck", "--op", "local_attention_warp", "--seed", "3"])
    first = capsys.readouterr().out
    main(["gradcheck", "--op", "local_attention_warp", "--seed", "3"])
    assert capsys.readouterr().out == first


def test_gradcheck_failure_exit_code(capsys):
    # a tolerance no finite-difference estimate can meet
    assert main(["gradcheck", "--op", "exp", "--tol", "1e-30"]) == 1
    assert "exp" in capsys.readouterr().err


def test_gradcheck_unknown_op(capsys):
    assert main(["gradcheck", "--op", "nope"]) == 2
    assert "unknown op" in capsys.readouterr().err


def test_gradcheck_list(capsys):
    assert main(["gradcheck", "--list"]) == 0
    names = capsys.readouterr().out.split()
    assert {"matmul", "local_attention_warp", "affine_regularization", "adaln"} <= set(names)


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train-flow", "--seed", "x"]) == 2


def test_invalid_config_lists_violations(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"optim": {"lr": -1}, "extra": 1}))
    assert main(["train-flow", str(p)]) == 2
    err = capsys.readouterr().err
    assert "optim.lr" in err and "extra" in err


def test_missing_warm_start_exit_2(write_config, tmp_path, capsys):
    cfg = write_config("train-gen")
    assert main(["train-gen", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--warm-start", str(tmp_path / "missing.bin")]) == 2
    assert "missing.bin" in capsys.readouterr().err


def test_print_config(write_config, capsys):
    assert main(["train-flow", str(write_config("train-flow")), "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "optim.lr = 0.0001  [paper]" in out


def test_train_eval_demo_round_trip(write_config, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train-flow", str(write_config("train-flow")), "--out", str(run), "--steps", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 1
    assert main(["make-task", "translation", "--size", "16", "--out", str(tmp_path / "t")]) == 0
    capsys.readouterr()
    assert main(["eval", str(run / "checkpoint.bin"), str(tmp_path / "t"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert "epe" in json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert main(["demo", str(run / "checkpoint.bin"), str(tmp_path / "t"),
                 "--out", str(tmp_path / "demo")]) == 0
    assert len(list((tmp_path / "demo" / "sample00").glob("*.png"))) == 5


def test_eval_on_incompatible_task_exit_2(write_config, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train-flow", str(write_config("train-flow")), "--out", str(run), "--steps", "0"])
    main(["make-task", "skeleton", "--frames", "16", "--out", str(tmp_path / "s")])
    assert main(["eval", str(run / "checkpoint.bin"), str(tmp_path / "s")]) == 2
