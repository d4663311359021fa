import os

import pytest

from sfrulstm.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--classes", "8", "--per-class", "5", "--seed", "1",
                 "--out", str(data)]) == 0
    for name, alpha in (("slow", "0.5"), ("fast", "0.125")):
        assert main(["train-branch", "--data", str(data), "--alpha", alpha, "--hidden", "4",
                     "--epochs", "1", "--out", str(root / f"{name}.sfru")]) == 0
    assert main(["finetune", "--data", str(data), "--branches",
                 f"{root / 'slow.sfru'},{root / 'fast.sfru'}", "--head-hidden", "4",
                 "--epochs", "1", "--out", str(root / "sf.sfru")]) == 0
    return root


def files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_twice_byte_identical(tmp_path):
    args = ["synth", "--classes", "8", "--per-class", "50", "--dim", "16", "--rate", "30",
            "--seed", "42", "--out"]
    assert main(args + [str(tmp_path / "a")]) == 0
    assert main(args + [str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b and len(a) == 400 + 2


def test_eval_twice_byte_identical(workspace, tmp_path, capsys):
    outs = []
    for i in range(2):
        p = tmp_path / f"m{i}.csv"
        assert main(["eval", "--data", str(workspace / "data"), "--model",
                     str(workspace / "sf.sfru"), "--out", str(p), "--threads", str(i + 1)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].decode().splitlines()) == 1 + 4 * 2


def test_training_twice_byte_identical(workspace, tmp_path):
    for i in range(2):
        assert main(["train-branch", "--data", str(workspace / "data"), "--alpha", "0.5",
                     "--hidden", "4", "--epochs", "2", "--keep", "0.5", "--out",
                     str(tmp_path / f"b{i}.sfru"), "--losses", str(tmp_path / f"l{i}.csv")]) == 0
    assert (tmp_path / "b0.sfru").read_bytes() == (tmp_path / "b1.sfru").read_bytes()
    assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()


def test_eval_unavailable_tau(workspace, tmp_path, capsys):
    out = tmp_path / "x.csv"
    rc = main(["eval", "--data", str(workspace / "data"), "--model", str(workspace / "sf.sfru"),
               "--taus", "0.3", "--out", str(out)])
    err = capsys.readouterr().err
    assert rc == 1 and "--taus" in err and "available: 2, 1.5, 1, 0.5" in err
    assert not out.exists()


def test_trace(workspace, capsys):
    assert main(["trace", "--data", str(workspace / "data"), "--model",
                 str(workspace / "sf.sfru"), "--samples", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "sample_id,t,tau_a,w_slow,w_fast" and len(lines) == 1 + 2 * 4


def test_trace_rejects_non_attention(workspace, capsys):
    rc = main(["trace", "--data", str(workspace / "data"), "--model", str(workspace / "slow.sfru")])
    assert rc == 1 and "--model" in capsys.readouterr().err


@pytest.mark.parametrize("argv, flag", [
    (["bogus"], "bogus"),
    (["eval", "--nope", "1"], "--nope"),
    (["train-branch", "--data", "d", "--alpha", "-1", "--out", "x"], "--alpha"),
    (["synth", "--fast-freqs", "2.5,3.0", "--out", "x"], "--fast-freqs"),
    (["finetune", "--data", "d", "--branches", "a", "--scheme", "sum", "--out", "x"], "--scheme"),
    (["eval", "--data", "/nonexistent", "--model", "m"], "--data"),
])
def test_validation_errors_exit_1(argv, flag, capsys, tmp_path):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(argv) == 1
    assert flag in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_bad_model_file(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.sfru"
    bad.write_bytes(b"XXXX1234")
    rc = main(["eval", "--data", str(workspace / "data"), "--model", str(bad)])
    assert rc == 1 and "--model" in capsys.readouterr().err


def test_config_file_and_precedence(workspace, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# eval options\nks = 1\ntaus = 2.0,1.0\n")
    assert main(["eval", "--config", str(cfg), "--data", str(workspace / "data"),
                 "--model", str(workspace / "sf.sfru")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 + 2
    assert main(["eval", "--config", str(cfg), "--ks", "1,2", "--data", str(workspace / "data"),
                 "--model", str(workspace / "sf.sfru")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1 + 4
    cfg.write_text("colour = red\n")
    assert main(["eval", "--config", str(cfg), "--data", "d", "--model", "m"]) == 1
    assert "colour" in capsys.readouterr().err


def test_threads_env_fallback(workspace, monkeypatch, capsys):
    monkeypatch.setenv("SFRU_THREADS", "zero")
    rc = main(["eval", "--data", str(workspace / "data"), "--model", str(workspace / "sf.sfru")])
    assert rc == 1 and "SFRU_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("SFRU_THREADS", "2")
    assert main(["eval", "--data", str(workspace / "data"), "--model",
                 str(workspace / "sf.sfru")]) == 0


def test_help_lists_every_flag_with_default():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    assert set(subs) == {"synth", "train-branch", "finetune", "eval", "ablate", "gradcheck",
                         "trace"}
    for name, sp in subs.items():
        text = sp.format_help()
        for a in sp._actions:
            if not a.option_strings or a.dest == "help":
                continue
            assert a.option_strings[0] in text, (name, a.dest)
            if not a.required and not isinstance(a.const, bool):
                assert "default" in (a.help or ""), (name, a.dest)


def test_ablate_cli_rows(tmp_path, workspace):
    out = tmp_path / "abl.csv"
    rc = main(["ablate", "--data", str(workspace / "data"), "--epochs", "1", "--hidden", "3",
               "--head-hidden", "3", "--alphas", "0.25,0.5", "--tau-es", "1.5",
               "--schemes", "ensemble,attention", "--ks", "1", "--out", str(out)])
    assert rc == 0
    rows = out.read_text().splitlines()[1:]
    assert len(rows) == 8 + 4 + 4 + 4  # 0.25, 0.5 singles then two schemes


def test_gradcheck_exit_codes(monkeypatch, capsys):
    from sfrulstm import gradcheck

    full = gradcheck.catalogue
    monkeypatch.setattr(gradcheck, "catalogue", lambda seed=0: full(seed)[:1])
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "branch d4 D3 C5 S3+4" in out and "max relative error" in out
    # a huge step makes the differences inaccurate, which must be reported
    assert main(["gradcheck", "--seed", "7", "--eps", "0.5"]) == 2
