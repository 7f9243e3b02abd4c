import json

import pytest

from cmsmol import cli


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(f"out = {tmp_path / 'run'}\ntrain_limit = 30\nvocab_size = 200\nn_layers = 1\n"
                    "n_heads = 2\nd_model = 16\nd_ff = 32\nepochs = 1,1,1\nsingle_mask_epochs = 1\n"
                    "batch_size = 16\nlr = 0.003\nn_samples = 12\n")
    return path


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_error_json_exit_two(capsys, tmp_path):
    code, out, err = run(capsys, "pretrain", "--phase", "1", "--out", str(tmp_path / "x"))
    assert code == 2 and out == ""
    record = json.loads(err)
    assert record["command"] == "pretrain" and record["error"] and record["message"]


def test_bad_config_reports_json(capsys, tmp_path):
    (tmp_path / "bad.cfg").write_text("bogus = 1\n")
    code, _, err = run(capsys, "selfcheck", "--config", str(tmp_path / "bad.cfg"))
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


def test_end_to_end(capsys, tiny_cfg, tmp_path):
    out = tmp_path / "run"
    c = ["--config", str(tiny_cfg)]
    assert run(capsys, "train-tokenizer", *c)[0] == 0
    assert "vocab_size = 200" in (out / "resolved_config.txt").read_text()
    assert run(capsys, "pretrain", "--phase", "2", *c)[0] == 2  # phase 1 missing
    for phase in (1, 2):
        code, stdout, _ = run(capsys, "pretrain", "--phase", str(phase), *c)
        assert code == 0 and json.loads(stdout)["phase"] == phase
    code, _, err = run(capsys, "pretrain", "--phase", "3", *c)
    assert code == 2 and json.loads(err)["error"] == "SelfcheckRequired"
    code, stdout, _ = run(capsys, "selfcheck", *c)
    assert code == 0 and json.loads(stdout)["status"] == "pass"
    assert run(capsys, "build-corpus", "--phase", "2", *c)[0] == 0
    assert (out / "corpus_phase2_epoch0.jsonl").exists()
    assert run(capsys, "pretrain", "--phase", "3", *c)[0] == 0
    src = "CC1([C@@H](N2[C@H](S1)[C@@H](C2=O)NC(=O)CC3=CC=CC=C3)C(=O)O)C"
    code, stdout, _ = run(capsys, "generate", "--source", src, *c)
    assert code == 0 and json.loads(stdout)["sources"][0]["n"] == 12
    assert len((out / "candidates.jsonl").read_text().splitlines()) >= 12
    assert run(capsys, "score", *c)[0] == 0
    code, stdout, _ = run(capsys, "report", *c)
    assert code == 0 and stdout.startswith("target,algorithm")
    assert (out / "report.csv").exists() and (out / "length_validity.csv").exists()


def test_stale_selfcheck(tmp_path, tiny_cfg):
    from cmsmol.config import load_config
    cfg = load_config(tiny_cfg)
    cfg.out_dir.mkdir(parents=True)
    (cfg.out_dir / "selfcheck.json").write_text(json.dumps({"status": "pass", "code_sha256": "0",
                                                            "vocab_sha256": "0"}))
    with pytest.raises(cli.SelfcheckRequired):
        cli._require_selfcheck(cfg, "0")
