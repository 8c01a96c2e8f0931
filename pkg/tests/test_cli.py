import json

import pytest

from calibseg.cli import build_parser, main
from calibseg.datagen import load_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--n", "12", "--graders", "3", "--size", "16", "--seed", "2",
                 "--out", str(root / "data")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"profile": "desk", "epochs": 3, "batch_size": 4,
                               "dataset": str(root / "data" / "manifest.json")}))
    return root, cfg


def test_generate_data_writes_manifest(workspace):
    root, _ = workspace
    ds = load_dataset(root / "data")
    assert len(ds) == 12 and ds.grader_count == 3 and ds.height == 16


def test_every_config_field_has_a_flag():
    args = build_parser().parse_args(["train", "--epochs", "2", "--variational_dropout", "false",
                                      "--learning_rate", "0.01", "--num_threads", "1"])
    assert args.epochs == 2 and args.variational_dropout is False
    assert args.learning_rate == 0.01 and args.num_threads == 1


def test_train_eval_report(workspace, capsys):
    root, cfg = workspace
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--output_dir", str(out)]) == 0
    sidecar = json.loads((out / "best.pt.json").read_text())
    assert sidecar["train_config"]["epochs"] == 1  # the flag beat the file
    assert main(["eval", "--checkpoint", str(out / "best.pt"), "--split", "test", "--seeds", "0,1",
                 "--samples", "4"]) == 0
    report = out / "run_test.json"
    assert json.loads(report.read_text())["seeds"] == [0, 1]
    figs = root / "figs"
    assert main(["report", "--reports", str(report), "--checkpoint", str(out / "best.pt"),
                 "--figures", "2", "--samples", "5", "--out", str(figs)]) == 0
    assert (figs / "tables.csv").is_file() and (figs / "tables.json").is_file()
    assert len(list(figs.glob("*_samples.png"))) == 2
    assert len(list(figs.glob("*_uncertainty.png"))) == 2
    assert "GED^2" in capsys.readouterr().out


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.pt")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["report", "--out", str(tmp_path / "r")]) == 1
