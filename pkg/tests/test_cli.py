import subprocess
import sys

import numpy as np
import pytest

from mclseq import cli
from mclseq.data import load_recording
from mclseq.persist import load_checkpoint

# A deliberately tiny run: 3 episodes of 20 frames on a 4x4 grid, two members
# of width 4, one epoch.  Enough to push real data through every subcommand.
TOY_CONFIG = """\
seed=7
height=4
width=4
total_frames=60
baseline_len=4
event_len=16
window_len=6
future_len=2
hidden_dim=4
n_layers=2
members=2
batch_size=8
patience=0
max_epochs=1
clf_max_epochs=2
clf_patience=0
max_lag=2
pattern.0.kind=plane_wave
pattern.0.weight=0.5
pattern.0.direction=1,0
pattern.0.spatial_scale=4
pattern.0.temporal_freq=0.25
pattern.0.noise=0.02
pattern.1.kind=plane_wave
pattern.1.weight=0.5
pattern.1.direction=0,1
pattern.1.spatial_scale=4
pattern.1.temporal_freq=0.25
pattern.1.noise=0.02
"""


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    """Config, recording and trained checkpoints shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.cfg"
    config.write_text(TOY_CONFIG)
    data = root / "rec.bin"
    assert run_cli("gen-data", "--config", str(config), "--out", str(data)) == 0
    ckpt = root / "run.ckpt"
    assert run_cli("train", "--config", str(config), "--data", str(data),
                   "--out", str(ckpt)) == 0
    with_clf = root / "run-clf.ckpt"
    assert run_cli("train-classifier", "--ckpt", str(ckpt), "--data", str(data),
                   "--out", str(with_clf)) == 0
    return {"root": root, "config": config, "data": data,
            "ckpt": ckpt, "with_clf": with_clf}


class TestGenData:
    def test_writes_expected_shape(self, workdir):
        rec = load_recording(workdir["data"])
        assert rec.frames.shape == (60, 4, 4)
        assert rec.episode_count == 3

    def test_byte_deterministic(self, workdir, tmp_path):
        again = tmp_path / "rec2.bin"
        assert run_cli("gen-data", "--config", str(workdir["config"]),
                       "--out", str(again)) == 0
        assert again.read_bytes() == workdir["data"].read_bytes()

    def test_missing_config_fails(self, tmp_path, capsys):
        code = run_cli("gen-data", "--config", str(tmp_path / "nope.cfg"),
                       "--out", str(tmp_path / "r.bin"))
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")


class TestTrain:
    def test_checkpoint_loads_and_logs_one_epoch(self, workdir):
        ckpt = load_checkpoint(workdir["ckpt"])
        assert ckpt.ensemble.size == 2
        assert ckpt.ensemble.pretrained is True
        assert [r.epoch for r in ckpt.log] == [1]
        assert sum(ckpt.log[0].assignments) == 15   # training windows

    def test_single_flag(self, workdir, tmp_path):
        out = tmp_path / "single.ckpt"
        assert run_cli("train", "--config", str(workdir["config"]),
                       "--data", str(workdir["data"]), "--out", str(out),
                       "--single") == 0
        ckpt = load_checkpoint(out)
        assert ckpt.ensemble.size == 1
        assert ckpt.ensemble.members[0].model.hidden_dim == 4

    def test_wide_flag(self, workdir, tmp_path):
        out = tmp_path / "wide.ckpt"
        assert run_cli("train", "--config", str(workdir["config"]),
                       "--data", str(workdir["data"]), "--out", str(out),
                       "--wide", "3") == 0
        ckpt = load_checkpoint(out)
        assert ckpt.ensemble.size == 1
        assert ckpt.ensemble.members[0].model.hidden_dim == 12

    def test_no_pretrain_flag(self, workdir, tmp_path):
        out = tmp_path / "raw.ckpt"
        assert run_cli("train", "--config", str(workdir["config"]),
                       "--data", str(workdir["data"]), "--out", str(out),
                       "--no-pretrain") == 0
        assert load_checkpoint(out).ensemble.pretrained is False

    def test_threads_bit_identical(self, workdir, tmp_path):
        serial = tmp_path / "serial.ckpt"
        threaded = tmp_path / "threaded.ckpt"
        for out, threads in ((serial, "1"), (threaded, "3")):
            assert run_cli("train", "--config", str(workdir["config"]),
                           "--data", str(workdir["data"]), "--out", str(out),
                           "--threads", threads) == 0
        assert serial.read_bytes() == threaded.read_bytes()

    def test_resume_extends_log(self, workdir, tmp_path):
        out = tmp_path / "resumed.ckpt"
        assert run_cli("train", "--data", str(workdir["data"]),
                       "--resume", str(workdir["ckpt"]), "--out", str(out)) == 0
        ckpt = load_checkpoint(out)
        assert [r.epoch for r in ckpt.log] == [1, 2]

    def test_train_without_config_or_resume_fails(self, workdir, capsys):
        code = run_cli("train", "--data", str(workdir["data"]),
                       "--out", "/dev/null")
        assert code == 1
        assert "needs --config" in capsys.readouterr().err


class TestTrainClassifier:
    def test_adds_classifier(self, workdir):
        before = load_checkpoint(workdir["ckpt"])
        after = load_checkpoint(workdir["with_clf"])
        assert before.classifier is None
        assert after.classifier is not None
        assert after.classifier.n_classes == 2

    def test_ensemble_untouched(self, workdir):
        from mclseq.seq2seq import model_param_list
        before = load_checkpoint(workdir["ckpt"])
        after = load_checkpoint(workdir["with_clf"])
        for a, b in zip(before.ensemble.members, after.ensemble.members):
            for pa, pb in zip(model_param_list(a.model), model_param_list(b.model)):
                assert np.array_equal(pa, pb)


class TestEval:
    def test_writes_report_files(self, workdir, tmp_path, capsys):
        report = tmp_path / "report"
        assert run_cli("eval", "--ckpt", str(workdir["with_clf"]),
                       "--data", str(workdir["data"]),
                       "--report", str(report)) == 0
        for name in ("report.txt", "psnr.csv", "usage.csv", "transitions.csv"):
            assert (report / name).exists()
        out = capsys.readouterr().out
        for strategy in ("oracle", "reconstruction", "classifier", "average"):
            assert strategy in out

    def test_strategy_subset_and_alias(self, workdir, tmp_path):
        report = tmp_path / "report"
        assert run_cli("eval", "--ckpt", str(workdir["ckpt"]),
                       "--data", str(workdir["data"]), "--report", str(report),
                       "--strategies", "oracle,recon") == 0
        psnr = (report / "psnr.csv").read_text().splitlines()
        strategies = {line.split(",")[0] for line in psnr[1:]}
        assert strategies == {"oracle", "reconstruction"}

    def test_reports_byte_identical_across_runs(self, workdir, tmp_path):
        first = tmp_path / "r1"
        second = tmp_path / "r2"
        for report in (first, second):
            assert run_cli("eval", "--ckpt", str(workdir["with_clf"]),
                           "--data", str(workdir["data"]),
                           "--report", str(report)) == 0
        for name in ("report.txt", "psnr.csv", "usage.csv", "transitions.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_classifier_strategy_without_classifier_fails(self, workdir,
                                                          tmp_path, capsys):
        code = run_cli("eval", "--ckpt", str(workdir["ckpt"]),
                       "--data", str(workdir["data"]),
                       "--report", str(tmp_path / "r"),
                       "--strategies", "classifier")
        assert code == 1
        assert "no classifier" in capsys.readouterr().err

    def test_unknown_strategy_fails(self, workdir, tmp_path, capsys):
        code = run_cli("eval", "--ckpt", str(workdir["ckpt"]),
                       "--data", str(workdir["data"]),
                       "--report", str(tmp_path / "r"),
                       "--strategies", "psychic")
        assert code == 1
        assert "unknown strategy" in capsys.readouterr().err


class TestPredict:
    def test_emits_loadable_recording(self, workdir, tmp_path):
        out = tmp_path / "pred.bin"
        assert run_cli("predict", "--ckpt", str(workdir["ckpt"]),
                       "--data", str(workdir["data"]), "--out", str(out)) == 0
        rec = load_recording(out)
        # 15 windows per episode x 3 episodes, 2 predicted frames each.
        assert rec.frames.shape == (45 * 2, 4, 4)
        assert rec.generator == "predict-reconstruction"

    def test_oracle_strategy_accepted(self, workdir, tmp_path):
        out = tmp_path / "pred.bin"
        assert run_cli("predict", "--ckpt", str(workdir["ckpt"]),
                       "--data", str(workdir["data"]), "--out", str(out),
                       "--strategy", "oracle") == 0
        assert load_recording(out).generator == "predict-oracle"


class TestDelayMap:
    def test_csv_rows_cover_every_channel(self, workdir, tmp_path):
        out = tmp_path / "delays.csv"
        assert run_cli("delay-map", "--data", str(workdir["data"]),
                       "--out", str(out), "--config", str(workdir["config"])) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == ("window,episode,phase,start,row,col,"
                            "delay_frames,delay_ms,degenerate")
        # stride defaults to the window length: 3 windows per 20-frame episode.
        assert len(lines) == 1 + 9 * 16

    def test_stride_override(self, workdir, tmp_path):
        out = tmp_path / "delays.csv"
        assert run_cli("delay-map", "--data", str(workdir["data"]),
                       "--out", str(out), "--config", str(workdir["config"]),
                       "--stride", "14") == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 6 * 16   # starts 0 and 14 per episode


class TestEntryPoint:
    def test_module_help_exits_zero(self):
        proc = subprocess.run([sys.executable, "-m", "mclseq.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout

    def test_unreadable_checkpoint_fails_cleanly(self, workdir, tmp_path, capsys):
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_bytes(b"not a checkpoint at all")
        code = run_cli("eval", "--ckpt", str(bogus),
                       "--data", str(workdir["data"]),
                       "--report", str(tmp_path / "r"))
        assert code == 1
        assert "error:" in capsys.readouterr().err
