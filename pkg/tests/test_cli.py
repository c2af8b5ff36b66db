import json
from pathlib import Path

import numpy as np
import pytest

from mpsep.cli import load_config, main
from mpsep.errors import ConfigError


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def base_config(workdir):
    cfg = {
        "profile": "smoke",
        "seed": 3,
        "n_classes": 6,
        "n_train": 12,
        "n_val": 6,
        "n_test": 12,
        "n_frames": 2,
        "epochs_r1": 1,
        "epochs_r2": 1,
        "epochs_r3": 1,
        "samples_per_epoch": 8,
        "batch_size": 4,
        "n_eval": 3,
        "dataset_dir": str(workdir / "data"),
    }
    path = workdir / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def dataset_dir(workdir, base_config):
    out = workdir / "data"
    assert main(["gen", "--config", str(base_config), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(workdir, base_config, dataset_dir):
    out = workdir / "train"
    assert main(["train", "--config", str(base_config), "--out", str(out)]) == 0
    return out / "round3.mpck"


class TestConfig:
    def test_unknown_key_in_file_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"no_such_key": 1}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["bogus=1"])

    def test_override_parsing(self):
        cfg = load_config(None, ["seed=7", "mask_kind=binary", "eps_rel=0.01",
                                 "provide_n=false"])
        assert cfg.seed == 7
        assert cfg.mask_kind == "binary"
        assert cfg.eps_rel == 0.01
        assert cfg.provide_n is False

    def test_unknown_key_exits_nonzero(self, tmp_path):
        code = main(["gen", "--set", "bogus=1", "--out", str(tmp_path / "x")])
        assert code == 2


class TestGen:
    def test_manifest_count_contract(self, dataset_dir):
        lines = (dataset_dir / "manifest.jsonl").read_text().strip().split("\n")
        assert len(lines) == 30  # 12 + 6 + 12

    def test_resolved_config_written(self, dataset_dir):
        resolved = json.loads((dataset_dir / "resolved_config.json").read_text())
        assert resolved["command"] == "gen"
        assert resolved["seed"] == 3

    def test_regeneration_identical(self, base_config, dataset_dir, tmp_path):
        out = tmp_path / "data2"
        assert main(["gen", "--config", str(base_config), "--out", str(out)]) == 0
        assert ((out / "manifest.jsonl").read_text()
                == (dataset_dir / "manifest.jsonl").read_text())


class TestTrain:
    def test_checkpoints_and_log(self, checkpoint):
        out = checkpoint.parent
        for r in (1, 2, 3):
            assert (out / f"round{r}.mpck").exists()
            meta = json.loads((out / f"round{r}.mpck.json").read_text())
            assert meta["round"] == r
        log = (out / "train_log.csv").read_text().strip().split("\n")
        assert log[0].startswith("round,epoch,step")
        assert len(log) > 3

    def test_resume_reproduces_next_round_losses(self, workdir, base_config,
                                                 dataset_dir, checkpoint):
        full_log = (checkpoint.parent / "train_log.csv").read_text()
        full_round2 = [l for l in full_log.strip().split("\n")[1:]
                       if l.startswith("2,")]
        out = workdir / "resume"
        code = main(["train", "--config", str(base_config), "--out", str(out),
                     "--resume", str(checkpoint.parent / "round1.mpck")])
        assert code == 0
        resumed_log = (out / "train_log.csv").read_text()
        resumed_round2 = [l for l in resumed_log.strip().split("\n")[1:]
                          if l.startswith("2,")]
        assert resumed_round2 == full_round2

    def test_missing_dataset_errors(self, base_config, tmp_path):
        code = main(["train", "--config", str(base_config),
                     "--set", "dataset_dir=", "--out", str(tmp_path / "t")])
        assert code == 2


class TestSeparate:
    def test_explicit_n_writes_n_sound_dirs(self, workdir, base_config,
                                            dataset_dir, checkpoint):
        out = workdir / "sep_n2"
        code = main(["separate", "--config", str(base_config),
                     "--out", str(out), "--set",
                     f"checkpoint={checkpoint}", "--n", "2",
                     "--check-conservation"])
        assert code == 0
        assert (out / "sound_00").is_dir()
        assert (out / "sound_01").is_dir()
        assert not (out / "sound_02").exists()
        assert (out / "sound_00" / "estimate.wav").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["steps"] == 2
        assert summary["clamp_events"] == 0

    def test_eps_termination_logs_count(self, workdir, base_config,
                                        dataset_dir, checkpoint, capsys):
        out = workdir / "sep_eps"
        code = main(["separate", "--config", str(base_config),
                     "--out", str(out), "--set", f"checkpoint={checkpoint}"])
        assert code == 0
        assert "predicted" in capsys.readouterr().out
        summary = json.loads((out / "summary.json").read_text())
        assert summary["requested_n"] is None

    def test_mask_and_subtract_flags(self, workdir, base_config, dataset_dir,
                                     checkpoint):
        out = workdir / "sep_flags"
        code = main(["separate", "--config", str(base_config),
                     "--out", str(out), "--set", f"checkpoint={checkpoint}",
                     "--n", "2", "--mask", "binary", "--subtract", "final"])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mask_kind"] == "binary"
        assert summary["subtract_mode"] == "final"

    def test_mix_dir_input(self, workdir, base_config, dataset_dir,
                           checkpoint, tmp_path):
        from mpsep.audio import write_wav
        from mpsep.synthdata import load_dataset, MixSampler
        from PIL import Image
        ds = load_dataset(dataset_dir)
        sample = MixSampler(ds, "test", 2, seed=5).sample(0)
        mix_dir = tmp_path / "mix"
        (mix_dir / "frames").mkdir(parents=True)
        write_wav(mix_dir / "mixture.wav", sample.mixture_waveform)
        for t in range(sample.frames.shape[0]):
            Image.fromarray(sample.frames[t]).save(
                mix_dir / "frames" / f"f{t}.png")
        out = workdir / "sep_disk"
        code = main(["separate", "--config", str(base_config),
                     "--out", str(out), "--set", f"checkpoint={checkpoint}",
                     "--mix-dir", str(mix_dir), "--n", "2"])
        assert code == 0
        assert (out / "sound_01" / "final.mpsg").exists()


@pytest.fixture(scope="module")
def eval_out(workdir, base_config, dataset_dir, checkpoint):
    out = workdir / "eval"
    code = main(["eval", "--config", str(base_config), "--out", str(out),
                 "--set", f"checkpoint={checkpoint}",
                 "--set", "with_count=true"])
    assert code == 0
    return out


class TestEval:
    def test_report_files_exist(self, eval_out):
        assert (eval_out / "per_source.csv").exists()
        summary = json.loads((eval_out / "summary.json").read_text())
        for key in ("mean_nsdr", "mean_sir", "mean_sar", "mean_amid"):
            assert key in summary

    def test_summary_means_match_csv_recomputation(self, eval_out):
        lines = (eval_out / "per_source.csv").read_text().strip().split("\n")
        header = lines[0].split(",")
        cols = {name: [] for name in header}
        for line in lines[1:]:
            for name, val in zip(header, line.split(",")):
                cols[name].append(float(val))
        summary = json.loads((eval_out / "summary.json").read_text())
        for key in ("nsdr", "sir", "sar"):
            assert summary[f"mean_{key}"] == pytest.approx(
                np.mean(cols[key]), abs=1e-5)

    def test_mnet_only_method_runs(self, workdir, base_config, dataset_dir,
                                   checkpoint):
        out = workdir / "eval_mnet"
        code = main(["eval", "--config", str(base_config), "--out", str(out),
                     "--set", f"checkpoint={checkpoint}",
                     "--method", "mnet_only"])
        assert code == 0


class TestSweep:
    def test_row_count_and_shape(self, workdir, base_config, dataset_dir,
                                 checkpoint):
        out = workdir / "sweep"
        code = main(["sweep", "--config", str(base_config), "--out", str(out),
                     "--set", f"checkpoint={checkpoint}",
                     "--set", "n_eval=2"])
        assert code == 0
        lines = (out / "sweep.csv").read_text().strip().split("\n")
        assert lines[0] == "method,n_test,metric,value"
        assert len(lines) == 1 + 48  # 3 methods x 4 sizes x 4 metrics
        mix5 = [l for l in lines if l.startswith("mpnet,5")]
        assert len(mix5) == 4  # mix-2-trained model runs on mix-5 inputs


class TestLocalize:
    def test_heatmaps_and_json(self, workdir, base_config, dataset_dir,
                               checkpoint):
        out = workdir / "loc"
        code = main(["localize", "--config", str(base_config),
                     "--out", str(out), "--set", f"checkpoint={checkpoint}",
                     "--sample", "1"])
        assert code == 0
        payload = json.loads((out / "localization.json").read_text())
        assert payload["n"] == 2
        for step in payload["steps"]:
            assert step["map_shape"] == [64 // 16, 2 * 64 // 16]
            score_map = np.array(step["score_map"])
            x, y = step["location"]
            assert score_map[x, y] == score_map.max()
            assert (out / f"step_{step['step']:02d}_heatmap.png").exists()


class TestMetricDemo:
    def test_rows_and_determinism(self, workdir, base_config):
        out_a = workdir / "demo_a"
        out_b = workdir / "demo_b"
        for out in (out_a, out_b):
            code = main(["metric-demo", "--config", str(base_config),
                         "--out", str(out)])
            assert code == 0
        csv_a = (out_a / "metric_demo.csv").read_text()
        assert csv_a == (out_b / "metric_demo.csv").read_text()
        assert len(csv_a.strip().split("\n")) == 4  # header + 3 placements

    def test_family_spread_dominates(self, workdir):
        out = workdir / "demo_a"
        summary = json.loads((out / "metric_demo.json").read_text())
        assert summary["sdr_family_spread"] > 3 * summary["ssim_spread"]
