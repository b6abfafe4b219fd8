import json
import shutil

import numpy as np
import pytest

from conftest import run_cli
from revfp.cli import config_hash, parse_grid
from revfp.dataset import DatasetManifest
from revfp.errors import InvalidInputError
from revfp.features import read_features
from revfp.nn import ModelCheckpoint
from revfp.rir import RoomProfile, read_rooms, write_rooms


def copy_pipeline(pipeline, dst):
    """A private copy of the shared pipeline tree, safe to modify."""
    shutil.copytree(pipeline.root, dst)
    return dst / "rooms" / "rooms.jsonl", dst / "data" / "manifest.jsonl"


@pytest.fixture(scope="module")
def trained(pipeline, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "joint.rfck"
    r = run_cli("--workers", 1, "train", "--manifest", pipeline.manifest, "--recipe", "Baseline",
                "--target", "joint", "--epochs", 1, "--batch-size", 4, "--out", out)
    assert r.code == 0, r.err
    return out


class TestUsage:
    def test_no_command(self):
        assert run_cli().code == 1

    def test_unknown_command(self):
        assert run_cli("fly").code == 1

    def test_bad_flag_value(self, tmp_path):
        assert run_cli("simulate-rooms", "--count", "many", "--out", tmp_path).code == 1

    def test_bad_grid(self, pipeline, tmp_path):
        r = run_cli("train", "--manifest", pipeline.manifest, "--grid", "momentum=0.9", "--out", tmp_path / "m")
        assert r.code == 1
        assert "momentum" in r.err

    def test_grid_search_needs_grid(self, pipeline):
        assert run_cli("grid-search", "--manifest", pipeline.manifest).code == 1

    def test_missing_manifest(self, tmp_path):
        r = run_cli("featurize", "--manifest", tmp_path / "absent.jsonl")
        assert r.code == 2
        assert "absent.jsonl" in r.err

    def test_version(self):
        assert run_cli("--version").code == 0


class TestParseGrid:
    def test_aliases_and_types(self):
        axes = parse_grid("lr=1e-3,1e-4;batch=16,32;l2=0,1e-4")
        assert axes == {"initial_lr": [1e-3, 1e-4], "batch_size": [16, 32], "l2_lambda": [0.0, 1e-4]}
        assert all(isinstance(b, int) for b in axes["batch_size"])

    @pytest.mark.parametrize("bad", ["", "lr", "lr=abc", "momentum=0.9", "batch=1.5"])
    def test_rejects(self, bad):
        with pytest.raises(InvalidInputError):
            parse_grid(bad)

    def test_config_hash_is_order_free(self):
        assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})


class TestSimulateRooms:
    def test_counts_and_determinism(self, tmp_path):
        args = ["--count", 2, "--volume-min", 30, "--volume-max", 60, "--alpha-min", 0.5,
                "--alpha-max", 0.6, "--receivers", 2, "--seed", 11]
        assert run_cli("--workers", 2, "simulate-rooms", *args, "--out", tmp_path / "a").code == 0
        assert run_cli("--workers", 1, "simulate-rooms", *args, "--out", tmp_path / "b").code == 0
        rooms = read_rooms(tmp_path / "a" / "rooms.jsonl")
        assert len(rooms) == 2 and sum(len(r.extra["rirs"]) for r in rooms) == 4
        assert (tmp_path / "a" / "rooms.jsonl").read_bytes() == (tmp_path / "b" / "rooms.jsonl").read_bytes()
        for f in (tmp_path / "a" / "rirs").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "rirs" / f.name).read_bytes()

    def test_infeasible_volume(self, tmp_path):
        r = run_cli("simulate-rooms", "--count", 1, "--volume-min", 0.01, "--volume-max", 0.02,
                    "--out", tmp_path)
        assert r.code == 2


class TestGenerate:
    def test_summary_table(self, pipeline):
        r = run_cli("--workers", 1, "generate", "--rooms", pipeline.rooms, "--synthetic-clips", 3,
                    "--synthetic-seconds", 5, "--per-room", 4, "--seed", 3, "--allow-simulated-test",
                    "--out", pipeline.root / "data")
        assert r.code == 0, r.err
        lines = r.out.strip().splitlines()
        assert lines[0].split()[:2] == ["Data", "Split"]
        assert [ln.split()[0] for ln in lines[1:]] == ["Train", "Val", "Test"]
        assert sum(int(ln.split()[1]) for ln in lines[1:]) == 20

    def test_rerun_is_noop(self, pipeline):
        manifest = DatasetManifest.read(pipeline.manifest)
        audio = [pipeline.manifest.parent / r.audio for r in manifest.records]
        before = [p.stat().st_mtime_ns for p in audio]
        raw = pipeline.manifest.read_bytes()
        r = run_cli("--workers", 1, "generate", "--rooms", pipeline.rooms, "--synthetic-clips", 3,
                    "--synthetic-seconds", 5, "--per-room", 4, "--seed", 3, "--allow-simulated-test",
                    "--out", pipeline.root / "data")
        assert r.code == 0
        assert [p.stat().st_mtime_ns for p in audio] == before
        assert pipeline.manifest.read_bytes() == raw

    def test_cache_env(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("REVFP_CACHE", str(tmp_path / "cache"))
        r = run_cli("--workers", 1, "generate", "--rooms", pipeline.rooms, "--synthetic-clips", 2,
                    "--synthetic-seconds", 5, "--per-room", 1, "--seed", 5, "--allow-simulated-test",
                    "--out", tmp_path / "out")
        assert r.code == 0, r.err
        assert len(list((tmp_path / "cache").glob("*.wav"))) == 5
        m = DatasetManifest.read(tmp_path / "out" / "manifest.jsonl")
        assert all(str(tmp_path / "cache") in r.audio for r in m.records)

    def test_measured_rooms_hold_the_test_split(self, pipeline, tmp_path):
        rooms = read_rooms(pipeline.rooms)
        # relabel two rooms as measured so the test split can avoid simulated ones
        mixed = [RoomProfile(r.id, r.volume_m3, r.rt60_s, "measured" if i < 2 else "simulated",
                             r.dims, r.absorption, r.extra) for i, r in enumerate(rooms)]
        write_rooms(pipeline.rooms.parent / "mixed.jsonl", mixed)
        r = run_cli("--workers", 1, "generate", "--rooms", pipeline.rooms.parent / "mixed.jsonl",
                    "--synthetic-clips", 2, "--synthetic-seconds", 5, "--per-room", 1, "--seed", 5,
                    "--out", tmp_path)
        assert r.code == 0, r.err
        test_row = r.out.strip().splitlines()[3].split()
        assert test_row[0] == "Test" and test_row[3] == "0"
        m = DatasetManifest.read(tmp_path / "manifest.jsonl")
        assert {x.room_id for x in m.split("test")} <= {r.id for r in rooms[:2]}

    def test_simulated_test_rejected_by_default(self, pipeline, tmp_path):
        r = run_cli("--workers", 1, "generate", "--rooms", pipeline.rooms, "--synthetic-clips", 2,
                    "--synthetic-seconds", 5, "--per-room", 1, "--out", tmp_path)
        assert r.code == 2


class TestFeaturize:
    def test_recipes_coexist(self, pipeline):
        base = sorted((pipeline.features / "Baseline").glob("*.rfp"))
        plus = sorted((pipeline.features / "PlusPhase").glob("*.rfp"))
        assert len(base) == len(plus) == 20
        assert read_features(base[0]).values.shape[0] == 20
        assert read_features(plus[0]).values.shape[0] == 40
        stats = json.loads((pipeline.features / "PlusPhase" / "stats.json").read_text())
        assert stats["seed"] == 3 and stats["config_hash"]

    def test_reports_rows(self, pipeline):
        r = run_cli("--workers", 1, "featurize", "--manifest", pipeline.manifest, "--recipe", "PlusPhase")
        assert r.code == 0
        assert "40 stacked rows" in r.out

    def test_resume_after_interruption(self, pipeline, tmp_path):
        _, manifest = copy_pipeline(pipeline, tmp_path / "p")
        fdir = manifest.parent / "features" / "Baseline"
        files = sorted(fdir.glob("*.rfp"))
        snapshot = {f.name: f.read_bytes() for f in files}
        for f in files[:7]:
            f.unlink()
        files[8].write_bytes(b"RFP1 truncated")
        kept = files[10].stat().st_mtime_ns
        r = run_cli("--workers", 2, "featurize", "--manifest", manifest, "--recipe", "Baseline")
        assert r.code == 0, r.err
        assert {f.name: f.read_bytes() for f in fdir.glob("*.rfp")} == snapshot
        assert files[10].stat().st_mtime_ns == kept

    def test_corrupt_audio(self, pipeline, tmp_path):
        _, manifest = copy_pipeline(pipeline, tmp_path / "p")
        m = DatasetManifest.read(manifest)
        bad = m.records[0]
        (manifest.parent / bad.audio).write_bytes(b"not a wav")
        out = tmp_path / "feats"
        r = run_cli("--workers", 1, "featurize", "--manifest", manifest, "--recipe", "Baseline", "--out", out)
        assert r.code == 2
        assert bad.sample_id in r.err
        assert len(list((out / "Baseline").glob("*.rfp"))) == 19


class TestTrainEvaluatePredict:
    def test_checkpoint_and_history(self, trained):
        model = ModelCheckpoint.load(trained)
        assert model.target_mode == "joint" and model.recipe == "Baseline"
        assert model.config["config_hash"]
        hist = json.loads(trained.with_suffix(".history.json").read_text())
        assert hist["seed"] == 0 and len(hist["history"]) == 1

    def test_grid_runs_every_combination(self, pipeline, tmp_path):
        out = tmp_path / "g.rfck"
        r = run_cli("--workers", 1, "train", "--manifest", pipeline.manifest, "--recipe", "Baseline",
                    "--target", "volume", "--epochs", 1, "--grid", "lr=1e-3,1e-4;batch=16,32",
                    "--grid-epochs", 1, "--out", out)
        assert r.code == 0, r.err
        table = json.loads(out.with_suffix(".grid.json").read_text())
        assert len(table) == 4
        assert {(t["initial_lr"], t["batch_size"]) for t in table} == {(1e-3, 16), (1e-3, 32), (1e-4, 16), (1e-4, 32)}

    def test_grid_search_command(self, pipeline, tmp_path):
        r = run_cli("--workers", 1, "grid-search", "--manifest", pipeline.manifest, "--recipe", "Baseline",
                    "--target", "rt60", "--grid", "l2=0,1e-4", "--grid-epochs", 1, "--out", tmp_path / "g.json")
        assert r.code == 0, r.err
        doc = json.loads((tmp_path / "g.json").read_text())
        assert len(doc["runs"]) == 2
        assert r.out.strip().splitlines()[-1].startswith("best:")

    def test_evaluate(self, pipeline, trained, tmp_path):
        r = run_cli("evaluate", "--checkpoint", trained, "--manifest", pipeline.manifest,
                    "--split", "test", "--out", tmp_path)
        assert r.code == 0, r.err
        assert (tmp_path / "report-test.json").exists()
        assert (tmp_path / "scatter-test-log10_volume.csv").exists()
        assert (tmp_path / "scatter-test-log_rt60.csv").exists()
        assert len(r.out.strip().splitlines()) == 2

    def test_evaluate_missing_checkpoint(self, pipeline, tmp_path):
        r = run_cli("evaluate", "--checkpoint", tmp_path / "none.rfck", "--manifest", pipeline.manifest,
                    "--out", tmp_path)
        assert r.code == 2

    def test_predict_joint(self, pipeline, trained):
        m = DatasetManifest.read(pipeline.manifest)
        wav = pipeline.manifest.parent / m.records[0].audio
        r = run_cli("predict", "--checkpoint", trained, wav)
        assert r.code == 0, r.err
        values = dict(line.split("=", 1) for line in r.out.split()[-2:])
        assert float(values["volume_m3"]) > 0 and float(values["rt60_s"]) > 0
        assert "recipe=Baseline" in r.out and str(trained) in r.out

    def test_predict_short_clip(self, trained, tmp_path):
        from revfp.dsp import Signal, write_wav
        write_wav(tmp_path / "short.wav", Signal(np.ones(16000) * 0.1, 16000))
        assert run_cli("predict", "--checkpoint", trained, tmp_path / "short.wav").code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numerical_failure(self, pipeline, tmp_path):
        r = run_cli("--workers", 1, "train", "--manifest", pipeline.manifest, "--recipe", "Baseline",
                    "--epochs", 3, "--lr", 1e38, "--out", tmp_path / "m.rfck")
        assert r.code == 3, r.err


class TestConfigFile:
    def test_file_supplies_flags_and_flags_win(self, pipeline, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(f"manifest: {pipeline.manifest}\nrecipe: Baseline\nepochs: 2\nbatch_size: 4\n")
        r = run_cli("--config", cfg, "--workers", 1, "train", "--epochs", 1, "--out", tmp_path / "m.rfck")
        assert r.code == 0, r.err
        hist = json.loads((tmp_path / "m.history.json").read_text())["history"]
        assert len(hist) == 1
        model = ModelCheckpoint.load(tmp_path / "m.rfck")
        assert model.recipe == "Baseline" and model.config["train"]["batch_size"] == 4

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("flux: 3\n")
        assert run_cli("--config", cfg, "simulate-rooms", "--out", tmp_path).code == 2
