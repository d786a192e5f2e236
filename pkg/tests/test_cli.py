import json

import numpy as np
import pytest
from PIL import Image

from flowmotion.cli import main
from flowmotion.dataset import Split, read_manifest
from flowmotion.flowcore import FlowField, load_flow, save_flow


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny end-to-end run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")

    def run(*args):
        assert main([str(a) for a in args]) == 0, args

    run("synth", "--out", root / "scenes", "--n-moving", 4, "--n-still", 4, "--seed", 1)
    run("flow", root / "scenes", "--out", root / "flow", "--iterations", 20)
    run("filter", root / "flow", "--out", root / "filter", "--eval-fraction", 0.25, "--seed", 1)
    run("preprocess", root / "filter/manifest.jsonl", "--out", root / "pre", "--roi-size", 8)
    run(
        "train", root / "pre/manifest.jsonl", "--out", root / "train", "--net", "tiny", "--width", 4,
        "--epochs", 2, "--batch-size", 4, "--seed", 1,
    )
    return root


class TestPipeline:
    def test_synth_layout(self, pipeline):
        scenes = sorted(p.name for p in (pipeline / "scenes").iterdir() if p.is_dir())
        assert len(scenes) == 4
        assert (pipeline / "scenes" / scenes[0] / "meta.json").is_file()
        assert json.loads((pipeline / "scenes/run_config.json").read_text())["command"] == "synth"

    def test_flow_outputs(self, pipeline):
        scene = next(p for p in (pipeline / "flow").iterdir() if p.is_dir())
        flow = load_flow(scene / "flow/000000.npy")
        assert (flow.width, flow.height) == (96, 96)
        meta = json.loads((scene / "meta.json").read_text())
        assert (scene / meta["frames"][0]["image"]).resolve().is_file()

    def test_manifest_split(self, pipeline):
        samples = read_manifest(pipeline / "filter/manifest.jsonl")
        assert len(samples) == 8
        assert {s.split for s in samples} == {Split.TRAIN, Split.EVAL}

    def test_preprocessed_rois(self, pipeline):
        samples = read_manifest(pipeline / "pre/manifest.jsonl")
        roi = load_flow(samples[0].roi_path)
        assert (roi.width, roi.height) == (8, 8)

    def test_train_outputs(self, pipeline):
        lines = (pipeline / "train/history.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_loss,eval_precision,eval_recall,eval_f1"
        assert len(lines) == 3
        assert (pipeline / "train/model.fmck").read_bytes()[:4] == b"FMCK"

    def test_eval_json(self, pipeline, capsys):
        out = pipeline / "eval"
        rc = main([
            "eval", str(pipeline / "pre/manifest.jsonl"), "--checkpoint", str(pipeline / "train/model.fmck"),
            "--out", str(out), "--split", "all",
        ])
        assert rc == 0
        rep = json.loads((out / "metrics.json").read_text())
        assert rep["tp"] + rep["fp"] + rep["fn"] + rep["tn"] == 8
        assert json.loads(capsys.readouterr().out) == rep

    def test_infer_draws_boxes(self, pipeline):
        out = pipeline / "infer"
        assert main(["infer", str(pipeline / "flow"), "--checkpoint", str(pipeline / "train/model.fmck"),
                     "--out", str(out)]) == 0
        preds = [json.loads(line) for line in (out / "predictions.jsonl").read_text().splitlines()]
        assert len(preds) == 8
        assert {p["label"] for p in preds} <= {"still", "moving"}
        pngs = list((out / "frames").glob("*.png"))
        assert len(pngs) == 4
        colors = {tuple(c) for c in np.asarray(Image.open(pngs[0])).reshape(-1, 3)}
        assert colors & {(0, 0, 255), (255, 0, 0)}

    def test_output_dir_replaced(self, pipeline):
        out = pipeline / "again"
        out.mkdir()
        (out / "stale.txt").write_text("old")
        assert main(["filter", str(pipeline / "flow"), "--out", str(out)]) == 0
        assert not (out / "stale.txt").exists()
        assert (out / "manifest.jsonl").is_file()


class TestRender:
    def test_zero_flow_is_white(self, tmp_path):
        save_flow(FlowField.zeros(5, 3), tmp_path / "z.npy")
        assert main(["render", str(tmp_path / "z.npy"), "--out", str(tmp_path / "r")]) == 0
        img = np.asarray(Image.open(tmp_path / "r/z.png"))
        assert img.shape == (3, 5, 3) and np.all(img == 255)

    def test_max_magnitude_flag(self, tmp_path):
        save_flow(FlowField.constant(2, 2, 1.0, 0.0), tmp_path / "f.npy")
        assert main(["render", str(tmp_path / "f.npy"), "--out", str(tmp_path / "r"), "--max-magnitude", "2"]) == 0
        img = np.asarray(Image.open(tmp_path / "r/f.png"))
        assert img[0, 0].tolist() == [255, 128, 128]


class TestConfigAndErrors:
    def test_config_file_section(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"n_moving": 2, "n_still": 0}}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
        resolved = json.loads((tmp_path / "s/run_config.json").read_text())
        assert (resolved["n_moving"], resolved["n_still"]) == (2, 0)

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_moving": 2, "n_still": 2}))
        assert main(["synth", "--config", str(cfg), "--n-moving", "4", "--out", str(tmp_path / "s")]) == 0
        assert json.loads((tmp_path / "s/run_config.json").read_text())["n_moving"] == 4

    def test_missing_config(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "s")]) == 2

    def test_missing_manifest(self, tmp_path):
        assert main(["preprocess", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "p")]) == 2
        assert not (tmp_path / "p").exists()

    def test_missing_scene_dir(self, tmp_path):
        assert main(["flow", str(tmp_path / "missing"), "--out", str(tmp_path / "f")]) == 2

    def test_bad_flow_file(self, tmp_path):
        (tmp_path / "bad.npy").write_bytes(b"not numpy")
        assert main(["render", str(tmp_path / "bad.npy"), "--out", str(tmp_path / "r")]) == 1
        assert not (tmp_path / "r").exists()

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 2

    def test_missing_out(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])
        assert exc.value.code == 2
