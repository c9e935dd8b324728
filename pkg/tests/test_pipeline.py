import asyncio
import json
from pathlib import Path

import pytest

from gazetrace import main
from src.models.records import NONE_LABEL
from src.services.io_service import read_events
from src.services.pipeline_service import ARTIFACTS, run_session, validate_inputs
from src.services.synthetic_service import generate_synthetic
from src.utils.config import load_run_config
from src.utils.errors import ConfigError, FrameParseError

CLASSROOM = Path(__file__).resolve().parent.parent / "scenarios" / "classroom.yaml"


@pytest.fixture
def one_viewer(small_camera):
    return {
        "duration_s": 1,
        "fps": 30,
        "camera": small_camera.model_dump(),
        "embedding_dim": 8,
        "static": [{"label": "DISPLAY", "quad": {"center": [0.0, -0.3, 6.0], "size": [2.0, 1.2]}}],
        "participants": [{
            "id": "P",
            "waypoints": [{"t": 0, "position": [0.2, 0.1, 2.5]}],
            "gaze": [{"start": 0, "end": 1, "target": "DISPLAY"}],
        }],
    }


def run(config_path, **flags):
    config = load_run_config(config_path, **flags)
    return asyncio.run(run_session(config)), config


def label_accuracy(truth, events):
    """Share of ground-truth rows whose observer has an event with the same target in that frame."""
    got = {(e.frame_index, e.observer): e.target for e in events}
    correct = sum(got.get((row["frame_index"], row["observer"])) == row["target"] for row in truth)
    return correct / len(truth)


def test_minimal_session(tmp_path, one_viewer):
    session = generate_synthetic(one_viewer, tmp_path / "synth")
    result, config = run(session.run_config_path)
    assert result["status"] == "success"
    assert sorted(result["artifacts"]) == sorted(ARTIFACTS)

    lines = (config.output_dir / "gaze_events.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 30
    events = [json.loads(line) for line in lines]
    assert {(e["observer"], e["target"]) for e in events} == {("P", "DISPLAY")}
    assert sum(e["duration_s"] for e in events) == pytest.approx(1.0, abs=1e-4)

    timeline = (config.output_dir / "timeline.csv").read_text(encoding="utf-8").splitlines()
    # one second of fixation stays under the 2 s threshold
    assert timeline[1:] == ["P,0.000000,5.000000,NONE"]

    summary = json.loads((config.output_dir / "summary.json").read_text(encoding="utf-8"))
    assert summary["ranked_nodes"][0]["id"] == "DISPLAY"
    diagnostics = json.loads((config.output_dir / "diagnostics.json").read_text(encoding="utf-8"))
    assert diagnostics["session"]["frames"] == 30
    assert diagnostics["drops"] == []
    assert set(diagnostics["timings"]) == {"load", "identify", "encode", "analytics", "write"}


def test_closed_loop_mini_session(tmp_path, mini_script):
    session = generate_synthetic(mini_script, tmp_path / "synth", seed=5)
    result, config = run(session.run_config_path)
    events = read_events(config.output_dir / "gaze_events.jsonl")
    assert label_accuracy(session.ground_truth, events) >= 0.99
    # every scheduled observer was recognised in every frame it was visible
    assert {(e.frame_index, e.observer) for e in events} == {
        (row["frame_index"], row["observer"]) for row in session.ground_truth
    }

    net = json.loads((config.output_dir / "network.json").read_text(encoding="utf-8"))
    edges = {(e["source"], e["target"]) for e in net["edges"]}
    assert ("TEACHER", "S1") in edges
    assert ("S1", "DISPLAY") in edges
    assert all(NONE_LABEL not in pair for pair in edges)


def test_closed_loop_with_depth_rasters(tmp_path, mini_script):
    mini_script["depth_mode"] = "raster"
    session = generate_synthetic(mini_script, tmp_path / "synth")
    _, config = run(session.run_config_path, workers=2)
    events = read_events(config.output_dir / "gaze_events.jsonl")
    assert label_accuracy(session.ground_truth, events) >= 0.99


def test_closed_loop_classroom(tmp_path):
    session = generate_synthetic(CLASSROOM, tmp_path / "classroom", seed=7)
    result, config = run(session.run_config_path, workers=4)
    events = read_events(config.output_dir / "gaze_events.jsonl")
    assert label_accuracy(session.ground_truth, events) >= 0.99
    assert result["frames"] == 1800

    rows = (config.output_dir / "timeline.csv").read_text(encoding="utf-8").splitlines()[1:]
    s1 = [row.split(",")[3] for row in rows if row.startswith("S1,")]
    assert len(s1) == 12
    assert s1[:4] == ["DISPLAY"] * 4
    assert s1[10:] == ["S2", "S2"]


def test_rerun_is_byte_identical(tmp_path, mini_script):
    session = generate_synthetic(mini_script, tmp_path / "synth")
    _, first = run(session.run_config_path, output_dir=tmp_path / "a", record_timings=False)
    _, second = run(session.run_config_path, output_dir=tmp_path / "b", record_timings=False, workers=3)
    for name in ARTIFACTS:
        assert (first.output_dir / name).read_bytes() == (second.output_dir / name).read_bytes(), name


def test_missing_gallery_writes_nothing(tmp_path, one_viewer):
    session = generate_synthetic(one_viewer, tmp_path / "synth")
    session.gallery_path.unlink()
    config = load_run_config(session.run_config_path)
    with pytest.raises(ConfigError, match="gallery_path"):
        asyncio.run(run_session(config))
    assert not config.output_dir.exists()

    code = asyncio.run(main(["run", "--config", str(session.run_config_path)]))
    assert code == 2
    assert not config.output_dir.exists()


def test_bad_frame_stream_removes_outputs(tmp_path, one_viewer):
    session = generate_synthetic(one_viewer, tmp_path / "synth")
    with open(session.frames_path, "a", encoding="utf-8") as f:
        f.write("{broken\n")
    config = load_run_config(session.run_config_path)
    with pytest.raises(FrameParseError, match="line 31"):
        asyncio.run(run_session(config))
    assert not config.output_dir.exists()


def test_undecodable_frame_stream_is_data_error(tmp_path, one_viewer):
    session = generate_synthetic(one_viewer, tmp_path / "synth")
    with open(session.frames_path, "ab") as f:
        f.write(b'{"frame_index": 30, \xff\xfe}\n')
    config = load_run_config(session.run_config_path)
    code = asyncio.run(main(["run", "--config", str(session.run_config_path)]))
    assert code == 3
    assert not config.output_dir.exists()


def test_label_collision_is_config_error(tmp_path, one_viewer):
    session = generate_synthetic(one_viewer, tmp_path / "synth")
    gallery = json.loads(session.gallery_path.read_text(encoding="utf-8"))
    gallery["participants"]["DISPLAY"] = gallery["participants"]["P"]
    session.gallery_path.write_text(json.dumps(gallery), encoding="utf-8")
    with pytest.raises(ConfigError, match="DISPLAY"):
        validate_inputs(load_run_config(session.run_config_path))


def test_validate_inputs_report(tmp_path, mini_script):
    mini_script["depth_mode"] = "raster"
    session = generate_synthetic(mini_script, tmp_path / "synth")
    report = validate_inputs(load_run_config(session.run_config_path))
    assert report["static_oois"] == ["DISPLAY", "WHITEBOARD"]
    assert report["participants"] == ["S1", "S2", "TEACHER"]
    assert report["frames"] == 180
    assert report["depth_rasters"] >= 1


def test_cli_commands(tmp_path, mini_script, capsys):
    script = tmp_path / "mini.json"
    script.write_text(json.dumps(mini_script), encoding="utf-8")
    synth = tmp_path / "synth"
    assert asyncio.run(main(["synth", str(script), "--out", str(synth), "--seed", "2"])) == 0

    out = tmp_path / "out"
    code = asyncio.run(main(["run", "--config", str(synth / "run.json"), "--out", str(out), "--no-timings"]))
    assert code == 0
    assert "timings" not in json.loads((out / "diagnostics.json").read_text(encoding="utf-8"))

    events = str(out / "gaze_events.jsonl")
    csv = tmp_path / "timeline_10s.csv"
    assert asyncio.run(main(["timeline", events, "--interval", "10", "--threshold", "3", "--out", str(csv)])) == 0
    assert csv.read_text(encoding="utf-8").splitlines()[0] == "participant_id,start_s,length_s,label"

    capsys.readouterr()
    assert asyncio.run(main(["network", events, "--format", "dot"])) == 0
    assert capsys.readouterr().out == (out / "network.dot").read_text(encoding="utf-8")

    assert asyncio.run(main(["validate", "--config", str(synth / "run.json")])) == 0
    assert asyncio.run(main(["timeline", events, "--threshold", "9"])) == 2
    assert asyncio.run(main(["network", str(tmp_path / "missing.jsonl")])) == 3
    assert asyncio.run(main(["synth", str(tmp_path / "missing.yaml"), "--out", str(synth)])) == 3
