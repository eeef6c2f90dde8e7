import csv
import json
import shutil

import numpy as np
import pytest

from conftest import T0
from plumeseg import cli
from plumeseg.nn.checkpoint import load_checkpoint, save_checkpoint
from plumeseg.nn.unet import UNetConfig, build_unet
from plumeseg.panelfe import build_panel, fe_fit, read_pm25, read_stations
from plumeseg.raster import ChannelId, GeoTransform, RasterScene, read_scene, write_scene

TINY = {
    "seed": 3,
    "band_mode": "1band",
    "synth": {"count": 24, "size": 32, "plume_count": [1, 2], "plume_sigma": [0.1, 0.16], "stations": 12},
    "prepare": {"crop_size": 16, "n_max": 2, "pos_frac": 0.5},
    "unet": {"depth": 2, "base_filters": 2},
    "train": {"lr0": 0.003, "epochs": 2, "batch": 4},
    "predict": {"tile": 32},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def run(cmd, config, *flags):
    return cli.main([cmd, "--config", str(config), *flags])


def outputs(stage):
    return json.loads((stage / "manifest.json").read_text())["outputs"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "run.json", dict(TINY, out="out"))
    for cmd in ("synth", "prepare", "train", "predict"):
        assert run(cmd, cfg) == cli.EXIT_OK, cmd
    return root, cfg


# --- config handling -----------------------------------------------------------------


def test_unknown_key_rejected_before_writes(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", dict(TINY, out="out", colour="red"))
    assert run("synth", cfg) == cli.EXIT_CONFIG
    assert "colour" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "patch",
    [
        {"band_mode": "2band"},
        {"threshold": 1.0},
        {"train": {"loss": "focal"}},
        {"prepare": {"fractions": [0.5, 0.2, 0.2]}},
        {"synth": {"start_date": "yesterday"}},
        {"synth": {"label_noise": {"kind": "Blur"}}},
        {"unet": {"depth": 1}},
    ],
)
def test_invalid_values_rejected(tmp_path, patch):
    cfg = dict(TINY, out="out")
    for k, v in patch.items():
        cfg[k] = dict(cfg[k], **v) if isinstance(v, dict) else v
    assert run("synth", write_config(tmp_path / "c.json", cfg)) == cli.EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_missing_or_malformed_config(tmp_path):
    assert run("synth", tmp_path / "nope.json") == cli.EXIT_CONFIG
    (tmp_path / "x.json").write_text("{not json")
    assert run("synth", tmp_path / "x.json") == cli.EXIT_CONFIG


def test_flag_overrides_recorded(tmp_path):
    cfg = write_config(tmp_path / "c.json", dict(TINY, out="out", synth=dict(TINY["synth"], count=1)))
    assert run("synth", cfg, "--seed", "11", "--out", str(tmp_path / "o2"), "--loss", "mae", "--drop-highest", "yes", "--threshold", "0.3") == 0
    resolved = json.loads((tmp_path / "o2" / "synth" / "manifest.json").read_text())["config"]
    assert resolved["seed"] == 11 and resolved["threshold"] == 0.3
    assert resolved["train"]["loss"] == "mae" and resolved["train"]["drop_highest"] is True
    assert not (tmp_path / "out").exists()


def test_bad_bool_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", tmp_path / "c.json", "--drop-highest", "maybe")
    assert exc.value.code == 2


def test_log_level_env(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path / "c.json", dict(TINY, out="out", synth=dict(TINY["synth"], count=1)))
    monkeypatch.setenv("PLUMESEG_LOG", "info")
    assert run("synth", cfg) == 0
    assert "synth: wrote 1 scenes" in capsys.readouterr().err
    monkeypatch.setenv("PLUMESEG_LOG", "error")
    assert run("synth", cfg) == 0
    assert "synth: wrote" not in capsys.readouterr().err


# --- synth ----------------------------------------------------------------------------


def test_synth_count_zero_gives_empty_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.json", dict(TINY, out="out", synth=dict(TINY["synth"], count=0)))
    assert run("synth", cfg) == 0
    man = json.loads((tmp_path / "out" / "synth" / "manifest.json").read_text())
    assert man["count"] == 0 and man["samples"] == []
    assert list((tmp_path / "out" / "synth" / "scenes").iterdir()) == []


def test_synth_reproducible_and_counted(tmp_path, pipeline):
    root, _ = pipeline
    cfg = write_config(tmp_path / "c.json", dict(TINY, out="again"))
    assert run("synth", cfg) == 0
    first, second = outputs(root / "out" / "synth"), outputs(tmp_path / "again" / "synth")
    assert first == second
    man = json.loads((root / "out" / "synth" / "manifest.json").read_text())
    assert man["count"] == len(man["samples"]) == 24
    assert len(list((root / "out" / "synth" / "scenes").glob("*.grd"))) == 24


def test_synth_annotations_reproduce_clean_masks(pipeline):
    from plumeseg.annotations import match_time, parse_annotations, rasterize

    root, _ = pipeline
    aset = parse_annotations(root / "out" / "synth" / "annotations.geojson")
    for path in sorted((root / "out" / "synth" / "masks_clean").glob("*.grd"))[:5]:
        m = read_scene(path)
        got = rasterize(match_time(aset, m.timestamp), m.transform, m.width, m.height)
        assert np.array_equal(got, m.plane(ChannelId.MASK).astype(np.uint8))


# --- prepare ----------------------------------------------------------------------------


def test_prepare_without_scenes_fails(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    cfg = write_config(tmp_path / "c.json", dict(TINY, out="out", prepare=dict(TINY["prepare"], scenes=["empty"], annotations=[])))
    assert run("prepare", cfg) == cli.EXIT_FAILURE
    assert "EmptyError" in capsys.readouterr().err


def test_prepare_split_and_rerun(tmp_path, pipeline):
    root, _ = pipeline
    man = json.loads((root / "out" / "prepare" / "manifest.json").read_text())
    bases = {}
    for s in man["samples"]:
        assert bases.setdefault(s["base_id"], s["split"]) == s["split"]
    shares = {k: sum(1 for v in bases.values() if v == k) / len(bases) for k in ("train", "val", "test")}
    assert abs(shares["train"] - 0.70) <= 0.05 and abs(shares["val"] - 0.15) <= 0.05 and abs(shares["test"] - 0.15) <= 0.05
    shutil.copytree(root / "out" / "synth", tmp_path / "out" / "synth")
    assert run("prepare", write_config(tmp_path / "c.json", dict(TINY, out="out"))) == 0
    assert outputs(tmp_path / "out" / "prepare") == outputs(root / "out" / "prepare")


# --- train ------------------------------------------------------------------------------


def test_train_outputs(pipeline):
    root, _ = pipeline
    stage = root / "out" / "train"
    rows = read_csv(stage / "history.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    for name in ("loss.svg", "dice.svg"):
        svg = (stage / name).read_text()
        assert svg.count('class="series"') == 2
        assert 'data-label="train"' in svg and 'data-label="validation"' in svg
    assert (stage / "ckpt_epoch0.bin").exists() and (stage / "model.bin").exists()


def test_train_full_schedule_history(tmp_path, pipeline):
    root, _ = pipeline
    shutil.copytree(root / "out" / "prepare", tmp_path / "out" / "prepare")
    cfg = dict(TINY, out="out")
    cfg["train"] = {"epochs": 21, "batch": 64, "checkpoint_every": 0}
    assert run("train", write_config(tmp_path / "c.json", cfg)) == 0
    rows = read_csv(tmp_path / "out" / "train" / "history.csv")
    assert len(rows) == 21
    assert [float(r["lr"]) for r in rows] == [5e-5] * 9 + [5e-6] * 9 + [5e-7] * 3


def test_resume_continues_history(tmp_path, pipeline):
    root, _ = pipeline
    for name in ("full", "part"):
        shutil.copytree(root / "out" / "prepare", tmp_path / name / "prepare")
    full = write_config(tmp_path / "full.json", dict(TINY, out="full", train=dict(TINY["train"], epochs=4)))
    assert run("train", full) == 0
    part = write_config(tmp_path / "part.json", dict(TINY, out="part", train=dict(TINY["train"], epochs=2)))
    assert run("train", part) == 0
    resumed = dict(TINY, out="part", train=dict(TINY["train"], epochs=4, resume="part/train/ckpt_epoch1.bin"))
    assert run("train", write_config(tmp_path / "resume.json", resumed)) == 0
    a, b = read_csv(tmp_path / "full" / "train" / "history.csv"), read_csv(tmp_path / "part" / "train" / "history.csv")
    assert [r["epoch"] for r in b] == ["0", "1", "2", "3"]
    assert a == b
    ma, _ = load_checkpoint(tmp_path / "full" / "train" / "model.bin")
    mb, _ = load_checkpoint(tmp_path / "part" / "train" / "model.bin")
    assert all(np.array_equal(ma.params[k], mb.params[k]) for k in ma.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path, pipeline, capsys):
    root, _ = pipeline
    shutil.copytree(root / "out" / "prepare", tmp_path / "out" / "prepare")
    cfg = dict(TINY, out="out", train=dict(TINY["train"], lr0=1e30, epochs=3))
    assert run("train", write_config(tmp_path / "c.json", cfg)) == cli.EXIT_NUMERICS
    assert "numerical failure" in capsys.readouterr().err


def test_train_band_mode_mismatch(tmp_path, pipeline):
    root, _ = pipeline
    shutil.copytree(root / "out" / "prepare", tmp_path / "out" / "prepare")
    cfg = write_config(tmp_path / "c.json", dict(TINY, out="out", band_mode="3band"))
    assert run("train", cfg) == cli.EXIT_CONFIG


# --- predict ------------------------------------------------------------------------------


def test_predict_outputs_and_determinism(tmp_path, pipeline):
    root, _ = pipeline
    masks = sorted((root / "out" / "predict" / "masks").glob("*.grd"))
    assert len(masks) == 24
    for path in masks[:3]:
        m, s = read_scene(path), read_scene(root / "out" / "synth" / "scenes" / path.name)
        assert m.data.shape == (1, s.height, s.width) and m.channels == (ChannelId.MASK,)
        assert m.transform == s.transform and m.timestamp == s.timestamp
        assert set(np.unique(m.data)) <= {0.0, 1.0}
    assert len(read_csv(root / "out" / "predict" / "metrics.csv")) == 24
    shutil.copytree(root / "out" / "train", tmp_path / "out" / "train")
    cfg = dict(TINY, out="out", predict=dict(TINY["predict"], scenes=[str(root / "out" / "synth" / "scenes")], reference=[]))
    assert run("predict", write_config(tmp_path / "c.json", cfg)) == 0
    a, b = outputs(root / "out" / "predict"), outputs(tmp_path / "out" / "predict")
    assert {k: v for k, v in a.items() if k.startswith("masks/")} == b


def test_predict_zero_scenes(tmp_path, pipeline):
    root, _ = pipeline
    (tmp_path / "none").mkdir()
    cfg = dict(TINY, out="out", predict=dict(TINY["predict"], checkpoint=str(root / "out" / "train" / "model.bin"), scenes=["none"]))
    assert run("predict", write_config(tmp_path / "c.json", cfg)) == 0
    assert list((tmp_path / "out" / "predict" / "masks").iterdir()) == []


def test_predict_channel_mismatch(tmp_path, capsys):
    save_checkpoint(build_unet(UNetConfig(in_channels=5, depth=2, base_filters=1)), tmp_path / "m.bin")
    data = np.random.default_rng(0).uniform(0, 0.5, (3, 16, 16))
    (tmp_path / "s").mkdir()
    write_scene(RasterScene(data, ("Red", "GreenSynth", "Blue"), GeoTransform(0, 1, 0, 0, 0, -1), "EPSG:4326", T0), tmp_path / "s" / "a.grd")
    cfg = dict(TINY, out="out", band_mode="3band", predict={"checkpoint": "m.bin", "scenes": ["s"], "reference": [], "tile": 16})
    assert run("predict", write_config(tmp_path / "c.json", cfg)) == cli.EXIT_FAILURE
    assert "ChannelError" in capsys.readouterr().err


# --- validate -----------------------------------------------------------------------------


def test_validate_sources(tmp_path, pipeline, capsys):
    root, _ = pipeline
    synth = root / "out" / "synth"
    flat = tmp_path / "flat"
    flat.mkdir()
    for path in sorted((synth / "masks_clean").glob("*.grd")):
        m = read_scene(path)
        write_scene(RasterScene(np.zeros_like(m.data), m.channels, m.transform, m.crs, m.timestamp), flat / path.name)
    sources = [
        {"name": "Clean A", "kind": "masks", "paths": [str(synth / "masks_clean")]},
        {"name": "Clean B", "kind": "masks", "paths": [str(synth / "masks_clean")]},
        {"name": "Annotations", "kind": "annotations", "paths": [str(synth / "annotations.geojson")]},
        {"name": "Flat", "kind": "masks", "paths": [str(flat)]},
    ]
    cfg = dict(TINY, out="out", validate={"stations": str(synth / "stations.csv"), "pm25": str(synth / "pm25.csv"), "sources": sources})
    assert run("validate", write_config(tmp_path / "c.json", cfg)) == cli.EXIT_FAILURE
    assert "Flat" in capsys.readouterr().err
    rows = read_csv(tmp_path / "out" / "validate" / "comparison.csv")
    assert list(rows[0]) == list(cli.COMPARISON_COLUMNS)
    a, b, ann, flat_row = rows
    assert {k: v for k, v in a.items() if k != "source"} == {k: v for k, v in b.items() if k != "source"}
    assert flat_row["status"].startswith("flagged") and flat_row["beta1"] == ""
    # clean masks and run-rectangle annotations encode the same smoke
    assert float(ann["beta1"]) == pytest.approx(float(a["beta1"]), rel=1e-12)

    stations, pm25 = read_stations(synth / "stations.csv"), read_pm25(synth / "pm25.csv")
    direct = fe_fit(build_panel(stations, pm25, cli._mask_exposure([synth / "masks_clean"])))
    assert float(a["beta1"]) == direct.beta1 and float(a["within_adj_r2"]) == direct.within_adj_r2
    assert int(a["n_obs"]) == direct.n_obs and int(a["n_stations"]) == direct.n_stations
    svg = (tmp_path / "out" / "validate" / "comparison.svg").read_text()
    assert svg.count('class="bar"') == 3 and "n/a" in svg


def test_validate_default_sources(tmp_path, pipeline):
    root, _ = pipeline
    cfg = write_config(root / "v.json", dict(TINY, out="out"))
    code = run("validate", cfg)
    rows = read_csv(root / "out" / "validate" / "comparison.csv")
    assert [r["source"] for r in rows] == ["Annotations", "Model"]
    assert rows[0]["status"] == "ok"
    assert code == (cli.EXIT_OK if rows[1]["status"] == "ok" else cli.EXIT_FAILURE)
