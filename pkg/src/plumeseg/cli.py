"""
Command-line pipeline
---------------------
``plumeseg {synth,prepare,train,predict,validate} --config run.json [overrides]``

Each subcommand reads one JSON run config, applies flag overrides, validates
the result against :data:`CONFIG_SCHEMA` before touching the filesystem, and
writes its outputs under ``<out>/<command>/`` together with a
``manifest.json`` holding the resolved config and a sha256 checksum of every
output file. Relative paths in the config are resolved against the config
file's directory; inputs left unset default to the previous stage's outputs
under ``<out>``.

Exit codes: 0 success, 1 data or partial failure, 2 invalid config or usage,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import zlib
from dataclasses import replace
from datetime import date, datetime, time, timedelta, timezone
from pathlib import Path

import jsonschema
import numpy as np

from plumeseg import __version__
from plumeseg.annotations import AnnotationSet, mask_to_polygons, match_time, parse_annotations, rasterize, write_annotations, write_rejects
from plumeseg.dataset import (
    NormStats,
    SplitManifest,
    SynthConfig,
    generate_synthetic,
    group_split,
    inject_label_noise,
    noise_from_json,
    normalize,
    read_sample,
    sample_crops,
    scene_rng,
    write_sample,
)
from plumeseg.errors import ConfigError, DofError, EmptyError, NoWithinVariationError, NumericsError, PlumeSegError
from plumeseg.evaluation import confusion, dice, predict_scene, threshold
from plumeseg.nn.checkpoint import load_checkpoint, save_checkpoint
from plumeseg.nn.optim import TrainHyper
from plumeseg.nn.unet import UNetConfig, build_unet
from plumeseg.panelfe import Station, build_panel, daily_exposure, fe_fit, read_pm25, read_stations, smoke_indicator, write_pm25, write_result, write_stations
from plumeseg.plots import bar_chart, line_chart
from plumeseg.raster import BandMode, ChannelId, RasterScene, composite_true_color, read_scene, write_scene
from plumeseg.training import TrainConfig, read_history, train, write_history

log = logging.getLogger("plumeseg")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERICS = 0, 1, 2, 3
COMMANDS = ("synth", "prepare", "train", "predict", "validate")

_num = {"type": "number"}
_int = {"type": "integer"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_ipair = {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}
_paths = {"type": "array", "items": {"type": "string"}}
_noise = {"type": ["object", "array", "null"]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


CONFIG_SCHEMA = _obj(
    {
        "seed": _int,
        "out": {"type": "string"},
        "band_mode": {"enum": [m.value for m in BandMode]},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "synth": _obj(
            {
                "count": {"type": "integer", "minimum": 0},
                "size": {"type": "integer", "minimum": 1},
                "plume_count": _ipair,
                "plume_intensity": _pair,
                "plume_sigma": _pair,
                "plume_aspect": _pair,
                "cloud_count": _ipair,
                "cloud_sigma": _pair,
                "label_threshold": _num,
                "label_noise": _noise,
                "pixel_size": {"type": "number", "exclusiveMinimum": 0},
                "origin": _pair,
                "crs": {"type": "string"},
                "start_date": {"type": "string", "format": "date"},
                "images_per_day": {"type": "integer", "minimum": 1},
                "annotation_minutes": {"type": "integer", "minimum": 0},
                "stations": {"type": "integer", "minimum": 0},
                "beta": _num,
                "station_effect": _pair,
                "noise_sd": {"type": "number", "minimum": 0},
            }
        ),
        "prepare": _obj(
            {
                "scenes": _paths,
                "annotations": _paths,
                "match_minutes": {"type": "integer", "minimum": 0},
                "crop_size": {"type": "integer", "minimum": 1},
                "n_max": {"type": "integer", "minimum": 1},
                "pos_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "min_positive_pixels": {"type": "integer", "minimum": 1},
                "fractions": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
            }
        ),
        "unet": _obj(
            {
                "depth": {"type": "integer", "minimum": 2},
                "base_filters": {"type": "integer", "minimum": 1},
                "prelu_init": _num,
            }
        ),
        "train": _obj(
            {
                "data": {"type": "string"},
                "lr0": {"type": "number", "exclusiveMinimum": 0},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "step_epochs": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 1},
                "beta1": _num,
                "beta2": _num,
                "eps": _num,
                "loss": {"enum": ["bce", "mae"]},
                "drop_highest": {"type": "boolean"},
                "drop_k": {"type": "integer", "minimum": 1},
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "micro_batch": {"type": ["integer", "null"], "minimum": 1},
                "resume": {"type": ["string", "null"]},
            }
        ),
        "predict": _obj(
            {
                "checkpoint": {"type": "string"},
                "scenes": _paths,
                "reference": _paths,
                "tile": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 1},
            }
        ),
        "validate": _obj(
            {
                "stations": {"type": "string"},
                "pm25": {"type": "string"},
                "sources": {
                    "type": "array",
                    "items": _obj(
                        {"name": {"type": "string"}, "kind": {"enum": ["annotations", "masks"]}, "paths": _paths},
                        required=("name", "kind", "paths"),
                    ),
                },
            }
        ),
    }
)

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "band_mode": "3band",
    "threshold": 0.5,
    "synth": {
        "count": 24,
        "size": 96,
        "images_per_day": 3,
        "start_date": "2018-08-01",
        "annotation_minutes": 30,
        "label_noise": None,
        "stations": 30,
        "beta": 12.0,
        "station_effect": [4.0, 20.0],
        "noise_sd": 3.0,
    },
    "prepare": {"match_minutes": 0, "crop_size": 300, "n_max": 15, "pos_frac": 0.6, "min_positive_pixels": 1, "fractions": [0.7, 0.15, 0.15]},
    "unet": {"depth": 5, "base_filters": 16, "prelu_init": 0.25},
    "train": {"loss": "bce", "drop_highest": False, "drop_k": 1, "checkpoint_every": 1, "micro_batch": None, "resume": None},
    "predict": {"tile": 300, "batch": 4},
    "validate": {},
}


# --- config ------------------------------------------------------------------


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def load_config(path, overrides: dict | None = None) -> dict:
    """Read, merge with defaults and overrides, validate, and resolve paths.

    Raises :class:`ConfigError` on any problem; nothing is written.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = raw
    for section, values in (overrides or {}).items():
        if isinstance(values, dict):
            cfg.setdefault(section, {})
            cfg[section].update(values)
        else:
            cfg[section] = values
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA, format_checker=jsonschema.FormatChecker())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        msgs = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(msgs))
    cfg = _merge(DEFAULTS, cfg)

    root = path.resolve().parent
    cfg["out"] = str((root / cfg["out"]).resolve())

    def resolve(p):
        return str((root / p).resolve())

    for section, keys in (("prepare", ("scenes", "annotations")), ("predict", ("scenes", "reference")), ("validate", ())):
        for key in keys:
            if key in cfg[section]:
                cfg[section][key] = [resolve(p) for p in cfg[section][key]]
    for section, key in (("train", "data"), ("train", "resume"), ("predict", "checkpoint"), ("validate", "stations"), ("validate", "pm25")):
        if cfg[section].get(key):
            cfg[section][key] = resolve(cfg[section][key])
    for src in cfg["validate"].get("sources", []):
        src["paths"] = [resolve(p) for p in src["paths"]]

    # semantic checks that the schema cannot express
    try:
        _synth_config(cfg)
        _hyper(cfg)
        UNetConfig(in_channels=BandMode(cfg["band_mode"]).n_planes, **cfg["unet"])
        noise_from_json(cfg["synth"]["label_noise"])
        if not math.isclose(sum(cfg["prepare"]["fractions"]), 1.0):
            raise ValueError("prepare.fractions must sum to 1")
    except (ValueError, TypeError, KeyError, PlumeSegError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


def _synth_config(cfg) -> SynthConfig:
    s = cfg["synth"]
    kw = {}
    for key in ("size", "label_threshold", "pixel_size", "crs"):
        if key in s:
            kw[key] = s[key]
    for key in ("plume_count", "plume_intensity", "plume_sigma", "plume_aspect", "cloud_count", "cloud_sigma", "origin"):
        if key in s:
            kw[key] = tuple(s[key])
    return SynthConfig(**kw)


def _hyper(cfg) -> TrainHyper:
    keys = ("lr0", "gamma", "step_epochs", "epochs", "batch", "beta1", "beta2", "eps")
    return TrainHyper(**{k: cfg["train"][k] for k in keys if k in cfg["train"]})


# --- helpers -----------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(stage_dir: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    outputs = {
        str(p.relative_to(stage_dir)): _sha256(p)
        for p in sorted(stage_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp")
    }
    doc = {
        "command": command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": cfg,
        "outputs": outputs,
    }
    doc.update(extra or {})
    (stage_dir / "manifest.json").write_text(json.dumps(doc, indent=1, default=str), encoding="utf-8")


def _expand(paths, suffixes) -> list[Path]:
    """Files named directly plus matching files inside named directories, sorted."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in suffixes))
        else:
            out.append(p)
    return out


def _ensure_composite(scene: RasterScene) -> RasterScene:
    if ChannelId.GREEN_SYNTH not in scene and all(c in scene for c in (ChannelId.RED, ChannelId.VEGGIE, ChannelId.BLUE)):
        return composite_true_color(scene)
    return scene


def _stage(cfg, name) -> Path:
    d = Path(cfg["out"]) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_annotations(paths) -> AnnotationSet:
    sets = [parse_annotations(p) for p in paths]
    if not sets:
        return AnnotationSet()
    total = sets[0]
    for s in sets[1:]:
        total = total.union(s)
    return total


def _within(aset: AnnotationSet, t: datetime, minutes: int) -> AnnotationSet:
    if minutes == 0:
        return match_time(aset, t)
    w = timedelta(minutes=minutes)
    return AnnotationSet(tuple(p for p in aset.polygons if p.start - w <= t <= p.end + w), aset.crs)


# --- commands ----------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    """Synthetic scenes, annotations drawn from (optionally noisy) labels, and a station panel."""
    s = cfg["synth"]
    seed = cfg["seed"]
    scfg = _synth_config(cfg)
    noise = noise_from_json(s["label_noise"])
    stage = _stage(cfg, "synth")
    for sub in ("scenes", "masks_clean"):
        (stage / sub).mkdir(exist_ok=True)
    day0 = datetime.combine(date.fromisoformat(s["start_date"]), time(18, 0), tzinfo=timezone.utc)
    half = timedelta(minutes=s["annotation_minutes"])

    polygons, samples, clean_by_day = [], [], {}
    for k in range(s["count"]):
        base = f"scene{k:04d}"
        ts = day0 + timedelta(days=k // s["images_per_day"], hours=2 * (k % s["images_per_day"]))
        rng = scene_rng(seed, base)
        scene, clean = generate_synthetic(replace(scfg, timestamp=ts), rng)
        noisy = inject_label_noise(clean, noise, rng)
        write_scene(scene, stage / "scenes" / f"{base}.grd")
        mask_scene = RasterScene(clean[None].astype(np.float32), (ChannelId.MASK,), scene.transform, scene.crs, ts)
        write_scene(mask_scene, stage / "masks_clean" / f"{base}.grd")
        polygons.extend(mask_to_polygons(noisy, scene.transform, ts - half, ts + half, base, scene.crs).polygons)
        clean_by_day.setdefault(ts.date(), []).append((clean, scene.transform))
        samples.append({"id": base, "timestamp": ts.isoformat(), "positive_fraction": float(clean.mean()), "noisy_fraction": float(noisy.mean())})
    write_annotations(AnnotationSet(tuple(polygons), scfg.crs), stage / "annotations.geojson")

    # stations at random map points inside the shared grid; PM2.5 responds to ANY-of-day clean smoke
    srng = np.random.default_rng([seed, zlib.crc32(b"stations")])
    x0, y0 = scfg.origin
    extent = scfg.size * scfg.pixel_size
    stations = [
        Station(f"st{i:03d}", float(x0 + srng.uniform(0.02, 0.98) * extent), float(y0 - srng.uniform(0.02, 0.98) * extent), scfg.crs)
        for i in range(s["stations"])
    ]
    effects = srng.uniform(*s["station_effect"], len(stations))
    records = []
    for day in sorted(clean_by_day):
        for st, alpha in zip(stations, effects):
            smoke = smoke_indicator(st, clean_by_day[day])
            records.append((st.id, day, max(0.0, float(alpha + s["beta"] * smoke + srng.normal(0, s["noise_sd"])))))
    write_stations(stations, stage / "stations.csv")
    write_pm25(records, stage / "pm25.csv")
    _write_manifest(stage, "synth", cfg, {"count": len(samples), "samples": samples})
    log.info("synth: wrote %d scenes, %d stations, %d PM2.5 rows", len(samples), len(stations), len(records))
    return EXIT_OK


def cmd_prepare(cfg: dict) -> int:
    """Rasterize labels, cut crops, split by base scene, write normalized samples."""
    p = cfg["prepare"]
    out = Path(cfg["out"])
    scene_paths = _expand(p.get("scenes", [out / "synth" / "scenes"]), {".grd"})
    if not scene_paths:
        raise EmptyError("no scenes to prepare")
    aset = _load_annotations(_expand(p.get("annotations", [out / "synth" / "annotations.geojson"]), {".geojson", ".json"}))
    band_mode = BandMode(cfg["band_mode"])
    stats = NormStats()
    stage = _stage(cfg, "prepare")
    (stage / "samples").mkdir(exist_ok=True)
    if aset.rejects:
        write_rejects(aset.rejects, stage / "rejects.jsonl")
        log.warning("prepare: %d annotation features rejected (see rejects.jsonl)", len(aset.rejects))

    samples = []
    for path in scene_paths:
        scene = _ensure_composite(read_scene(path))
        base = path.stem
        labels = rasterize(_within(aset, scene.timestamp, p["match_minutes"]), scene.transform, scene.width, scene.height, crs=scene.crs)
        crops = sample_crops(
            scene,
            labels,
            p["n_max"],
            p["pos_frac"],
            scene_rng(cfg["seed"], base),
            base_id=base,
            band_mode=band_mode,
            size=p["crop_size"],
            min_positive_pixels=p["min_positive_pixels"],
        )
        for c in crops:
            c = normalize(c, stats)
            write_sample(c, stage / "samples" / f"{c.id}.grd")
            samples.append(c)
    split = group_split(samples, p["fractions"], np.random.default_rng(cfg["seed"]))
    split.save(stage / "split.json")
    index = [
        {"id": c.id, "base_id": c.base_id, "positive": c.positive, "split": split.base_assignment[c.base_id], "path": f"samples/{c.id}.grd"}
        for c in samples
    ]
    _write_manifest(stage, "prepare", cfg, {"band_mode": band_mode.value, "samples": index})
    counts = {k: len(split.split_of(k)) for k in ("train", "val", "test")}
    log.info("prepare: %d crops from %d scenes, split %s", len(samples), len(scene_paths), counts)
    return EXIT_OK


def _load_split(data_dir: Path, names):
    manifest = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
    split = SplitManifest.load(data_dir / "split.json")
    by_id = {s["id"]: s for s in manifest["samples"]}
    out = []
    for name in names:
        out.append([read_sample(data_dir / by_id[i]["path"], i, by_id[i]["base_id"]) for i in split.split_of(name)])
    return manifest, out


def cmd_train(cfg: dict) -> int:
    """Train (or resume) the U-Net; write checkpoints, history CSV and SVG curves."""
    t = cfg["train"]
    band_mode = BandMode(cfg["band_mode"])
    data_dir = Path(t.get("data") or Path(cfg["out"]) / "prepare")
    prep, (train_set, val_set) = _load_split(data_dir, ("train", "val"))
    if prep.get("band_mode") != band_mode.value:
        raise ConfigError(f"data prepared for {prep.get('band_mode')} but band_mode is {band_mode.value}")
    tcfg = TrainConfig(
        hyper=_hyper(cfg),
        loss=t["loss"],
        drop_highest=t["drop_highest"],
        drop_k=t["drop_k"],
        band_mode=band_mode,
        seed=cfg["seed"],
        checkpoint_every=t["checkpoint_every"],
        micro_batch=t["micro_batch"],
        threshold=cfg["threshold"],
    )
    stage = _stage(cfg, "train")
    history_path = stage / "history.csv"
    records, start = [], 0
    if t.get("resume"):
        model, ck = load_checkpoint(t["resume"])
        start = int(ck.get("epoch", -1)) + 1
        if history_path.exists():
            records = [r for r in read_history(history_path) if r.epoch < start]
        log.info("train: resuming from %s at epoch %d", t["resume"], start)
    else:
        model = build_unet(UNetConfig(in_channels=band_mode.n_planes, **cfg["unet"]), seed=cfg["seed"])
    if model.cfg.in_channels != band_mode.n_planes:
        raise ConfigError(f"checkpoint expects {model.cfg.in_channels} input planes, {band_mode.value} gives {band_mode.n_planes}")

    def on_epoch(rec):
        records.append(rec)
        write_history(records, history_path)

    try:
        train(model, train_set, val_set, tcfg, out_dir=stage, start_epoch=start, on_epoch=on_epoch)
    finally:
        if records:
            _write_curves(records, stage)
    save_checkpoint(model, stage / "model.bin", epoch=tcfg.hyper.epochs - 1)
    _write_manifest(stage, "train", cfg, {"epochs_run": len(records), "resumed_from": start})
    return EXIT_OK


def _write_curves(records, stage: Path) -> None:
    ep = [r.epoch for r in records]
    loss = line_chart(
        {"train": (ep, [r.train_loss for r in records]), "validation": (ep, [r.val_loss for r in records])},
        "Loss per epoch", "epoch", "loss",
    )
    dice_svg = line_chart(
        {"train": (ep, [r.train_dice for r in records]), "validation": (ep, [r.val_dice for r in records])},
        "Mean Dice per epoch", "epoch", "Dice",
    )
    (stage / "loss.svg").write_text(loss, encoding="utf-8")
    (stage / "dice.svg").write_text(dice_svg, encoding="utf-8")


def cmd_predict(cfg: dict) -> int:
    """Tile-predict whole scenes and write thresholded Mask scenes (plus metrics when a reference exists)."""
    p = cfg["predict"]
    out = Path(cfg["out"])
    band_mode = BandMode(cfg["band_mode"])
    model, _ = load_checkpoint(p.get("checkpoint") or out / "train" / "model.bin")
    if model.cfg.in_channels != band_mode.n_planes:
        raise ConfigError(f"checkpoint expects {model.cfg.in_channels} input planes, {band_mode.value} gives {band_mode.n_planes}")
    scene_paths = _expand(p.get("scenes", [out / "synth" / "scenes"]), {".grd"})
    ref_paths = p.get("reference")
    if ref_paths is None:
        default_ref = out / "synth" / "annotations.geojson"
        ref_paths = [default_ref] if default_ref.exists() else []
    reference = _load_annotations(_expand(ref_paths, {".geojson", ".json"})) if ref_paths else None

    stage = _stage(cfg, "predict")
    (stage / "masks").mkdir(exist_ok=True)
    rows = []
    for path in scene_paths:
        scene = _ensure_composite(read_scene(path))
        prob = predict_scene(model, scene, band_mode, tile=p["tile"], batch=p["batch"])
        mask = threshold(prob, cfg["threshold"])
        write_scene(
            RasterScene(mask[None].astype(np.float32), (ChannelId.MASK,), scene.transform, scene.crs, scene.timestamp),
            stage / "masks" / f"{path.stem}.grd",
        )
        if reference is not None:
            truth = rasterize(match_time(reference, scene.timestamp), scene.transform, scene.width, scene.height)
            c = confusion(mask, truth)
            rows.append([path.stem, dice(mask, truth), c.tp, c.fp, c.fn, c.tn])
    if reference is not None:
        with open(stage / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "dice", "tp", "fp", "fn", "tn"])
            w.writerows(rows)
    _write_manifest(stage, "predict", cfg, {"scenes": len(scene_paths)})
    return EXIT_OK


def _annotation_exposure(paths) -> dict:
    aset = _load_annotations(_expand(paths, {".geojson", ".json"}))
    by_day: dict = {}
    for poly in aset.polygons:
        d = poly.start.date()
        while d <= poly.end.date():
            by_day.setdefault(d, []).append(poly)
            d += timedelta(days=1)
    return {d: [AnnotationSet(tuple(ps), aset.crs)] for d, ps in by_day.items()}


def _mask_exposure(paths) -> dict:
    pairs = []
    for path in _expand(paths, {".grd"}):
        scene = read_scene(path)
        pairs.append((scene.timestamp, (scene.plane(ChannelId.MASK), scene.transform)))
    return daily_exposure(pairs)


COMPARISON_COLUMNS = ("source", "beta1", "adj_r2", "within_adj_r2", "r2", "within_r2", "n_obs", "n_stations", "status")


def cmd_validate(cfg: dict) -> int:
    """Fit the station fixed-effects model once per smoke source and tabulate the fits."""
    v = cfg["validate"]
    out = Path(cfg["out"])
    stations = read_stations(v.get("stations") or out / "synth" / "stations.csv")
    pm25 = read_pm25(v.get("pm25") or out / "synth" / "pm25.csv")
    sources = v.get("sources") or [
        {"name": "Annotations", "kind": "annotations", "paths": [str(out / "synth" / "annotations.geojson")]},
        {"name": "Model", "kind": "masks", "paths": [str(out / "predict" / "masks")]},
    ]
    stage = _stage(cfg, "validate")
    rows, failed = [], []
    for src in sources:
        name = src["name"]
        exposure = _annotation_exposure(src["paths"]) if src["kind"] == "annotations" else _mask_exposure(src["paths"])
        panel = build_panel(stations, pm25, exposure)
        slug = "".join(ch if ch.isalnum() else "_" for ch in name)
        try:
            res = fe_fit(panel)
        except (NoWithinVariationError, DofError) as exc:
            failed.append(f"{name}: {exc}")
            rows.append([name] + [""] * 7 + [f"flagged: {type(exc).__name__}"])
            continue
        write_result(res, stage / f"fe_{slug}.json", stage / f"residuals_{slug}.csv")
        rows.append([name, res.beta1, res.adj_r2, res.within_adj_r2, res.r2, res.within_r2, res.n_obs, res.n_stations, "ok"])
    with open(stage / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_COLUMNS)
        w.writerows(rows)
    values = [r[3] if r[-1] == "ok" else None for r in rows]
    (stage / "comparison.svg").write_text(bar_chart([r[0] for r in rows], values, "Within adjusted R2 by smoke source", "W Adj. R2"), encoding="utf-8")
    _write_manifest(stage, "validate", cfg, {"failed_sources": failed})
    for msg in failed:
        print(f"validate: source failed: {msg}", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


HANDLERS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "predict": cmd_predict, "validate": cmd_validate}


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plumeseg", description="Smoke plume segmentation pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__.splitlines()[0])
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--threshold", type=float)
        p.add_argument("--band-mode", choices=[m.value for m in BandMode])
        p.add_argument("--loss", choices=["bce", "mae"])
        p.add_argument("--drop-highest", type=_parse_bool, metavar="BOOL")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = str(Path(args.out).resolve())
    if args.threshold is not None:
        o["threshold"] = args.threshold
    if args.band_mode is not None:
        o["band_mode"] = args.band_mode
    train_o = {}
    if args.loss is not None:
        train_o["loss"] = args.loss
    if args.drop_highest is not None:
        train_o["drop_highest"] = args.drop_highest
    if train_o:
        o["train"] = train_o
    return o


def _setup_logging() -> None:
    level_name = os.environ.get("PLUMESEG_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level_name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if level_name not in levels:
        log.warning("unknown PLUMESEG_LOG=%r, using warn", level_name)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"plumeseg: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"plumeseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"plumeseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (PlumeSegError, OSError, KeyError) as exc:
        print(f"plumeseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
