"""Command-line front end: ``eadk <command> [options]``.

Settings resolve as flags > ``--config`` file (``key = value`` lines) >
built-in defaults.  Every command that writes a directory also writes
``run.log`` there holding the fully resolved settings in the same
``key = value`` form, so a run can be replayed with ``--config run.log``.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 numerical failure, 4 data mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint, datagen, evaluation, train
from .detector import DetectorConfig, extract_detections, forward, init_embedding_table
from . import autodiff as ad
from .errors import ContractError, ParseError, TrainingError

log = logging.getLogger("eadk")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_DATA = 0, 1, 2, 3, 4

LOSS_HEADER = ["run_seed", "shots", "iteration", "loss_total", "loss_cls", "loss_l1", "loss_giou", "lr"]
SWEEP_HEADER = ["shots", "map_5095_mean", "map_5095_std", "map_50_mean", "map_50_std", "map_75_mean", "map_75_std"]
ABLATION_HEADER = ["embeddings_per_class"] + SWEEP_HEADER[1:]


class UsageError(Exception):
    pass


class DataMismatch(Exception):
    pass


# -- settings ----------------------------------------------------------------
def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


def _float_tuple(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)


def _parser_for(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _float_tuple
    return str


def _field_keys(dc_defaults):
    return {f.name: (getattr(dc_defaults, f.name), _parser_for(getattr(dc_defaults, f.name))) for f in fields(dc_defaults)}


TRAIN_KEYS = _field_keys(train.ADAPT_DEFAULTS)
DETECTOR_KEYS = _field_keys(DetectorConfig())

# command -> {key: (default, parser)}
COMMAND_KEYS = {
    "gen-data": {
        "out": (None, str), "seed": (7, int), "occlusion": (0.3, float), "scenes": (0, int),
        "eval_scenes": (0, int), "max_objects": (4, int), "image_size": (64, int),
    },
    "pretrain": {
        "data": (None, str), "out": (None, str), "init_seed": (0, int),
        **{k: (getattr(train.PRETRAIN_DEFAULTS, k), p) for k, (_, p) in TRAIN_KEYS.items()},
        **DETECTOR_KEYS,
    },
    "adapt": {
        "model": (None, str), "data": (None, str), "out": (None, str), "shots": (4, int), "runs": (10, int),
        "embeddings_per_class": ("4", str), "train_split": ("novel-train", str), "test_split": ("novel-test", str),
        **{k: v for k, v in TRAIN_KEYS.items() if k not in ("tokens_per_class", "seed")},
        "seed": (0, int),
    },
    "sweep": {
        "model": (None, str), "data": (None, str), "out": (None, str), "shots": ("1,2,4,8,16", _int_list),
        "runs": (10, int), "embeddings_per_class": (4, int), "train_split": ("novel-train", str),
        "test_split": ("novel-test", str),
        **{k: v for k, v in TRAIN_KEYS.items() if k not in ("tokens_per_class", "seed")},
        "seed": (0, int),
    },
    "eval": {
        "model": (None, str), "embeddings": (None, str), "data": (None, str), "split": ("novel-test", str),
        "out": ("eval.csv", str), "shots": (0, int), "run_seed": (0, int), "embeddings_per_class": (4, int),
        "sigma_init": (train.ADAPT_DEFAULTS.sigma_init, float), "score_thr": (0.0, float),
    },
    "predict": {
        "model": (None, str), "embeddings": (None, str), "image": (None, str), "out": (None, str),
        "json": ("", str), "score_thr": (0.5, float), "max_dets": (100, int), "classes": ("", str),
    },
}
REQUIRED = {
    "gen-data": ["out"],
    "pretrain": ["data", "out"],
    "adapt": ["model", "data", "out"],
    "sweep": ["model", "data", "out"],
    "eval": ["model", "embeddings", "data"],
    "predict": ["model", "embeddings", "image", "out"],
}


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def resolve(command, flags, file_values=None):
    """Merge defaults, config-file values and explicit flags for ``command``."""
    known = COMMAND_KEYS[command]
    out = {k: d for k, (d, _) in known.items()}
    for source in (file_values or {}, {k: v for k, v in flags.items() if v is not None}):
        for key, value in source.items():
            if key not in known:
                raise UsageError(f"unknown config key '{key}' for {command}")
            parser = known[key][1]
            try:
                out[key] = parser(value) if isinstance(value, str) or parser in (_int_list, _float_tuple) else value
            except ValueError as exc:
                raise UsageError(f"bad value for '{key}': {exc}") from None
    if isinstance(out.get("shots"), str):
        out["shots"] = _int_list(out["shots"])
    missing = [k for k in REQUIRED[command] if not out.get(k)]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join(missing)}")
    return out


def _fmt_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def echo_config(settings, path=None):
    lines = [f"{k} = {_fmt_value(v)}" for k, v in sorted(settings.items())]
    for line in lines:
        log.info("config %s", line)
    if path is not None:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return lines


def train_config(settings, base):
    kw = {k: settings[k] for k in TRAIN_KEYS if k in settings}
    return train.with_overrides(base, **kw)


def detector_config(settings):
    return DetectorConfig(**{k: settings[k] for k in DETECTOR_KEYS})


# -- argument parsing -------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag spelling -> setting key
ALIASES = {"iters": "iterations", "batch": "batch_size", "lr": "lr0"}


def _add_setting_flags(p, command, skip=()):
    for key, (default, parser) in COMMAND_KEYS[command].items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        alias = [f"--{a}" for a, k in ALIASES.items() if k == key]
        if isinstance(default, bool):
            p.add_argument(flag, *alias, dest=key, default=None, type=_bool, metavar="BOOL")
        else:
            p.add_argument(flag, *alias, dest=key, default=None, type=str, metavar=key.upper())


def build_parser():
    p = _Parser(prog="eadk", description="Embedding-only few-shot adaptation of a toy open-vocabulary detector.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "gen-data": "write the synthetic base/novel benchmark",
        "pretrain": "train the detector and a base-class table",
        "adapt": "fit fresh embedding tables on k-shot subsets and evaluate them",
        "sweep": "run adapt over several shot counts and plot the trend",
        "eval": "score a model + embeddings on a split",
        "predict": "draw detections for one PPM image",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", default=None, help="key = value settings file")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        _add_setting_flags(sp, name)
    return p


# -- commands ---------------------------------------------------------------
def _prepare_out(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(s):
    out = _prepare_out(s["out"])
    echo_config(s, out / "run.log")
    manifests = datagen.build_benchmark(out, seed=s["seed"], occlusion=s["occlusion"],
                                        train_scenes=s["scenes"] or None, eval_scenes=s["eval_scenes"] or None,
                                        max_objects=s["max_objects"], image_size=s["image_size"])
    for name, m in manifests.items():
        counts = {c.name: 0 for c in m.categories}
        names = {c.id: c.name for c in m.categories}
        for a in m.annotations:
            counts[names[a.category_id]] += 1
        per_class = ", ".join(f"{k}={v}" for k, v in counts.items())
        print(f"{name}: {len(m.images)} images, {len(m.annotations)} objects ({per_class})")
    return EXIT_OK


def _loss_rows(history, run_seed, shots):
    return [[run_seed, shots, i, r["total"], r["cls"], r["l1"], r["giou"], r["lr"]] for i, r in enumerate(history)]


def cmd_pretrain(s):
    out = _prepare_out(s["out"])
    echo_config(s, out / "run.log")
    base = datagen.load_split(s["data"], "base-train")
    val = datagen.load_split(s["data"], "base-val")
    cfg = train_config(s, train.PRETRAIN_DEFAULTS)
    dcfg = detector_config(s)
    if base.images.shape[1] != dcfg.image_size:
        raise DataMismatch(f"images are {base.images.shape[1]} px, model expects {dcfg.image_size}")

    def progress(it, rec):
        if (it + 1) % 100 == 0 or it == 0:
            log.info("pretrain %d/%d loss %.4f", it + 1, cfg.iterations, rec["total"])

    weights, table, history = train.pretrain(base, cfg, dcfg, init_seed=s["init_seed"], callback=progress)
    checkpoint.save_weights(out / "model.eadk", weights)
    checkpoint.save_table(out / "base_embeddings.eadk", table)
    loss_csv = out / "pretrain_loss.csv"
    loss_csv.unlink(missing_ok=True)
    evaluation.append_csv(loss_csv, LOSS_HEADER, _loss_rows(history, cfg.seed, 0))
    summary = evaluation.evaluate_model(weights, table, val)
    _fresh(out / "base_val.csv")
    evaluation.append_csv(out / "base_val.csv", evaluation.SUMMARY_HEADER,
                          [["base-val", 0, cfg.seed, summary.map_5095, summary.map_50, summary.map_75]])
    print(f"base-val mAP@50:95 {summary.map_5095:.4f}  mAP@50 {summary.map_50:.4f}  mAP@75 {summary.map_75:.4f}")
    return EXIT_OK


def _check_layout(table, split):
    if table.num_classes != split.num_classes:
        raise DataMismatch(f"embeddings cover {table.num_classes} classes, split has {split.num_classes}")


def run_cell(weights, train_split, test_split, shots, run_seed, cfg):
    """One k-shot adaptation run: sample, adapt, evaluate. Returns (table, history, summary)."""
    if shots > len(train_split):
        raise DataMismatch(f"cannot draw {shots} shots from {len(train_split)} training images")
    pool = train_split.subset(train.few_shot_sample(len(train_split), shots, run_seed))
    cfg = train.with_overrides(cfg, seed=run_seed)
    table, history = train.adapt(weights, pool, cfg, num_classes=train_split.num_classes)
    summary = evaluation.evaluate_model(weights, table, test_split)
    return table, history, summary


def _run_cells(weights, train_split, test_split, cells, cfg):
    """Run (shots, run_seed, T) cells, possibly in parallel; results come back in input order."""
    def one(cell):
        shots, seed, tokens = cell
        return run_cell(weights, train_split, test_split, shots, seed,
                        train.with_overrides(cfg, tokens_per_class=tokens))

    threads = min(datagen.env_threads(), len(cells))
    if threads <= 1:
        return [one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, cells))


def _load_adapt_inputs(s):
    weights = checkpoint.load_weights(s["model"])
    train_split = datagen.load_split(s["data"], s["train_split"])
    test_split = datagen.load_split(s["data"], s["test_split"])
    if train_split.category_names != test_split.category_names:
        raise DataMismatch("train and test splits have different categories")
    if train_split.images.shape[1] != weights.config.image_size:
        raise DataMismatch(f"images are {train_split.images.shape[1]} px, model expects {weights.config.image_size}")
    return weights, train_split, test_split


def _write_cell_outputs(out, s, shots, tokens, seeds, results):
    emb_dir = out / "embeddings"
    emb_dir.mkdir(exist_ok=True)
    loss_rows, summary_rows, summaries = [], [], []
    for seed, (table, history, summary) in zip(seeds, results):
        checkpoint.save_table(emb_dir / f"k{shots}_T{tokens}_seed{seed}.eadk", table)
        loss_rows += _loss_rows(history, seed, shots)
        summary_rows.append([s["test_split"], shots, seed, summary.map_5095, summary.map_50, summary.map_75])
        summaries.append(summary)
    agg = evaluation.aggregate_runs(summaries)
    return loss_rows, summary_rows, agg


def _fresh(*paths):
    for p in paths:
        p.unlink(missing_ok=True)


def cmd_adapt(s):
    out = _prepare_out(s["out"])
    tokens_list = _int_list(s["embeddings_per_class"])
    if not tokens_list or s["runs"] < 1:
        raise UsageError("need at least one embeddings-per-class value and one run")
    settings = dict(s, embeddings_per_class=tokens_list)
    echo_config(settings, out / "run.log")
    weights, train_split, test_split = _load_adapt_inputs(s)
    shots = int(s["shots"][0] if isinstance(s["shots"], list) else s["shots"])
    seeds = [s["seed"] + i for i in range(s["runs"])]
    cfg = train_config(s, train.ADAPT_DEFAULTS)
    cells = [(shots, seed, t) for t in tokens_list for seed in seeds]
    results = _run_cells(weights, train_split, test_split, cells, cfg)
    ablation = []
    for j, tokens in enumerate(tokens_list):
        cell_dir = out if len(tokens_list) == 1 else _prepare_out(out / f"T{tokens}")
        chunk = results[j * len(seeds):(j + 1) * len(seeds)]
        loss_rows, summary_rows, agg = _write_cell_outputs(cell_dir, s, shots, tokens, seeds, chunk)
        loss_csv, res_csv, agg_csv = cell_dir / "adapt_loss.csv", cell_dir / "results.csv", cell_dir / "aggregate.csv"
        _fresh(loss_csv, res_csv, agg_csv)
        evaluation.append_csv(loss_csv, LOSS_HEADER, loss_rows)
        mean_row = [s["test_split"], shots, "mean"] + [agg.mean[m] for m in evaluation.METRICS]
        evaluation.append_csv(res_csv, evaluation.SUMMARY_HEADER, summary_rows + [mean_row])
        evaluation.append_csv(agg_csv, evaluation.AGGREGATE_HEADER, evaluation.aggregate_rows(agg))
        ablation.append([tokens] + _mean_std(agg))
        print(f"T={tokens} k={shots}: " + "  ".join(
            f"{m} {agg.mean[m]:.4f}±{agg.std[m]:.4f}" for m in evaluation.METRICS))
    if len(tokens_list) > 1:
        abl = out / "ablation.csv"
        _fresh(abl)
        evaluation.append_csv(abl, ABLATION_HEADER, ablation)
    return EXIT_OK


def _mean_std(agg):
    row = []
    for m in evaluation.METRICS:
        row += [agg.mean[m], agg.std[m]]
    return row


def cmd_sweep(s):
    out = _prepare_out(s["out"])
    shots_list = sorted(set(_int_list(s["shots"])))
    if not shots_list or s["runs"] < 1:
        raise UsageError("need at least one shot count and one run")
    echo_config(dict(s, shots=shots_list), out / "run.log")
    weights, train_split, test_split = _load_adapt_inputs(s)
    seeds = [s["seed"] + i for i in range(s["runs"])]
    cfg = train_config(s, train.ADAPT_DEFAULTS)
    tokens = s["embeddings_per_class"]
    cells = [(k, seed, tokens) for k in shots_list for seed in seeds]
    for k in shots_list:
        if k > len(train_split):
            raise DataMismatch(f"cannot draw {k} shots from {len(train_split)} training images")
    results = _run_cells(weights, train_split, test_split, cells, cfg)
    loss_csv, res_csv, sweep_csv = out / "adapt_loss.csv", out / "results.csv", out / "sweep.csv"
    _fresh(loss_csv, res_csv, sweep_csv)
    rows = []
    for j, k in enumerate(shots_list):
        chunk = results[j * len(seeds):(j + 1) * len(seeds)]
        loss_rows, summary_rows, agg = _write_cell_outputs(out, s, k, tokens, seeds, chunk)
        evaluation.append_csv(loss_csv, LOSS_HEADER, loss_rows)
        evaluation.append_csv(res_csv, evaluation.SUMMARY_HEADER, summary_rows)
        rows.append([k] + _mean_std(agg))
        print(f"k={k}: " + "  ".join(f"{m} {agg.mean[m]:.4f}±{agg.std[m]:.4f}" for m in evaluation.METRICS))
    evaluation.append_csv(sweep_csv, SWEEP_HEADER, rows)
    (out / "sweep.svg").write_text(trend_svg(rows), encoding="utf-8")
    return EXIT_OK


def load_embeddings(spec, weights, split, tokens_per_class, sigma):
    """A table from a checkpoint path, or a frozen random one for ``random:SEED``."""
    if spec.startswith("random:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad random embeddings spec {spec!r}") from None
        return init_embedding_table(split.num_classes, tokens_per_class, weights.config.model_dim, seed, sigma)
    return checkpoint.load_table(spec)


def cmd_eval(s):
    weights = checkpoint.load_weights(s["model"])
    split = datagen.load_split(s["data"], s["split"])
    table = load_embeddings(s["embeddings"], weights, split, s["embeddings_per_class"], s["sigma_init"])
    _check_layout(table, split)
    if table.dim != weights.config.model_dim:
        raise DataMismatch(f"embedding width {table.dim} does not match model_dim {weights.config.model_dim}")
    dets = evaluation.predict(weights, table, split.images, score_thr=s["score_thr"])
    summary = evaluation.evaluate([evaluation.detections_to_xyxy(d) for d in dets],
                                  evaluation.split_ground_truth(split), table.num_classes)
    out = Path(s["out"])
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.append_csv(out, evaluation.SUMMARY_HEADER,
                          [[s["split"], s["shots"], s["run_seed"], summary.map_5095, summary.map_50, summary.map_75]])
    print(f"{s['split']}: mAP@50:95 {summary.map_5095:.4f}  mAP@50 {summary.map_50:.4f}  mAP@75 {summary.map_75:.4f}")
    return EXIT_OK


def cmd_predict(s):
    weights = checkpoint.load_weights(s["model"])
    raster = datagen.read_ppm_bytes(s["image"])
    image = raster.astype(np.float64) / 255.0
    h, w = raster.shape[:2]
    if (h, w) != (weights.config.image_size,) * 2:
        raise DataMismatch(f"image is {w}x{h}, model expects {weights.config.image_size} square")
    table = checkpoint.load_table(s["embeddings"]) if not s["embeddings"].startswith("random:") else \
        init_embedding_table(len(s["classes"].split(",")) if s["classes"] else 2, 4, weights.config.model_dim,
                             int(s["embeddings"].split(":", 1)[1]))
    names = [n.strip() for n in s["classes"].split(",")] if s["classes"] else []
    if names and len(names) != table.num_classes:
        raise DataMismatch(f"{len(names)} class names given, embeddings cover {table.num_classes} classes")
    with ad.no_grad():
        res = forward(image, table, weights)
    dets = extract_detections(res.probs.data[0], res.boxes.data[0], table.layout, s["score_thr"], s["max_dets"])
    records = []
    canvas = raster.copy()
    for cls, score, box in dets:
        x0, y0, x1, y1 = _pixel_box(box, w, h)
        records.append({"class": names[cls] if names else cls, "score": round(score, 6),
                        "bbox": [x0, y0, x1 - x0, y1 - y0]})
        draw_detection(canvas, (x0, y0, x1, y1), cls, score)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.write_ppm(out, canvas)
    json_path = Path(s["json"]) if s["json"] else out.with_suffix(".json")
    json_path.write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
    print(f"{len(records)} detections -> {out}, {json_path}")
    return EXIT_OK


# -- rendering ---------------------------------------------------------------
PALETTE = np.array([[255, 64, 64], [64, 160, 255], [255, 255, 255], [255, 0, 255], [0, 255, 255], [255, 160, 0]],
                   dtype=np.uint8)

# 3x5 glyphs, rows top to bottom, 3 bits each
_GLYPHS = {
    "0": (7, 5, 5, 5, 7), "1": (2, 6, 2, 2, 7), "2": (7, 1, 7, 4, 7), "3": (7, 1, 7, 1, 7),
    "4": (5, 5, 7, 1, 1), "5": (7, 4, 7, 1, 7), "6": (7, 4, 7, 5, 7), "7": (7, 1, 1, 1, 1),
    "8": (7, 5, 7, 5, 7), "9": (7, 5, 7, 1, 7), ".": (0, 0, 0, 0, 2), ":": (0, 2, 0, 2, 0),
}


def _pixel_box(box, w, h):
    """cxcywh fractions to integer pixel corners clipped to the image."""
    cx, cy, bw, bh = (float(v) for v in box)
    x0 = int(np.clip(round((cx - bw / 2) * w), 0, w - 1))
    y0 = int(np.clip(round((cy - bh / 2) * h), 0, h - 1))
    x1 = int(np.clip(round((cx + bw / 2) * w), x0 + 1, w))
    y1 = int(np.clip(round((cy + bh / 2) * h), y0 + 1, h))
    return x0, y0, x1, y1


def draw_text(canvas, x, y, text, color):
    h, w = canvas.shape[:2]
    for ch in text:
        rows = _GLYPHS.get(ch)
        if rows is not None:
            for dy, bits in enumerate(rows):
                for dx in range(3):
                    if bits >> (2 - dx) & 1 and 0 <= y + dy < h and 0 <= x + dx < w:
                        canvas[y + dy, x + dx] = color
        x += 4


def draw_detection(canvas, corners, cls, score):
    """Rectangle outline plus a 'class:score' label inside its top-left corner."""
    x0, y0, x1, y1 = corners
    color = PALETTE[cls % len(PALETTE)]
    canvas[y0, x0:x1] = color
    canvas[y1 - 1, x0:x1] = color
    canvas[y0:y1, x0] = color
    canvas[y0:y1, x1 - 1] = color
    draw_text(canvas, x0 + 2, y0 + 2, f"{cls}:{int(round(score * 100)):02d}", color)


def trend_svg(rows, width=480, height=320):
    """Static plot of mean mAP vs shots with a +-1 std band per metric."""
    colors = {"map_5095": "#1f77b4", "map_50": "#d62728", "map_75": "#2ca02c"}
    left, right, top, bottom = 50, 110, 20, 40
    pw, ph = width - left - right, height - top - bottom
    shots = [r[0] for r in rows]
    n = len(shots)

    def px(i):
        return left + (pw * i / (n - 1) if n > 1 else pw / 2)

    def py(v):
        return top + ph * (1.0 - min(max(v, 0.0), 1.0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{left - 6}" y="{py(t) + 4:.1f}" font-size="10" text-anchor="end">{t:.2f}</text>')
    for i, k in enumerate(shots):
        parts.append(f'<text x="{px(i):.1f}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" font-size="11" text-anchor="middle">shots</text>')
    for j, metric in enumerate(evaluation.METRICS):
        mean = [r[1 + 2 * j] for r in rows]
        std = [r[2 + 2 * j] for r in rows]
        upper = [f"{px(i):.1f},{py(m + s):.1f}" for i, (m, s) in enumerate(zip(mean, std))]
        lower = [f"{px(i):.1f},{py(m - s):.1f}" for i, (m, s) in reversed(list(enumerate(zip(mean, std))))]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{colors[metric]}" fill-opacity="0.15" '
                     f'stroke="none"/>')
        line = " ".join(f"{px(i):.1f},{py(m):.1f}" for i, m in enumerate(mean))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{colors[metric]}" stroke-width="2"/>')
        ly = top + 14 * (j + 1)
        parts.append(f'<text x="{left + pw + 8}" y="{ly}" font-size="11" fill="{colors[metric]}">{metric}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (gen-data, pretrain, adapt, sweep, eval, predict)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        flags = {ALIASES.get(k, k): v for k, v in flags.items()}
        file_values = read_config_file(args.config) if args.config else {}
        settings = resolve(args.command, flags, file_values)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataMismatch, ContractError) as exc:
        print(f"data mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
