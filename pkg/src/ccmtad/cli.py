"""Command-line front end: ``ccmtad {synth,cluster,train,detect,eval}``.

Every command reads a flat config file (``--config``) plus ``--key value``
overrides and writes plain CSV/JSON files into ``output_dir``.

Exit codes: 0 success, 2 input/config error, 3 training failure,
4 checkpoint/data incompatibility, 5 evaluation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import clustering
from .config import ConfigError, RunConfig, build_config
from .data import (
    AnomalySegment,
    Dataset,
    NormalizationStats,
    SynthSpec,
    apply_minmax,
    downsample,
    drop_channels,
    fit_minmax,
    forward_fill,
    load_csv,
    moving_average,
    split_train_val,
    synth_generate,
    write_csv,
    zero_channels,
)
from .detector import (
    CalibrationTable,
    DetectorConfig,
    alpha_max_heuristic,
    calibrate,
    detect_stream,
    refine_boundaries,
)
from .errors import CCMTADError, ChannelMismatch, HeuristicUnavailable, TrainingDiverged, UndefinedMetric
from .evaluation import (
    add_fap_curve,
    aggregate_entities,
    alpha_grid,
    best_f1_sweep,
    f1,
    h_grid,
    point_based_sweep,
    pr_auc,
)
from .model import CausalMixerNet, ModelConfig, fit, input_gradient_map, load_checkpoint, reconstruct_series, save_checkpoint

log = logging.getLogger("ccmtad")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_COMPAT, EXIT_EVAL = 0, 2, 3, 4, 5

ASSIGNMENT_FILE = "assignment.json"
SILHOUETTE_FILE = "silhouette.csv"
CHECKPOINT_DIR = "checkpoint"
CALIBRATION_FILE = "calibration.json"
REPORT_FILE = "train_report.json"
SCORES_FILE = "scores.csv"
SEGMENTS_FILE = "segments.json"
METRICS_FILE = "metrics.json"
SCORE_COLUMNS = ("t", "g", "p", "beta", "s", "label")


class EvaluationError(CCMTADError, ValueError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- preprocessing shared by train and detect ---------------------------


def preprocessing_settings(cfg: RunConfig) -> dict:
    return {
        "drop_channels": cfg.drop_list,
        "zero_channels": cfg.zero_list,
        "downsample": cfg.downsample,
        "moving_average": cfg.moving_average,
    }


def preprocess(ds: Dataset, settings: dict) -> Dataset:
    """Channel directives, forward fill, downsampling and smoothing, in that order."""
    if settings["drop_channels"]:
        ds = drop_channels(ds, settings["drop_channels"])
    if settings["zero_channels"]:
        ds = zero_channels(ds, settings["zero_channels"])
    ds = forward_fill(ds)
    if settings["downsample"] > 1:
        ds = downsample(ds, settings["downsample"])
    if settings["moving_average"] > 1:
        ds = moving_average(ds, settings["moving_average"])
    return ds


def _load(path, label_column) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return load_csv(path, label_column=label_column or None)


# -- commands ------------------------------------------------------------


def parse_anomalies(text: str, offset: int = 0) -> tuple:
    """``"start:end:kind:magnitude;..."`` into anomaly segments shifted by ``offset``."""
    segments = []
    for item in filter(None, (p.strip() for p in text.split(";"))):
        parts = item.split(":")
        if len(parts) != 4:
            raise ConfigError(f"anomaly segment must be 'start:end:kind:magnitude', got {item!r}")
        try:
            start, end, mag = int(parts[0]), int(parts[1]), float(parts[3])
        except ValueError as exc:
            raise ConfigError(f"bad anomaly segment {item!r}") from exc
        segments.append(AnomalySegment(start + offset, end + offset, parts[2].strip(), mag))
    return tuple(segments)


def cmd_synth(cfg: RunConfig) -> dict:
    """Write ``train.csv``, ``test.csv`` and ``ground_truth.json``."""
    try:
        blocks = tuple(int(v) for v in cfg.synth_blocks.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"synth_blocks must be comma-separated counts, got {cfg.synth_blocks!r}") from exc
    n_train, n_test = cfg.synth_train_length, cfg.synth_test_length
    if n_train < 1 or n_test < 1:
        raise ConfigError("synth_train_length and synth_test_length must be positive")
    segments = parse_anomalies(cfg.synth_anomalies, offset=n_train)
    for seg in segments:
        if seg.start < n_train or seg.end > n_train + n_test:
            raise ConfigError(f"anomaly [{seg.start - n_train}, {seg.end - n_train}) lies outside the test range")
    spec = SynthSpec(
        block_sizes=blocks,
        length=n_train + n_test,
        anomaly_segments=segments,
        seed=cfg.seed,
        n_constant=cfg.synth_n_constant,
        noise_scale=cfg.synth_noise,
    )
    ds = synth_generate(spec)
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "train.csv", ds.slice(0, n_train))
    write_csv(out / "test.csv", ds.slice(n_train, n_train + n_test))
    planted = [k for k, size in enumerate(blocks) for _ in range(size)] + [len(blocks)] * cfg.synth_n_constant
    truth = {
        "seed": cfg.seed,
        "block_sizes": list(blocks),
        "n_constant": cfg.synth_n_constant,
        "planted_clusters": planted,
        "test_segments": [
            {"start": s.start - n_train, "end": s.end - n_train, "kind": s.kind, "magnitude": s.magnitude}
            for s in segments
        ],
    }
    _write_json(out / "ground_truth.json", truth)
    return truth


def cmd_cluster(cfg: RunConfig) -> clustering.ClusterAssignment:
    """Cluster the training channels; with an M range also write the silhouette table."""
    train = preprocess(_load(cfg.train_csv, cfg.label_column), preprocessing_settings(cfg))
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    m_values = cfg.m_values
    if len(m_values) > 1:
        if cfg.strategy != "profile-spectral":
            raise ConfigError("an M range is only supported with strategy=profile-spectral")
        profiles = clustering.compute_profiles(train.values)
        best, candidates = clustering.select_cluster_count(profiles, m_values, cfg.seed)
        with open(out / SILHOUETTE_FILE, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["M", "silhouette", "has_singleton"])
            for c in candidates:
                w.writerow([c.n_clusters, _fmt(c.silhouette), int(c.has_singleton)])
        assignment = next(c.assignment for c in candidates if c.n_clusters == best)
        payload = assignment.to_dict()
        payload["recommended_M"] = best
    else:
        assignment = clustering.cluster_variants(cfg.strategy, m_values[0], cfg.seed, train_values=train.values)
        payload = assignment.to_dict()
    payload["channel_names"] = list(train.channel_names)
    _write_json(out / ASSIGNMENT_FILE, payload)
    return assignment


def _assignment_for(cfg: RunConfig, train: Dataset) -> clustering.ClusterAssignment:
    path = cfg.output_path / ASSIGNMENT_FILE
    if path.is_file():
        payload = json.loads(path.read_text())
        names = payload.get("channel_names")
        if names is not None and list(names) != list(train.channel_names):
            raise ChannelMismatch(f"{path} was computed for different channels than {cfg.train_csv}")
        return clustering.ClusterAssignment.from_dict(payload)
    m_values = cfg.m_values
    if len(m_values) > 1:
        profiles = clustering.compute_profiles(train.values)
        best, candidates = clustering.select_cluster_count(profiles, m_values, cfg.seed)
        return next(c.assignment for c in candidates if c.n_clusters == best)
    return clustering.cluster_variants(cfg.strategy, m_values[0], cfg.seed, train_values=train.values)


def cmd_train(cfg: RunConfig) -> dict:
    """Fit the network, calibrate on the validation tail and write the checkpoint."""
    settings = preprocessing_settings(cfg)
    raw = preprocess(_load(cfg.train_csv, cfg.label_column), settings)
    stats = fit_minmax(raw)
    train = apply_minmax(raw, stats)
    fit_part, val_part = split_train_val(train, cfg.val_fraction, window=cfg.L)
    assignment = _assignment_for(cfg, train)
    model_cfg = ModelConfig(**cfg.model_kwargs())
    net = CausalMixerNet(train.n_channels, assignment, model_cfg)
    report = fit(net, fit_part.values, val_part.values, model_cfg)
    table = calibrate(reconstruct_series(net, val_part.values))
    try:
        a_max = alpha_max_heuristic(table.sorted_losses, cfg.gmm_components, cfg.seed)
    except HeuristicUnavailable as exc:
        log.warning("alpha_max heuristic unavailable (%s); sweeps use the full range", exc)
        a_max = None
    extra = {
        "channel_names": list(train.channel_names),
        "normalization": {"min": stats.minimum.tolist(), "max": stats.maximum.tolist()},
        "preprocessing": settings,
        "alpha_max": a_max,
    }
    ckpt = save_checkpoint(net, cfg.output_path / CHECKPOINT_DIR, extra)
    _write_json(ckpt / CALIBRATION_FILE, {"sorted_losses": table.sorted_losses.tolist()})
    summary = report.to_dict()
    wall = summary.pop("wall_time", None)
    summary.update({"alpha_max": a_max, "n_calibration": table.size, "n_train_steps": fit_part.n_steps})
    _write_json(cfg.output_path / REPORT_FILE, summary)
    log.info("trained in %.1f s", wall or 0.0)
    return summary


def load_run(checkpoint_dir):
    """``(net, extra, calibration table)`` from a checkpoint directory."""
    checkpoint_dir = Path(checkpoint_dir)
    if not (checkpoint_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"no checkpoint in {checkpoint_dir}")
    net, extra = load_checkpoint(checkpoint_dir)
    calib = json.loads((checkpoint_dir / CALIBRATION_FILE).read_text())
    return net, extra, CalibrationTable(np.asarray(calib["sorted_losses"], dtype=np.float64))


def prepare_test(cfg: RunConfig, extra: dict, path=None) -> Dataset:
    """Load a test CSV and apply the checkpoint's preprocessing and scaling."""
    ds = _load(path or cfg.test_csv, cfg.label_column)
    settings = extra["preprocessing"]
    expected = list(extra["channel_names"])
    present = [n for n in ds.channel_names if n not in settings["drop_channels"]]
    if present != expected:
        raise ChannelMismatch(f"test channels {present} do not match the checkpoint channels {expected}")
    ds = preprocess(ds, settings)
    norm = extra["normalization"]
    stats = NormalizationStats(np.asarray(norm["min"], dtype=np.float64), np.asarray(norm["max"], dtype=np.float64))
    return apply_minmax(ds, stats, clip=cfg.clip_range)


def score_stream(net, table: CalibrationTable, values, det_cfg: DetectorConfig):
    """Eval-mode losses, detector outputs and refined labels for one test stream."""
    g = reconstruct_series(net, values)
    res = detect_stream(g, table, det_cfg)
    segments, labels = refine_boundaries(res.raw_segments, res.s, res.beta)
    return res, segments, labels


def write_scores(path, res, labels, offset: int) -> None:
    """Score CSV with one row per scored step; ``t`` is the row index in the test stream."""
    with open(path, "w") as fh:
        fh.write(",".join(SCORE_COLUMNS) + "\n")
        for i in range(res.g.size):
            fh.write(
                f"{i + offset},{_fmt(res.g[i])},{_fmt(res.p[i])},{_fmt(res.beta[i])},{_fmt(res.s[i])},{int(labels[i])}\n"
            )


def cmd_detect(cfg: RunConfig, checkpoint_dir=None) -> list:
    """Score the test stream and write per-step scores and refined segments."""
    net, extra, table = load_run(checkpoint_dir or cfg.output_path / CHECKPOINT_DIR)
    test = prepare_test(cfg, extra)
    res, segments, labels = score_stream(net, table, test.values, DetectorConfig(**cfg.detector_kwargs()))
    off = net.config.L - 1
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / SCORES_FILE, res, labels, off)
    shifted = []
    for seg in segments:
        d = seg.to_dict()
        for key in ("t_a", "t_b", "t_a_star", "t_b_star"):
            d[key] += off
        shifted.append(d)
    _write_json(out / SEGMENTS_FILE, shifted)
    return shifted


def read_scores(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise ConfigError(f"{path} is not a score file (expected header {','.join(SCORE_COLUMNS)})")
    body = np.array(rows[1:], dtype=np.float64).reshape(-1, len(SCORE_COLUMNS))
    cols = {name: body[:, i] for i, name in enumerate(SCORE_COLUMNS)}
    cols["t"] = cols["t"].astype(int)
    cols["label"] = cols["label"].astype(np.int8)
    return cols


def aligned_labels(scores: dict, labels: np.ndarray) -> np.ndarray:
    """Ground truth at the scored steps; the label series must cover exactly the scored stream."""
    t = scores["t"]
    if t.size == 0:
        raise EvaluationError("score file has no rows")
    if labels.size != int(t[-1]) + 1:
        raise EvaluationError(f"labels have length {labels.size} but scores run to t={int(t[-1])}")
    return labels[t]


def _label_series(cfg: RunConfig, path) -> np.ndarray:
    ds = _load(path, cfg.label_column)
    if ds.labels is None:
        raise ConfigError(f"{path} has no {cfg.label_column!r} column")
    labels = ds.labels
    if cfg.downsample > 1:
        labels = downsample(ds, cfg.downsample).labels
    return np.asarray(labels, dtype=np.int8)


def _safe_pr_auc(scores, labels):
    try:
        return pr_auc(scores, labels)
    except UndefinedMetric:
        return None


def cmd_eval(cfg: RunConfig, args) -> dict:
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    if args.aggregate is not None:
        results = []
        for entity in args.entities or []:
            entity = Path(entity)
            scores = read_scores(entity / SCORES_FILE)
            truth = aligned_labels(scores, _label_series(cfg, entity / "test.csv"))
            results.append({"pred": scores["label"], "labels": truth})
        if not results:
            raise ConfigError("--aggregate needs --entities DIR [DIR ...]")
        metrics = aggregate_entities(results, args.aggregate)
        _write_json(out / METRICS_FILE, metrics)
        return metrics

    scores = read_scores(args.scores or out / SCORES_FILE)
    truth = aligned_labels(scores, _label_series(cfg, args.labels or cfg.test_csv))
    precision, recall, f = f1(scores["label"], truth)
    metrics = {
        "n_steps": int(truth.size),
        "n_anomalous": int(truth.sum()),
        "precision": precision,
        "recall": recall,
        "f1": f,
        "pr_auc_s": _safe_pr_auc(scores["s"], truth),
        "pr_auc_g": _safe_pr_auc(scores["g"], truth),
    }
    need_model = args.sweep or args.gradient_map is not None
    if need_model:
        net, extra, table = load_run(args.checkpoint or out / CHECKPOINT_DIR)
    if args.sweep:
        a_max = cfg.alpha_max.strip().lower()
        if a_max == "auto":
            a_max = extra.get("alpha_max") or 1.0
        else:
            try:
                a_max = float(a_max)
            except ValueError as exc:
                raise ConfigError(f"alpha_max must be 'auto' or a number, got {cfg.alpha_max!r}") from exc
        grid = alpha_grid(a_max, cfg.n_alpha, cfg.alpha_floor)
        seq = best_f1_sweep(scores["g"], table, truth, grid, cfg.delta, cfg.epsilon)
        point = point_based_sweep(scores["g"], truth)
        with open(out / "sweep.csv", "w") as fh:
            fh.write("alpha,h,precision,recall,f1\n")
            for a, h, pr, rc, ff in seq.grid:
                fh.write(f"{_fmt(a)},{_fmt(h)},{_fmt(pr)},{_fmt(rc)},{_fmt(ff)}\n")
        metrics["sweep"] = seq.to_dict()
        metrics["sweep"]["alpha_max"] = float(a_max)
        metrics["point_based"] = point.to_dict()
    if args.add_fap:
        curve = add_fap_curve(scores["s"], truth, h_grid(scores["s"]))
        with open(out / "add_fap.csv", "w") as fh:
            fh.write("h,add,fap\n")
            for h, add, fap in curve:
                fh.write(f"{_fmt(h)},{_fmt(add)},{_fmt(fap)}\n")
    if args.gradient_map is not None:
        t_eval, c_eval = args.gradient_map
        test = prepare_test(cfg, extra, args.labels or cfg.test_csv)
        L = net.config.L
        start = args.window_start
        if not 0 <= start <= test.n_steps - L:
            raise EvaluationError(f"window start {start} leaves no full {L}-step window in the test data")
        grad = input_gradient_map(net, test.values[start : start + L], t_eval, c_eval)
        with open(out / "gradient_map.csv", "w") as fh:
            fh.write("tau," + ",".join(test.channel_names) + "\n")
            for tau in range(L):
                fh.write(f"{tau}," + ",".join(_fmt(v) for v in grad[tau]) + "\n")
        metrics["gradient_map"] = {
            "t": t_eval,
            "c": c_eval,
            "window_start": start,
            "max_future": float(grad[t_eval + 1 :].max()) if t_eval + 1 < L else 0.0,
        }
    _write_json(out / METRICS_FILE, metrics)
    return metrics


# -- argument handling ---------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccmtad",
        allow_abbrev=False,
        description="Cluster-aware causal mixer anomaly detection. Extra '--key value' pairs override config keys.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("synth", "write a synthetic train/test fixture"),
        ("cluster", "cluster the training channels"),
        ("train", "train the model and write checkpoint + calibration"),
        ("detect", "score a test CSV with a trained checkpoint"),
        ("eval", "compute metrics from a score file"),
    ):
        p = sub.add_parser(name, help=text, allow_abbrev=False)
        p.add_argument("--config", help="flat key=value config file")
        if name == "detect":
            p.add_argument("--checkpoint", help="checkpoint directory (default OUTPUT_DIR/checkpoint)")
        if name == "eval":
            p.add_argument("--scores", help="score CSV (default OUTPUT_DIR/scores.csv)")
            p.add_argument("--labels", help="CSV with the ground-truth label column (default test_csv)")
            p.add_argument("--checkpoint", help="checkpoint directory for --sweep / --gradient-map")
            p.add_argument("--sweep", action="store_true", help="best-F1 sweep over (alpha, h) and point-based baseline")
            p.add_argument("--add-fap", action="store_true", help="write the ADD-FAP curve over the h grid")
            p.add_argument("--gradient-map", nargs=2, type=int, metavar=("T", "C"), help="input-gradient map CSV")
            p.add_argument("--window-start", type=int, default=0, help="first test row of the gradient-map window")
            p.add_argument("--aggregate", type=int, choices=(2, 3), help="multi-entity protocol")
            p.add_argument("--entities", nargs="+", help="entity run directories holding scores.csv and test.csv")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, TrainingDiverged):
        return EXIT_TRAIN
    if isinstance(exc, ChannelMismatch):
        return EXIT_COMPAT
    if isinstance(exc, (EvaluationError, UndefinedMetric)):
        return EXIT_EVAL
    return EXIT_INPUT


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args.config, extra)
        if args.command == "synth":
            result = cmd_synth(cfg)
            print(f"wrote fixture to {cfg.output_dir} ({len(result['test_segments'])} anomaly segments)")
        elif args.command == "cluster":
            a = cmd_cluster(cfg)
            print(f"M={a.n_clusters} sizes={a.sizes.tolist()} -> {cfg.output_path / ASSIGNMENT_FILE}")
        elif args.command == "train":
            summary = cmd_train(cfg)
            print(f"final val loss {summary['val_loss'][-1] if summary['val_loss'] else summary['initial_val_loss']}")
        elif args.command == "detect":
            segs = cmd_detect(cfg, args.checkpoint)
            print(f"{len(segs)} segments -> {cfg.output_path / SEGMENTS_FILE}")
        else:
            metrics = cmd_eval(cfg, args)
            print(json.dumps({k: v for k, v in metrics.items() if not isinstance(v, (dict, list))}))
    except (CCMTADError, OSError, ValueError, KeyError) as exc:
        code = _exit_code(exc)
        if isinstance(exc, TrainingDiverged):
            msg = f"training failed at epoch {exc.epoch}: {exc}"
        elif isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror or exc}: {exc.filename}"
        else:
            msg = str(exc)
        print(f"ccmtad {args.command}: error: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
