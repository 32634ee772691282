"""Command-line experiment runner: generate, train, evaluate, compare.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import evalkit
from .ingest import RecordError, save_pgm, write_records
from .nnmodel import HEAD_VARIANTS, CheckpointError, load_model, map_confidence
from .synthgen import SceneConfig, generate_dataset, make_presence_set
from .trainer import Dataset, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("pointsentinel")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3
SPEC_VERSION = 1
METRIC_COLUMNS = [
    "head", "seed", "n_cases", "precision_auc", "ci_lo", "ci_hi",
    "mm_precision_auc", "mm_ci_lo", "mm_ci_hi",
    "mean_mm", "median_mm", "max_mm", "min_mm", "std_mm", "q1_mm", "q3_mm",
]
PRESENCE_COLUMNS = ["head", "seed", "roc_auc", "roc_variance", "n_pos", "n_neg"]
DELONG_COLUMNS = ["head_a", "head_b", "seed", "auc_a", "auc_b", "z", "p_two_sided"]
HEAD_COLORS = {"spatial_softmax": "#d62728", "pixelwise": "#1f77b4", "regression": "#2ca02c"}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config files


def read_json_config(path) -> dict:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict) or "version" not in d:
        raise CliError(f"{path}: missing 'version' field")
    if d["version"] != SPEC_VERSION:
        raise CliError(f"{path}: unsupported version {d['version']!r}")
    return d


@dataclass(frozen=True)
class EvalSettings:
    delta_max_relative: float = evalkit.DEFAULT_DELTA_RELATIVE
    delta_max_mm: float = evalkit.DEFAULT_DELTA_MM
    n_bootstrap: int = 1000
    alpha: float = 0.05
    bootstrap_seed: int = 0
    compare_pairs: tuple = (("spatial_softmax", "pixelwise"),)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    train_dataset: Path
    test_dataset: Path
    heads: tuple
    seeds: tuple
    output_dir: Path
    val_dataset: Path | None = None
    presence_dataset: Path | None = None
    train: dict = field(default_factory=dict)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def train_config(self, head: str, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "head_variant": head, "seed": seed})


def load_experiment(path, output_dir=None, seed=None) -> ExperimentSpec:
    """Parse an experiment spec; relative paths resolve against the spec's folder."""
    path = Path(path)
    d = read_json_config(path)
    base = path.parent
    known = {"version", "name", "train_dataset", "val_dataset", "test_dataset", "presence_dataset",
             "heads", "seeds", "output_dir", "train", "eval"}
    unknown = set(d) - known
    if unknown:
        raise CliError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("name", "train_dataset", "test_dataset", "heads", "seeds"):
        if key not in d:
            raise CliError(f"{path}: missing '{key}'")
    heads = tuple(d["heads"])
    if not heads or any(h not in HEAD_VARIANTS for h in heads):
        raise CliError(f"{path}: heads must be a non-empty subset of {list(HEAD_VARIANTS)}")
    seeds = (int(seed),) if seed is not None else tuple(int(s) for s in d["seeds"])
    if not seeds:
        raise CliError(f"{path}: at least one seed is required")

    def resolve(p):
        return None if p is None else (base / p)

    ev = dict(d.get("eval", {}))
    if "compare_pairs" in ev:
        ev["compare_pairs"] = tuple(tuple(p) for p in ev["compare_pairs"])
    try:
        settings = EvalSettings(**ev)
        train_keys = dict(d.get("train", {}))
        for k in ("head_variant", "seed"):
            train_keys.pop(k, None)
        TrainConfig.from_dict({**train_keys, "head_variant": heads[0], "seed": seeds[0]})
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from exc
    out = Path(output_dir) if output_dir is not None else resolve(d.get("output_dir", f"runs/{d['name']}"))
    return ExperimentSpec(str(d["name"]), resolve(d["train_dataset"]), resolve(d["test_dataset"]), heads, seeds,
                          out, resolve(d.get("val_dataset")), resolve(d.get("presence_dataset")), train_keys, settings)


def _load_dataset(path: Path, require_points: bool = True) -> Dataset:
    if not path.exists():
        raise CliError(f"dataset not found: {path}", EXIT_IO)
    try:
        ds = Dataset.from_csv(path)
    except RecordError as exc:
        raise CliError(str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    if require_points and any(r.point is None for r in ds.records):
        raise CliError(f"{path}: every record needs a ground-truth point")
    return ds


def _prepare_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory not writable: {path} ({exc})", EXIT_IO) from exc


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow(["" if v is None else v for v in row])
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def _read_csv(path: Path) -> tuple[list[str], list[dict]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            return list(reader.fieldnames or []), list(reader)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    d = read_json_config(args.config)
    presence = d.pop("presence", None)
    n = d.pop("n", None)
    group = int(d.pop("patient_group_size", 1))
    d.pop("version")
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = SceneConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{args.config}: {exc}") from exc
    if presence is not None:
        try:
            scenes = make_presence_set(cfg, int(presence["n_pos"]), int(presence["n_neg"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{args.config}: bad 'presence' block ({exc})") from exc
    else:
        if n is None:
            raise CliError(f"{args.config}: missing 'n' (or a 'presence' block)")
        try:
            scenes = generate_dataset(cfg, int(n), group)
        except ValueError as exc:
            raise CliError(f"{args.config}: {exc}") from exc

    out = Path(args.output_dir) if args.output_dir else Path(args.config).with_suffix("")
    csv_path = out / "records.csv"
    if csv_path.exists() and not args.overwrite:
        raise CliError(f"{csv_path} exists; pass --overwrite to replace it", EXIT_IO)
    _prepare_dir(out / "images")
    try:
        for s in scenes:
            save_pgm(s.image, out / s.record.image_path)
        write_records([s.record for s in scenes], csv_path)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}", EXIT_IO) from exc
    n_pos = sum(s.has_target for s in scenes)
    _say(args, f"wrote {len(scenes)} scenes ({n_pos} with target, "
               f"{sum(s.has_distractor for s in scenes)} with distractor) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _job_paths(out: Path, head: str, seed: int) -> dict[str, Path]:
    tag = f"{head}_seed{seed}"
    return {
        "final": out / "checkpoints" / f"{tag}.ckpt",
        "partial": out / "checkpoints" / f"{tag}.partial.ckpt",
        "log": out / "logs" / f"{tag}.csv",
    }


def _write_log(path: Path, history) -> None:
    _write_csv(path, ["epoch", "train_loss", "val_precision_auc"],
               [[h["epoch"], repr(h["train_loss"]), None if h["val_precision_auc"] is None else repr(h["val_precision_auc"])]
                for h in history])


def _train_job(spec: ExperimentSpec, head: str, seed: int, resume: bool) -> str:
    paths = _job_paths(spec.output_dir, head, seed)
    cfg = spec.train_config(head, seed)
    train_set = _load_dataset(spec.train_dataset)
    val_set = _load_dataset(spec.val_dataset) if spec.val_dataset is not None else None
    start = None
    if resume and paths["partial"].exists():
        try:
            start = load_checkpoint(paths["partial"])
        except CheckpointError as exc:
            raise CliError(str(exc), EXIT_IO) from exc
        if start.config != cfg:
            raise CliError(f"{paths['partial']}: config differs from the experiment spec; cannot resume")

    def on_epoch(ck):
        save_checkpoint(ck, paths["partial"])
        _write_log(paths["log"], ck.history)

    try:
        ck = train(cfg, train_set, val_set, resume=start, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        raise CliError(f"head {head} seed {seed}: {exc}", EXIT_DIVERGED) from exc
    save_checkpoint(ck, paths["final"])
    _write_log(paths["log"], ck.history)
    paths["partial"].unlink(missing_ok=True)
    last = ck.history[-1] if ck.history else {}
    return (f"{head} seed {seed}: {ck.epoch} epochs, train loss {last.get('train_loss', float('nan')):.5g}, "
            f"best epoch {ck.best_epoch} -> {paths['final']}")


def _run_job(args_tuple):
    spec, head, seed, resume = args_tuple
    try:
        return EXIT_OK, _train_job(spec, head, seed, resume)
    except CliError as exc:
        return exc.code, str(exc)


def _max_jobs() -> int:
    raw = os.environ.get("POINTSENTINEL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise CliError(f"POINTSENTINEL_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise CliError("POINTSENTINEL_THREADS must be >= 1")
    return n


def cmd_train(args) -> int:
    spec = load_experiment(args.spec, args.output_dir, args.seed)
    for sub in ("checkpoints", "logs"):
        _prepare_dir(spec.output_dir / sub)
    jobs = []
    for head in spec.heads:
        for seed in spec.seeds:
            paths = _job_paths(spec.output_dir, head, seed)
            if paths["final"].exists():
                if args.resume and not args.overwrite:
                    _say(args, f"{head} seed {seed}: already complete, skipping")
                    continue
                if not args.overwrite:
                    raise CliError(f"{paths['final']} exists; pass --overwrite or --resume", EXIT_IO)
            if not args.resume:
                paths["partial"].unlink(missing_ok=True)
            jobs.append((spec, head, seed, bool(args.resume)))
    workers = min(_max_jobs(), max(len(jobs), 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    worst = EXIT_OK
    for code, msg in results:
        if code != EXIT_OK:
            print(f"error: {msg}", file=sys.stderr)
            worst = max(worst, code)
        else:
            _say(args, msg)
    return worst


# ---------------------------------------------------------------- evaluate


def _curve_rows(curve):
    return [[repr(float(t)), repr(float(f))] for t, f in zip(curve.thresholds, curve.fractions)]


def _fmt(v):
    return None if v is None else repr(float(v))


def _mean_row(rows: list[list], n_key_cols: int, label_cols: list) -> list:
    out = list(label_cols)
    for col in range(n_key_cols, len(rows[0])):
        vals = [r[col] for r in rows]
        if any(v is None for v in vals):
            out.append(None)
        else:
            out.append(repr(float(np.mean([float(v) for v in vals]))))
    return out


def precision_svg(curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str, xlabel: str) -> str:
    """Standalone SVG overlaying one precision curve per head."""
    w, h, left, right, top, bottom = 480, 360, 60, 150, 30, 50
    pw, ph = w - left - right, h - top - bottom
    xmax = max(float(t[-1]) for t, _ in curves.values()) or 1.0

    def sx(x):
        return left + pw * x / xmax

    def sy(y):
        return top + ph * (1.0 - y)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        fx, fy = i / 5, i / 5
        parts.append(f'<text x="{sx(fx * xmax):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{fx * xmax:.3g}</text>')
        parts.append(f'<text x="{left - 6}" y="{sy(fy) + 3:.1f}" text-anchor="end" font-size="10">{fy:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{h - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 14 {top + ph / 2})">fraction of cases</text>')
    for k, (head, (t, f)) in enumerate(curves.items()):
        color = HEAD_COLORS.get(head, "#555555")
        pts = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(t, f))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"><title>{escape(head)}</title></polyline>')
        ly = top + 14 + 18 * k
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="11">{escape(head)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _load_trained(spec: ExperimentSpec, head: str, seed: int):
    path = _job_paths(spec.output_dir, head, seed)["final"]
    if not path.exists():
        raise CliError(f"missing checkpoint {path}; run 'train' first", EXIT_IO)
    try:
        return load_model(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def evaluate_experiment(spec: ExperimentSpec) -> dict:
    """Compute every metric table for a trained experiment; returns rows keyed by table."""
    ev = spec.eval
    test = _load_dataset(spec.test_dataset)
    presence = _load_dataset(spec.presence_dataset, require_points=False) if spec.presence_dataset else None
    metric_rows, curves, presence_rows, score_sets = [], {}, [], {}
    for head in spec.heads:
        head_rows = []
        for seed in spec.seeds:
            model = _load_trained(spec, head, seed)
            points, _ = model.predict(test.images)
            errs = [evalkit.localization_error(p, r) for p, r in zip(points, test.records)]
            rel = np.array([e.relative for e in errs])
            curve = evalkit.precision_curve(rel, ev.delta_max_relative)
            ci = evalkit.bootstrap_auc_ci(rel, ev.delta_max_relative, ev.n_bootstrap, ev.alpha, ev.bootstrap_seed)
            row = [head, seed, len(rel), _fmt(curve.auc), _fmt(ci.lo), _fmt(ci.hi)]
            mm = [e.absolute_mm for e in errs]
            curves[(head, seed, "relative")] = curve
            if all(v is not None for v in mm):
                mm = np.array(mm)
                mm_curve = evalkit.precision_curve(mm, ev.delta_max_mm)
                mm_ci = evalkit.bootstrap_auc_ci(mm, ev.delta_max_mm, ev.n_bootstrap, ev.alpha, ev.bootstrap_seed)
                stats = evalkit.error_stats(mm)
                row += [_fmt(mm_curve.auc), _fmt(mm_ci.lo), _fmt(mm_ci.hi)]
                row += [_fmt(stats[k]) for k in ("mean", "median", "max", "min", "std", "q1", "q3")]
                curves[(head, seed, "mm")] = mm_curve
            else:
                row += [None] * 10
            head_rows.append(row)
            if presence is not None and head != "regression":
                _, maps = model.predict(presence.images)
                scores = np.array([map_confidence(m) for m in maps])
                labels = np.array([r.point is not None for r in presence.records], dtype=int)
                roc = evalkit.roc_auc(scores[labels == 1], scores[labels == 0])
                presence_rows.append([head, seed, _fmt(roc.auc), _fmt(roc.variance), roc.n_pos, roc.n_neg])
                score_sets[(head, seed)] = (scores, labels, [r.case_id for r in presence.records])
        metric_rows += head_rows
    for head in spec.heads:
        rows = [r for r in metric_rows if r[0] == head]
        metric_rows.append(_mean_row(rows, 2, [head, "mean"]))
        prow = [r for r in presence_rows if r[0] == head and r[1] != "mean"]
        if prow:
            presence_rows.append(_mean_row(prow, 2, [head, "mean"]))
    delong_rows = []
    for a, b in ev.compare_pairs:
        for seed in spec.seeds:
            if (a, seed) in score_sets and (b, seed) in score_sets:
                sa, labels, _ = score_sets[(a, seed)]
                sb, _, _ = score_sets[(b, seed)]
                res = evalkit.delong_test(sa, sb, labels)
                delong_rows.append([a, b, seed, _fmt(res.auc_a), _fmt(res.auc_b), _fmt(res.z), _fmt(res.p_two_sided)])
    return {"metrics": metric_rows, "curves": curves, "presence": presence_rows,
            "delong": delong_rows, "scores": score_sets}


def _mean_curve(curves, head, seeds, kind):
    got = [curves[(head, s, kind)] for s in seeds if (head, s, kind) in curves]
    if not got:
        return None
    return got[0].thresholds, np.mean([c.fractions for c in got], axis=0)


def cmd_evaluate(args) -> int:
    spec = load_experiment(args.spec, args.output_dir, args.seed)
    out = spec.output_dir
    metrics_path = out / "metrics.csv"
    if metrics_path.exists() and not args.overwrite:
        raise CliError(f"{metrics_path} exists; pass --overwrite to replace it", EXIT_IO)
    res = evaluate_experiment(spec)
    _prepare_dir(out / "curves")
    _write_csv(metrics_path, METRIC_COLUMNS, res["metrics"])
    for (head, seed, kind), curve in res["curves"].items():
        _write_csv(out / "curves" / f"{head}_seed{seed}_{kind}.csv", ["threshold", "fraction"], _curve_rows(curve))
    for kind, label in (("relative", "relative error threshold"), ("mm", "error threshold (mm)")):
        mean_curves = {h: c for h in spec.heads if (c := _mean_curve(res["curves"], h, spec.seeds, kind)) is not None}
        if mean_curves:
            svg = precision_svg(mean_curves, f"{spec.name}: precision plot", label)
            try:
                (out / f"precision_{kind}.svg").write_text(svg, encoding="utf-8")
            except OSError as exc:
                raise CliError(f"cannot write SVG: {exc}", EXIT_IO) from exc
    if res["presence"]:
        _write_csv(out / "presence.csv", PRESENCE_COLUMNS, res["presence"])
        _prepare_dir(out / "presence_scores")
        for (head, seed), (scores, labels, ids) in res["scores"].items():
            _write_csv(out / "presence_scores" / f"{head}_seed{seed}.csv", ["case_id", "label", "score"],
                       [[c, int(y), repr(float(s))] for c, y, s in zip(ids, labels, scores)])
        _write_csv(out / "delong.csv", DELONG_COLUMNS, res["delong"])
    for row in res["metrics"]:
        if row[1] == "mean":
            _say(args, f"{row[0]:>16s}  seed-mean precision AUC@{spec.eval.delta_max_relative:g} = {float(row[3]):.4f}")
    for row in res["presence"]:
        if row[1] == "mean":
            _say(args, f"{row[0]:>16s}  seed-mean presence ROC AUC = {float(row[2]):.4f}")
    for row in res["delong"]:
        _say(args, f"DeLong {row[0]} vs {row[1]} seed {row[2]}: p = {float(row[6]):.3g}")
    _say(args, f"wrote {metrics_path}")
    return EXIT_OK


# ---------------------------------------------------------------- compare


def _load_metrics(run_dir: Path) -> dict[tuple, dict]:
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise CliError(f"{path} not found; run 'evaluate' first", EXIT_IO)
    header, rows = _read_csv(path)
    missing = [c for c in METRIC_COLUMNS if c not in header]
    if missing:
        raise CliError(f"{path}: missing metric column {missing[0]!r}")
    return {(r["head"], r["seed"]): r for r in rows}


def _load_scores(run_dir: Path, head: str, seed: str):
    path = run_dir / "presence_scores" / f"{head}_seed{seed}.csv"
    if not path.exists():
        return None
    _, rows = _read_csv(path)
    return [r["case_id"] for r in rows], np.array([int(r["label"]) for r in rows]), np.array([float(r["score"]) for r in rows])


def compare_runs(run_a: Path, run_b: Path) -> tuple[list[str], list[list]]:
    """Per (head, seed) deltas (b − a) of every numeric metric, plus a paired
    DeLong p when both runs scored the same presence cases."""
    a, b = _load_metrics(run_a), _load_metrics(run_b)
    keys = [k for k in a if k in b]
    if not keys:
        raise CliError("the two runs share no (head, seed) rows")
    value_cols = METRIC_COLUMNS[2:]
    header = ["head", "seed"] + [f"delta_{c}" for c in value_cols] + ["presence_delong_p"]
    rows = []
    for key in keys:
        row = list(key)
        for c in value_cols:
            va, vb = a[key][c], b[key][c]
            row.append(None if va == "" or vb == "" else repr(float(vb) - float(va)))
        p = None
        if key[1] != "mean":
            sa, sb = _load_scores(run_a, *key), _load_scores(run_b, *key)
            if sa is not None and sb is not None and sa[0] == sb[0] and np.array_equal(sa[1], sb[1]):
                p = repr(evalkit.delong_test(sb[2], sa[2], sa[1]).p_two_sided)
        row.append(p)
        rows.append(row)
    return header, rows


def cmd_compare(args) -> int:
    header, rows = compare_runs(Path(args.run_a), Path(args.run_b))
    if args.output_dir:
        out = Path(args.output_dir)
        path = out / "comparison.csv"
        if path.exists() and not args.overwrite:
            raise CliError(f"{path} exists; pass --overwrite to replace it", EXIT_IO)
        _prepare_dir(out)
        _write_csv(path, header, rows)
    if not args.quiet:
        idx = header.index("delta_precision_auc")
        for row in rows:
            d = row[idx]
            p = row[-1]
            print(f"{row[0]:>16s} seed {row[1]:>4s}  delta precision AUC {'' if d is None else f'{float(d):+.4f}':>8s}"
                  f"{'' if p is None else f'  presence DeLong p {float(p):.3g}'}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the copy attached to subcommands must not reset flags given before the subcommand
    def default(v):
        return argparse.SUPPRESS if suppress else v

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default(None), help="override the seed(s) in the config")
    common.add_argument("--overwrite", action="store_true", default=default(False), help="replace existing outputs")
    common.add_argument("--output-dir", default=default(None), help="where outputs go (overrides the config)")
    common.add_argument("--quiet", action="store_true", default=default(False), help="only print errors")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointsentinel", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="render a synthetic dataset from a scene config")
    g.add_argument("config")
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common], help="train every head×seed of an experiment")
    t.add_argument("spec")
    t.add_argument("--resume", action="store_true", help="continue interrupted jobs from their last epoch")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("evaluate", parents=[common], help="metrics, curves and plots for a trained experiment")
    e.add_argument("spec")
    e.set_defaults(func=cmd_evaluate)
    c = sub.add_parser("compare", parents=[common], help="metric deltas between two evaluated runs")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
