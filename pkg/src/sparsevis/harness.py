"""End-to-end sweep: dataset, pool, per-entry evaluation cells, report.

Layout of an output directory::

    data/{train,test}.npz|json
    pool/manifest.json, pool/entry_NN/{checkpoint,mask}.npz|json
    pool/entry_NN/eval/<cell>.json      cached evaluation rows
    od_boxes/entry_NN.jsonl
    report.csv, report.json, sweet_spots.json, plots/*.png, run.json
"""
from __future__ import annotations

import csv
import io
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alignment import distortion_accuracy_sweep
from .attribution import attribute_batch, targets_for
from .config import SweepConfig
from .dataset import generate_shapes_dataset, load_dataset, save_dataset, stack
from .discovery import corloc_dataset
from .io import read_json, write_json
from .metrics import score_maps
from .models import predict_labels
from .pruning import Pool, SweepStats, lrr_sweep

log = logging.getLogger(__name__)

CSV_HEADER = "config_hash,entry,sparsity_prunable,sparsity_all,task,method,kind,level,mean,std,n,degenerate"
COLUMNS = CSV_HEADER.split(",")
TASK_ORDER = ("accuracy", "rma", "rra", "iou", "corloc", "distortion-accuracy")


@dataclass
class ReportRow:
    config_hash: str
    entry: int
    sparsity_prunable: float
    sparsity_all: float
    task: str
    method: str
    kind: str
    level: float | None
    mean: float
    std: float
    n: int
    degenerate: int


@dataclass
class SweepResult:
    rows: list[ReportRow]
    complete: bool
    train_steps: int = 0
    errors: list[str] = field(default_factory=list)
    output_dir: Path | None = None


def set_deterministic(flag: bool, jobs: int = 1) -> None:
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    else:
        torch.use_deterministic_algorithms(False)
        torch.set_num_threads(max(1, jobs))


# ---------------------------------------------------------------- sweet spots

def find_sweet_spots(series, strict: bool = True, mode: str = "previous") -> list[float]:
    """Sparsities where accuracy and the metric both improve.

    ``series`` is an ordered list of ``(sparsity, accuracy, metric)``.  With
    ``mode="previous"`` each point is compared with the one before it; with
    ``mode="dense"`` every point is compared with the first.
    """
    series = list(series)
    if len(series) < 2:
        return []
    better = (lambda a, b: a > b) if strict else (lambda a, b: a >= b)
    out = []
    for i in range(1, len(series)):
        ref = series[i - 1] if mode == "previous" else series[0]
        s, acc, metric = series[i]
        if better(acc, ref[1]) and better(metric, ref[2]):
            out.append(s)
    return out


# ----------------------------------------------------------------- data/pool

def prepare_data(cfg: SweepConfig, outdir: Path):
    data_dir = outdir / "data"
    splits = {}
    for split in ("train", "test"):
        spec = cfg.data.split(split)
        path = data_dir / f"{split}.npz"
        if path.exists():
            samples, stored = load_dataset(data_dir, split)
            if asdict(stored) == asdict(spec):
                splits[split] = samples
                continue
        samples = generate_shapes_dataset(spec)
        save_dataset(samples, spec, data_dir, split)
        splits[split] = samples
    return splits["train"], splits["test"]


def build_pool(cfg: SweepConfig, outdir: Path, train_samples, resume: bool, stats: SweepStats) -> Pool:
    pool_dir = outdir / "pool"
    if not resume and pool_dir.exists():
        shutil.rmtree(pool_dir)
    return lrr_sweep(
        cfg.model, stack(train_samples), cfg.pruning.k, cfg.pruning.T, cfg.schedule, pool_dir,
        resume=resume, data_key=asdict(cfg.data), stats=stats,
    )


# ---------------------------------------------------------------- evaluation

def _cells(cfg: SweepConfig) -> list[str]:
    cells = []
    if "accuracy" in cfg.tasks:
        cells.append("accuracy")
    if "interp" in cfg.tasks:
        cells += [f"interp-{m}" for m in cfg.attribution.methods]
    if "od" in cfg.tasks:
        cells.append("od")
    if "ha" in cfg.tasks and cfg.distortions:
        cells.append("ha")
    return cells


def _row(h, entry, task, method, mean, std, n, degenerate=0, kind="", level=None) -> dict:
    return {
        "config_hash": h, "entry": entry.index, "sparsity_prunable": entry.sparsity,
        "sparsity_all": entry.sparsity_all, "task": task, "method": method, "kind": kind,
        "level": level, "mean": mean, "std": std, "n": n, "degenerate": degenerate,
    }


def evaluate_cell(cfg: SweepConfig, pool: Pool, entry, cell: str, test_samples, outdir: Path) -> list[dict]:
    h = cfg.hash()
    model, _ = pool.load_model(entry)
    data = stack(test_samples)
    if cell == "accuracy":
        correct = (predict_labels(model, data["images"]) == data["labels"]).astype(np.float64)
        return [_row(h, entry, "accuracy", "", float(correct.mean()), float(correct.std()), len(correct))]
    if cell.startswith("interp-"):
        method = cell[len("interp-"):]
        n = cfg.attribution.n_images or len(test_samples)
        images, masks = data["images"][:n], data["masks"][:n].astype(bool)
        targets = targets_for(model, images, data["labels"][:n], cfg.attribution.target)
        maps, _ = attribute_batch(model, images, method, targets, cfg.attribution)
        scores = score_maps(maps, masks)
        return [_row(h, entry, metric, method, a.mean, a.std, a.n, a.degenerate) for metric, a in scores.items()]
    if cell == "od":
        n = cfg.od.n_images or len(test_samples)
        res = corloc_dataset(model, test_samples[:n], cfg.od, dump=outdir / "od_boxes" / f"entry_{entry.index:02d}.jsonl")
        hit = np.asarray(res["ious"]) >= cfg.od.threshold
        return [
            _row(h, entry, "iou", model.spec.family, res["mean_iou"], res["std_iou"], res["n"]),
            _row(h, entry, f"corloc@{cfg.od.threshold:g}", model.spec.family, res["corloc_at_threshold"], float(hit.std()), res["n"]),
        ]
    if cell == "ha":
        rows = distortion_accuracy_sweep([(entry.index, entry.sparsity, model)], test_samples, cfg.grid, cfg.seed)
        out = []
        for r in rows:
            p = r.accuracy
            out.append(_row(h, entry, "distortion-accuracy", "", p, math.sqrt(p * (1 - p)), r.n_samples, kind=r.kind, level=r.level))
        return out
    raise ValueError(f"unknown evaluation cell {cell!r}")


def _cache_path(pool: Pool, entry, cell: str) -> Path:
    return pool.directory / f"entry_{entry.index:02d}" / "eval" / f"{cell}.json"


def _load_cached(path: Path, h: str):
    if not path.exists():
        return None
    data = read_json(path)
    return data["rows"] if data.get("config_hash") == h else None


def run_sweep(cfg: SweepConfig, resume: bool = True, jobs: int = 1, build: bool = True, compute: bool = True) -> SweepResult:
    """Build or resume the pool, evaluate every enabled cell, write the report.

    Cells already cached under the current config hash are skipped.  Failed
    cells are logged and leave ``complete=False``; everything finished is
    kept on disk.
    """
    set_deterministic(cfg.deterministic, jobs)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    errors: list[str] = []
    stats = SweepStats()

    train_samples, test_samples = prepare_data(cfg, outdir)
    try:
        pool = build_pool(cfg, outdir, train_samples, resume, stats) if build else Pool.load(outdir / "pool")
    except Exception as exc:  # partial pool stays on disk
        log.exception("pool construction failed")
        return SweepResult([], False, stats.train_steps, [f"pool: {exc!r}"], outdir)
    log.info("training steps this run: %d", stats.train_steps)

    cells = _cells(cfg)
    rows: list[dict] = []
    skipped: list[tuple] = []
    for entry in pool.entries:
        for cell in cells:
            path = _cache_path(pool, entry, cell)
            cached = _load_cached(path, h)
            if cached is not None:
                rows += cached
                skipped.append((entry, cell, cached))
                continue
            if not compute:
                errors.append(f"entry {entry.index} {cell}: not evaluated")
                continue
            try:
                cell_rows = evaluate_cell(cfg, pool, entry, cell, test_samples, outdir)
            except Exception as exc:
                log.exception("cell %s of entry %d failed", cell, entry.index)
                errors.append(f"entry {entry.index} {cell}: {exc!r}")
                continue
            write_json(path, {"config_hash": h, "rows": cell_rows})
            rows += cell_rows
            log.info("entry %d %s done", entry.index, cell)

    if cfg.verify_fraction > 0 and skipped:
        rng = np.random.default_rng(cfg.seed)
        n = max(1, int(round(cfg.verify_fraction * len(skipped))))
        for i in sorted(rng.choice(len(skipped), size=min(n, len(skipped)), replace=False)):
            entry, cell, cached = skipped[i]
            fresh = evaluate_cell(cfg, pool, entry, cell, test_samples, outdir)
            if _rows_to_csv(fresh, header=False) != _rows_to_csv(cached, header=False):
                errors.append(f"entry {entry.index} {cell}: cached value differs from recomputation")

    report = [ReportRow(**r) for r in sort_rows(rows)]
    if report:
        write_report(report, outdir, cfg)
    write_json(outdir / "run.json", {"config_hash": h, "train_steps": stats.train_steps,
                                     "trained_entries": stats.trained_entries, "errors": errors,
                                     "complete": not errors, "entries": len(pool.entries)})
    return SweepResult(report, not errors, stats.train_steps, errors, outdir)


# -------------------------------------------------------------------- report

def _task_rank(task: str) -> int:
    base = task.split("@")[0]
    return TASK_ORDER.index(base) if base in TASK_ORDER else len(TASK_ORDER)


def sort_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (r["entry"], _task_rank(r["task"]), r["task"], r["method"], r["kind"],
                                       -math.inf if r["level"] is None else r["level"]))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _rows_to_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        buf.write(CSV_HEADER + "\n")
    for r in rows:
        d = r if isinstance(r, dict) else asdict(r)
        writer.writerow([_fmt(d[c]) for c in COLUMNS])
    return buf.getvalue()


def series_for(rows: list[ReportRow]) -> dict[tuple, list[tuple[float, float, float]]]:
    """Group non-accuracy rows into per-(task, method, kind, level) series
    paired with the entry's clean accuracy."""
    acc = {r.entry: r.mean for r in rows if r.task == "accuracy"}
    groups: dict[tuple, list] = {}
    for r in rows:
        if r.task == "accuracy" or r.entry not in acc:
            continue
        groups.setdefault((r.task, r.method, r.kind, r.level), []).append((r.entry, r.sparsity_prunable, acc[r.entry], r.mean))
    return {k: [(s, a, m) for _, s, a, m in sorted(v)] for k, v in groups.items()}


def write_report(report: list[ReportRow], outdir: str | Path, cfg: SweepConfig | None = None) -> dict:
    """Write report.csv, report.json, sweet_spots.json and one plot per
    (task, method) pair.  Returns the written paths."""
    if not report:
        raise ValueError("empty report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "report.csv"
    csv_path.write_text(_rows_to_csv(report))
    write_json(outdir / "report.json", [asdict(r) for r in report])

    strict = cfg.sweet_spot_strict if cfg else True
    mode = cfg.sweet_spot_mode if cfg else "previous"
    spots = []
    for (task, method, kind, level), series in series_for(report).items():
        spots.append({"task": task, "method": method, "kind": kind, "level": level,
                      "sparsities": find_sweet_spots([(s, a, m) for s, a, m in series if not math.isnan(m)], strict, mode)})
    write_json(outdir / "sweet_spots.json", spots)
    plots = plot_report(report, outdir / "plots", spots)
    return {"csv": csv_path, "json": outdir / "report.json", "sweet_spots": outdir / "sweet_spots.json", "plots": plots}


def plot_key(row: ReportRow) -> tuple[str, str]:
    """(task, method) pair a row is plotted under; distortion rows plot per kind."""
    if row.task == "distortion-accuracy":
        return row.task, row.kind
    return row.task, row.method


def plot_report(report: list[ReportRow], plot_dir: Path, spots: list[dict]) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    spot_lookup = {(s["task"], s["method"], s["kind"], s["level"]): set(s["sparsities"]) for s in spots}
    groups: dict[tuple, list[ReportRow]] = {}
    for r in report:
        groups.setdefault(plot_key(r), []).append(r)
    paths = []
    for (task, method), rows in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        lines: dict = {}
        for r in rows:
            lines.setdefault(r.level, []).append(r)
        for level, lr in sorted(lines.items(), key=lambda kv: -math.inf if kv[0] is None else kv[0]):
            lr = sorted(lr, key=lambda r: r.entry)
            xs = [r.sparsity_prunable for r in lr]
            ys = [r.mean for r in lr]
            label = None if level is None else f"level {level:g}"
            ax.plot(xs, ys, marker="o", ms=3, label=label)
            hot = spot_lookup.get((task, lr[0].method, lr[0].kind, level), set())
            hx = [x for x in xs if x in hot]
            if hx:
                ax.scatter(hx, [y for x, y in zip(xs, ys) if x in hot], s=80, facecolors="none", edgecolors="red", zorder=3)
        ax.set_xlabel("sparsity (prunable weights)")
        ax.set_ylabel(task)
        ax.set_title(f"{task} / {method}" if method else task)
        if len(lines) > 1:
            ax.legend(fontsize=6)
        fig.tight_layout()
        name = f"{task}__{method}".replace("@", "_at_").replace("/", "_") if method else task.replace("@", "_at_")
        path = plot_dir / f"{name}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths


def collect_report(cfg: SweepConfig) -> SweepResult:
    """Assemble the report from cached cells only."""
    return run_sweep(cfg, resume=True, build=False, compute=False)
