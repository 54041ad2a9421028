"""Run artifacts on disk and the cross-run comparison report.

A run directory holds::

    manifest.json   resolved config, seeds, code version, timestamps, paths
    rounds.jsonl    one RoundRecord per line
    summary.json    convergence round and final accuracy per tier, bytes
    models/<tier>.ckpt (+ .ckpt.json)   final tier models, checkpoint format

The report CSV has one row per run with columns::

    run, method, tag, convergence_round_<tier>..., final_accuracy_<tier>..., cumulative_mb

Tier columns follow the order in which tiers first appear across the runs.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, checkpoint

MANIFEST = "manifest.json"
ROUNDS = "rounds.jsonl"
SUMMARY = "summary.json"


def atomic_write(path: str | Path, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_run(out_dir: str | Path, sim, started: datetime) -> dict:
    """Persist a finished :class:`~mossfl.orchestrator.Simulation`; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = "".join(rec.to_json() + "\n" for rec in sim.history)
    atomic_write(out_dir / ROUNDS, lines)
    summary = sim.summary()
    atomic_write(out_dir / SUMMARY, _dump(summary))
    models = {}
    for tier, model in zip(sim.config.tiers, sim.tier_models):
        rel = f"models/{tier.name}.ckpt"
        blob, manifest = checkpoint.encode(model.weights, model.arch.name)
        atomic_write(out_dir / rel, blob)
        atomic_write(out_dir / (rel + ".json"), manifest)
        models[tier.name] = rel
    manifest = {
        "code_version": __version__,
        "config": json.loads(sim.config.to_json()),
        "seed": sim.config.seed,
        "tag": sim.config.tag,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "artifacts": {"rounds": ROUNDS, "summary": SUMMARY, "models": models},
    }
    atomic_write(out_dir / MANIFEST, _dump(manifest))
    return manifest


def read_run(run_dir: str | Path) -> dict:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    summary = json.loads((run_dir / SUMMARY).read_text())
    rounds = [json.loads(line) for line in (run_dir / ROUNDS).read_text().splitlines() if line.strip()]
    return {"dir": run_dir, "summary": summary, "rounds": rounds}


def _tiers(runs: list[dict]) -> list[str]:
    seen: list[str] = []
    for run in runs:
        for name in run["summary"]["final_accuracy"]:
            if name not in seen:
                seen.append(name)
    return seen


def report_rows(runs: list[dict]) -> tuple[list[str], list[list]]:
    tiers = _tiers(runs)
    header = (["run", "method", "tag"] + [f"convergence_round_{t}" for t in tiers]
              + [f"final_accuracy_{t}" for t in tiers] + ["cumulative_mb"])
    rows = []
    for run in runs:
        s = run["summary"]
        conv = [s["convergence_round"].get(t) for t in tiers]
        acc = [s["final_accuracy"].get(t) for t in tiers]
        rows.append([run["dir"].name, s["method"], s["tag"]]
                    + ["" if c is None else c for c in conv]
                    + ["" if a is None else f"{a:.4f}" for a in acc]
                    + [f"{s['cumulative_bytes'] / 1e6:.3f}"])
    return header, rows


def render_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def plot_accuracy(runs: list[dict], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tiers = _tiers(runs)
    fig, axes = plt.subplots(1, len(tiers), figsize=(4 * len(tiers), 3.2), squeeze=False)
    for ax, tier in zip(axes[0], tiers):
        for run in runs:
            acc = [r["accuracy"].get(tier) for r in run["rounds"]]
            if any(a is not None for a in acc):
                ax.plot(range(len(acc)), acc, label=run["summary"]["tag"])
        ax.set_title(tier)
        ax.set_xlabel("round")
        ax.set_ylim(0, 1)
    axes[0][0].set_ylabel("test accuracy")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100)
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict[str, Path]:
    runs = [read_run(d) for d in run_dirs]
    header, rows = report_rows(runs)
    out_dir = Path(out_dir)
    return {
        "csv": atomic_write(out_dir / "report.csv", render_csv(header, rows)),
        "table": atomic_write(out_dir / "report.txt", render_table(header, rows)),
        "plot": plot_accuracy(runs, out_dir / "accuracy.png"),
    }
