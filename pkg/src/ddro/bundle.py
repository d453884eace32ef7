"""Result bundles: plain CSV tables plus one metadata file.

Tables depend only on (config, seed) and are written with ``repr`` floats
in a fixed row order, so two runs of one config are byte-identical.
Timestamps and status live in ``meta.json`` alone.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

TABLES = {
    "metrics": ("method", "dataset", "mse"),
    "curves": ("method", "kind", "level", "mse"),
    "traces": ("method", "round", "loss", "grad_norm"),
    "inner": ("method", "round", "k", "J", "mu", "expected_f"),
    "sweep": ("eps", "dataset", "mse"),
    "probes": ("probe", "section", "key", "value", "n", "se"),
}


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_table(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        if len(r) != len(header):
            raise ValueError(f"{path.name}: row {r!r} does not match header {header!r}")
        w.writerow([_cell(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_table(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ResultBundle:
    config_hash: str
    benchmark_id: str
    seed: int
    config_text: str = ""
    tables: dict = field(default_factory=lambda: {k: [] for k in TABLES})
    status: str = "ok"
    error: str | None = None
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def add(self, table: str, *row) -> None:
        self.tables[table].append(row)

    def write(self, out: Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name, header in TABLES.items():
            write_table(out / f"{name}.csv", header, self.tables[name])
        (out / "config.cfg").write_text(self.config_text, encoding="utf-8")
        self.finished = self.finished or time.time()
        meta = {
            "config_hash": self.config_hash,
            "benchmark_id": self.benchmark_id,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.finished)),
            "elapsed_s": round(self.finished - self.started, 3),
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out

    @classmethod
    def read(cls, path) -> "ResultBundle":
        path = Path(path)
        try:
            meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ValueError(f"{path}: not a result bundle ({exc})") from exc
        b = cls(meta["config_hash"], meta["benchmark_id"], meta["seed"], status=meta["status"], error=meta.get("error"))
        for name, header in TABLES.items():
            p = path / f"{name}.csv"
            b.tables[name] = [tuple(r[h] for h in header) for r in read_table(p)] if p.exists() else []
        cfg = path / "config.cfg"
        b.config_text = cfg.read_text(encoding="utf-8") if cfg.exists() else ""
        return b


# ---------------------------------------------------------------------------
# report


def improvement(ml: float, other: float) -> float:
    """Percent reduction of ``other`` relative to the ML reference."""
    return 100.0 * (ml - other) / ml


def report(bundles, out: Path) -> dict:
    """Aggregate bundles (any mix of methods and seeds of one benchmark).

    Writes ``table.csv`` (method x dataset mean MSE with percent improvement
    over ML), ``curves_<kind>.csv`` (level vs MSE per method) and
    ``eps.csv`` (eps vs mean shifted-set MSE).  Returns the table rows.
    """
    bundles = list(bundles)
    if not bundles:
        raise ValueError("no bundles given")
    ids = {b.benchmark_id for b in bundles}
    if len(ids) > 1:
        raise ValueError(f"bundles come from different benchmarks: {sorted(ids)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    def mean_of(rows, key_len):
        acc: dict = {}
        for r in rows:
            acc.setdefault(tuple(r[:key_len]), []).append(float(r[key_len]))
        return {k: sum(v) / len(v) for k, v in acc.items()}

    cells = mean_of([r for b in bundles for r in b.tables["metrics"]], 2)
    methods = sorted({m for m, _ in cells}, key=lambda m: (m != "ml", m))
    datasets = list(dict.fromkeys(d for _, d in cells))
    rows = []
    for m in methods:
        for d in datasets:
            if (m, d) not in cells:
                continue
            base = cells.get(("ml", d))
            imp = "" if m == "ml" or base is None or base == 0 else improvement(base, cells[(m, d)])
            rows.append((m, d, cells[(m, d)], imp))
    write_table(out / "table.csv", ("method", "dataset", "mse", "improvement_pct"), rows)

    curves = mean_of([r for b in bundles for r in b.tables["curves"]], 3)
    for kind in sorted({k for _, k, _ in curves}):
        pts = sorted(((m, float(lv), v) for (m, k, lv), v in curves.items() if k == kind), key=lambda t: (t[0], t[1]))
        write_table(out / f"curves_{kind}.csv", ("method", "level", "mse"), pts)
    sweep = mean_of([r for b in bundles for r in b.tables["sweep"]], 2)
    eps_rows = sorted(((float(e), v) for (e, d), v in sweep.items() if d == "mean"), key=lambda t: t[0])
    write_table(out / "eps.csv", ("eps", "mean_mse"), eps_rows)
    return {"table": rows, "eps": eps_rows}
