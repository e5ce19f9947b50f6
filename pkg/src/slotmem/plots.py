"""Plot-data export: accuracy versus state size.

One CSV row per sweep point. Core columns: ``model_kind`` (mixer family),
``state_size`` (memory-state element count per the closed-form accounting,
in array elements, not bytes), ``accuracy`` (fraction in [0, 1]). Any
extra per-row fields are appended as additional columns, sorted by name,
so records round-trip loss-free through ``load_plot_data``.
"""

from __future__ import annotations

import csv

from .errors import ConfigError

CORE_COLUMNS = ("model_kind", "state_size", "accuracy")


def emit_plot_data(rows, path) -> None:
    rows = list(rows)
    if not rows:
        raise ConfigError("no sweep rows to emit")
    extra = sorted({k for r in rows for k in r} - set(CORE_COLUMNS))
    cols = list(CORE_COLUMNS) + extra
    for r in rows:
        missing = set(CORE_COLUMNS) - set(r)
        if missing:
            raise ConfigError(f"sweep row missing columns {sorted(missing)}")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def load_plot_data(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(CORE_COLUMNS) <= set(reader.fieldnames):
            raise ConfigError(f"{path} is missing core columns {CORE_COLUMNS}")
        for rec in reader:
            row = dict(rec)
            row["state_size"] = int(row["state_size"])
            row["accuracy"] = float(row["accuracy"])
            for key in row:
                if key in ("model_kind", "state_size", "accuracy"):
                    continue
                try:
                    row[key] = int(row[key])
                except (TypeError, ValueError):
                    try:
                        row[key] = float(row[key])
                    except (TypeError, ValueError):
                        pass
            out.append(row)
    return out
