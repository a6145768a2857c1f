"""
Field CSV Module
Reads and writes sampled fields and result tables as CSV.

Field format:
    # dim=<d> n=<n> lo=<lo> hi=<hi>
    index,x[,y],value          (one row per grid point, no column header)

All reals are written with 17 significant digits so a write/read cycle
reproduces every float bit for bit.
"""

import csv
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from grid import ScalarField, make_grid


def format_real(value: Optional[float]) -> str:
    """17-significant-digit decimal, or blank for a missing value"""
    if value is None:
        return ""
    return f"{float(value):.17g}"


def parse_header(line: str) -> dict:
    """Parse the '# dim=.. n=.. lo=.. hi=..' line into grid parameters"""
    line = line.strip()
    if not line.startswith("#"):
        raise ValueError(f"Field CSV must start with a '# dim=...' header, got: {line[:60]!r}")
    params = {}
    for token in line.lstrip("#").split():
        if "=" not in token:
            continue
        key, value = token.split("=", 1)
        params[key.strip()] = value.strip()
    missing = [k for k in ("dim", "n", "lo", "hi") if k not in params]
    if missing:
        raise ValueError(f"Field CSV header is missing {', '.join(missing)}")
    return {
        "dim": int(params["dim"]),
        "n": int(params["n"]),
        "lo": float(params["lo"]),
        "hi": float(params["hi"]),
    }


def write_field_csv(field: ScalarField, path) -> Path:
    path = Path(path)
    grid = field.grid
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(grid.header() + "\n")
        writer = csv.writer(f, lineterminator="\n")
        for index, (point, value) in enumerate(zip(grid.points, field.values)):
            writer.writerow([index, *(format_real(x) for x in point), format_real(value)])
    return path


def read_field_csv(path) -> ScalarField:
    """
    Load a field written by write_field_csv.

    Returns:
        ScalarField on the grid described by the header line
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        params = parse_header(header)
        grid = make_grid(params["dim"], params["n"], params["lo"], params["hi"])
        values = np.full(grid.size, np.nan)
        seen = np.zeros(grid.size, dtype=bool)
        reader = csv.reader(f)
        for row in reader:
            if not row:
                continue
            if len(row) != grid.dim + 2:
                raise ValueError(f"Expected {grid.dim + 2} columns per row, got {len(row)}: {row}")
            index = int(row[0])
            if not 0 <= index < grid.size:
                raise ValueError(f"Row index {index} is outside the grid")
            values[index] = float(row[-1])
            seen[index] = True
    if not seen.all():
        raise ValueError(f"{path.name} holds {int(seen.sum())} of {grid.size} grid points")
    print(f"📋 Loaded field: dim={grid.dim}, n={grid.n} from {path.name}")
    return ScalarField(grid, values)


def write_table_csv(rows: Iterable[dict], columns: list[str], path) -> Path:
    """Write dict rows under a fixed column header; floats at 17 digits, None as blank"""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            cells = []
            for column in columns:
                value = row.get(column)
                if isinstance(value, (float, np.floating)):
                    cells.append(format_real(value) if np.isfinite(value) else "")
                elif value is None:
                    cells.append("")
                else:
                    cells.append(str(value))
            writer.writerow(cells)
    return path


def read_table_csv(path) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
