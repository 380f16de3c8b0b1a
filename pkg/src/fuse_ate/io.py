"""Sample CSV files.

Schema: header ``x1,...,xp,s,t,v``; UTF-8; ``.`` decimal separator.  Floats
are written with ``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .dgp import Sample
from .errors import IngestionError

PathLike = Union[str, Path]

_X_COL = re.compile(r"^x(\d+)$")


def _fmt(value: float) -> str:
    return float.__repr__(float(value))


def write_sample_csv(sample: Sample, path: PathLike) -> None:
    header = [f"x{j + 1}" for j in range(sample.p)] + ["s", "t", "v"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(sample.n):
            w.writerow([_fmt(c) for c in sample.x[i]]
                       + [int(sample.s[i]), int(sample.t[i]), _fmt(sample.v[i])])


@dataclass(frozen=True)
class ColumnMapping:
    """Which CSV columns hold the covariates, study, treatment and outcome."""

    x: Sequence[str]
    s: str = "s"
    t: str = "t"
    v: str = "v"

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnMapping":
        return cls(tuple(d["x"]), d.get("s", "s"), d.get("t", "t"), d.get("v", "v"))


def _default_mapping(header: Sequence[str]) -> ColumnMapping:
    xs = sorted((int(m.group(1)), h) for h in header if (m := _X_COL.match(h)))
    if not xs:
        raise IngestionError("no covariate columns x1..xp found in header")
    if [k for k, _ in xs] != list(range(1, len(xs) + 1)):
        raise IngestionError("covariate columns must be x1..xp without gaps")
    return ColumnMapping(tuple(h for _, h in xs))


def ingest_csv(path: PathLike, schema: Optional[Union[ColumnMapping, Mapping]] = None,
               require_both_studies: bool = False):
    """Read and validate a sample.

    Parameters
    ----------
    schema : ColumnMapping or dict, optional
        Column names; defaults to ``x1..xp, s, t, v`` found in the header.
    require_both_studies : bool
        Raise if either study has no units.

    Returns
    -------
    sample : Sample
    report : dict
        ``n0``, ``n1`` and arm counts per study.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if schema is None:
            mapping = _default_mapping(header)
        elif isinstance(schema, ColumnMapping):
            mapping = schema
        else:
            mapping = ColumnMapping.from_dict(schema)
        pos = {h: j for j, h in enumerate(header)}
        wanted = list(mapping.x) + [mapping.s, mapping.t, mapping.v]
        missing = [c for c in wanted if c not in pos]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {missing}")
        idx = [pos[c] for c in wanted]
        p = len(mapping.x)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = []
            for col, j in zip(wanted, idx):
                cell = row[j].strip() if j < len(row) else ""
                try:
                    val = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {lineno}, column {col!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(val):
                    raise IngestionError(f"{path}: row {lineno}, column {col!r}: non-finite value")
                vals.append(val)
            for col, val in ((mapping.s, vals[p]), (mapping.t, vals[p + 1])):
                if val not in (0.0, 1.0):
                    raise IngestionError(
                        f"{path}: row {lineno}, column {col!r}: expected 0 or 1, got {val:g}")
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    arr = np.array(rows)
    sample = Sample(arr[:, :p], arr[:, p].astype(np.int64), arr[:, p + 1].astype(np.int64),
                    arr[:, p + 2])
    report = sample.counts()
    for study in (0, 1):
        n_s = report[f"n{study}"]
        if n_s == 0 and require_both_studies:
            raise IngestionError(f"{path}: no units with s={study}")
        if n_s and (report[f"n{study}_treated"] == 0 or report[f"n{study}_control"] == 0):
            raise IngestionError(f"{path}: study s={study} has an empty treatment arm")
    return sample, report
