"""Taxa tables, covariate files, run configuration and result files."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from typing import Optional, Sequence

import numpy as np

from .em import FitSettings
from .model import LongitudinalDataset, ModelSpec

__all__ = [
    "ParseError",
    "TaxaTable",
    "RunConfig",
    "read_table",
    "load_counts",
    "load_dataset",
    "filter_taxa",
    "median_of_ratios",
    "write_results",
    "load_results",
    "provenance",
]

OFFSET_FLAGS = {"depth": "log-depth", "median-ratios": "log-median-of-ratios", "none": "none"}
RESULT_COLUMNS = ("taxon", "coefficient", "estimate", "boot_se", "ci_lo", "ci_hi", "p", "q",
                  "method")


class ParseError(ValueError):
    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


@dataclass
class TaxaTable:
    taxa: list
    counts: np.ndarray
    sample_ids: list

    def __post_init__(self):
        self.taxa = [str(t) for t in self.taxa]
        self.sample_ids = [str(s) for s in self.sample_ids]
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(len(self.taxa),
                                                                       len(self.sample_ids))
        if len(set(self.taxa)) != len(self.taxa):
            raise ValueError("taxa names must be unique")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def depths(self) -> np.ndarray:
        return self.counts.sum(axis=0).astype(float)

    def zero_fraction(self) -> np.ndarray:
        return np.mean(self.counts == 0, axis=1)

    def subset(self, keep) -> "TaxaTable":
        keep = list(keep)
        return TaxaTable([self.taxa[i] for i in keep], self.counts[keep], self.sample_ids)


@dataclass
class RunConfig:
    mean_cols: list = field(default_factory=list)
    disp_cols: list = field(default_factory=list)
    zi_cols: list = field(default_factory=list)
    offset: str = "depth"
    min_pobs: float = 0.1
    max_pobs: float = 0.9
    tests: list = field(default_factory=list)
    test_method: str = "bWald"
    B: int = 200
    seed: int = 0
    workers: int = 1
    resample: str = "measurement"
    ci: str = "normal"
    level: float = 0.95
    q: float = 0.05
    joint_fdr: bool = False
    subject_col: str = "subject"
    sample_col: str = "sample"
    depth_col: Optional[str] = None
    out: str = "results"
    t_max: int = 100
    eps_tol: float = 1e-8
    gtol: float = 1e-6
    poisson_floor: float = 1e-8

    def __post_init__(self):
        if self.offset not in OFFSET_FLAGS:
            raise ValueError(f"offset must be one of {sorted(OFFSET_FLAGS)}")
        if not 0.0 <= self.min_pobs < self.max_pobs <= 1.0:
            raise ValueError("need 0 <= min_pobs < max_pobs <= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def settings(self) -> FitSettings:
        return FitSettings(t_max=self.t_max, eps_tol=self.eps_tol, gtol=self.gtol,
                           poisson_floor=self.poisson_floor)

    def spec_for(self, variant: str = "zipg") -> ModelSpec:
        return ModelSpec(len(self.mean_cols), len(self.disp_cols),
                         len(self.zi_cols) if variant == "zipg-full" else 0,
                         offset_mode=OFFSET_FLAGS[self.offset], variant=variant)

    def analysis_dict(self) -> dict:
        # everything that can change results; output location excluded
        d = self.to_dict()
        d.pop("out")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.analysis_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def read_table(path: str) -> tuple[list, list]:
    """Header and rows of a tab- or comma-delimited UTF-8 file.

    Rows are (line number, cells); blank lines are skipped.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not numbered:
        raise ParseError(path, None, "empty file")
    first = numbered[0][1]
    delim = "\t" if "\t" in first else ","
    parsed = [(n, next(csv.reader([ln], delimiter=delim))) for n, ln in numbered]
    header = [h.strip() for h in parsed[0][1]]
    rows = []
    for n, cells in parsed[1:]:
        if len(cells) != len(header):
            raise ParseError(path, n, f"expected {len(header)} fields, found {len(cells)}")
        rows.append((n, [c.strip() for c in cells]))
    return header, rows


def _parse_count(path, line, cell) -> int:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(path, line, f"count {cell!r} is not a number") from None
    if not math.isfinite(v) or v != int(v):
        raise ParseError(path, line, f"count {cell!r} is not an integer")
    if v < 0:
        raise ParseError(path, line, f"negative count {cell}")
    return int(v)


def load_counts(path: str) -> TaxaTable:
    """Taxa in rows, samples in columns; the first column holds taxon names."""
    header, rows = read_table(path)
    samples = header[1:]
    seen = set()
    for s in samples:
        if s in seen:
            raise ParseError(path, 1, f"duplicated sample id {s!r}")
        seen.add(s)
    taxa, counts, names = [], [], set()
    for n, cells in rows:
        if cells[0] in names:
            raise ParseError(path, n, f"duplicated taxon {cells[0]!r}")
        names.add(cells[0])
        taxa.append(cells[0])
        counts.append([_parse_count(path, n, c) for c in cells[1:]])
    return TaxaTable(taxa, np.array(counts, dtype=np.int64).reshape(len(taxa), len(samples)),
                     samples)


def _numeric(path, line, col, cell) -> float:
    if cell == "" or cell.upper() in ("NA", "NAN"):
        raise ParseError(path, line, f"missing value in column {col!r}")
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(path, line, f"column {col!r}: {cell!r} is not numeric") from None
    if not math.isfinite(v):
        raise ParseError(path, line, f"column {col!r}: non-finite value")
    return v


def _load_covariates(path: str, config: RunConfig, columns: list) -> dict:
    header, rows = read_table(path)
    need = [config.subject_col, config.sample_col] + columns
    if config.depth_col:
        need.append(config.depth_col)
    missing = [c for c in need if c not in header]
    if missing:
        raise ParseError(path, 1, f"missing columns: {missing}")
    pos = {c: header.index(c) for c in need}
    out = {}
    for n, cells in rows:
        sample = cells[pos[config.sample_col]]
        if sample in out:
            raise ParseError(path, n, f"duplicated sample id {sample!r}")
        values = {c: _numeric(path, n, c, cells[pos[c]]) for c in columns}
        depth = None
        if config.depth_col:
            depth = _numeric(path, n, config.depth_col, cells[pos[config.depth_col]])
            if depth <= 0:
                raise ParseError(path, n, "depth must be positive")
        out[sample] = (n, cells[pos[config.subject_col]], values, depth)
    return out


def median_of_ratios(counts: np.ndarray) -> np.ndarray:
    """Per-sample size factors from a taxa x samples table.

    Geometric means use each taxon's positive counts; a sample's factor is the
    median ratio over taxa it observes.
    """
    counts = np.asarray(counts, dtype=float)
    with np.errstate(divide="ignore"):
        logc = np.where(counts > 0, np.log(counts), np.nan)
    ok_taxa = np.any(np.isfinite(logc), axis=1)
    geo = np.nanmean(logc[ok_taxa], axis=1)
    ratios = logc[ok_taxa] - geo[:, None]
    out = np.empty(counts.shape[1])
    for j in range(counts.shape[1]):
        col = ratios[:, j]
        col = col[np.isfinite(col)]
        if col.size == 0:
            raise ValueError(f"sample {j} has no positive counts")
        out[j] = math.exp(float(np.median(col)))
    return out


def load_dataset(counts_path: str, covariates_path: str, config: RunConfig
                 ) -> tuple[TaxaTable, dict]:
    """Parse both files and build one dataset per taxon, sharing covariates."""
    table = load_counts(counts_path)
    columns = list(dict.fromkeys(config.mean_cols + config.disp_cols + config.zi_cols))
    cov = _load_covariates(covariates_path, config, columns)
    for s in table.sample_ids:
        if s not in cov:
            raise ParseError(covariates_path, None, f"sample id {s!r} from the counts file "
                                                    "has no covariate row")
    info = [cov[s] for s in table.sample_ids]
    subj_order = list(dict.fromkeys(i[1] for i in info))
    subj_index = {s: k for k, s in enumerate(subj_order)}
    subject_of = np.array([subj_index[i[1]] for i in info], dtype=np.int64)

    def column(c):
        return np.array([i[2][c] for i in info], dtype=float)

    x = np.column_stack([column(c) for c in config.mean_cols]) if config.mean_cols \
        else np.zeros((len(info), 0))
    disp = np.zeros((len(subj_order), len(config.disp_cols)))
    for j, c in enumerate(config.disp_cols):
        v = column(c)
        for k in range(len(subj_order)):
            vals = v[subject_of == k]
            if np.ptp(vals) != 0:
                first = [i[0] for i in info if i[1] == subj_order[k]]
                raise ParseError(covariates_path, first[0],
                                 f"dispersion covariate {c!r} varies within subject "
                                 f"{subj_order[k]!r}")
            disp[k, j] = vals[0]
    zi = np.column_stack([column(c) for c in config.zi_cols]) if config.zi_cols else None
    depths = np.array([i[3] for i in info], dtype=float) if config.depth_col else table.depths
    if np.any(depths <= 0):
        bad = [table.sample_ids[j] for j in np.flatnonzero(depths <= 0)]
        raise ParseError(counts_path, None, f"samples with zero depth: {bad[:5]}")
    sf = median_of_ratios(table.counts) if config.offset == "median-ratios" else None
    datasets = {}
    for t, name in enumerate(table.taxa):
        datasets[name] = LongitudinalDataset(
            counts=table.counts[t], depths=depths, mean_covariates=x, disp_covariates=disp,
            subject_of=subject_of, zi_covariates=zi, size_factors=sf, name=name,
            subject_ids=subj_order)
    return table, datasets


def filter_taxa(table: TaxaTable, min_pobs: float = 0.1, max_pobs: float = 0.9
                ) -> tuple[TaxaTable, list]:
    """Keep taxa whose zero fraction lies strictly inside (min_pobs, max_pobs).

    A bound at 0 or 1 excludes nothing.  Returns the kept table and a list of
    (taxon, reason) for the rest.
    """
    if not 0.0 <= min_pobs < max_pobs <= 1.0:
        raise ValueError("need 0 <= min_pobs < max_pobs <= 1")
    pobs = table.zero_fraction()
    keep, excluded = [], []
    for i, p in enumerate(pobs):
        if p < min_pobs or (p == min_pobs and min_pobs > 0.0):
            excluded.append((table.taxa[i], f"zero fraction {p:.3f} <= {min_pobs}"))
        elif p > max_pobs or (p == max_pobs and max_pobs < 1.0):
            excluded.append((table.taxa[i], f"zero fraction {p:.3f} >= {max_pobs}"))
        else:
            keep.append(i)
    return table.subset(keep), excluded


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

def provenance(config: Optional[RunConfig] = None, **extra) -> dict:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    out = {"version": version}
    if config is not None:
        out["config_hash"] = config.digest()
        out["seed"] = config.seed
        out["config"] = config.analysis_dict()
    out.update(extra)
    return out


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating,)):
        return _clean(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(out_dir: str, name: str, records: list, meta: dict,
                  columns: Sequence[str] = RESULT_COLUMNS) -> tuple[str, str]:
    """Write ``name.json`` (records plus provenance) and ``name.tsv``."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f"{name}.json")
    tsv_path = os.path.join(out_dir, f"{name}.tsv")
    doc = {"provenance": _clean(meta), "columns": list(columns), "records": _clean(records)}
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(tsv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(columns) + "\n")
        for rec in doc["records"]:
            fh.write("\t".join(_fmt(rec.get(c)) for c in columns) + "\n")
    return json_path, tsv_path


def load_results(path: str) -> tuple[list, dict]:
    """Records and provenance from a file written by ``write_results``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return doc["records"], doc["provenance"]
