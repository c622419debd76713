"""CSV ingestion, columnar persistence of posterior draws and run manifests.

Draw files are plain text with a versioned first line.  Floats are written
with ``repr`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .design import ScalingSpec
from .mcmc import PosteriorDraws
from .predict import PredictionGrid
from .records import MISSING, N_DAYS, MalformedInputError, RecordTensor, TemperaturePanel

FORMAT_VERSION = 1
_HEADERS = {
    "draws.csv": "param,chain,draw,value",
    "field": "chain,draw,t,doy,site,value",
    "fitted.csv": "block,t,doy,site,value",
}


class FormatError(ValueError):
    """A persisted file is truncated, corrupt or from another format version."""


def library_version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:  # running from a source tree
        return "0+unknown"


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class IngestReport:
    n_rows: int
    n_leap_dropped: int
    n_missing: int


def _rows(path, required: Sequence[str]):
    """Yield ``(line_number, row_dict)`` after checking the header."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise MalformedInputError(f"{path}: missing columns {missing}; header is {header}")
        for row in reader:
            yield reader.line_num, row


def _parse(value: str, kind, path, line: int, col: str):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise MalformedInputError(f"{path}:{line}: cannot parse {col}={value!r}") from None


def read_stations(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Station CSV ``site,x_km,y_km,dist_coast_km``."""
    sites, coords, dist = [], [], []
    for line, row in _rows(path, ("site", "x_km", "y_km", "dist_coast_km")):
        site = row["site"].strip()
        if site in sites:
            raise MalformedInputError(f"{path}:{line}: duplicate station {site!r}")
        sites.append(site)
        coords.append((_parse(row["x_km"], float, path, line, "x_km"),
                       _parse(row["y_km"], float, path, line, "y_km")))
        dist.append(_parse(row["dist_coast_km"], float, path, line, "dist_coast_km"))
    if not sites:
        raise MalformedInputError(f"{path}: no stations")
    return sites, np.array(coords), np.array(dist)


def _noleap_doy(date: _dt.date) -> int | None:
    """Day of a 365-day year; ``None`` for 29 February."""
    if date.month == 2 and date.day == 29:
        return None
    doy = date.timetuple().tm_yday
    leap = date.year % 4 == 0 and (date.year % 100 != 0 or date.year % 400 == 0)
    return doy - 1 if leap and date.month > 2 else doy


def ingest(temperature_path, station_path) -> tuple[TemperaturePanel, IngestReport]:
    """Build a validated panel from temperature and station CSVs.

    The temperature file has ``site,year,doy,tmax_c``; an ISO ``date``
    column may replace ``year,doy``, in which case 29 February rows are
    dropped and counted.  Blank ``tmax_c`` and absent rows are missing.
    """
    sites, coords, dist = read_stations(station_path)
    pos = {s: i for i, s in enumerate(sites)}
    with Path(temperature_path).open(newline="") as fh:
        header = next(csv.reader(fh), [])
    by_date = "date" in header
    need = ("site", "date", "tmax_c") if by_date else ("site", "year", "doy", "tmax_c")
    recs: dict[tuple[int, int, int], tuple[float, int]] = {}
    leap = 0
    for line, row in _rows(temperature_path, need):
        site = row["site"].strip()
        if site not in pos:
            raise MalformedInputError(f"{temperature_path}:{line}: unknown site {site!r}")
        if by_date:
            date = _parse(row["date"], _dt.date.fromisoformat, temperature_path, line, "date")
            doy = _noleap_doy(date)
            if doy is None:
                leap += 1
                continue
            year = date.year
        else:
            year = _parse(row["year"], int, temperature_path, line, "year")
            doy = _parse(row["doy"], int, temperature_path, line, "doy")
            if not 1 <= doy <= N_DAYS:
                raise MalformedInputError(
                    f"{temperature_path}:{line}: doy {doy} outside 1..{N_DAYS}")
        raw = (row["tmax_c"] or "").strip()
        val = MISSING if raw == "" else _parse(raw, float, temperature_path, line, "tmax_c")
        if not (val == MISSING or np.isfinite(val)):
            raise MalformedInputError(f"{temperature_path}:{line}: non-finite tmax_c")
        key = (pos[site], year, doy)
        if key in recs:
            raise MalformedInputError(
                f"{temperature_path}:{line}: duplicate (site, year, doy) = "
                f"({site}, {year}, {doy}), first seen on line {recs[key][1]}")
        recs[key] = (val, line)
    if not recs:
        raise MalformedInputError(f"{temperature_path}: no temperature rows")
    years = sorted({k[1] for k in recs})
    y0 = years[0]
    T = years[-1] - y0 + 1
    temps = np.full((len(sites), T, N_DAYS), MISSING)
    for (i, y, d), (v, _) in recs.items():
        temps[i, y - y0, d - 1] = v
    panel = TemperaturePanel(sites, coords, dist, temps, years=np.arange(y0, y0 + T))
    return panel, IngestReport(len(recs), leap, int(np.sum(np.isneginf(temps))))


def write_panel(panel: TemperaturePanel, temperature_path, station_path) -> None:
    """Inverse of :func:`ingest` (missing values written blank)."""
    with Path(station_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "x_km", "y_km", "dist_coast_km"])
        for s, (x, y), d in zip(panel.sites, panel.coords, panel.dist_coast):
            w.writerow([s, repr(float(x)), repr(float(y)), repr(float(d))])
    years = panel.years if panel.years is not None else np.arange(1, panel.n_years + 1)
    with Path(temperature_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "year", "doy", "tmax_c"])
        for i, s in enumerate(panel.sites):
            for ti, yr in enumerate(years):
                for d in range(N_DAYS):
                    v = panel.temps[i, ti, d]
                    w.writerow([s, int(yr), d + 1, "" if np.isneginf(v) else repr(float(v))])


def write_indicators(tensor: RecordTensor, path, years=None) -> None:
    """Indicator export ``site,year,doy,indicator,tie_r``."""
    n, T, _ = tensor.shape
    years = np.arange(1, T + 1) if years is None else np.asarray(years)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "year", "doy", "indicator", "tie_r"])
        for i, s in enumerate(tensor.sites):
            for ti in range(T):
                for d in range(N_DAYS):
                    w.writerow([s, int(years[ti]), d + 1, int(tensor.indicator[i, ti, d]),
                                int(tensor.tie_r[i, ti, d])])


def read_grid(path) -> PredictionGrid:
    """Grid CSV ``cell_id,x_km,y_km,dist_coast_km,block`` (block may be blank)."""
    ids, coords, dist, block = [], [], [], []
    for line, row in _rows(path, ("cell_id", "x_km", "y_km", "dist_coast_km")):
        ids.append(row["cell_id"].strip())
        coords.append((_parse(row["x_km"], float, path, line, "x_km"),
                       _parse(row["y_km"], float, path, line, "y_km")))
        dist.append(_parse(row["dist_coast_km"], float, path, line, "dist_coast_km"))
        block.append((row.get("block") or "").strip())
    if not ids:
        raise MalformedInputError(f"{path}: empty grid")
    return PredictionGrid(ids, np.array(coords), np.array(dist),
                          block if any(block) else None)


# ---------------------------------------------------------------------------
# draws


def _write_table(path: Path, header: str, rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# recordbreak v{FORMAT_VERSION}\n{header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(rows)


def _read_table(path: Path, header: str) -> list[list[str]]:
    if not path.exists():
        raise FormatError(f"{path}: missing file")
    with path.open(newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith("# recordbreak v"):
            raise FormatError(f"{path}: not a recordbreak file")
        if first != f"# recordbreak v{FORMAT_VERSION}":
            raise FormatError(f"{path}: format {first[2:]!r} cannot be read by "
                              f"version {FORMAT_VERSION}")
        if fh.readline().rstrip("\n") != header:
            raise FormatError(f"{path}: unexpected header")
        rows = list(csv.reader(fh))
    width = header.count(",") + 1
    for k, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"{path}:{k + 3}: expected {width} fields, got {len(r)}")
    return rows


def _field_rows(name: str, arr: np.ndarray, sites: Sequence[str], main_days, block_days):
    """Flatten a field array ``(C, S, ...)`` to ``chain,draw,t,doy,site,value``."""
    C, S = arr.shape[:2]
    rest = arr.shape[2:]
    kind = _field_kind(name, rest)
    for c in range(C):
        for s in range(S):
            a = arr[c, s]
            if kind == "static":
                for j, site in enumerate(sites):
                    yield (c, s, 0, 0, site, repr(float(a[j])))
            elif kind == "year":
                for ti in range(rest[0]):
                    yield (c, s, ti + 2, 0, "", repr(float(a[ti])))
            elif kind == "day":
                for ti in range(rest[0]):
                    for di, d in enumerate(block_days):
                        yield (c, s, ti + 2, int(d), "", repr(float(a[ti, di])))
            else:
                for ti in range(rest[0]):
                    for di, d in enumerate(block_days):
                        for j, site in enumerate(sites):
                            yield (c, s, ti + 2, int(d), site, repr(float(a[ti, di, j])))


def _field_kind(name: str, rest: tuple) -> str:
    if name.startswith("W_"):
        return "static" if len(rest) == 1 else "daily"
    return "year" if len(rest) == 1 else "day"


def persist_draws(draws: PosteriorDraws, directory) -> Path:
    """Write ``draws`` to ``directory`` (created if needed).

    Files: ``meta.json``, ``draws.csv`` (``param,chain,draw,value``),
    ``field_<name>.csv`` (``chain,draw,t,doy,site,value``; static surfaces
    use ``t = doy = 0`` and temporal intercepts a blank site) and
    ``fitted.csv``.  Chain timings are left out so files are reproducible.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fields = {k: list(v.shape) for k, v in draws.fields.items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "model": draws.model,
        "sites": list(draws.sites),
        "coords": draws.coords.tolist(),
        "dist_coast": draws.dist_coast.tolist(),
        "T": draws.T,
        "main_days": [int(x) for x in draws.main_days],
        "initial_days": bool(draws.initial_days),
        "scaling": {k: {"mean": v.mean.tolist(), "scale": v.scale.tolist()}
                    for k, v in draws.scaling.items()},
        "columns": {k: list(v) for k, v in draws.columns.items()},
        "params": list(draws.scalars),
        "n_chains": draws.n_chains,
        "n_draws": draws.n_draws,
        "fields": fields,
        "fitted": {k: list(v.shape) for k, v in (draws.fitted or {}).items()},
        "chain_meta": [{k: v for k, v in m.items() if k != "seconds"} for m in draws.chain_meta],
        "dic": draws.dic,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    _write_table(d / "draws.csv", _HEADERS["draws.csv"],
                 ((k, c, s, repr(float(v[c, s]))) for k, v in draws.scalars.items()
                  for c in range(v.shape[0]) for s in range(v.shape[1])))
    for name, arr in draws.fields.items():
        block = name.split("_", 1)[1]
        _write_table(d / f"field_{name}.csv", _HEADERS["field"],
                     _field_rows(name, arr, draws.sites, draws.main_days,
                                 draws.block_days(block)))
    if draws.fitted:
        def fitted_rows():
            for b, arr in draws.fitted.items():
                days = draws.block_days(b)
                for ti in range(arr.shape[0]):
                    for di, day in enumerate(days):
                        for j, site in enumerate(draws.sites):
                            yield (b, ti + 2, int(day), site, repr(float(arr[ti, di, j])))
        _write_table(d / "fitted.csv", _HEADERS["fitted.csv"], fitted_rows())
    return d


def _expect(rows, n, path):
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} rows, found {len(rows)} (truncated?)")


def load_draws(directory) -> PosteriorDraws:
    """Inverse of :func:`persist_draws`."""
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{d}: no meta.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / 'meta.json'}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{d}: format version {meta.get('format_version')!r} cannot be "
                          f"read by version {FORMAT_VERSION}")
    C, S = meta["n_chains"], meta["n_draws"]
    params = meta["params"]
    rows = _read_table(d / "draws.csv", _HEADERS["draws.csv"])
    _expect(rows, len(params) * C * S, d / "draws.csv")
    scalars = {k: np.empty((C, S)) for k in params}
    try:
        for k, c, s, v in rows:
            scalars[k][int(c), int(s)] = float(v)
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{d / 'draws.csv'}: corrupt row ({exc})") from None
    sites = meta["sites"]
    spos = {s: i for i, s in enumerate(sites)}
    main_days = np.array(meta["main_days"], dtype=int)
    fields = {}
    for name, shape in meta["fields"].items():
        path = d / f"field_{name}.csv"
        rows = _read_table(path, _HEADERS["field"])
        _expect(rows, int(np.prod(shape)), path)
        block = name.split("_", 1)[1]
        bdays = {"main": main_days}.get(block, np.array([1 if block == "day1" else 2]))
        dpos = {int(x): i for i, x in enumerate(bdays)}
        arr = np.empty(shape)
        kind = _field_kind(name, tuple(shape[2:]))
        try:
            for c, s, t, doy, site, v in rows:
                c, s, t, doy = int(c), int(s), int(t), int(doy)
                if kind == "static":
                    arr[c, s, spos[site]] = float(v)
                elif kind == "year":
                    arr[c, s, t - 2] = float(v)
                elif kind == "day":
                    arr[c, s, t - 2, dpos[doy]] = float(v)
                else:
                    arr[c, s, t - 2, dpos[doy], spos[site]] = float(v)
        except (KeyError, ValueError, IndexError) as exc:
            raise FormatError(f"{path}: corrupt row ({exc})") from None
        fields[name] = arr
    fitted = None
    if meta["fitted"]:
        path = d / "fitted.csv"
        rows = _read_table(path, _HEADERS["fitted.csv"])
        _expect(rows, sum(int(np.prod(s)) for s in meta["fitted"].values()), path)
        fitted = {k: np.empty(s) for k, s in meta["fitted"].items()}
        try:
            for b, t, doy, site, v in rows:
                di = (int(np.searchsorted(main_days, int(doy))) if b == "main" else 0)
                fitted[b][int(t) - 2, di, spos[site]] = float(v)
        except (KeyError, ValueError, IndexError) as exc:
            raise FormatError(f"{path}: corrupt row ({exc})") from None
    scaling = {k: ScalingSpec(np.array(v["mean"]), np.array(v["scale"]))
               for k, v in meta["scaling"].items()}
    return PosteriorDraws(
        meta["model"], scalars, fields, tuple(sites), np.array(meta["coords"], dtype=float),
        np.array(meta["dist_coast"], dtype=float), int(meta["T"]), main_days,
        bool(meta["initial_days"]), scaling, {k: tuple(v) for k, v in meta["columns"].items()},
        chain_meta=meta["chain_meta"], dic=meta["dic"], fitted=fitted)


# ---------------------------------------------------------------------------
# manifest


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, config: dict, inputs: Sequence = (), seconds: float | None = None,
                   chains: Sequence[dict] = ()) -> Path:
    """``manifest.json`` with config, versions, timings and input hashes.

    The manifest is the only output that varies between identical runs.
    """
    import scipy
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config,
        "library_version": library_version(),
        "numpy": np.__version__, "scipy": scipy.__version__,
        "python": platform.python_version(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_seconds": seconds,
        "chains": list(chains),
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return path


def verify_manifest(path) -> bool:
    """True when every recorded input hash matches the file on disk."""
    m = json.loads(Path(path).read_text())
    return all(Path(p).exists() and file_sha256(p) == h for p, h in m["inputs"].items())
