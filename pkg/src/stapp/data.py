"""Core domain types for antibiogram resistance data, plus CSV ingestion and
binary persistence of mined presence tensors.

All types here are immutable after construction and safe to share across
workers.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ResistanceState(str, Enum):
    """Result of one susceptibility test: resistant, sensitive, or unknown."""

    R = "R"
    S = "S"
    NULL = "NULL"


# Raw drug panel as it appears in report CSV files (22 columns), and the
# class grouping that collapses it to 17 antibiotics.  Drugs within a class
# are reported consistently, so grouping is (normally) lossless.
RAW_DRUGS: tuple[str, ...] = (
    "Amoxicillin/clavulanate",
    "Ampicillin",
    "Ampicillin/sulbactam",
    "Cefazolin",
    "Ceftriaxone",
    "Chloramphenicol",
    "Ciprofloxacin",
    "Clindamycin",
    "Erythromycin",
    "Gentamicin",
    "Imipenem",
    "Levofloxacin",
    "Linezolid",
    "Moxifloxacin",
    "Nitrofurantoin",
    "Oxacillin",
    "Penicillin",
    "Quinupristin/dalfopristin",
    "Rifampin (Rifampicin)",
    "Tetracycline",
    "Trimeth/sulfa",
    "Vancomycin",
)

_CLASS_GROUPS: dict[str, tuple[str, ...]] = {
    "Beta-lactam/Beta-lactamase inhibitors": (
        "Amoxicillin/clavulanate",
        "Ampicillin/sulbactam",
    ),
    "Penicillins": ("Ampicillin", "Penicillin"),
    "Quinolones": ("Ciprofloxacin", "Levofloxacin", "Moxifloxacin"),
    "Cephalosporins": ("Cefazolin", "Ceftriaxone"),
}

DEFAULT_GROUPING: dict[str, str] = {}
for _group, _members in _CLASS_GROUPS.items():
    for _m in _members:
        DEFAULT_GROUPING[_m] = _group
for _d in RAW_DRUGS:
    DEFAULT_GROUPING.setdefault(_d, _d)


@dataclass(frozen=True)
class Antibiotic:
    """One grouped antibiotic with a dense index in [0, M)."""

    index: int
    name: str
    group: str


def grouped_panel(grouping: Mapping[str, str] = DEFAULT_GROUPING) -> tuple[Antibiotic, ...]:
    """Collapse a raw-drug grouping map into an indexed antibiotic panel.

    Group order: multi-drug classes first in declaration order, then
    singleton drugs in raw-panel order.  Indices are dense and unique.
    """
    seen: list[str] = []
    for drug in sorted(grouping, key=_raw_order):
        g = grouping[drug]
        if g not in seen:
            seen.append(g)
    # multi-member groups keep their declared order ahead of singletons
    multi = [g for g in _CLASS_GROUPS if g in seen]
    rest = [g for g in seen if g not in _CLASS_GROUPS]
    ordered = multi + rest
    return tuple(Antibiotic(i, name, name) for i, name in enumerate(ordered))


def _raw_order(drug: str) -> int:
    try:
        return RAW_DRUGS.index(drug)
    except ValueError:
        return len(RAW_DRUGS)


@dataclass(frozen=True)
class AntibiogramReport:
    """One patient's grouped resistance states for a region-year."""

    region_id: int
    year: int
    patient_id: str
    states: tuple[ResistanceState, ...]


@dataclass(frozen=True)
class Pattern:
    """A combination of (antibiotic index, state) pairs with R/S states only.

    Items are kept sorted by antibiotic index so equality and hashing are
    independent of construction order.
    """

    items: tuple[tuple[int, str], ...]

    @classmethod
    def of(cls, items: Iterable[tuple[int, str]]) -> "Pattern":
        canon = tuple(sorted((int(m), str(s)) for m, s in items))
        if not canon:
            raise ValueError("pattern must contain at least one item")
        seen_idx = set()
        for m, s in canon:
            if s not in ("R", "S"):
                raise ValueError(f"pattern state must be R or S, got {s!r}")
            if m < 0:
                raise ValueError(f"negative antibiotic index {m}")
            if m in seen_idx:
                raise ValueError(f"antibiotic {m} appears twice in pattern")
            seen_idx.add(m)
        return cls(canon)

    def __len__(self) -> int:
        return len(self.items)

    def antibiotics(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.items)


@dataclass(frozen=True)
class PatternVocabulary:
    """Bijection between distinct patterns and dense indices [0, N)."""

    patterns: tuple[Pattern, ...]

    def __post_init__(self):
        if len(set(self.patterns)) != len(self.patterns):
            raise ValueError("vocabulary patterns must be distinct")

    @property
    def size(self) -> int:
        return len(self.patterns)

    def index(self) -> dict[Pattern, int]:
        return {p: u for u, p in enumerate(self.patterns)}


@dataclass(frozen=True)
class PresenceTensor:
    """Binary presence and best p-value per (region, year, pattern).

    ``pvalue`` is 1.0 wherever a pattern was not mined, so ranking code
    never needs a sentinel branch.
    """

    q: np.ndarray       # uint8, K x T x N
    pvalue: np.ndarray  # float64, K x T x N
    years: tuple[int, ...]

    def __post_init__(self):
        q, pv = self.q, self.pvalue
        if q.shape != pv.shape or q.ndim != 3:
            raise ValueError(f"q/pvalue shape mismatch: {q.shape} vs {pv.shape}")
        if q.shape[1] != len(self.years):
            raise ValueError("year axis does not match years list")
        if q.size:
            if not np.all((q == 0) | (q == 1)):
                raise ValueError("q must be binary")
            if np.any(pv <= 0) or np.any(pv > 1):
                raise ValueError("pvalue must lie in (0, 1]")
            if np.any((pv < 1.0) & (q == 0)):
                raise ValueError("pvalue < 1 requires presence bit 1")

    @property
    def n_regions(self) -> int:
        return self.q.shape[0]

    @property
    def n_patterns(self) -> int:
        return self.q.shape[2]

    def year_index(self, year: int) -> int:
        return self.years.index(year)


@dataclass(frozen=True)
class RegionMeta:
    """A region (city) with coordinates in degrees."""

    region_id: int
    name: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")


# ---------------------------------------------------------------------------
# Report CSV ingestion
# ---------------------------------------------------------------------------

_META_COLS = ("region_id", "year", "patient_id")


def collapse_raw_states(
    raw: Mapping[str, str],
    grouping: Mapping[str, str] = DEFAULT_GROUPING,
    panel: Sequence[Antibiotic] | None = None,
) -> tuple[tuple[ResistanceState, ...], int]:
    """Collapse raw per-drug states into grouped states.

    Non-NULL disagreement inside a group resolves to R (resistance
    dominates); returns the grouped state vector and the number of
    conflicts resolved that way.
    """
    if panel is None:
        panel = grouped_panel(grouping)
    by_group: dict[str, set[str]] = {a.group: set() for a in panel}
    for drug, state in raw.items():
        g = grouping[drug]
        if state != "NULL":
            by_group[g].add(state)
    states = []
    conflicts = 0
    for a in panel:
        observed = by_group[a.group]
        if not observed:
            states.append(ResistanceState.NULL)
        elif observed == {"R"} or observed == {"R", "S"}:
            if "S" in observed:
                conflicts += 1
            states.append(ResistanceState.R)
        else:
            states.append(ResistanceState.S)
    return tuple(states), conflicts


def ingest_reports(
    path: str | Path,
    grouping: Mapping[str, str] = DEFAULT_GROUPING,
) -> list[AntibiogramReport]:
    """Read an antibiogram report CSV and collapse drug columns by class.

    The file must have header ``region_id,year,patient_id`` followed by one
    column per raw drug name; cells are exactly R, S, or NULL.  Unknown drug
    columns and malformed rows raise ValueError naming the offending line.
    Within-group conflicts are resolved to R and counted as warnings.
    """
    path = Path(path)
    panel = grouped_panel(grouping)
    reports: list[AntibiogramReport] = []
    conflicts = 0
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if tuple(header[:3]) != _META_COLS:
            raise ValueError(
                f"{path}: header must start with {','.join(_META_COLS)}"
            )
        drug_cols = header[3:]
        for drug in drug_cols:
            if drug not in grouping:
                raise ValueError(f"{path}: unknown drug column {drug!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                region_id = int(row[0])
                year = int(row[1])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: region_id and year must be integers"
                ) from None
            for col, cell in zip(drug_cols, row[3:]):
                if cell not in ("R", "S", "NULL"):
                    raise ValueError(
                        f"{path}:{lineno}: bad state {cell!r} in column {col}"
                    )
            raw = dict(zip(drug_cols, row[3:]))
            states, c = collapse_raw_states(raw, grouping, panel)
            conflicts += c
            reports.append(AntibiogramReport(region_id, year, row[2], states))
    if conflicts:
        logger.warning("%s: resolved %d within-group state conflicts to R", path, conflicts)
    return reports


def write_reports_csv(
    path: str | Path,
    reports: Sequence[AntibiogramReport],
    grouping: Mapping[str, str] = DEFAULT_GROUPING,
) -> None:
    """Write grouped reports as a raw-panel CSV (group state copied to members)."""
    panel = grouped_panel(grouping)
    group_idx = {a.group: a.index for a in panel}
    drugs = [d for d in sorted(grouping, key=_raw_order)]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_META_COLS) + drugs)
        for r in reports:
            cells = [r.states[group_idx[grouping[d]]].value for d in drugs]
            writer.writerow([r.region_id, r.year, r.patient_id] + cells)


# ---------------------------------------------------------------------------
# Binary container format (shared by presence files and model checkpoints)
# ---------------------------------------------------------------------------

_HEADER_STRUCT = struct.Struct("<Q")


def write_container(
    path: str | Path,
    magic: bytes,
    header: dict,
    payloads: Sequence[np.ndarray],
) -> None:
    """Write magic + JSON header + raw little-endian array payloads."""
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with Path(path).open("wb") as fh:
        fh.write(magic)
        fh.write(_HEADER_STRUCT.pack(len(blob)))
        fh.write(blob)
        for arr in payloads:
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_container(
    path: str | Path,
    magic: bytes,
    payload_specs_from_header,
) -> tuple[dict, list[np.ndarray]]:
    """Read a container written by :func:`write_container`.

    ``payload_specs_from_header(header)`` must return a list of
    (shape, dtype) pairs describing the payloads in order.  Truncated or
    over-long files raise ValueError without returning partial data.
    """
    path = Path(path)
    with path.open("rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ValueError(f"{path}: bad magic (expected {magic!r})")
        raw_len = fh.read(_HEADER_STRUCT.size)
        if len(raw_len) != _HEADER_STRUCT.size:
            raise ValueError(f"{path}: truncated header length")
        (hlen,) = _HEADER_STRUCT.unpack(raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise ValueError(f"{path}: truncated header")
        header = json.loads(blob.decode())
        arrays = []
        for shape, dtype in payload_specs_from_header(header):
            dt = np.dtype(dtype).newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise ValueError(f"{path}: truncated payload")
            arrays.append(np.frombuffer(buf, dtype=dt).reshape(shape).astype(dtype))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payloads")
    return header, arrays


_PRESENCE_MAGIC = b"ABGPRES1"
_PRESENCE_VERSION = 1


def save_presence(
    tensor: PresenceTensor,
    vocab: PatternVocabulary,
    path: str | Path,
) -> None:
    """Persist a presence tensor plus its vocabulary; round-trip is bit-exact."""
    if tensor.n_patterns != vocab.size:
        raise ValueError("presence tensor and vocabulary disagree on N")
    header = {
        "version": _PRESENCE_VERSION,
        "shape": list(tensor.q.shape),
        "years": list(tensor.years),
        "patterns": [[[m, s] for m, s in p.items] for p in vocab.patterns],
    }
    write_container(
        path,
        _PRESENCE_MAGIC,
        header,
        [tensor.q.astype(np.uint8), tensor.pvalue.astype(np.float64)],
    )


def load_presence(path: str | Path) -> tuple[PresenceTensor, PatternVocabulary]:
    """Load a presence container written by :func:`save_presence`."""

    def specs(header):
        if header.get("version") != _PRESENCE_VERSION:
            raise ValueError(f"{path}: unsupported presence version {header.get('version')}")
        shape = tuple(header["shape"])
        return [(shape, np.uint8), (shape, np.float64)]

    header, (q, pv) = read_container(path, _PRESENCE_MAGIC, specs)
    vocab = PatternVocabulary(
        tuple(Pattern.of([(int(m), str(s)) for m, s in items]) for items in header["patterns"])
    )
    tensor = PresenceTensor(q=q, pvalue=pv, years=tuple(header["years"]))
    if tensor.n_patterns != vocab.size:
        raise ValueError(f"{path}: header patterns disagree with tensor shape")
    return tensor, vocab
