"""Calibration-experiment data ingestion and GAJ:GAJ+ ratio computation.

One boat trip = one simultaneous deployment of an echosounder plus two to
four camera types (drop D, SBRUV S, trap T, ROV R).  Trips are indexed by
boat i, reef size j (1=large, 2=small) and replicate k within the (i, j)
cell, with k assigned in file order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CAMERAS: tuple[str, ...] = ("D", "S", "T", "R")

#: Additive shift that keeps ratios strictly positive so log(r) is finite.
RATIO_SHIFT = 1e-6

_MISSING_TOKENS = {"", "NA"}

_TRIP_COLUMNS = (
    "trip_id",
    "boat",
    "reef_size",
    "reef_type",
    "maxn_D",
    "maxn_S",
    "maxn_T",
    "maxn_R",
    "N",
    "N_focal",
    "N_mr",
)

_REEF_SIZE_CODES = {"1": 1, "2": 2, "L": 1, "S": 2, "large": 1, "small": 2}


class DatasetError(ValueError):
    """Malformed or inconsistent calibration-experiment input."""


@dataclass(frozen=True)
class TripRecord:
    """All abundance variables observed on a single boat trip."""

    trip_id: str
    boat: int
    reef_size: int
    replicate: int
    maxn: Mapping[str, int | None]
    acoustic_total: int
    acoustic_focal: int
    markrecapture: int | None
    pooled_ratio: float | None
    reef_type: str = ""

    def __post_init__(self) -> None:
        if self.boat not in (1, 2):
            raise DatasetError(f"trip {self.trip_id}: boat must be 1 or 2")
        if self.reef_size not in (1, 2):
            raise DatasetError(f"trip {self.trip_id}: reef_size must be 1 or 2")
        if self.replicate < 1:
            raise DatasetError(f"trip {self.trip_id}: replicate must be >= 1")
        if set(self.maxn) != set(CAMERAS):
            raise DatasetError(f"trip {self.trip_id}: maxn must cover cameras {CAMERAS}")
        for cam, val in self.maxn.items():
            if val is not None and val < 0:
                raise DatasetError(f"trip {self.trip_id}: maxn[{cam}] negative")
        if self.acoustic_total < 0 or self.acoustic_focal < 0:
            raise DatasetError(f"trip {self.trip_id}: acoustic counts must be nonnegative")
        if self.acoustic_focal > self.acoustic_total:
            raise DatasetError(
                f"trip {self.trip_id}: focal acoustic count {self.acoustic_focal} "
                f"exceeds total {self.acoustic_total}"
            )
        if self.markrecapture is not None and self.markrecapture < 0:
            raise DatasetError(f"trip {self.trip_id}: mark-recapture count negative")
        if self.pooled_ratio is not None and not (
            RATIO_SHIFT - 1e-12 <= self.pooled_ratio <= 1.0 + RATIO_SHIFT + 1e-12
        ):
            raise DatasetError(
                f"trip {self.trip_id}: pooled ratio {self.pooled_ratio} outside "
                f"[{RATIO_SHIFT}, 1+{RATIO_SHIFT}]"
            )

    @property
    def present_cameras(self) -> tuple[str, ...]:
        return tuple(cam for cam in CAMERAS if self.maxn[cam] is not None)


@dataclass(frozen=True)
class SpeciesMaxNTable:
    """Long-format per-species MaxN rows plus the species registry.

    A registry entry flags whether a species is the target (GAJ) and whether
    it belongs to the acoustically indistinguishable set (GAJ+).  Every GAJ
    species is by definition also GAJ+.
    """

    rows: tuple[tuple[str, str, str, int], ...]  # (trip_id, camera, species_id, maxn)
    is_gaj: Mapping[str, bool]
    is_gaj_plus: Mapping[str, bool]
    _by_trip_camera: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        seen: set[tuple[str, str, str]] = set()
        index: dict[tuple[str, str], list[tuple[str, int]]] = {}
        for trip_id, camera, species_id, maxn in self.rows:
            key = (trip_id, camera, species_id)
            if key in seen:
                raise DatasetError(f"duplicate species row {key}")
            seen.add(key)
            if camera not in CAMERAS:
                raise DatasetError(f"unknown camera {camera!r} in species table")
            if species_id not in self.is_gaj_plus:
                raise DatasetError(f"species {species_id!r} not in registry")
            if maxn < 0:
                raise DatasetError(f"negative maxn in species row {key}")
            index.setdefault((trip_id, camera), []).append((species_id, maxn))
        for species_id, gaj in self.is_gaj.items():
            if gaj and not self.is_gaj_plus.get(species_id, False):
                raise DatasetError(
                    f"species {species_id!r} flagged GAJ but not GAJ+; "
                    "GAJ is acoustically indistinguishable from itself"
                )
        object.__setattr__(self, "_by_trip_camera", index)

    def cameras_present(self, trip_id: str) -> tuple[str, ...]:
        return tuple(c for c in CAMERAS if (trip_id, c) in self._by_trip_camera)

    def rows_for(self, trip_id: str, camera: str) -> Sequence[tuple[str, int]]:
        return self._by_trip_camera.get((trip_id, camera), ())


def _parse_count(text: str, *, line: int, column: str) -> int | None:
    text = text.strip()
    if text in _MISSING_TOKENS:
        return None
    try:
        value = int(text)
    except ValueError:
        raise DatasetError(f"line {line}: column {column!r}: expected integer, got {text!r}")
    return value


def load_trips(path: str | Path) -> list[TripRecord]:
    """Read trips.csv, assigning replicate indices in file order per (boat, reef) cell.

    The optional ``r`` column supplies precomputed pooled ratios; otherwise
    attach them later from a species table via :func:`attach_pooled_ratios`.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing_cols = [c for c in _TRIP_COLUMNS if c not in header]
        if missing_cols:
            raise DatasetError(f"{path.name}: missing columns {missing_cols}")
        has_ratio = "r" in header

        trips: list[TripRecord] = []
        seen_ids: set[str] = set()
        cell_counts: dict[tuple[int, int], int] = {}
        for row in reader:
            line = reader.line_num
            trip_id = (row["trip_id"] or "").strip()
            if not trip_id:
                raise DatasetError(f"line {line}: empty trip_id")
            if trip_id in seen_ids:
                raise DatasetError(f"line {line}: duplicate trip_id {trip_id!r}")
            seen_ids.add(trip_id)

            boat_text = (row["boat"] or "").strip()
            if boat_text not in ("1", "2"):
                raise DatasetError(f"line {line}: boat must be 1 or 2, got {boat_text!r}")
            boat = int(boat_text)
            reef_text = (row["reef_size"] or "").strip()
            if reef_text not in _REEF_SIZE_CODES:
                raise DatasetError(f"line {line}: bad reef_size {reef_text!r}")
            reef = _REEF_SIZE_CODES[reef_text]

            cell = (boat, reef)
            cell_counts[cell] = cell_counts.get(cell, 0) + 1

            maxn = {
                cam: _parse_count(row[f"maxn_{cam}"], line=line, column=f"maxn_{cam}")
                for cam in CAMERAS
            }
            n_total = _parse_count(row["N"], line=line, column="N")
            n_focal = _parse_count(row["N_focal"], line=line, column="N_focal")
            if n_total is None or n_focal is None:
                raise DatasetError(f"line {line}: acoustic counts are never missing")
            n_mr = _parse_count(row["N_mr"], line=line, column="N_mr")

            ratio: float | None = None
            if has_ratio:
                ratio_text = (row["r"] or "").strip()
                if ratio_text not in _MISSING_TOKENS:
                    try:
                        ratio = float(ratio_text)
                    except ValueError:
                        raise DatasetError(f"line {line}: bad ratio {ratio_text!r}")

            try:
                trips.append(
                    TripRecord(
                        trip_id=trip_id,
                        boat=boat,
                        reef_size=reef,
                        replicate=cell_counts[cell],
                        maxn=maxn,
                        acoustic_total=n_total,
                        acoustic_focal=n_focal,
                        markrecapture=n_mr,
                        pooled_ratio=ratio,
                        reef_type=(row["reef_type"] or "").strip(),
                    )
                )
            except DatasetError as exc:
                raise DatasetError(f"line {line}: {exc}") from None

    if not trips:
        raise DatasetError(f"{path.name}: no trips")
    return trips


def save_trips(trips: Sequence[TripRecord], path: str | Path) -> None:
    """Write trips back out in the load_trips schema (integers round-trip exactly)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_TRIP_COLUMNS) + ["r"])
        for t in trips:
            writer.writerow(
                [
                    t.trip_id,
                    t.boat,
                    t.reef_size,
                    t.reef_type,
                    *("NA" if t.maxn[c] is None else t.maxn[c] for c in CAMERAS),
                    t.acoustic_total,
                    t.acoustic_focal,
                    "NA" if t.markrecapture is None else t.markrecapture,
                    "NA" if t.pooled_ratio is None else repr(t.pooled_ratio),
                ]
            )


def load_species_table(species_path: str | Path, registry_path: str | Path) -> SpeciesMaxNTable:
    """Read the long-format species MaxN file and its species registry."""
    registry_path = Path(registry_path)
    is_gaj: dict[str, bool] = {}
    is_gaj_plus: dict[str, bool] = {}
    with registry_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("species_id", "is_gaj", "is_gaj_plus"):
            if col not in (reader.fieldnames or []):
                raise DatasetError(f"{registry_path.name}: missing column {col!r}")
        for row in reader:
            sid = row["species_id"].strip()
            if sid in is_gaj:
                raise DatasetError(f"duplicate species_id {sid!r} in registry")
            is_gaj[sid] = row["is_gaj"].strip() == "1"
            is_gaj_plus[sid] = row["is_gaj_plus"].strip() == "1"

    species_path = Path(species_path)
    rows: list[tuple[str, str, str, int]] = []
    with species_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("trip_id", "camera", "species_id", "maxn"):
            if col not in (reader.fieldnames or []):
                raise DatasetError(f"{species_path.name}: missing column {col!r}")
        for row in reader:
            line = reader.line_num
            count = _parse_count(row["maxn"], line=line, column="maxn")
            if count is None:
                raise DatasetError(f"line {line}: species maxn cannot be missing")
            rows.append((row["trip_id"].strip(), row["camera"].strip(), row["species_id"].strip(), count))
    return SpeciesMaxNTable(rows=tuple(rows), is_gaj=is_gaj, is_gaj_plus=is_gaj_plus)


def compute_pooled_ratio(
    table: SpeciesMaxNTable, trip_id: str, present_cameras: Iterable[str]
) -> float:
    """Shifted ratio of GAJ MaxN to GAJ+ MaxN summed over the present cameras."""
    cams = tuple(present_cameras)
    numerator = 0
    denominator = 0
    for cam in cams:
        for species_id, maxn in table.rows_for(trip_id, cam):
            if table.is_gaj_plus.get(species_id, False):
                denominator += maxn
                if table.is_gaj.get(species_id, False):
                    numerator += maxn
    if denominator == 0:
        raise DatasetError(
            f"trip {trip_id}: no GAJ+ observations across cameras {cams}"
        )
    return numerator / denominator + RATIO_SHIFT


def compute_camera_ratio(table: SpeciesMaxNTable, trip_id: str, camera: str) -> float | None:
    """Single-camera GAJ:GAJ+ shifted ratio; None when the camera is absent on the trip."""
    if camera not in CAMERAS:
        raise DatasetError(f"unknown camera {camera!r}")
    if not table.rows_for(trip_id, camera):
        return None
    return compute_pooled_ratio(table, trip_id, (camera,))


def attach_pooled_ratios(
    trips: Sequence[TripRecord], table: SpeciesMaxNTable
) -> list[TripRecord]:
    """Fill each trip's pooled ratio from the species table (present cameras only)."""
    out = []
    for t in trips:
        r = compute_pooled_ratio(table, t.trip_id, t.present_cameras)
        out.append(replace(t, pooled_ratio=r))
    return out


def camera_ratio_table(
    table: SpeciesMaxNTable, trips: Sequence[TripRecord]
) -> dict[str, dict[str, float | None]]:
    """Per-trip, per-camera shifted ratios for the paired-survey regression."""
    return {
        t.trip_id: {cam: compute_camera_ratio(table, t.trip_id, cam) for cam in CAMERAS}
        for t in trips
    }
