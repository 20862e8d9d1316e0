"""Datasets with blockwise missingness.

A block (modality) is a named group of columns that is observed or missing
as a unit.  Rows carry a pattern mask; block arrays hold NaN where the block
is missing.  CSV ingestion treats the empty cell as the only missing marker
unless extra tokens are supplied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import patterns
from .errors import EmptyFile, EmptyInput, InvalidConfig, PartialBlock, UnknownColumn
from .patterns import PatternTable, build_pattern_table, is_subset


@dataclass(frozen=True)
class Schema:
    """Ordered modalities and the data columns belonging to each."""

    modalities: tuple[str, ...]
    columns: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        if not self.modalities:
            raise InvalidConfig("schema needs at least one modality")
        if len(self.modalities) > patterns.MAX_MODALITIES:
            raise InvalidConfig(f"at most {patterns.MAX_MODALITIES} modalities supported")
        seen: set[str] = set()
        for name in self.modalities:
            cols = self.columns.get(name)
            if not cols:
                raise InvalidConfig(f"modality {name!r} has no columns")
            overlap = seen & set(cols)
            if overlap:
                raise InvalidConfig(f"columns assigned to two modalities: {sorted(overlap)}")
            seen |= set(cols)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def full_mask(self) -> int:
        return (1 << len(self.modalities)) - 1

    def bit_of(self, name: str) -> int:
        try:
            return self.modalities.index(name)
        except ValueError:
            raise InvalidConfig(f"unknown modality {name!r}") from None

    def mask_of(self, names: Sequence[str]) -> int:
        mask = 0
        for name in names:
            mask |= 1 << self.bit_of(name)
        return mask

    def names_of(self, mask: int) -> tuple[str, ...]:
        return tuple(n for m, n in enumerate(self.modalities) if mask >> m & 1)

    def dim_of(self, name: str) -> int:
        return len(self.columns[name])


@dataclass
class ObservedDataset:
    """Row-aligned block arrays plus per-row pattern masks."""

    schema: Schema
    masks: np.ndarray  # (n,) int64 pattern per row
    blocks: dict[str, np.ndarray]  # modality -> (n, p_m) float, NaN when missing
    row_ids: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.int64)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        n = self.masks.shape[0]
        if n == 0:
            raise EmptyInput("dataset has no rows")
        for name in self.schema.modalities:
            arr = np.asarray(self.blocks[name], dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape != (n, self.schema.dim_of(name)):
                raise InvalidConfig(f"block {name!r} has shape {arr.shape}")
            self.blocks[name] = arr

    @property
    def n_rows(self) -> int:
        return int(self.masks.shape[0])

    def pattern_table(self, min_count: int = 2) -> PatternTable:
        return build_pattern_table(self.masks, self.schema.n_modalities, min_count=min_count)

    def rows_matching(self, mask: int) -> np.ndarray:
        """Boolean selector of rows whose pattern equals ``mask``."""
        return self.masks == mask

    def rows_containing(self, mask: int) -> np.ndarray:
        """Boolean selector of rows whose pattern contains ``mask``."""
        return (self.masks & mask) == mask

    def block_values(self, names: Sequence[str], sel: np.ndarray | None = None) -> dict[str, np.ndarray]:
        if sel is None:
            return {n: self.blocks[n] for n in names}
        return {n: self.blocks[n][sel] for n in names}

    def subset(self, sel: np.ndarray) -> "ObservedDataset":
        return ObservedDataset(
            schema=self.schema,
            masks=self.masks[sel],
            blocks={n: a[sel] for n, a in self.blocks.items()},
            row_ids=self.row_ids[sel],
        )

    def to_frame(self) -> pd.DataFrame:
        """Flat frame with one column per data column; missing cells NaN."""
        data: dict[str, np.ndarray] = {"row_id": self.row_ids}
        for m, name in enumerate(self.schema.modalities):
            arr = self.blocks[name].copy()
            absent = (self.masks >> m & 1) == 0
            arr[absent] = np.nan
            for j, col in enumerate(self.schema.columns[name]):
                data[col] = arr[:, j]
        return pd.DataFrame(data)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def dataset_from_frame(frame: pd.DataFrame, schema: Schema) -> ObservedDataset:
    """Build a dataset from a flat frame, deriving per-row pattern masks."""
    if frame.shape[0] == 0:
        raise EmptyFile("no data rows")
    for name in schema.modalities:
        for col in schema.columns[name]:
            if col not in frame.columns:
                raise UnknownColumn(f"column {col!r} (modality {name!r}) not in data")
    if "row_id" in frame.columns:
        row_ids = frame["row_id"].to_numpy(dtype=np.int64)
    else:
        row_ids = np.arange(frame.shape[0], dtype=np.int64)
    n = frame.shape[0]
    masks = np.zeros(n, dtype=np.int64)
    blocks: dict[str, np.ndarray] = {}
    for m, name in enumerate(schema.modalities):
        cols = list(schema.columns[name])
        arr = frame[cols].to_numpy(dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        missing = np.isnan(arr)
        all_missing = missing.all(axis=1)
        any_missing = missing.any(axis=1)
        partial = any_missing & ~all_missing
        if partial.any():
            bad = row_ids[partial][0]
            raise PartialBlock(f"block {name!r} is partially missing in row_id {bad}")
        masks |= (~all_missing).astype(np.int64) << m
        blocks[name] = arr
    return ObservedDataset(schema=schema, masks=masks, blocks=blocks, row_ids=row_ids)


def ingest_csv(path, schema: Schema, na_tokens: Sequence[str] = ()) -> ObservedDataset:
    """Read a CSV into an :class:`ObservedDataset`.

    Only empty cells (plus any ``na_tokens``) mark missing values; a block
    must be entirely present or entirely absent per row.
    """
    try:
        frame = pd.read_csv(
            path,
            keep_default_na=False,
            na_values=[""] + list(na_tokens),
        )
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path}: no header or data") from None
    if frame.shape[0] == 0:
        raise EmptyFile(f"{path}: no data rows")
    needed = {c for name in schema.modalities for c in schema.columns[name]}
    for col in needed:
        if col not in frame.columns:
            raise UnknownColumn(f"column {col!r} not present in {path}")
        frame[col] = pd.to_numeric(frame[col], errors="raise")
    return dataset_from_frame(frame, schema)


def required_mask(schema: Schema, names: Sequence[str]) -> int:
    return schema.mask_of(names)


def check_blockwise(dataset: ObservedDataset) -> None:
    """Verify mask/NaN consistency (each block fully present or absent)."""
    for m, name in enumerate(dataset.schema.modalities):
        present = (dataset.masks >> m & 1) == 1
        vals = dataset.blocks[name]
        if np.isnan(vals[present]).any():
            raise PartialBlock(f"block {name!r} marked observed but holds NaN")


def split_indices(
    masks: np.ndarray, rng: np.random.Generator, stratified: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Two-fold split of row indices; stratified halves every pattern."""
    n = masks.shape[0]
    if stratified:
        fold_a: list[np.ndarray] = []
        fold_b: list[np.ndarray] = []
        extra_to_a = True
        for mask in np.unique(masks):
            idx = np.flatnonzero(masks == mask)
            idx = rng.permutation(idx)
            half = idx.size // 2
            if idx.size % 2 and not extra_to_a:
                half += 1
            if idx.size % 2:
                extra_to_a = not extra_to_a
            fold_a.append(idx[half:])
            fold_b.append(idx[:half])
        a = np.sort(np.concatenate(fold_a))
        b = np.sort(np.concatenate(fold_b))
    else:
        perm = rng.permutation(n)
        a = np.sort(perm[: n // 2])
        b = np.sort(perm[n // 2 :])
    return a, b


def fold_is_degenerate(masks: np.ndarray, table_masks: Sequence[int]) -> bool:
    """True when some observed pattern has fewer than 2 rows in the fold."""
    values, counts = np.unique(masks, return_counts=True)
    have = dict(zip(values.tolist(), counts.tolist()))
    return any(have.get(m, 0) < 2 for m in table_masks)


def is_evaluable(dataset: ObservedDataset, mask: int) -> np.ndarray:
    return dataset.rows_containing(mask)


__all__ = [
    "Schema",
    "ObservedDataset",
    "dataset_from_frame",
    "ingest_csv",
    "check_blockwise",
    "split_indices",
    "fold_is_degenerate",
    "required_mask",
    "is_evaluable",
    "is_subset",
]
