"""Selective restoration: revert chosen parameters to their earlier bytes.

Given an aligned checkpoint pair and a threshold selection, writes a new
container where every selected parameter carries its pre-update bit pattern
and every other parameter keeps its updated bit pattern. Copies are made on
raw integer views, so no value ever round-trips through a float conversion.
The output mirrors the updated checkpoint's tensor order and metadata.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .delta_rank import (
    NameRules,
    ThresholdSelection,
    included_names,
    relative_change_array,
)
from .errors import EmptySelectionError, FtscopeError, PairMismatchError
from .tensor_store import (
    DEFAULT_CHUNK_ELEMS,
    Checkpoint,
    decode_to_f64,
    read_raw_chunks,
    validate_pair,
    write_checkpoint,
)

_BIT_VIEWS = {"F32": "<u4", "F16": "<u2", "BF16": "<u2"}


@dataclass(frozen=True)
class RestoreSummary:
    out_path: str
    restored_count: int
    restored_tensors: int
    total_count: int
    bytes_written: int
    digest: str  # sha256 of the output file
    rho_or_layers: dict

    def to_json_dict(self) -> dict:
        return {
            "out_path": self.out_path,
            "restored_count": self.restored_count,
            "restored_tensors": self.restored_tensors,
            "total_count": self.total_count,
            "bytes_written": self.bytes_written,
            "digest": self.digest,
            "rho_or_layers": self.rho_or_layers,
        }


def _sha256_of_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _merged_chunks(
    pre: Checkpoint,
    ft: Checkpoint,
    name: str,
    threshold: float,
    quota_box: list[int],
    counter_box: list[int],
    chunk_elems: int,
) -> Iterator[bytes]:
    """Yield output payload chunks: pre bytes where selected, ft bytes elsewhere."""
    dtype = ft.records[name].dtype
    view = _BIT_VIEWS[dtype]
    for pre_raw, ft_raw in zip(
        read_raw_chunks(pre, name, chunk_elems), read_raw_chunks(ft, name, chunk_elems)
    ):
        p = decode_to_f64(pre_raw, dtype)
        s = decode_to_f64(ft_raw, dtype)
        if not np.isfinite(p).all() or not np.isfinite(s).all():
            raise FtscopeError(
                f"tensor {name!r} contains non-finite parameter values; refusing to rank"
            )
        r = relative_change_array(p, s)
        selected = r > threshold
        if quota_box[0] > 0:
            tie_idx = np.nonzero(r == threshold)[0][: quota_box[0]]
            if len(tie_idx):
                selected[tie_idx] = True
                quota_box[0] -= len(tie_idx)
        counter_box[0] += int(selected.sum())
        pre_bits = np.frombuffer(pre_raw, dtype=view)
        ft_bits = np.frombuffer(ft_raw, dtype=view)
        yield np.where(selected, pre_bits, ft_bits).tobytes()


def restore_topk(
    pre: Checkpoint,
    ft: Checkpoint,
    selection: ThresholdSelection,
    out_path: str | os.PathLike,
    chunk_elems: int = DEFAULT_CHUNK_ELEMS,
) -> RestoreSummary:
    """Write a copy of `ft` with the selected parameters reverted to `pre`."""
    report = validate_pair(pre, ft)
    if not report.aligned:
        raise PairMismatchError(report)
    out_path = os.fspath(out_path)

    included = set(included_names(ft, selection.exclude))
    included_params = sum(ft.records[n].n_elems for n in included)
    if included_params != selection.total_count:
        raise FtscopeError(
            f"selection covers {selection.total_count} parameters but this pair "
            f"has {included_params} after exclusions; refusing to restore"
        )

    counters: dict[str, list[int]] = {}

    def records():
        for name, rec in ft.records.items():
            if name not in included:
                yield name, rec.dtype, rec.shape, read_raw_chunks(ft, name, chunk_elems)
                continue
            quota_box = [selection.tie_quotas.get(name, 0)]
            counter_box = [0]
            counters[name] = counter_box
            yield name, rec.dtype, rec.shape, _merged_chunks(
                pre, ft, name, selection.threshold_r, quota_box, counter_box, chunk_elems
            )

    write_checkpoint(records(), out_path, metadata=ft.metadata)

    restored = sum(box[0] for box in counters.values())
    if restored != selection.selected_count:
        raise FtscopeError(
            f"restored {restored} parameters but selection says "
            f"{selection.selected_count}; selection does not match this pair"
        )
    return RestoreSummary(
        out_path=out_path,
        restored_count=restored,
        restored_tensors=sum(1 for box in counters.values() if box[0]),
        total_count=ft.total_params,
        bytes_written=os.path.getsize(out_path),
        digest=_sha256_of_file(out_path),
        rho_or_layers={"mode": "topk", "rho": selection.rho},
    )


def restore_layers(
    pre: Checkpoint,
    ft: Checkpoint,
    layers: Sequence[int],
    out_path: str | os.PathLike,
    name_rules: NameRules | None = None,
    chunk_elems: int = DEFAULT_CHUNK_ELEMS,
) -> RestoreSummary:
    """Revert every tensor belonging to the given layer indices to `pre`."""
    report = validate_pair(pre, ft)
    if not report.aligned:
        raise PairMismatchError(report)
    out_path = os.fspath(out_path)
    rules = name_rules or NameRules()
    wanted = set(layers)
    if not wanted:
        raise EmptySelectionError("no layer indices given")

    chosen = {name for name in ft.records if rules.layer_of(name) in wanted}
    if not chosen:
        raise EmptySelectionError(
            f"no tensor matches any of layers {sorted(wanted)}"
        )

    def records():
        for name, rec in ft.records.items():
            src = pre if name in chosen else ft
            yield name, rec.dtype, rec.shape, read_raw_chunks(src, name, chunk_elems)

    write_checkpoint(records(), out_path, metadata=ft.metadata)
    return RestoreSummary(
        out_path=out_path,
        restored_count=sum(ft.records[n].n_elems for n in chosen),
        restored_tensors=len(chosen),
        total_count=ft.total_params,
        bytes_written=os.path.getsize(out_path),
        digest=_sha256_of_file(out_path),
        rho_or_layers={"mode": "layers", "layers": sorted(wanted)},
    )
