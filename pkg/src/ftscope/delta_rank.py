"""Per-parameter relative change, exact global ranking, and update statistics.

The relative change of a parameter is r = |after - before| / |before|, with
r = +inf when before == 0 and the value moved, and r = 0 when it did not.
Parameters are ranked globally across all tensors in descending r; ties are
broken by ascending (tensor name, flat index) so results never depend on
traversal or thread order.

Exact top-k selection over billions of elements works in two passes:
a streaming pass fills a fixed log10 histogram (65536 bins over
[1e-12, 1e12] plus zero/underflow/overflow/infinity buckets), then only the
bucket containing the k-th parameter is re-streamed and resolved exactly.
Oversized boundary buckets are narrowed recursively; equal r values always
land in the same bucket, so ties are resolved exactly at every level.
"""

from __future__ import annotations

import fnmatch
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DegenerateIndexError, FtscopeError, PairMismatchError
from .tensor_store import (
    DEFAULT_CHUNK_ELEMS,
    Checkpoint,
    read_chunks,
    validate_pair,
)

HIST_LO = 1e-12
HIST_HI = 1e12
HIST_NBINS = 1 << 16

# Boundary buckets larger than this are narrowed instead of sorted in memory.
_MATERIALIZE_CAP = 1 << 22

_LOG_LO = math.log10(HIST_LO)
_BIN_SCALE = HIST_NBINS / (math.log10(HIST_HI) - _LOG_LO)


# ---------------------------------------------------------------------------
# relative change
# ---------------------------------------------------------------------------


def relative_change(p: float, s: float) -> float:
    """r = |s - p| / |p|; +inf when p == 0 and s != 0, 0 when s == p."""
    if p == 0.0:
        return math.inf if s != 0.0 else 0.0
    return abs(s - p) / abs(p)


def relative_change_array(p: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorized relative change; inputs must be finite float64."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(s - p) / np.abs(p)
    # 0/0 is the only NaN source for finite inputs: unchanged zero parameter.
    nans = np.isnan(r)
    if nans.any():
        r[nans] = 0.0
    return r


# ---------------------------------------------------------------------------
# index data structures
# ---------------------------------------------------------------------------


@dataclass
class TensorStats:
    count: int = 0
    sum_r: float = 0.0  # finite r only
    inf_count: int = 0
    zero_count: int = 0


@dataclass
class DeltaIndex:
    """Streaming summary of all relative changes in a checkpoint pair."""

    total_count: int
    zero_count: int
    inf_count: int
    finite_sum_r: float
    bin_counts: np.ndarray  # int64[HIST_NBINS]
    bin_sums: np.ndarray  # float64[HIST_NBINS]
    underflow_count: int
    underflow_sum: float
    overflow_count: int
    overflow_sum: float
    per_tensor: dict[str, TensorStats]
    exclude: tuple[str, ...] = ()
    chunk_elems: int = DEFAULT_CHUNK_ELEMS

    def verify(self) -> None:
        """Raise if internal accounting is inconsistent."""
        hist_total = int(self.bin_counts.sum()) + self.underflow_count + self.overflow_count
        if self.total_count != self.zero_count + self.inf_count + hist_total:
            raise FtscopeError("delta index count accounting is inconsistent")
        if sum(t.count for t in self.per_tensor.values()) != self.total_count:
            raise FtscopeError("per-tensor counts do not sum to total")
        hist_sum = math.fsum(self.bin_sums.tolist()) + self.underflow_sum + self.overflow_sum
        if not math.isclose(hist_sum, self.finite_sum_r, rel_tol=1e-9, abs_tol=1e-12):
            raise FtscopeError("histogram mass does not match finite_sum_r")

    def to_json_dict(self) -> dict:
        nz = np.nonzero(self.bin_counts)[0]
        bins = {str(int(i)): [int(self.bin_counts[i]), float(self.bin_sums[i])] for i in nz}
        return {
            "total_count": self.total_count,
            "zero_count": self.zero_count,
            "inf_count": self.inf_count,
            "finite_sum_r": self.finite_sum_r,
            "histogram": {
                "lo": HIST_LO,
                "hi": HIST_HI,
                "nbins": HIST_NBINS,
                "bins": bins,
                "underflow": [self.underflow_count, self.underflow_sum],
                "overflow": [self.overflow_count, self.overflow_sum],
            },
            "per_tensor": {
                name: {
                    "count": t.count,
                    "sum_r": t.sum_r,
                    "inf_count": t.inf_count,
                    "zero_count": t.zero_count,
                }
                for name, t in sorted(self.per_tensor.items())
            },
            "exclude": list(self.exclude),
            "chunk_elems": self.chunk_elems,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DeltaIndex":
        hist = doc["histogram"]
        if hist["nbins"] != HIST_NBINS or hist["lo"] != HIST_LO or hist["hi"] != HIST_HI:
            raise FtscopeError("index histogram configuration is not supported")
        counts = np.zeros(HIST_NBINS, dtype=np.int64)
        sums = np.zeros(HIST_NBINS, dtype=np.float64)
        for key, (c, s) in hist["bins"].items():
            counts[int(key)] = c
            sums[int(key)] = s
        per_tensor = {
            name: TensorStats(t["count"], t["sum_r"], t["inf_count"], t["zero_count"])
            for name, t in doc["per_tensor"].items()
        }
        return cls(
            total_count=doc["total_count"],
            zero_count=doc["zero_count"],
            inf_count=doc["inf_count"],
            finite_sum_r=doc["finite_sum_r"],
            bin_counts=counts,
            bin_sums=sums,
            underflow_count=hist["underflow"][0],
            underflow_sum=hist["underflow"][1],
            overflow_count=hist["overflow"][0],
            overflow_sum=hist["overflow"][1],
            per_tensor=per_tensor,
            exclude=tuple(doc.get("exclude", ())),
            chunk_elems=doc.get("chunk_elems", DEFAULT_CHUNK_ELEMS),
        )


@dataclass(frozen=True)
class ThresholdSelection:
    """Exact description of the top-floor(rho*N) parameter set.

    A parameter is selected iff r > threshold_r, or r == threshold_r and it
    falls within its tensor's tie quota (quotas are assigned in ascending
    (tensor name, flat index) order, the global tie rule).
    """

    rho: float
    selected_count: int
    threshold_r: float
    include_ties_up_to: int
    selects_all_inf: bool
    tie_quotas: dict[str, int]
    total_count: int
    exclude: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "rho": self.rho,
            "selected_count": self.selected_count,
            "threshold_r": _json_float(self.threshold_r),
            "include_ties_up_to": self.include_ties_up_to,
            "selects_all_inf": self.selects_all_inf,
            "tie_quotas": dict(sorted(self.tie_quotas.items())),
            "total_count": self.total_count,
            "exclude": list(self.exclude),
        }


@dataclass(frozen=True)
class ConcentrationTable:
    """Cumulative share of total finite update mass in the top-x% parameters."""

    rows: tuple[tuple[float, float], ...]
    inf_count: int
    finite_sum_r: float

    def to_json_dict(self) -> dict:
        return {
            "rows": [{"proportion": x, "update_share": y} for x, y in self.rows],
            "inf_count": self.inf_count,
            "finite_sum_r": self.finite_sum_r,
        }

    def to_csv(self) -> str:
        lines = ["Proportion,Percentage"]
        lines += [f"{x:.10g},{100.0 * y:.6f}" for x, y in self.rows]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AttributionReport:
    """Where the selected (most updated) parameters live, by layer and module."""

    rho: float
    selected_count: int
    by_layer: dict[int, float]
    by_module: dict[str, float]
    unmatched_layer_pct: float
    unmatched_module_pct: float
    empty: bool

    def to_json_dict(self) -> dict:
        return {
            "rho": self.rho,
            "selected_count": self.selected_count,
            "by_layer": {str(k): v for k, v in sorted(self.by_layer.items())},
            "by_module": dict(sorted(self.by_module.items())),
            "unmatched_layer_pct": self.unmatched_layer_pct,
            "unmatched_module_pct": self.unmatched_module_pct,
            "empty": self.empty,
        }

    def layers_csv(self) -> str:
        lines = ["Layer,Percentage"]
        lines += [f"{k},{v:.6f}" for k, v in sorted(self.by_layer.items())]
        lines.append(f"unmatched,{self.unmatched_layer_pct:.6f}")
        return "\n".join(lines) + "\n"

    def modules_csv(self) -> str:
        lines = ["Module,Percentage"]
        lines += [f"{k},{v:.6f}" for k, v in sorted(self.by_module.items())]
        lines.append(f"unmatched,{self.unmatched_module_pct:.6f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NameRules:
    """Regexes mapping tensor names to layer indices and module labels."""

    layer_pattern: str = r"(?:^|\.)layers\.(\d+)\."
    module_patterns: tuple[tuple[str, str], ...] = (
        ("mlp.down", r"mlp\.down_proj"),
        ("mlp.up", r"mlp\.up_proj"),
        ("mlp.gate", r"mlp\.gate_proj"),
        ("attn.o", r"self_attn\.o_proj"),
        ("attn.q", r"self_attn\.q_proj"),
        ("attn.v", r"self_attn\.v_proj"),
        ("attn.k", r"self_attn\.k_proj"),
    )

    @classmethod
    def from_json_dict(cls, doc: dict) -> "NameRules":
        return cls(
            layer_pattern=doc.get("layer_pattern", cls.layer_pattern),
            module_patterns=tuple(doc.get("modules", dict(cls.module_patterns)).items()),
        )

    def layer_of(self, name: str) -> int | None:
        m = re.search(self.layer_pattern, name)
        return int(m.group(1)) if m else None

    def module_of(self, name: str) -> str | None:
        for label, pattern in self.module_patterns:
            if re.search(pattern, name):
                return label
        return None


def _json_float(x: float) -> float | str:
    return "inf" if math.isinf(x) else x


def floor_fraction(rho: float, n: int) -> int:
    """floor of the correctly-rounded product rho * n.

    Flooring the rounded product (rather than the exact rational value of
    the float) keeps intuitive identities like floor((1/3) * 3) == 1, since
    IEEE multiplication rounds (1/3)*3 back to exactly 1.0.
    """
    return math.floor(rho * n)


# ---------------------------------------------------------------------------
# streaming helpers
# ---------------------------------------------------------------------------


def _excluded(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, pat) for pat in patterns)


def included_names(ckpt: Checkpoint, exclude: Sequence[str]) -> list[str]:
    """Tensor names participating in the ranking, lexicographically sorted."""
    return sorted(n for n in ckpt.records if not _excluded(n, exclude))


def _iter_r_chunks(
    pre: Checkpoint, ft: Checkpoint, name: str, chunk_elems: int
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (start_index, r_chunk) over one tensor; rejects non-finite inputs."""
    start = 0
    for p, s in zip(read_chunks(pre, name, chunk_elems), read_chunks(ft, name, chunk_elems)):
        if not np.isfinite(p).all() or not np.isfinite(s).all():
            raise FtscopeError(
                f"tensor {name!r} contains non-finite parameter values; refusing to rank"
            )
        yield start, relative_change_array(p, s)
        start += len(p)


def _bin_index(rv: np.ndarray) -> np.ndarray:
    """Histogram bin ids for finite nonzero r; may fall outside [0, nbins)."""
    return np.floor((np.log10(rv) - _LOG_LO) * _BIN_SCALE).astype(np.int64)


def _index_one_tensor(pre: Checkpoint, ft: Checkpoint, name: str, chunk_elems: int):
    counts = np.zeros(HIST_NBINS, dtype=np.int64)
    sums = np.zeros(HIST_NBINS, dtype=np.float64)
    under = [0, 0.0]
    over = [0, 0.0]
    stats = TensorStats()
    for _, r in _iter_r_chunks(pre, ft, name, chunk_elems):
        stats.count += len(r)
        infs = np.isinf(r)
        zeros = r == 0.0
        stats.inf_count += int(infs.sum())
        stats.zero_count += int(zeros.sum())
        rv = r[~infs & ~zeros]
        if rv.size == 0:
            continue
        stats.sum_r += float(rv.sum())
        idx = _bin_index(rv)
        lo_mask = idx < 0
        hi_mask = idx >= HIST_NBINS
        in_range = ~lo_mask & ~hi_mask
        if in_range.any():
            counts += np.bincount(idx[in_range], minlength=HIST_NBINS)
            sums += np.bincount(idx[in_range], weights=rv[in_range], minlength=HIST_NBINS)
        if lo_mask.any():
            under[0] += int(lo_mask.sum())
            under[1] += float(rv[lo_mask].sum())
        if hi_mask.any():
            over[0] += int(hi_mask.sum())
            over[1] += float(rv[hi_mask].sum())
    return name, stats, counts, sums, under, over


def build_delta_index(
    pre: Checkpoint,
    ft: Checkpoint,
    chunk_elems: int = DEFAULT_CHUNK_ELEMS,
    exclude: Sequence[str] = (),
    threads: int = 1,
) -> DeltaIndex:
    """One streaming pass over the pair; deterministic regardless of threads."""
    report = validate_pair(pre, ft)
    if not report.aligned:
        raise PairMismatchError(report)
    if chunk_elems < 1:
        raise ConfigError("chunk_elems must be >= 1")

    names = included_names(ft, exclude)
    counts = np.zeros(HIST_NBINS, dtype=np.int64)
    sums = np.zeros(HIST_NBINS, dtype=np.float64)
    under = [0, 0.0]
    over = [0, 0.0]
    per_tensor: dict[str, TensorStats] = {}

    def consume(result) -> None:
        name, stats, c, s, u, o = result
        per_tensor[name] = stats
        np.add(counts, c, out=counts)
        np.add(sums, s, out=sums)
        under[0] += u[0]
        under[1] += u[1]
        over[0] += o[0]
        over[1] += o[1]

    if threads > 1 and len(names) > 1:
        # Partials merge in submission (name) order, so float sums are
        # independent of completion order.
        with ThreadPoolExecutor(max_workers=threads) as pool:
            window: list = []
            for name in names:
                window.append(pool.submit(_index_one_tensor, pre, ft, name, chunk_elems))
                if len(window) >= threads * 2:
                    consume(window.pop(0).result())
            for fut in window:
                consume(fut.result())
    else:
        for name in names:
            consume(_index_one_tensor(pre, ft, name, chunk_elems))

    total = sum(t.count for t in per_tensor.values())
    zero = sum(t.zero_count for t in per_tensor.values())
    inf = sum(t.inf_count for t in per_tensor.values())
    finite_sum = math.fsum(per_tensor[n].sum_r for n in sorted(per_tensor))
    return DeltaIndex(
        total_count=total,
        zero_count=zero,
        inf_count=inf,
        finite_sum_r=finite_sum,
        bin_counts=counts,
        bin_sums=sums,
        underflow_count=under[0],
        underflow_sum=under[1],
        overflow_count=over[0],
        overflow_sum=over[1],
        per_tensor=per_tensor,
        exclude=tuple(exclude),
        chunk_elems=chunk_elems,
    )


# ---------------------------------------------------------------------------
# exact top-k resolution
# ---------------------------------------------------------------------------

_MaskFn = Callable[[np.ndarray], np.ndarray]


def _bucket_sequence(index: DeltaIndex) -> Iterator[tuple[object, int, float]]:
    """Buckets in descending-r order as (key, count, finite_mass)."""
    yield "inf", index.inf_count, 0.0
    yield "overflow", index.overflow_count, index.overflow_sum
    nz = np.nonzero(index.bin_counts)[0]
    for i in nz[::-1]:
        yield int(i), int(index.bin_counts[i]), float(index.bin_sums[i])
    yield "underflow", index.underflow_count, index.underflow_sum
    yield "zero", index.zero_count, 0.0


def _bucket_mask(key: object) -> _MaskFn:
    if key == "inf":
        return lambda r: np.isinf(r)
    if key == "zero":
        return lambda r: r == 0.0

    def finite_nonzero(r: np.ndarray) -> np.ndarray:
        return ~np.isinf(r) & (r != 0.0)

    if key == "underflow":
        def mask(r: np.ndarray) -> np.ndarray:
            m = finite_nonzero(r)
            if m.any():
                m[m] = _bin_index(r[m]) < 0
            return m
        return mask
    if key == "overflow":
        def mask(r: np.ndarray) -> np.ndarray:
            m = finite_nonzero(r)
            if m.any():
                m[m] = _bin_index(r[m]) >= HIST_NBINS
            return m
        return mask

    bin_id = int(key)

    def mask(r: np.ndarray) -> np.ndarray:
        m = finite_nonzero(r)
        if m.any():
            m[m] = _bin_index(r[m]) == bin_id
        return m

    return mask


def _narrow(parent: _MaskFn, vmin: float, vmax: float, nsub: int, chosen: int, log_space: bool) -> _MaskFn:
    def mask(r: np.ndarray) -> np.ndarray:
        m = parent(r)
        if m.any():
            m[m] = _sub_index(r[m], vmin, vmax, nsub, log_space) == chosen
        return m

    return mask


def _sub_index(rv: np.ndarray, vmin: float, vmax: float, nsub: int, log_space: bool) -> np.ndarray:
    if log_space:
        lo, hi = math.log10(vmin), math.log10(vmax)
        x = np.log10(rv)
    else:
        lo, hi = vmin, vmax
        x = rv
    idx = np.floor((x - lo) * (nsub / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, nsub - 1)


@dataclass
class _BucketResolution:
    threshold_r: float
    ties_selected: int
    tie_quotas: dict[str, int]
    partial_mass: float


def _allocate_by_count(
    pre: Checkpoint,
    ft: Checkpoint,
    names: Sequence[str],
    chunk_elems: int,
    mask_fn: _MaskFn,
    m: int,
    value: float,
    per_tensor_counts: dict[str, int] | None = None,
) -> _BucketResolution:
    """All members share one r value: hand out m slots in (name, index) order."""
    quotas: dict[str, int] = {}
    remaining = m
    for name in names:
        if remaining == 0:
            break
        if per_tensor_counts is not None:
            count = per_tensor_counts.get(name, 0)
        else:
            count = 0
            for _, r in _iter_r_chunks(pre, ft, name, chunk_elems):
                count += int(mask_fn(r).sum())
        if count == 0:
            continue
        take = min(count, remaining)
        quotas[name] = take
        remaining -= take
    if remaining != 0:
        raise FtscopeError("selection accounting failed: bucket smaller than expected")
    mass = 0.0 if math.isinf(value) else m * value
    return _BucketResolution(value, m, quotas, mass)


def _resolve_bucket(
    pre: Checkpoint,
    ft: Checkpoint,
    names: Sequence[str],
    chunk_elems: int,
    mask_fn: _MaskFn,
    count: int,
    m: int,
    depth: int = 0,
) -> _BucketResolution:
    """Pick the top m of a bucket's members exactly (descending r, tie rule)."""
    if depth > 64:
        raise FtscopeError("selection refinement failed to converge")

    if count <= _MATERIALIZE_CAP:
        r_parts: list[np.ndarray] = []
        ord_parts: list[np.ndarray] = []
        flat_parts: list[np.ndarray] = []
        for t_ord, name in enumerate(names):
            for start, r in _iter_r_chunks(pre, ft, name, chunk_elems):
                member = mask_fn(r)
                if not member.any():
                    continue
                idx = np.nonzero(member)[0]
                r_parts.append(r[idx])
                ord_parts.append(np.full(len(idx), t_ord, dtype=np.int64))
                flat_parts.append(idx.astype(np.int64) + start)
        rs = np.concatenate(r_parts) if r_parts else np.empty(0)
        if len(rs) != count:
            raise FtscopeError("selection accounting failed: bucket recount mismatch")
        order = np.lexsort((np.concatenate(flat_parts), np.concatenate(ord_parts), -rs))
        rs = rs[order]
        ords = np.concatenate(ord_parts)[order]
        threshold = float(rs[m - 1])
        selected_ties = int((rs[:m] == threshold).sum())
        tie_ords = ords[:m][rs[:m] == threshold]
        quotas = {
            names[int(t)]: int(c)
            for t, c in zip(*np.unique(tie_ords, return_counts=True))
        }
        return _BucketResolution(threshold, selected_ties, quotas, float(rs[:m].sum()))

    # Bucket too large to sort: find its value range, then narrow.
    vmin, vmax = math.inf, -math.inf
    per_tensor_counts: dict[str, int] = {}
    for name in names:
        c = 0
        for _, r in _iter_r_chunks(pre, ft, name, chunk_elems):
            member = mask_fn(r)
            if member.any():
                vals = r[member]
                c += len(vals)
                vmin = min(vmin, float(vals.min()))
                vmax = max(vmax, float(vals.max()))
        if c:
            per_tensor_counts[name] = c

    if vmin == vmax:
        return _allocate_by_count(
            pre, ft, names, chunk_elems, mask_fn, m, vmin, per_tensor_counts
        )

    log_space = vmax > 10.0 * vmin
    nsub = HIST_NBINS
    sub_counts = np.zeros(nsub, dtype=np.int64)
    sub_sums = np.zeros(nsub, dtype=np.float64)
    for name in names:
        for _, r in _iter_r_chunks(pre, ft, name, chunk_elems):
            member = mask_fn(r)
            if not member.any():
                continue
            vals = r[member]
            sub = _sub_index(vals, vmin, vmax, nsub, log_space)
            sub_counts += np.bincount(sub, minlength=nsub)
            sub_sums += np.bincount(sub, weights=vals, minlength=nsub)

    cum = 0
    mass_above = 0.0
    for b in range(nsub - 1, -1, -1):
        c = int(sub_counts[b])
        if c == 0:
            continue
        if cum + c >= m:
            child = _narrow(mask_fn, vmin, vmax, nsub, b, log_space)
            res = _resolve_bucket(pre, ft, names, chunk_elems, child, c, m - cum, depth + 1)
            return replace(res, partial_mass=res.partial_mass + mass_above)
        cum += c
        mass_above += float(sub_sums[b])
    raise FtscopeError("selection accounting failed: narrowed bucket lost members")


def _exact_top_k(
    index: DeltaIndex, pre: Checkpoint, ft: Checkpoint, k: int
) -> tuple[_BucketResolution, float]:
    """Resolve the top-k boundary; returns (resolution, finite mass of top-k)."""
    names = included_names(ft, index.exclude)
    chunk_elems = index.chunk_elems

    if k == 0:
        return _BucketResolution(math.inf, 0, {}, 0.0), 0.0
    if k == index.total_count:
        quotas = {
            name: stats.zero_count
            for name, stats in sorted(index.per_tensor.items())
            if stats.zero_count
        }
        res = _BucketResolution(0.0, index.zero_count, quotas, 0.0)
        return res, index.finite_sum_r

    cum = 0
    mass_above = 0.0
    for key, count, bucket_mass in _bucket_sequence(index):
        if count == 0:
            continue
        if cum + count >= k:
            m = k - cum
            if key == "inf":
                res = _allocate_by_count(
                    pre,
                    ft,
                    names,
                    chunk_elems,
                    _bucket_mask(key),
                    m,
                    math.inf,
                    {n: index.per_tensor[n].inf_count for n in names},
                )
            elif key == "zero":
                res = _allocate_by_count(
                    pre,
                    ft,
                    names,
                    chunk_elems,
                    _bucket_mask(key),
                    m,
                    0.0,
                    {n: index.per_tensor[n].zero_count for n in names},
                )
            else:
                res = _resolve_bucket(
                    pre, ft, names, chunk_elems, _bucket_mask(key), count, m
                )
            return res, mass_above + res.partial_mass
        cum += count
        mass_above += bucket_mass
    raise FtscopeError("selection accounting failed: k exceeds population")


def select_threshold(
    index: DeltaIndex, pre: Checkpoint, ft: Checkpoint, rho: float
) -> ThresholdSelection:
    """Exact top-floor(rho*N) selection with the documented tie rule."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must be in [0, 1], got {rho}")
    k = floor_fraction(rho, index.total_count)
    res, _ = _exact_top_k(index, pre, ft, k)
    return ThresholdSelection(
        rho=rho,
        selected_count=k,
        threshold_r=res.threshold_r,
        include_ties_up_to=res.ties_selected,
        selects_all_inf=k >= index.inf_count,
        tie_quotas=res.tie_quotas,
        total_count=index.total_count,
        exclude=index.exclude,
    )


def concentration(
    index: DeltaIndex,
    pre: Checkpoint,
    ft: Checkpoint,
    fractions: Sequence[float],
) -> ConcentrationTable:
    """Share of total finite update mass in the exact top-x fraction.

    Infinite-r parameters occupy ranks (they are always at the top) but
    contribute no mass; their count is reported alongside.
    """
    for x in fractions:
        if not 0.0 <= x <= 1.0:
            raise ConfigError(f"fractions must be in [0, 1], got {x}")
    if index.finite_sum_r == 0.0 and any(x > 0 for x in fractions):
        raise DegenerateIndexError(
            "no finite update mass in index; concentration is undefined"
        )
    rows = []
    for x in fractions:
        k = floor_fraction(x, index.total_count)
        _, mass = _exact_top_k(index, pre, ft, k)
        share = mass / index.finite_sum_r if k else 0.0
        rows.append((float(x), float(share)))
    return ConcentrationTable(tuple(rows), index.inf_count, index.finite_sum_r)


def attribute(
    index: DeltaIndex,
    selection: ThresholdSelection,
    pre: Checkpoint,
    ft: Checkpoint,
    name_rules: NameRules | None = None,
) -> AttributionReport:
    """Percentage of the selected parameters per layer index and module label."""
    if selection.total_count != index.total_count or selection.exclude != index.exclude:
        raise FtscopeError("selection was not built from this index")
    rules = name_rules or NameRules()
    names = included_names(ft, index.exclude)

    by_layer: dict[int, int] = {}
    by_module: dict[str, int] = {}
    unmatched_layer = 0
    unmatched_module = 0
    total_selected = 0
    thr = selection.threshold_r
    for name in names:
        count = selection.tie_quotas.get(name, 0)
        for _, r in _iter_r_chunks(pre, ft, name, index.chunk_elems):
            count += int((r > thr).sum())
        if count == 0:
            continue
        total_selected += count
        layer = rules.layer_of(name)
        if layer is None:
            unmatched_layer += count
        else:
            by_layer[layer] = by_layer.get(layer, 0) + count
        module = rules.module_of(name)
        if module is None:
            unmatched_module += count
        else:
            by_module[module] = by_module.get(module, 0) + count

    if total_selected != selection.selected_count:
        raise FtscopeError(
            f"attribution counted {total_selected} selected parameters, "
            f"selection says {selection.selected_count}"
        )
    if total_selected == 0:
        return AttributionReport(selection.rho, 0, {}, {}, 0.0, 0.0, empty=True)
    scale = 100.0 / total_selected
    return AttributionReport(
        rho=selection.rho,
        selected_count=total_selected,
        by_layer={k: v * scale for k, v in by_layer.items()},
        by_module={k: v * scale for k, v in by_module.items()},
        unmatched_layer_pct=unmatched_layer * scale,
        unmatched_module_pct=unmatched_module * scale,
        empty=False,
    )
