"""Shared fixtures: synthetic checkpoint builders and full-sort oracles.

The oracle helpers re-derive rankings and selections by brute force (sort
everything in memory) so the streaming implementations can be checked for
exact set equality.
"""

from __future__ import annotations

import numpy as np
import pytest

from ftscope import delta_rank as dr
from ftscope import tensor_store as ts


def write_ckpt(path, tensors, metadata=None):
    """tensors: list of (name, dtype, shape, f64 value array); returns Checkpoint."""
    records = []
    for name, dtype, shape, values in tensors:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        records.append((name, dtype, tuple(shape), ts.encode_from_f64(values, dtype)))
    ts.write_checkpoint(records, path, metadata=metadata)
    return ts.open_checkpoint(path)


def write_pair(dir_path, spec, metadata=None, stem="pair"):
    """spec: list of (name, dtype, shape, p_values, s_values) -> (pre, ft)."""
    pre = write_ckpt(
        dir_path / f"{stem}_pre.st",
        [(n, d, s, p) for n, d, s, p, _ in spec],
        metadata,
    )
    ft = write_ckpt(
        dir_path / f"{stem}_ft.st",
        [(n, d, s, q) for n, d, s, _, q in spec],
        metadata,
    )
    return pre, ft


def stored_values(ckpt, name):
    """Tensor as stored (f64-widened), flat."""
    return np.concatenate(list(ts.read_chunks(ckpt, name))) if ckpt.records[name].n_elems else np.empty(0)


def all_r(pre, ft, exclude=()):
    """{name: r array} over included tensors, via the widened values."""
    out = {}
    for name in dr.included_names(ft, exclude):
        p = stored_values(pre, name)
        s = stored_values(ft, name)
        out[name] = dr.relative_change_array(p, s)
    return out


def oracle_select(pre, ft, rho, exclude=()):
    """Exact top-floor(rho*N) set by full in-memory sort with the tie rule."""
    r_by_name = all_r(pre, ft, exclude)
    names = sorted(r_by_name)
    entries = []
    for t_ord, name in enumerate(names):
        r = r_by_name[name]
        for i in range(len(r)):
            entries.append((-r[i], t_ord, i))
    entries.sort()
    n = len(entries)
    k = dr.floor_fraction(rho, n)
    return {(names[t], i) for _, t, i in entries[:k]}


def selection_set(selection, pre, ft):
    """Reconstruct the selected (name, flat index) set from a ThresholdSelection."""
    out = set()
    for name, r in all_r(pre, ft, selection.exclude).items():
        above = np.nonzero(r > selection.threshold_r)[0]
        out.update((name, int(i)) for i in above)
        quota = selection.tie_quotas.get(name, 0)
        if quota:
            ties = np.nonzero(r == selection.threshold_r)[0][:quota]
            out.update((name, int(i)) for i in ties)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_pair_spec(rng, n_params, n_tensors=4, dtypes=("F32", "F16", "BF16"),
                     zero_frac=0.02, tie_block=0):
    """Random aligned pair spec with planted zeros in pre (and optional ties)."""
    cuts = np.sort(rng.choice(np.arange(1, n_params), size=n_tensors - 1, replace=False))
    sizes = np.diff([0, *cuts.tolist(), n_params])
    spec = []
    for t, size in enumerate(sizes):
        size = int(size)
        dtype = dtypes[t % len(dtypes)]
        p = rng.normal(size=size)
        s = p * (1.0 + rng.normal(size=size) * 0.1)
        zeros = rng.random(size) < zero_frac
        p[zeros] = 0.0
        s[zeros & (rng.random(size) < 0.5)] = 0.0  # some stay zero, some moved
        if tie_block and size > tie_block:
            # identical (p, s) entries -> identical r, exercising tie quotas
            p[:tie_block] = 1.0
            s[:tie_block] = 1.5
        # encode/decode so the pair is exactly what the files will hold
        p = ts.decode_to_f64(ts.encode_from_f64(p, dtype), dtype)
        s = ts.decode_to_f64(ts.encode_from_f64(s, dtype), dtype)
        spec.append((f"model.layers.{t}.block.weight", dtype, (size,), p, s))
    return spec


def pytest_terminal_summary(terminalreporter):
    reports = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" in rep.nodeid and getattr(rep, "when", "call") == "call":
                reports.append(rep)
    if not reports:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for rep in sorted(reports, key=lambda r: r.nodeid):
        mark = "PASS" if rep.passed else "FAIL"
        name = rep.nodeid.split("::")[-1]
        terminalreporter.write_line(f"  [{mark}] {name}")
