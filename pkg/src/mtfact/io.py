"""On-disk text formats: collections, posterior archives, prediction reports.

Everything is plain JSON manifests plus long-format CSV (one indexed value
per row, 0-based indices, floats with 17 significant digits so round trips
are bit exact).  A masked entry is simply an absent row.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict

import numpy as np

from .core import Collection, MaskedTensor3, PreprocessTransform, Tensor3
from .mtf import HyperParams, MtfState, PosteriorSamples
from .rmtf import RmtfState

__all__ = [
    "write_collection",
    "read_collection",
    "write_transform",
    "read_transform",
    "write_archive",
    "read_archive",
    "write_array",
    "read_array",
    "write_arrays",
    "read_arrays",
    "write_prediction_report",
]

_FMT = "%.17g"


def _f(x: float) -> str:
    return _FMT % x


def _json_dump(path: str, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _json_load(path: str):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# collections


def write_collection(directory: str, c: Collection):
    os.makedirs(directory, exist_ok=True)
    group_of = {}
    for g, members in enumerate(c.third_mode_groups):
        for t in members:
            group_of[t] = g
    manifest = {
        "format": "tensor-collection",
        "version": 1,
        "views": [
            {
                "name": c.names[t],
                "n": v.shape[0],
                "d": v.shape[1],
                "l": v.shape[2],
                "group": group_of.get(t),
            }
            for t, v in enumerate(c.views)
        ],
    }
    _json_dump(os.path.join(directory, "manifest.json"), manifest)
    for t, v in enumerate(c.views):
        path = os.path.join(directory, f"{c.names[t]}.csv")
        idx = np.nonzero(v.observed)
        vals = v.values[idx]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "feature_index", "slab_index", "value"])
            for n, d, l, x in zip(*idx, vals):
                w.writerow([n, d, l, _f(x)])


def read_collection(directory: str) -> Collection:
    manifest = _json_load(os.path.join(directory, "manifest.json"))
    views, names = [], []
    groups: dict[int, list[int]] = {}
    for t, meta in enumerate(manifest["views"]):
        shape = (meta["n"], meta["d"], meta["l"])
        values = np.zeros(shape)
        observed = np.zeros(shape, dtype=bool)
        path = os.path.join(directory, f"{meta['name']}.csv")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                n, d, l = int(row[0]), int(row[1]), int(row[2])
                values[n, d, l] = float(row[3])
                observed[n, d, l] = True
        views.append(MaskedTensor3(Tensor3(values), observed))
        names.append(meta["name"])
        if meta.get("group") is not None:
            groups.setdefault(meta["group"], []).append(t)
    third = tuple(tuple(groups[g]) for g in sorted(groups))
    return Collection(tuple(views), third, tuple(names))


# ---------------------------------------------------------------------------
# preprocessing transforms


def write_transform(path: str, transform: PreprocessTransform):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "feature", "slab", "center", "scale"])
        for t, (c, s) in enumerate(zip(transform.centers, transform.scales)):
            for d in range(c.shape[0]):
                for l in range(c.shape[1]):
                    w.writerow([t, d, l, _f(c[d, l]), _f(s[d, l])])


def read_transform(path: str, shapes: list[tuple[int, int]]) -> PreprocessTransform:
    centers = [np.zeros(sh) for sh in shapes]
    scales = [np.ones(sh) for sh in shapes]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            t, d, l = int(row[0]), int(row[1]), int(row[2])
            centers[t][d, l] = float(row[3])
            scales[t][d, l] = float(row[4])
    return PreprocessTransform(tuple(centers), tuple(scales))


# ---------------------------------------------------------------------------
# generic named arrays (truth archives, report tables)


def write_array(path: str, arr: np.ndarray):
    arr = np.asarray(arr)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"i{j}" for j in range(arr.ndim)] + ["value"])
        for idx in np.ndindex(*arr.shape):
            w.writerow(list(idx) + [_f(arr[idx])])


def read_array(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ndim = len(header) - 1
        rows = [([int(x) for x in row[:ndim]], float(row[ndim])) for row in reader]
    shape = tuple(max(r[0][j] for r in rows) + 1 for j in range(ndim)) if rows else (0,)
    out = np.zeros(shape)
    for idx, val in rows:
        out[tuple(idx)] = val
    return out


def write_arrays(directory: str, arrays: dict[str, np.ndarray]):
    os.makedirs(directory, exist_ok=True)
    _json_dump(os.path.join(directory, "arrays.json"),
               {name: list(np.asarray(a).shape) for name, a in arrays.items()})
    for name, a in arrays.items():
        write_array(os.path.join(directory, f"{name}.csv"), a)


def read_arrays(directory: str) -> dict[str, np.ndarray]:
    meta = _json_load(os.path.join(directory, "arrays.json"))
    return {name: read_array(os.path.join(directory, f"{name}.csv")) for name in meta}


# ---------------------------------------------------------------------------
# posterior archives


def _state_entries(state):
    """Yield (param, view, indices, array) blocks in a fixed order."""
    yield "Z", "", state.Z
    if isinstance(state, RmtfState):
        for t, w in enumerate(state.W):
            yield "W", t, w
        for t, v in enumerate(state.V):
            yield "V", t, v
        for g, u in enumerate(state.U):
            yield "U", g, u
        for t, h in enumerate(state.H):
            yield "H", t, h
        yield "pi", "", state.pi
        for t, a in enumerate(state.alpha):
            if a is not None:
                yield "alpha", t, a
        for t, b in enumerate(state.beta):
            if b is not None:
                yield "beta", t, b
        if state.lambda_mode == "per_slab":
            for t, lam in enumerate(state.lam):
                if lam is not None:
                    yield "lambda", t, lam
        else:
            yield "lambda", "", np.atleast_1d(np.asarray(state.lam))
        for t, tau in enumerate(state.tau):
            yield "tau", t, tau
    else:
        for t, v in enumerate(state.V):
            yield "V", t, v
        for g, u in enumerate(state.U):
            yield "U", g, u
        yield "H", "", state.H
        yield "pi", "", state.pi
        for t, a in enumerate(state.alpha):
            yield "alpha", t, a
        yield "tau", "", state.tau


def _write_snapshots(path: str, states: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snapshot", "param", "view", "i0", "i1", "i2", "value"])
        for s, state in enumerate(states):
            for param, view, arr in _state_entries(state):
                arr = np.asarray(arr)
                if arr.ndim == 0:
                    arr = arr[None]
                for idx in np.ndindex(*arr.shape):
                    pad = list(idx) + [""] * (3 - len(idx))
                    w.writerow([s, param, view] + pad + [_f(arr[idx])])


def _read_snapshot_rows(path: str):
    blocks: dict[tuple[int, str, str], list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            key = (int(row[0]), row[1], row[2])
            idx = tuple(int(x) for x in row[3:6] if x != "")
            blocks.setdefault(key, []).append((idx, float(row[6])))
    return blocks


def _block_to_array(entries) -> np.ndarray:
    ndim = len(entries[0][0])
    if ndim == 0:
        return np.asarray(entries[0][1])
    shape = tuple(max(e[0][j] for e in entries) + 1 for j in range(ndim))
    out = np.zeros(shape)
    for idx, val in entries:
        out[idx] = val
    return out


def _states_from_blocks(blocks, model: str, manifest) -> list:
    n_snap = max(k[0] for k in blocks) + 1
    group_of = {t: meta["u_group"] for t, meta in enumerate(manifest["views"])
                if meta["u_group"] is not None}
    n_views = len(manifest["views"])
    states = []
    for s in range(n_snap):
        get = lambda param, view="": _block_to_array(blocks[(s, param, str(view))])
        has = lambda param, view="": (s, param, str(view)) in blocks
        if model == "rmtf":
            lam_mode = manifest["hyperparams"]["lambda_mode"]
            if lam_mode == "per_slab":
                lam = [get("lambda", t) if has("lambda", t) else None
                       for t in range(n_views)]
            else:
                lam = get("lambda")
                lam = lam if lam_mode == "per_component" else np.asarray(lam[0])
            state = RmtfState(
                Z=get("Z"),
                W=[get("W", t) for t in range(n_views)],
                V=[get("V", t) for t in range(n_views)],
                U=[get("U", g) for g in range(manifest["n_u_groups"])],
                H=[get("H", t) for t in range(n_views)],
                pi=get("pi"),
                alpha=[get("alpha", t) if has("alpha", t) else None
                       for t in range(n_views)],
                beta=[get("beta", t) if has("beta", t) else None
                      for t in range(n_views)],
                lam=lam,
                tau=[np.atleast_1d(get("tau", t)) for t in range(n_views)],
                lambda_mode=lam_mode,
                group_of=group_of,
            )
        else:
            state = MtfState(
                Z=get("Z"),
                V=[get("V", t) for t in range(n_views)],
                U=[get("U", g) for g in range(manifest["n_u_groups"])],
                H=get("H"),
                pi=get("pi"),
                alpha=[get("alpha", t) for t in range(n_views)],
                tau=get("tau"),
                group_of=group_of,
            )
        states.append(state)
    return states


def write_archive(directory: str, chains: list[PosteriorSamples],
                  transform: PreprocessTransform | None = None,
                  extra: dict | None = None):
    """Posterior archive: run manifest, optional transform, per-chain files."""
    os.makedirs(directory, exist_ok=True)
    first = chains[0]
    data_views = []
    state = first.states[0] if first.states else None
    for t, name in enumerate(first.view_names):
        if isinstance(state, RmtfState):
            l, d, _ = state.W[t].shape
        elif state is not None:
            d = state.V[t].shape[0]
            l = state.u_for_view(t).shape[0] if t in state.group_of else 1
        else:
            d = l = 0
        data_views.append({"name": name, "d": d, "l": l,
                           "u_group": state.group_of.get(t) if state else None})
    manifest = {
        "format": "posterior-archive",
        "version": 1,
        "model": first.model,
        "hyperparams": asdict(first.hp),
        "n_chains": len(chains),
        "chain_ids": [c.chain_id for c in chains],
        "views": data_views,
        "n_u_groups": len(state.U) if state else 0,
        "trace_names": first.trace_names,
        "origins": first.origins,
        "preprocessed": transform is not None,
    }
    if extra:
        manifest.update(extra)
    _json_dump(os.path.join(directory, "run_manifest.json"), manifest)
    if transform is not None:
        write_transform(os.path.join(directory, "transform.csv"), transform)
    for chain in chains:
        cdir = os.path.join(directory, f"chain_{chain.chain_id}")
        os.makedirs(cdir, exist_ok=True)
        _write_snapshots(os.path.join(cdir, "snapshots.csv"), chain.states)
        with open(os.path.join(cdir, "sweeps.json"), "w") as fh:
            json.dump(chain.sweeps, fh)
            fh.write("\n")
        with open(os.path.join(cdir, "traces.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep"] + chain.trace_names)
            for i, row in enumerate(chain.traces):
                w.writerow([i + 1] + [_f(x) for x in row])


def read_archive(directory: str):
    """Returns (chains, transform or None, manifest dict)."""
    manifest = _json_load(os.path.join(directory, "run_manifest.json"))
    hp = HyperParams(**{k: (tuple(v) if isinstance(v, list) else v)
                        for k, v in manifest["hyperparams"].items()})
    transform = None
    tpath = os.path.join(directory, "transform.csv")
    if manifest.get("preprocessed") and os.path.exists(tpath):
        shapes = [(m["d"], m["l"]) for m in manifest["views"]]
        transform = read_transform(tpath, shapes)
    chains = []
    for cid in manifest["chain_ids"]:
        cdir = os.path.join(directory, f"chain_{cid}")
        blocks = _read_snapshot_rows(os.path.join(cdir, "snapshots.csv"))
        states = _states_from_blocks(blocks, manifest["model"], manifest)
        with open(os.path.join(cdir, "sweeps.json")) as fh:
            sweeps = json.load(fh)
        with open(os.path.join(cdir, "traces.csv"), newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            traces = np.array([[float(x) for x in row[1:]] for row in reader])
        chains.append(PosteriorSamples(
            model=manifest["model"], states=states, sweeps=sweeps, chain_id=cid,
            trace_names=manifest["trace_names"], traces=traces, hp=hp,
            view_names=[m["name"] for m in manifest["views"]],
            origins=manifest.get("origins"),
        ))
    return chains, transform, manifest


# ---------------------------------------------------------------------------
# prediction reports


def write_prediction_report(path: str, result, truth: Collection | None = None):
    """CSV of per-target predictions plus a trailing summary comment block."""
    from .predict import mse as _mse  # local import to avoid a cycle

    have_truth = truth is not None
    n_targets = 0
    se_sum = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["view", "sample", "feature", "slab", "predicted", "posterior_std"]
        if have_truth:
            header.append("truth")
        w.writerow(header)
        for t, n, d, l, m, s in result.rows():
            row = [result.view_names[t], n, d, l, _f(m), _f(s)]
            if have_truth:
                tv = truth.views[t].values[n, d, l]
                row.append(_f(tv))
                se_sum += (m - tv) ** 2
            w.writerow(row)
            n_targets += 1
        fh.write("\n")
        fh.write(f"# n_targets,{n_targets}\n")
        if have_truth and n_targets:
            mse_val = se_sum / n_targets
            fh.write(f"# mse,{_f(mse_val)}\n")
            fh.write(f"# rmse,{_f(np.sqrt(mse_val))}\n")
    return n_targets
