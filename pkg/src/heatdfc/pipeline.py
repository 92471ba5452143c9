"""End-to-end runs: dynamic correlations -> states -> heritability -> report.

A run directory looks like::

    out/
      config.json
      run_summary.json
      <method>/dyncorr/<subject>.csv (+ .csv.json sidecar)
      <method>/states/{centroids.csv, assignments.csv, transitions.json,
                       occupancy.json, dispersion.json, elbow.json, alignment.json}
      <method>/heritability/{hi_map.csv, hi_top.json}
      report/*.csv

Every stage reads its inputs from disk, so stages can also be run one at a
time from the command line.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from heatdfc import dyncorr as dc
from heatdfc import heritability as her
from heatdfc import states as st
from heatdfc.errors import ConfigError, HeatDFCError, IncompleteRun, StageError
from heatdfc.signal import load_manifest, read_roi_csv
from heatdfc.spectral import default_degree, write_kernel_csv

LOGGER = logging.getLogger(__name__)

# fields that do not influence numeric output
_NON_SEMANTIC = ("out_dir", "jobs")


@dataclass
class RunConfig:
    manifest: str | None = None
    out_dir: str = "run"
    methods: list = field(default_factory=lambda: ["heat"])
    fwhm_tr: float = 15.0
    taper_bandwidth: float = 3.0
    degree: int | None = None
    k: object = "auto"
    k_min: int = 2
    k_max: int = 8
    restarts: int = 100
    steps: int = 50000
    repeats: int = 100
    seed: int = 0
    clamp: bool = False
    top_n: int = 5
    edges: object = "all"
    trace_edges: list | None = None
    format: str = "csv"
    jobs: int = 1

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        if "method" in raw:
            method = raw.pop("method")
            raw["methods"] = [method] if isinstance(method, str) else list(method)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path):
        with Path(path).open() as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def semantic_dict(self):
        return {k: v for k, v in self.to_dict().items() if k not in _NON_SEMANTIC}

    def config_hash(self):
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self, check_files=True):
        """Fail fast on anything that would break a later stage."""
        if not self.methods:
            raise ConfigError("no methods selected")
        for m in self.methods:
            if m not in dc.METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {dc.METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods are listed twice")
        if not self.fwhm_tr > 0:
            raise ConfigError("fwhm_tr must be positive")
        if self.k != "auto":
            try:
                k = int(self.k)
            except (TypeError, ValueError):
                raise ConfigError("k must be 'auto' or an integer") from None
            if k < 1:
                raise ConfigError("k must be >= 1")
            self.k = k
        elif self.k_max - self.k_min < 2 or self.k_min < 1:
            raise ConfigError("k range needs at least three values starting at >= 1")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be an explicit non-negative integer")
        for name in ("restarts", "steps", "repeats", "top_n", "jobs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.format not in ("csv", "bin"):
            raise ConfigError("format must be 'csv' or 'bin'")
        if self.edges != "all":
            _parse_edges(self.edges)
        if not self.manifest:
            raise ConfigError("no manifest given")
        load_manifest(self.manifest, check_files=check_files)
        return self


def _parse_edges(spec, n_regions=None):
    """1-based ``[[i, j], ...]`` from the config to 0-based pairs."""
    if spec == "all" or spec is None:
        return None if n_regions is None else dc.upper_edges(n_regions)
    arr = np.asarray(spec, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ConfigError("edges must be 'all' or a list of [i, j] region pairs")
    if np.any(arr < 1) or np.any(arr[:, 0] == arr[:, 1]):
        raise ConfigError("edge regions are 1-based and must differ")
    arr = np.sort(arr, axis=1) - 1
    if n_regions is not None and arr.max() >= n_regions:
        raise ConfigError(f"edge refers to region beyond {n_regions}")
    return arr


def substream(seed, *names):
    """Child seed sequence for a named stage/method, stable across runs."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.SeedSequence(seed, spawn_key=key)


def _fmt(v):
    return format(float(v), ".17g")


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_dyncorr(cfg: RunConfig):
    manifest = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    ext = ".bin" if cfg.format == "bin" else ".csv"

    def one(args):
        method, entry = args
        try:
            roi = read_roi_csv(entry.path, entry.subject_id, manifest.tr_seconds)
            edges = _parse_edges(cfg.edges, roi.n_regions)
            series = dc.dyncorr_matrix(
                roi,
                method,
                fwhm_tr=cfg.fwhm_tr,
                taper_bandwidth=cfg.taper_bandwidth,
                degree=cfg.degree,
                edges=edges,
            )
        except (HeatDFCError, ValueError) as exc:
            raise StageError("dyncorr", f"{method}, subject {entry.subject_id}: {exc}") from exc
        path = out / method / "dyncorr" / f"{entry.subject_id}{ext}"
        if cfg.format == "bin":
            series.to_binary(path)
        else:
            series.to_csv(path)
        return series.clamped_fraction

    for method in cfg.methods:
        (out / method / "dyncorr").mkdir(parents=True, exist_ok=True)
    work = [(m, e) for m in cfg.methods for e in manifest.subjects]
    fracs = _map(one, work, cfg.jobs)
    LOGGER.info("dyncorr: %d series written", len(work))
    return dict(zip([f"{m}/{e.subject_id}" for m, e in work], fracs))


def load_series(cfg: RunConfig, method):
    manifest = load_manifest(cfg.manifest, check_files=False)
    ext = ".bin" if cfg.format == "bin" else ".csv"
    base = Path(cfg.out_dir) / method / "dyncorr"
    out = {}
    for entry in manifest.subjects:
        path = base / f"{entry.subject_id}{ext}"
        if not path.is_file():
            raise IncompleteRun(f"missing dynamic correlations {path}")
        out[entry.subject_id] = dc.DynCorrSeries.load(path)
    return out


def _write_states(dest: Path, model: st.StateModel, series, edges, perm):
    dest.mkdir(parents=True, exist_ok=True)
    k = model.k
    labels = [f"e_{a + 1}_{b + 1}" for a, b in edges]
    with (dest / "centroids.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state"] + labels)
        for s in range(k):
            w.writerow([s + 1] + [_fmt(v) for v in model.centroids[s]])
    with (dest / "assignments.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "t", "label"])
        for sid, seq in model.assignments.items():
            for t, lab in enumerate(seq):
                w.writerow([sid, t, int(lab)])
    seqs = list(model.assignments.values())
    pooled = st.transition_matrix(seqs, k)
    per_subject = np.mean([st.transition_matrix(s, k) for s in seqs], axis=0)
    _write_json(
        dest / "transitions.json",
        {
            "k": k,
            "pooled": pooled.tolist(),
            "subject_average": per_subject.tolist(),
            "mean_switches": float(np.mean([st.count_switches(s) for s in seqs])),
        },
    )
    _write_json(dest / "occupancy.json", {"k": k, "rate": st.occupancy(seqs, k).tolist()})
    try:
        disp = st.within_state_dispersion([series[s].values for s in model.assignments], seqs, k)
        disp_payload = {"k": k, "mean_sd": disp.tolist()}
    except HeatDFCError as exc:
        disp_payload = {"k": k, "mean_sd": None, "error": str(exc)}
    _write_json(dest / "dispersion.json", disp_payload)
    if model.elbow is not None:
        _write_json(dest / "elbow.json", model.elbow.to_dict())
    _write_json(dest / "alignment.json", {"permutation": None if perm is None else [p + 1 for p in perm]})
    _write_json(
        dest / "model.json",
        {"k": k, "sse_within": model.sse_within, "sse_between": model.sse_between},
    )


def stage_states(cfg: RunConfig):
    """Cluster each method's correlations; later methods are aligned to the first.

    With ``k = "auto"`` the elbow is computed on the first method and the
    chosen k is reused for the others so that states can be matched.
    """
    out = Path(cfg.out_dir)
    reference = None
    k = cfg.k
    chosen = {}
    for method in cfg.methods:
        series = load_series(cfg, method)
        edges = next(iter(series.values())).edges
        data = {sid: s.values for sid, s in series.items()}
        try:
            model = st.StateModel.fit(
                data,
                k,
                cfg.restarts,
                substream(cfg.seed, "states", "kmeans"),
                range(cfg.k_min, cfg.k_max + 1),
                cfg.jobs,
            )
        except (HeatDFCError, ValueError) as exc:
            raise StageError("states", f"{method}: {exc}") from exc
        perm = None
        if reference is None:
            reference = model.centroids
            k = model.k
        else:
            perm = st.align_centroids(reference, model.centroids)
            model = model.relabeled(perm)
        _write_states(out / method / "states", model, series, edges, perm)
        chosen[method] = model.k
        LOGGER.info("states: %s k=%d", method, model.k)
    return chosen


def read_assignments(path):
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["subject_id"], []).append(int(row["label"]))
    return {s: np.asarray(v, dtype=np.int64) for s, v in out.items()}


def stage_heritability(cfg: RunConfig):
    manifest = load_manifest(cfg.manifest, check_files=False)
    out = Path(cfg.out_dir)
    mz_pairs = manifest.twin_pairs("MZ")
    dz_pairs = manifest.twin_pairs("DZ")
    results = {}
    for method in cfg.methods:
        sdir = out / method / "states"
        if not (sdir / "assignments.csv").is_file():
            raise IncompleteRun(f"run the states stage first ({sdir} missing)")
        k = json.loads((sdir / "model.json").read_text())["k"]
        assignments = read_assignments(sdir / "assignments.csv")
        series = load_series(cfg, method)
        edges = next(iter(series.values())).edges
        maps = {
            sid: her.state_average_maps(series[sid].values, assignments[sid], k)
            for sid in series
        }

        def stack(pairs):
            if not pairs:
                return np.full((k, edges.shape[0], 2, 0), np.nan)
            arr = np.stack([np.stack([maps[a], maps[b]]) for a, b in pairs], axis=-1)
            return arr.transpose(1, 2, 0, 3)  # (k, E, 2, n_pairs)

        try:
            hmap = her.hi_map(
                stack(mz_pairs),
                stack(dz_pairs),
                cfg.steps,
                cfg.repeats,
                substream(cfg.seed, "heritability", method),
                edges,
                cfg.clamp,
            )
        except (HeatDFCError, ValueError) as exc:
            raise StageError("heritability", f"{method}: {exc}") from exc
        hdir = out / method / "heritability"
        hdir.mkdir(parents=True, exist_ok=True)
        hmap.to_csv(hdir / "hi_map.csv")
        hmap.write_top_json(hdir / "hi_top.json", cfg.top_n)
        results[method] = {
            "mz_pairs": len(mz_pairs),
            "dz_pairs": len(dz_pairs),
            "usable_edges": int(np.isfinite(hmap.hi).sum()),
            "max_sd_bound": float(np.nanmax(hmap.sd_bound)) if np.isfinite(hmap.sd_bound).any() else None,
        }
    return results


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_summary(cfg: RunConfig, clamped=None, heritability=None):
    out = Path(cfg.out_dir)
    methods = {}
    for method in cfg.methods:
        sdir = out / method / "states"
        entry = {}
        if (sdir / "model.json").is_file():
            entry["k"] = json.loads((sdir / "model.json").read_text())["k"]
            entry["occupancy"] = json.loads((sdir / "occupancy.json").read_text())["rate"]
            trans = json.loads((sdir / "transitions.json").read_text())
            entry["stay_probability"] = np.diag(trans["pooled"]).tolist()
            entry["dispersion"] = json.loads((sdir / "dispersion.json").read_text())["mean_sd"]
        if clamped:
            fr = [v for key, v in clamped.items() if key.startswith(method + "/")]
            entry["max_clamped_fraction"] = max(fr) if fr else 0.0
        if heritability and method in heritability:
            entry["heritability"] = heritability[method]
        methods[method] = entry
    files = sorted(
        p for p in out.rglob("*") if p.is_file() and p.name != "run_summary.json" and "report" not in p.parts
    )
    payload = {
        "config": cfg.semantic_dict(),
        "config_hash": cfg.config_hash(),
        "chosen_k": methods[cfg.methods[0]].get("k"),
        "methods": methods,
        "outputs": {p.relative_to(out).as_posix(): _digest(p) for p in files if p.name != "config.json"},
    }
    _write_json(out / "run_summary.json", payload)
    return payload


def save_config(cfg: RunConfig):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.semantic_dict())


def run_pipeline(cfg: RunConfig):
    """Validate, then run every stage in order and write the summary and report."""
    cfg.validate()
    save_config(cfg)
    clamped = stage_dyncorr(cfg)
    stage_states(cfg)
    herit = stage_heritability(cfg)
    summary = write_summary(cfg, clamped, herit)
    report(cfg.out_dir)
    return summary


# --------------------------------------------------------------------------
# Report tables
# --------------------------------------------------------------------------

REPORT_TABLES = (
    "traces.csv",
    "state_timelines.csv",
    "transitions.csv",
    "occupancy.csv",
    "dispersion.csv",
    "elbow.csv",
    "hi_top.csv",
    "kernel.csv",
    "window_weights.csv",
)


def _rows_to_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return len(rows)


def report(run_dir):
    """Write plot-ready tables for a completed run into ``run_dir/report``.

    Raises
    ------
    IncompleteRun
        If the run summary or any stage output is missing.
    """
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").is_file() or not (run_dir / "run_summary.json").is_file():
        raise IncompleteRun(f"{run_dir} has no completed run (config/run_summary missing)")
    cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    cfg.out_dir = str(run_dir)
    needed = []
    for m in cfg.methods:
        for rel in ("states/assignments.csv", "states/model.json", "heritability/hi_top.json"):
            if not (run_dir / m / rel).is_file():
                needed.append(f"{m}/{rel}")
    if needed:
        raise IncompleteRun(f"missing outputs: {', '.join(needed)}")
    dest = run_dir / "report"
    dest.mkdir(exist_ok=True)
    counts = {}

    traces, timelines, trans_rows, occ_rows, disp_rows, elbow_rows, top_rows = ([] for _ in range(7))
    n_time = None
    for method in cfg.methods:
        series = load_series(cfg, method)
        first = next(iter(series.values()))
        n_time = first.n_time
        edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(first.edges)}
        wanted = _parse_edges(cfg.trace_edges) if cfg.trace_edges else first.edges[:1]
        for sid, s in series.items():
            for a, b in wanted:
                e = edge_index.get((int(a), int(b)))
                if e is None:
                    raise IncompleteRun(f"trace edge {a + 1}-{b + 1} was not estimated")
                for j in range(s.n_time):
                    traces.append([sid, method, a + 1, b + 1, j, _fmt(s.times[j]), _fmt(s.values[j, e])])
        sdir = run_dir / method / "states"
        for sid, seq in read_assignments(sdir / "assignments.csv").items():
            for j, lab in enumerate(seq):
                timelines.append([method, sid, j, int(lab)])
        trans = json.loads((sdir / "transitions.json").read_text())
        for a, row in enumerate(trans["pooled"]):
            for b, p in enumerate(row):
                trans_rows.append([method, a + 1, b + 1, _fmt(p)])
        for s, r in enumerate(json.loads((sdir / "occupancy.json").read_text())["rate"]):
            occ_rows.append([method, s + 1, _fmt(r)])
        disp = json.loads((sdir / "dispersion.json").read_text())["mean_sd"] or []
        for s, v in enumerate(disp):
            disp_rows.append([method, s + 1, _fmt(v)])
        if (sdir / "elbow.json").is_file():
            el = json.loads((sdir / "elbow.json").read_text())
            for k, r in zip(el["k"], el["ratio"]):
                elbow_rows.append([method, k, _fmt(r), int(k == el["chosen_k"])])
        top = json.loads((run_dir / method / "heritability" / "hi_top.json").read_text())
        for state, rows in top["states"].items():
            for r in rows:
                top_rows.append(
                    [method, int(state), r["rank"], r["edge"][0], r["edge"][1], _fmt(r["hi"]), _fmt(r["sd_bound"]), r["display"]]
                )

    counts["traces.csv"] = _rows_to_csv(
        dest / "traces.csv", ["subject_id", "method", "edge_i", "edge_j", "t_index", "t", "rho"], traces
    )
    counts["state_timelines.csv"] = _rows_to_csv(
        dest / "state_timelines.csv", ["method", "subject_id", "t", "label"], timelines
    )
    counts["transitions.csv"] = _rows_to_csv(
        dest / "transitions.csv", ["method", "from_state", "to_state", "probability"], trans_rows
    )
    counts["occupancy.csv"] = _rows_to_csv(dest / "occupancy.csv", ["method", "state", "rate"], occ_rows)
    counts["dispersion.csv"] = _rows_to_csv(dest / "dispersion.csv", ["method", "state", "mean_sd"], disp_rows)
    counts["elbow.csv"] = _rows_to_csv(dest / "elbow.csv", ["method", "k", "ratio", "chosen"], elbow_rows)
    # stable sort keeps method/state order among equal values
    top_rows.sort(key=lambda r: -float(r[5]))
    counts["hi_top.csv"] = _rows_to_csv(
        dest / "hi_top.csv",
        ["method", "state", "rank", "edge_i", "edge_j", "hi", "sd_bound", "display"],
        top_rows,
    )
    degree = cfg.degree if cfg.degree is not None else default_degree(n_time)
    bandwidth = dc.make_params("heat", n_time, cfg.fwhm_tr).bandwidth
    write_kernel_csv(dest / "kernel.csv", bandwidth, degree, t0=0.0)
    counts["kernel.csv"] = 1001
    weight_rows = []
    for method in ("sw", "tsw"):
        spec = dc.make_params(method, n_time, cfg.fwhm_tr, cfg.taper_bandwidth)
        w = dc.window_weights(spec)
        for off, v in zip(dc.window_offsets(w.size), w):
            weight_rows.append([method, int(off), _fmt(v)])
    counts["window_weights.csv"] = _rows_to_csv(
        dest / "window_weights.csv", ["method", "offset", "weight"], weight_rows
    )
    _write_json(dest / "index.json", {"tables": counts})
    return {name: dest / name for name in REPORT_TABLES}
