"""Batch experiments: seeded traces, horizon sweeps, per-step overhead, CSV tables."""

from __future__ import annotations

import csv
import io
import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .cone import calibrate_bloat
from .dynamics import Controller, SystemSpec, Trace, read_system, simulate
from .monitor import MonitorConfig, monitor_init, monitor_next
from .network import ReluNetwork, forward_batch, read_network
from .synthetic import make_synthetic_cbf
from .verifier import ROBUST, VerifiedCache, VerifierConfig

CSV_COLUMNS = ("net", "horizon", "outcome", "n_traces", "mean_ms", "max_ms", "first_warning_step")
ALL_CLEAR, VIOLATION = "all-clear", "violation"
MAX_ATTEMPTS = 1_000_000
_BATCH = 1024
_SEED_MASK = (1 << 64) - 1


class ExperimentError(ValueError):
    pass


# -- initial states -----------------------------------------------------------

def state_rng(seed: int, index: int) -> np.random.Generator:
    """Philox-4x64 keyed by ``(seed, index)``: one independent stream per trace."""
    if not 0 <= seed <= _SEED_MASK:
        raise ValueError("seed must fit in 64 unsigned bits")
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def sample_initial_states(spec: SystemSpec, n: int, seed: int, net: Optional[ReluNetwork] = None) -> np.ndarray:
    """``n`` uniform draws from the initial box, each rejected until ``B >= 0`` when a net is given."""
    if n < 1:
        raise ValueError("need at least one initial state")
    box = spec.initial_set
    out = np.empty((n, spec.state_dim))
    for i in range(n):
        rng = state_rng(seed, i)
        tried = 0
        while True:
            k = min(_BATCH, MAX_ATTEMPTS - tried)
            if k <= 0:
                raise ExperimentError(
                    f"no initial state with nonnegative certificate after {MAX_ATTEMPTS} draws")
            X = box.lower + rng.random((k, spec.state_dim)) * (box.upper - box.lower)
            tried += k
            if net is None:
                out[i] = X[0]
                break
            ok = np.flatnonzero(forward_batch(net, X) >= 0.0)
            if ok.size:
                out[i] = X[ok[0]]
                break
    return out


# -- controllers --------------------------------------------------------------

class ExecutableController:
    """Line protocol with a persistent child process: write the state, read the control."""

    def __init__(self, command: Union[str, Sequence[str]], control_dim: int, timeout: float = 5.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.control_dim = control_dim
        self.timeout = timeout
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def __call__(self, x):
        if self.proc.poll() is not None:
            raise ExperimentError(f"controller process exited with status {self.proc.returncode}")
        self.proc.stdin.write(" ".join(repr(float(v)) for v in x) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise ExperimentError("controller process closed its output")
        u = np.array(line.replace(",", " ").split(), dtype=float)
        if u.shape != (self.control_dim,):
            raise ExperimentError(f"controller returned {u.size} values, expected {self.control_dim}")
        return u

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(self.timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_controller(doc: dict, spec: SystemSpec) -> Controller:
    """``zero``, ``constant`` (``u``), ``proportional`` (``K`` scalar or matrix) or ``executable`` (``command``)."""
    kind = doc.get("type", "zero")
    n, m = spec.control_dim, spec.state_dim
    if kind == "zero":
        return lambda x: np.zeros(n)
    if kind == "constant":
        u = np.asarray(doc["u"], dtype=float).reshape(-1)
        if u.shape != (n,):
            raise ExperimentError(f"constant control has {u.size} entries, expected {n}")
        return lambda x: u
    if kind == "proportional":
        K = np.asarray(doc["K"], dtype=float)
        if K.ndim == 0:
            if n > m:
                raise ExperimentError("scalar gain needs at least as many states as controls")
            # scalar gain acts on the last n states (velocities for second-order systems)
            k = float(K)
            return lambda x: -k * np.asarray(x)[m - n:]
        if K.shape != (n, m):
            raise ExperimentError(f"gain matrix has shape {K.shape}, expected {(n, m)}")
        return lambda x: -K @ np.asarray(x)
    if kind == "executable":
        return ExecutableController(doc["command"], n, float(doc.get("timeout", 5.0)))
    raise ExperimentError(f"unknown controller type {kind!r}")


# -- config -------------------------------------------------------------------

@dataclass
class NetEntry:
    id: str
    path: Optional[str] = None
    synthetic: Optional[dict] = None  # keyword arguments for make_synthetic_cbf

    def load(self) -> ReluNetwork:
        if self.path is not None:
            return read_network(self.path)
        return make_synthetic_cbf(**self.synthetic)


@dataclass
class ExperimentConfig:
    spec_path: str
    nets: list
    horizons: list
    n_traces: int
    trace_len: int
    seed: int = 0
    controller: dict = field(default_factory=lambda: {"type": "zero"})
    mode: str = ROBUST
    check_unstable: bool = False
    bloat: Union[float, str] = "auto"
    bloat_probes: int = 1_000_000
    budget: Optional[float] = None
    output: Optional[str] = None
    figures: bool = True

    def __post_init__(self):
        if not self.horizons:
            raise ExperimentError("horizons must be nonempty")
        if any(int(h) != h or h < 1 for h in self.horizons):
            raise ExperimentError("horizons must be positive integers")
        if list(self.horizons) != sorted(set(self.horizons)):
            raise ExperimentError("horizons must be strictly ascending")
        if self.n_traces < 1:
            raise ExperimentError("n_traces must be at least 1")
        if self.trace_len < 1:
            raise ExperimentError("trace_len must be at least 1")
        if not self.nets:
            raise ExperimentError("at least one net is required")
        if not (self.bloat == "auto" or (isinstance(self.bloat, (int, float)) and self.bloat >= 0)):
            raise ExperimentError("bloat must be 'auto' or a nonnegative number")
        ids = [n.id for n in self.nets]
        if len(set(ids)) != len(ids):
            raise ExperimentError("net ids must be unique")
        VerifierConfig(self.mode)

    @classmethod
    def from_dict(cls, doc: dict, base: Union[str, Path] = ".") -> "ExperimentConfig":
        base = Path(base)
        resolve = lambda p: str((base / p).resolve()) if p is not None else None  # noqa: E731
        nets = []
        for i, n in enumerate(doc.get("nets", [])):
            if isinstance(n, str):
                nets.append(NetEntry(Path(n).stem, resolve(n)))
            elif "path" in n:
                nets.append(NetEntry(n.get("id", Path(n["path"]).stem), resolve(n["path"])))
            elif "synthetic" in n:
                nets.append(NetEntry(n.get("id", f"net{i}"), synthetic=dict(n["synthetic"])))
            else:
                raise ExperimentError(f"net entry {i} needs 'path' or 'synthetic'")
        known = {f for f in cls.__dataclass_fields__} - {"nets", "spec_path", "output"}
        extra = set(doc) - known - {"nets", "spec_path", "system", "output"}
        if extra:
            raise ExperimentError(f"unknown config fields: {', '.join(sorted(extra))}")
        ctrl = dict(doc.get("controller", {"type": "zero"}))
        if ctrl.get("type") == "executable" and isinstance(ctrl.get("command"), list):
            ctrl["command"] = [str((base / c).resolve()) if (base / c).exists() else c for c in ctrl["command"]]
        spec_path = doc.get("spec_path", doc.get("system"))
        if spec_path is None:
            raise ExperimentError("config needs 'spec_path'")
        kwargs = {k: doc[k] for k in known if k in doc}
        kwargs["controller"] = ctrl
        return cls(spec_path=resolve(spec_path), nets=nets, output=resolve(doc.get("output")), **kwargs)


def read_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ExperimentError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(doc, path.parent)


# -- running ------------------------------------------------------------------

@dataclass
class TraceRun:
    verdicts: list
    step_ms: list  # per Next call, warm-up excluded

    @property
    def first_warning(self) -> Optional[int]:
        return next((k for k, v in enumerate(self.verdicts) if v == 0), None)


@dataclass
class ResultsRow:
    net: str
    horizon: int
    outcome: str
    n_traces: int
    mean_ms: float
    max_ms: float
    first_warning_step: Optional[int]

    def cells(self, timing: bool = True) -> list:
        fw = "" if self.first_warning_step is None else str(self.first_warning_step)
        t = [f"{self.mean_ms:.3f}", f"{self.max_ms:.3f}"] if timing else ["", ""]
        return [self.net, str(self.horizon), self.outcome, str(self.n_traces), *t, fw]


def monitor_trace(spec: SystemSpec, net: ReluNetwork, mcfg: MonitorConfig, trace: Trace,
                  cache: Optional[VerifiedCache] = None) -> TraceRun:
    st = monitor_init(spec, net, mcfg)
    if cache is not None:
        st.cache = cache
    verdicts = []
    for x in trace.states:
        st, v = monitor_next(st, x)
        verdicts.append(v.value)
    ms = [t.total * 1e3 for t in st.timing]
    return TraceRun(verdicts, ms[1:] if len(ms) > 1 else ms)


def simulate_traces(spec: SystemSpec, controller_doc: dict, x0s: np.ndarray, steps: int) -> list:
    ctrl = make_controller(controller_doc, spec)
    try:
        return [simulate(spec, ctrl, x0, steps) for x0 in x0s]
    finally:
        if isinstance(ctrl, ExecutableController):
            ctrl.close()


def resolve_bloat(cfg: ExperimentConfig, spec: SystemSpec) -> float:
    if cfg.bloat == "auto":
        return calibrate_bloat(spec, cfg.bloat_probes, seed=cfg.seed & _SEED_MASK)
    return float(cfg.bloat)


def aggregate(net_id: str, horizon: int, runs: Sequence[TraceRun]) -> list:
    rows = []
    for outcome in (ALL_CLEAR, VIOLATION):
        bucket = [r for r in runs if (r.first_warning is None) == (outcome == ALL_CLEAR)]
        if not bucket:
            continue
        ms = np.concatenate([np.asarray(r.step_ms, dtype=float) for r in bucket])
        fw = min(r.first_warning for r in bucket) if outcome == VIOLATION else None
        rows.append(ResultsRow(net_id, horizon, outcome, len(bucket), float(ms.mean()), float(ms.max()), fw))
    return rows


@dataclass
class ExperimentResult:
    rows: list
    bloat: float
    traces: dict  # net id -> list of Trace
    runs: dict    # (net id, horizon) -> list of TraceRun


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run every net x horizon over the same seeded traces and aggregate into rows.

    Files are written only once everything has finished.
    """
    spec = read_system(cfg.spec_path)
    bloat = resolve_bloat(cfg, spec)
    vcfg = VerifierConfig(cfg.mode, check_unstable=cfg.check_unstable)
    rows, traces, runs = [], {}, {}
    for entry in cfg.nets:
        net = entry.load()
        if net.input_dim != spec.state_dim:
            raise ExperimentError(f"net {entry.id!r} takes {net.input_dim} inputs, system has {spec.state_dim}")
        x0s = sample_initial_states(spec, cfg.n_traces, cfg.seed, net)
        traces[entry.id] = simulate_traces(spec, cfg.controller, x0s, cfg.trace_len)
        for h in cfg.horizons:
            # cube facts depend only on the net, the system and the verifier mode, so
            # traces share one cache; a fresh one per horizon keeps timings comparable
            cache = VerifiedCache()
            mcfg = MonitorConfig(int(h), spec.dt, bloat, vcfg, cfg.budget)
            rs = [monitor_trace(spec, net, mcfg, tr, cache) for tr in traces[entry.id]]
            runs[(entry.id, int(h))] = rs
            rows.extend(aggregate(entry.id, int(h), rs))
    result = ExperimentResult(rows, bloat, traces, runs)
    if write and cfg.output:
        write_outputs(cfg.output, rows, figures=cfg.figures)
    return result


# -- output -------------------------------------------------------------------

def rows_to_csv(rows: Sequence[ResultsRow], timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.cells(timing))
    return buf.getvalue()


def rows_to_dat(rows: Sequence[ResultsRow]) -> str:
    """Gnuplot blocks, one per net: ``horizon n_clear n_violation mean_ms max_ms``."""
    out = []
    nets = list(dict.fromkeys(r.net for r in rows))
    for net in nets:
        out.append(f"# net {net}\n# horizon n_clear n_violation mean_ms max_ms\n")
        for h in sorted({r.horizon for r in rows if r.net == net}):
            sel = [r for r in rows if r.net == net and r.horizon == h]
            n = {o: sum(r.n_traces for r in sel if r.outcome == o) for o in (ALL_CLEAR, VIOLATION)}
            mean = sum(r.mean_ms * r.n_traces for r in sel) / sum(r.n_traces for r in sel)
            mx = max(r.max_ms for r in sel)
            out.append(f"{h} {n[ALL_CLEAR]} {n[VIOLATION]} {mean:.3f} {mx:.3f}\n")
        out.append("\n\n")
    return "".join(out)


def read_csv_rows(text: str) -> list:
    rd = csv.DictReader(io.StringIO(text))
    if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
        raise ExperimentError(f"unexpected CSV columns {rd.fieldnames}")
    return [ResultsRow(d["net"], int(d["horizon"]), d["outcome"], int(d["n_traces"]),
                       float(d["mean_ms"] or "nan"), float(d["max_ms"] or "nan"),
                       int(d["first_warning_step"]) if d["first_warning_step"] else None) for d in rd]


def _atomic_write(path: Path, data: Union[str, bytes]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(output: Union[str, Path], rows: Sequence[ResultsRow], figures: bool = True) -> list:
    """Write ``<output>`` (CSV), ``<stem>.dat`` and optionally PNG figures; return the paths."""
    output = Path(output)
    stem = output.with_suffix("")
    blobs = {output: rows_to_csv(rows), stem.with_suffix(".dat"): rows_to_dat(rows)}
    if figures:
        from .plotting import render_figures
        blobs.update(render_figures(rows, stem))
    # render everything before touching the destination
    for path, data in blobs.items():
        _atomic_write(path, data)
    return list(blobs)

