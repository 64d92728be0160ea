"""CLI entry point and run orchestration.

Wires a scenario script through the full pipeline: config, lattice scaling,
validation, decomposition, per-cell initialization, the timestep loop with
callbacks and steering, periodic VTK output, the results store, and the
throughput benchmark.
"""

from __future__ import annotations

import argparse
import functools
import os
import sqlite3
import sys
import time
import uuid
from dataclasses import dataclass

import numpy as np

from . import comms, freesurface, lbm, scripting, steering, unitsconfig
from .blockgrid import make_storage
from .comms import (ExchangePlan, exchange_ghost_layers, gather_field_global,
                    gather_slice, run_workers)
from .lbm import (FLUID, INTERFACE, NOSLIP, OBSTACLE, PRESSURE, VELOCITY,
                  StreamMasks, TRTParams, equilibrium, make_stencil,
                  setup_lbm_fields)
from .scripting import (BlockCollectionProxy, CommProxy, ScriptError,
                        bind_domain_size, invoke_config, invoke_domain_init,
                        invoke_timestep_callback, load_scenario)

MODE_LBM = "lbm"
MODE_FSLBM = "fslbm"

_BOUNDARY_FLAGS = {
    "noslip": NOSLIP,
    "pressure": PRESSURE,
    "velocity": VELOCITY,
    "obstacle": OBSTACLE,
}


class ConfigurationError(RuntimeError):
    pass


@dataclass
class RunPlan:
    """Everything the driver needs besides the scenario script itself."""

    scenario: str
    workers: int = 1
    timesteps: int = None     # overrides the scenario's Control.timesteps
    vtk_interval: int = None  # overrides Control.vtk_output_interval
    vtk_dir: str = None
    results: str = None
    steer_port: int = None
    ws_port: int = None
    benchmark: bool = False
    mode: str = None          # overrides Control.mode
    run_id: str = None
    signal_steering: bool = False
    capture_state: bool = False  # return final pdf arrays for comparisons

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


@dataclass
class RunResult:
    exit_code: int
    steps_done: int = 0
    mlups: dict = None
    results_path: str = None
    error: str = None
    state_digest: dict = None
    state: dict = None
    run_id: str = None


# -- results store --------------------------------------------------------------

class ResultsStore:
    """Run metadata and per-step named results in a single SQLite file."""

    def __init__(self, path):
        self.path = str(path)
        self._db = sqlite3.connect(self.path)
        self._db.execute(
            "CREATE TABLE IF NOT EXISTS runs ("
            " run_id TEXT PRIMARY KEY, scenario TEXT,"
            " started_at TEXT, config_text TEXT)")
        self._db.execute(
            "CREATE TABLE IF NOT EXISTS results ("
            " run_id TEXT, step INTEGER, name TEXT, value,"
            " PRIMARY KEY (run_id, step, name))")
        self._db.commit()

    def start_run(self, run_id, scenario, config_text, started_at=""):
        self._db.execute("INSERT INTO runs VALUES (?, ?, ?, ?)",
                         (run_id, scenario, started_at, config_text))
        self._db.commit()

    def record(self, run_id, step, name, value):
        try:
            self._db.execute("INSERT INTO results VALUES (?, ?, ?, ?)",
                             (run_id, int(step), str(name), value))
        except sqlite3.IntegrityError:
            raise ConfigurationError(
                f"duplicate result ({run_id}, {step}, {name})")
        self._db.commit()

    def results(self, run_id):
        cur = self._db.execute(
            "SELECT step, name, value FROM results WHERE run_id = ?"
            " ORDER BY step, name", (run_id,))
        return cur.fetchall()

    def close(self):
        self._db.close()


class ResultLog:
    """``log.result(name, value)`` as seen by scripts; no-op off the root."""

    def __init__(self, store, run_id, is_root):
        self._store = store
        self._run_id = run_id
        self._is_root = is_root
        self.step = 0

    def result(self, name, value):
        if self._is_root and self._store is not None:
            self._store.record(self._run_id, self.step, name, value)


# -- VTK output -------------------------------------------------------------------

def write_vtk(storage, field_names, step, directory, transport):
    """Legacy ASCII structured-points snapshot, gathered onto the root.

    Scalars are written with 9 significant digits in global x-fastest order;
    a field named 'velocity' becomes the VECTORS record.  Returns the file
    path on the root, None elsewhere.
    """
    scalars = [n for n in field_names if n != "velocity"]
    vectors = [n for n in field_names if n == "velocity"]
    gathered = {}
    for name in scalars:
        gathered[name] = gather_field_global(storage, name, 0, transport)
    for name in vectors:
        gathered[name] = [gather_field_global(storage, name, i, transport)
                          for i in range(3)]
    if not transport.is_root:
        return None

    nx, ny, nz = storage.global_size
    count = nx * ny * nz
    path = os.path.join(directory, f"step_{step:06d}.vtk")
    os.makedirs(directory, exist_ok=True)
    lines = [
        "# vtk DataFile Version 3.0",
        f"blockforge step {step}",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        "ORIGIN 0 0 0",
        "SPACING 1 1 1",
        f"POINT_DATA {count}",
    ]
    for name in scalars:
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        data = gathered[name]
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    lines.append(f"{data[x, y, z]:.9g}")
    for name in vectors:
        lines.append(f"VECTORS {name} double")
        vx, vy, vz = gathered[name]
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    lines.append(f"{vx[x, y, z]:.9g} {vy[x, y, z]:.9g} "
                                 f"{vz[x, y, z]:.9g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# -- configuration handling --------------------------------------------------------

def prepare_config(registry):
    """Invoke config, nondimensionalize if needed, and validate."""
    tree = invoke_config(registry)
    if unitsconfig.tree_has_quantities(tree):
        scale = unitsconfig.scale_from_tree(tree)
        tree = unitsconfig.nondimensionalize_tree(tree, scale)
    diagnostics = unitsconfig.validate_config(tree)
    return tree, diagnostics


def _control(tree, key, default=None):
    return tree.get("Control", {}).get(key, default)


def _physical(tree, key, default=None):
    return tree.get("Physical", {}).get(key, default)


def _domain_geometry(tree):
    domain = tree.get("Domain")
    if not domain or "cells" not in domain:
        raise ConfigurationError("config must provide Domain.cells = [nx, ny, nz]")
    cells = tuple(int(v) for v in domain["cells"])
    counts = tuple(int(v) for v in domain.get("blocks", (1, 1, 1)))
    if any(c < 1 for c in counts) or any(n % c for n, c in zip(cells, counts)):
        raise ConfigurationError(
            f"block counts {counts} must divide domain cells {cells}")
    block_size = tuple(n // c for n, c in zip(cells, counts))
    periodic = tuple(bool(v) for v in domain.get("periodic", (False, False, False)))
    return cells, block_size, periodic


def _trt_params(tree):
    omega = _physical(tree, "omega_e")
    if omega is not None:
        return TRTParams.from_omega(float(omega),
                                    float(_physical(tree, "magic", 3.0 / 16.0)))
    nu = _physical(tree, "viscosity")
    if nu is None:
        raise ConfigurationError(
            "config must provide Physical.viscosity (lattice) or Physical.omega_e")
    return TRTParams.from_viscosity(float(nu),
                                    float(_physical(tree, "magic", 3.0 / 16.0)))


def _apply_domain_init(registry, storage, worker_id, stencil, mode):
    """Run the per-cell callback for every local cell and seed all fields."""
    for block in storage.local_blocks(worker_id):
        flags = block.fields["flags"].interior_view()[..., 0]
        bc_rho = block.fields["bc_rho"].interior_view()[..., 0]
        bc_vel = block.fields["bc_vel"].interior_view()
        fill = block.fields["fill"].interior_view()[..., 0] \
            if mode == MODE_FSLBM else None
        nx, ny, nz = block.size
        ox, oy, oz = block.offset
        rho_init = np.ones((nx, ny, nz))
        vel_init = np.zeros((nx, ny, nz, 3))
        if fill is not None:
            fill[...] = 1.0
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    spec = invoke_domain_init(registry, (ox + x, oy + y, oz + z))
                    if not spec:
                        continue
                    boundary = spec.get("boundary")
                    if boundary:
                        name = str(boundary[0]).lower()
                        if name not in _BOUNDARY_FLAGS:
                            raise ConfigurationError(
                                f"unknown boundary kind {boundary[0]!r}")
                        flags[x, y, z] = _BOUNDARY_FLAGS[name]
                        if name == "pressure":
                            bc_rho[x, y, z] = float(boundary[1])
                        elif name == "velocity":
                            bc_vel[x, y, z] = np.asarray(boundary[1], dtype=float)
                    if "initDensity" in spec:
                        rho_init[x, y, z] = float(spec["initDensity"])
                    if "initVel" in spec:
                        vel_init[x, y, z] = np.asarray(spec["initVel"], dtype=float)
                    if fill is not None and "fill_level" in spec:
                        fill[x, y, z] = float(spec["fill_level"])
        pdf = block.fields["pdf"].interior_view()
        pdf[...] = equilibrium(rho_init, vel_init, stencil)
        block.fields["pdf_tmp"].interior_view()[...] = pdf


# -- the per-worker program ---------------------------------------------------------

def _worker_main(transport, plan, steer):
    registry = load_scenario(plan.scenario)
    tree, diagnostics = prepare_config(registry)
    if diagnostics:
        raise ConfigurationError("; ".join(f"{p}: {m}" for p, m in diagnostics))

    mode = plan.mode or _control(tree, "mode", MODE_LBM)
    if mode not in (MODE_LBM, MODE_FSLBM):
        raise ConfigurationError(f"unknown mode {mode!r}")
    timesteps = plan.timesteps or int(_control(tree, "timesteps", 1))
    vtk_interval = plan.vtk_interval or _control(tree, "vtk_output_interval")
    stencil = make_stencil(_control(tree, "stencil", "D3Q19"))
    params = _trt_params(tree)

    cells, block_size, periodic = _domain_geometry(tree)
    bind_domain_size(registry, cells)
    storage = make_storage(cells, block_size, plan.workers, periodic)
    me = transport.self_id

    fs_params = freesurface.FreeSurfaceParams(
        sigma=float(_physical(tree, "surface_tension", 0.0)),
        relabel_interval=int(_control(tree, "relabel_interval", 100))) \
        if mode == MODE_FSLBM else None
    for block in storage.local_blocks(me):
        setup_lbm_fields(block, stencil)
        if fs_params is not None:
            freesurface.setup_freesurface_fields(block, fs_params)
    plan_x = ExchangePlan(storage)

    _apply_domain_init(registry, storage, me, stencil, mode)
    exchange_ghost_layers(plan_x, ["flags", "bc_rho", "bc_vel"], transport)

    runtime = None
    if mode == MODE_FSLBM:
        runtime = freesurface.FreeSurfaceRuntime(fs_params)
        freesurface.initialize_free_surface(storage, stencil, runtime,
                                            plan_x, transport)
    masks = {b.id: StreamMasks(b, stencil) for b in storage.local_blocks(me)}
    for block in storage.local_blocks(me):
        lbm.update_macroscopic_fields(block, stencil)

    store = None
    run_id = plan.run_id or uuid.uuid4().hex[:12]
    if transport.is_root and plan.results:
        store = ResultsStore(plan.results)
        store.start_run(run_id, str(plan.scenario), repr(tree),
                        started_at=time.strftime("%Y-%m-%dT%H:%M:%S"))
    log = ResultLog(store, run_id, transport.is_root)

    blockstorage = BlockCollectionProxy(storage, me)
    comm = CommProxy(transport)
    bound_gather = functools.partial(_script_gather_slice, storage, transport)
    exposures = {
        "blockstorage": blockstorage,
        "comm": comm,
        "gather_slice": bound_gather,
        "log": log,
        "bubbles": runtime.bubbles if runtime else None,
        "step": 0,
    }
    console_ns = steering.make_console_namespace({
        "blockstorage": blockstorage,
        "comm": comm,
        "gather_slice": bound_gather,
        "log": log,
        "np": np,
        "send_frame": _root_frame_sender(steer, transport),
        "send_slice": _slice_frame_sender(storage, transport, steer),
        "exchange": lambda *names: exchange_ghost_layers(
            plan_x, list(names), transport),
        "storage_size": storage.cell_count(),
    })

    vtk_fields = ["density", "velocity"] + (["fill"] if mode == MODE_FSLBM else [])
    steps_done = 0
    warmup = 10
    bench_t0 = None
    shutdown = False
    for step in range(1, timesteps + 1):
        if plan.benchmark and step == warmup + 1:
            bench_t0 = time.perf_counter()
        if mode == MODE_FSLBM:
            freesurface.fslbm_timestep(storage, params, stencil, runtime,
                                       plan_x, transport, masks, step)
        else:
            lbm.lbm_timestep(storage, params, stencil, plan_x, transport, masks)
        steps_done = step
        log.step = step
        exposures["step"] = step
        exposures["bubbles"] = runtime.bubbles if runtime else None
        invoke_timestep_callback(registry, scripting.TIMESTEP_CB, exposures)
        if steer is not None:
            session = steering.check_interrupt(steer, transport)
            if session is not None and session is not False:
                console_ns["step"] = step
                real_session = session if transport.is_root else None
                if transport.is_root:
                    steer._current_session = real_session
                verb = steering.run_console(real_session, transport, console_ns,
                                            step, steer)
                if transport.is_root:
                    steer._current_session = None
                if verb == steering.SHUTDOWN:
                    shutdown = True
        if vtk_interval and plan.vtk_dir and step % int(vtk_interval) == 0:
            write_vtk(storage, vtk_fields, step, plan.vtk_dir, transport)
        if shutdown:
            break

    bench_elapsed = (time.perf_counter() - bench_t0) if bench_t0 else None
    mlups_report = None
    if plan.benchmark:
        mlups_report = _mlups_report(storage, transport, steps_done - warmup,
                                     bench_elapsed)
    if store is not None:
        store.close()
    state = None
    if plan.capture_state:
        state = {b.id: b.fields["pdf"].interior_view().copy()
                 for b in storage.local_blocks(me)}
    return {
        "worker": me,
        "steps": steps_done,
        "mlups": mlups_report,
        "run_id": run_id,
        "state_digest": _state_digest(storage, me),
        "state": state,
    }


def _state_digest(storage, worker_id):
    """Per-block SHA-256 of the final PDF state, for bit-exact run comparison."""
    import hashlib
    digests = {}
    for block in storage.local_blocks(worker_id):
        data = np.ascontiguousarray(block.fields["pdf"].interior_view())
        digests[block.id] = hashlib.sha256(data.tobytes()).hexdigest()
    return digests


def _script_gather_slice(storage, transport, field="velocity", f=0, coarsen=1,
                         **fixed):
    """gather_slice(x=.., y=.., coarsen=..) as exposed to scripts."""
    return gather_slice(storage, fixed, field, f, coarsen, transport)


def _root_frame_sender(steer, transport):
    def send_frame(content_type, payload):
        if not transport.is_root or steer is None:
            return
        session = getattr(steer, "_current_session", None)
        if session is not None:
            if isinstance(payload, str):
                payload = payload.encode("utf-8")
            session.send_frame(content_type, payload)
    return send_frame


def _slice_frame_sender(storage, transport, steer):
    def send_slice(field="velocity", f=0, coarsen=1, **fixed):
        values = gather_slice(storage, fixed, field, f, coarsen, transport)
        if values is None or steer is None:
            return
        import json
        free_axis = ({"x", "y", "z"} - set(fixed)).pop()
        payload = json.dumps({"name": field, "axis": free_axis,
                              "coarsen": coarsen,
                              "values": list(values)}).encode("utf-8")
        session = getattr(steer, "_current_session", None)
        if session is not None:
            session.send_frame("slice/json", payload)
    return send_slice


def _mlups_report(storage, transport, measured_steps, elapsed):
    me = transport.self_id
    local_cells = 0
    for block in storage.local_blocks(me):
        flags = block.fields["flags"].interior_view()[..., 0]
        local_cells += int(((flags == FLUID) | (flags == INTERFACE)).sum())
    if elapsed and elapsed > 0 and measured_steps > 0:
        local = local_cells * measured_steps / elapsed / 1e6
    else:
        local = 0.0
    total = comms.reduce_scalar(local, comms.SUM, transport)
    per_worker = [None] * transport.worker_count
    if me != 0:
        transport.send(0, comms.TAG_GATHER, repr(local).encode())
    else:
        per_worker[0] = local
        for src in range(1, transport.worker_count):
            per_worker[src] = float(transport.recv(src, comms.TAG_GATHER).decode())
    if me != 0:
        return None
    return {"per_worker": per_worker, "total": total,
            "steps": measured_steps, "elapsed": elapsed or 0.0}


def run_simulation(plan: RunPlan) -> RunResult:
    """Execute a scenario end to end; pre-flight errors abort before step 1."""
    try:
        registry = load_scenario(plan.scenario)
        tree, diagnostics = prepare_config(registry)
    except (ScriptError, unitsconfig.UnitError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return RunResult(exit_code=1, error=str(exc))
    if diagnostics:
        for path, message in diagnostics:
            print(f"config error at {path}: {message}", file=sys.stderr)
        return RunResult(exit_code=2,
                         error="; ".join(m for _, m in diagnostics))

    steer = None
    if plan.steer_port is not None or plan.ws_port is not None or plan.signal_steering:
        steer = steering.SteeringState()
        if plan.steer_port is not None:
            plan.steer_port = steer.start_tcp(plan.steer_port)
        if plan.ws_port is not None:
            plan.ws_port = steer.start_websocket(plan.ws_port)
        if plan.signal_steering:
            steer.arm_signal()

    try:
        results = run_workers(plan.workers, _worker_main, plan, steer)
    except (ScriptError, ConfigurationError, unitsconfig.UnitError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return RunResult(exit_code=1, error=str(exc))
    finally:
        if steer is not None:
            steer.shutdown()

    root = results[0]
    report = root.get("mlups")
    if plan.benchmark and report:
        for wid, value in enumerate(report["per_worker"]):
            print(f"worker {wid}: {value:.3f} MLUP/s")
        print(f"total: {report['total']:.3f} MLUP/s "
              f"({report['steps']} measured steps)")
    digest = {}
    state = {} if plan.capture_state else None
    for worker_result in results:
        digest.update(worker_result["state_digest"])
        if state is not None:
            state.update(worker_result["state"] or {})
    return RunResult(exit_code=0, steps_done=root["steps"], mlups=report,
                     results_path=plan.results, state_digest=digest,
                     state=state, run_id=root["run_id"])


def benchmark_mlups(plan: RunPlan) -> dict:
    """Run the plan in benchmark mode and return the MLUP/s report."""
    plan.benchmark = True
    result = run_simulation(plan)
    if result.exit_code != 0:
        raise ConfigurationError(result.error or "benchmark run failed")
    return result.mlups


# -- CLI ----------------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="blockforge",
        description="Block-structured lattice Boltzmann runs driven by scenario scripts")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario script")
    run.add_argument("scenario", help="path to the scenario script")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--timesteps", type=int, default=None,
                     help="override the scenario's timestep count")
    run.add_argument("--vtk-dir", default=None)
    run.add_argument("--results", default=None, help="results database path")
    run.add_argument("--steer-port", type=int, default=None,
                     help="TCP console port (0 = ephemeral)")
    run.add_argument("--ws-port", type=int, default=None,
                     help="WebSocket console port (0 = ephemeral)")
    run.add_argument("--benchmark", action="store_true",
                     help="report MLUP/s throughput")
    args = parser.parse_args(argv)

    plan = RunPlan(scenario=args.scenario, workers=args.workers,
                   timesteps=args.timesteps, vtk_dir=args.vtk_dir,
                   results=args.results, steer_port=args.steer_port,
                   ws_port=args.ws_port, benchmark=args.benchmark)
    result = run_simulation(plan)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
