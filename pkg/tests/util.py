"""Shared helpers for building small simulation states in tests."""

import numpy as np

from blockforge.blockgrid import make_storage
from blockforge.comms import ExchangePlan, exchange_ghost_layers, serial_transport
from blockforge.lbm import FLUID, StreamMasks, equilibrium, setup_lbm_fields


def build_lbm_state(global_size, block_size, worker_count=1,
                    periodicity=(True, True, True), stencil=None, flags_value=FLUID):
    """Storage with LBM fields on every block, flags uniform, pdf at rest."""
    storage = make_storage(global_size, block_size, worker_count, periodicity)
    for block in storage.blocks.values():
        setup_lbm_fields(block, stencil)
        block.fields["flags"].interior_view()[...] = flags_value
        rest = equilibrium(1.0, np.zeros(3), stencil)
        block.fields["pdf"].interior_view()[...] = rest
        block.fields["pdf_tmp"].interior_view()[...] = rest
    plan = ExchangePlan(storage)
    return storage, plan


def seed_pdf_from_coords(storage, fn):
    """Write fn(gx, gy, gz, q) into every interior pdf entry (global coords)."""
    for block in storage.blocks.values():
        pdf = block.fields["pdf"].interior_view()
        ox, oy, oz = block.offset
        nx, ny, nz, q = pdf.shape
        gx = np.arange(nx)[:, None, None, None] + ox
        gy = np.arange(ny)[None, :, None, None] + oy
        gz = np.arange(nz)[None, None, :, None] + oz
        qq = np.arange(q)[None, None, None, :]
        pdf[...] = fn(gx, gy, gz, qq)


def sync_flags(storage, plan, transport=None):
    transport = transport or serial_transport()
    exchange_ghost_layers(plan, ["flags"], transport)


def masks_for(storage, stencil):
    return {bid: StreamMasks(block, stencil) for bid, block in storage.blocks.items()}


def collect_pdf_global(storage, stencil):
    """Assemble the global pdf array from all blocks (single-process direct read)."""
    nx, ny, nz = storage.global_size
    out = np.zeros((nx, ny, nz, stencil.Q))
    for block in storage.blocks.values():
        ox, oy, oz = block.offset
        bx, by, bz = block.size
        out[ox:ox + bx, oy:oy + by, oz:oz + bz] = block.fields["pdf"].interior_view()
    return out


def write_scenario(path, body):
    import textwrap
    path.write_text(textwrap.dedent(body))
    return str(path)


def periodic_box_scenario(path, size=(8, 8, 8), blocks=(1, 1, 1), timesteps=5,
                          extra_callbacks="", init_vel_amp=0.0):
    """All-liquid periodic box with an optional sinusoidal initial velocity."""
    nx, ny, nz = size
    return write_scenario(path, f"""
        import math

        @callback("config")
        def config():
            return {{
                'Domain': {{
                    'cells': [{nx}, {ny}, {nz}],
                    'blocks': {list(blocks)!r},
                    'periodic': [True, True, True],
                }},
                'Physical': {{'viscosity': 0.1}},
                'Control': {{'timesteps': {timesteps}}},
            }}

        @callback("domain_init")
        def init(cell):
            amp = {init_vel_amp!r}
            if amp:
                ux = amp * math.sin(2 * math.pi * cell[2] / {nz})
                return {{'initVel': (ux, 0.0, 0.0)}}
            return {{}}
        {extra_callbacks}
    """)


class ConsoleClient:
    """Scripted telnet-style client for the steering console."""

    def __init__(self, port, timeout=20.0):
        import socket
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=timeout)
        self.sock.settimeout(timeout)
        self.buf = b""

    def read_until(self, token: bytes) -> bytes:
        while token not in self.buf:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise AssertionError(f"connection closed waiting for {token!r}; "
                                     f"got {self.buf!r}")
            self.buf += chunk
        idx = self.buf.index(token) + len(token)
        out, self.buf = self.buf[:idx], self.buf[idx:]
        return out

    def send_line(self, line: str):
        self.sock.sendall(line.encode() + b"\r\n")  # CRLF on purpose

    def close(self):
        self.sock.close()


def launch_run(plan):
    """run_simulation in a thread; wait until the TCP listener is bound."""
    import threading
    import time as _time
    from blockforge.driver import run_simulation
    result = {}

    def runner():
        result["run"] = run_simulation(plan)

    t = threading.Thread(target=runner)
    t.start()
    deadline = _time.time() + 10
    while plan.steer_port in (0, None) and _time.time() < deadline:
        _time.sleep(0.005)
        if not t.is_alive():
            break
    return t, result


PACED_CALLBACK = """
        import time as _time

        @callback("at_end_of_timestep")
        def pace(step, log, **kwargs):
            _time.sleep(0.01)
            log.result("t", _time.perf_counter())
"""


def rest_channel_scenario(path, p_west=1.0, size=(16, 4, 8), blocks=(2, 1, 1),
                          timesteps=40, extra_callbacks=""):
    """Pressure-bounded channel starting exactly at rest (both ends at 1.0
    unless p_west overrides)."""
    nx, ny, nz = size
    return write_scenario(path, f"""
        {extra_callbacks}

        @callback("config")
        def config():
            return {{
                'Domain': {{
                    'cells': [{nx}, {ny}, {nz}],
                    'blocks': {list(blocks)!r},
                    'periodic': [False, True, True],
                }},
                'Physical': {{'viscosity': 0.1}},
                'Control': {{'timesteps': {timesteps}}},
            }}

        @callback("domain_init")
        def init(cell):
            if is_at_border(cell, 'W'):
                return {{'boundary': ['pressure', {p_west!r}]}}
            if is_at_border(cell, 'E'):
                return {{'boundary': ['pressure', 1.0]}}
            return {{}}
    """)
