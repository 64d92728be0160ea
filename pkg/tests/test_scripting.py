import textwrap

import numpy as np
import pytest

from blockforge import scripting
from blockforge.blockgrid import make_storage
from blockforge.field import create_field
from blockforge.scripting import (BY_COPY, BY_REFERENCE, BlockCollectionProxy,
                                  ScriptError, bind_domain_size, host_expose,
                                  invoke_config, invoke_domain_init,
                                  invoke_timestep_callback, load_scenario)
from blockforge.unitsconfig import Quantity


def write_scenario(tmp_path, body, name="scenario.py"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return path


CHANNEL_SCENARIO = """
    gas_bubbles = sphere_pack(30, 10, 10, radius=2.5)

    @callback("config")
    def config():
        c = {
            'Physical': {
                'viscosity': 1e-6 * m * m / s,
                'surface_tension': 0.072 * N / m,
                'dx': 0.01 * m,
            },
            'Control': {
                'timesteps': 10000,
                'vtk_output_interval': 100,
            },
        }
        return c

    @callback("domain_init")
    def boundary_setup(cell):
        p_w = 1.001
        boundary = []
        if is_at_border(cell, 'W'):
            boundary = ['pressure', p_w]
        elif is_at_border(cell, 'E'):
            boundary = ['pressure', 1.0]
        elif is_at_border(cell, 'NSTB'):
            boundary = ['noslip']
        fl = 1 - gas_bubbles.overlap(cell)
        return {'fill_level': fl, 'boundary': boundary}
"""


class TestLoad:
    def test_channel_scenario_registers_callbacks(self, tmp_path):
        registry = load_scenario(write_scenario(tmp_path, CHANNEL_SCENARIO))
        assert "config" in registry
        assert "domain_init" in registry

    def test_empty_script_missing_config(self, tmp_path):
        with pytest.raises(ScriptError, match="missing the mandatory"):
            load_scenario(write_scenario(tmp_path, "x = 1\n"))

    def test_duplicate_registration(self, tmp_path):
        body = """
            @callback("config")
            def a():
                return {}

            @callback("config")
            def b():
                return {}
        """
        with pytest.raises(ScriptError, match="duplicate registration"):
            load_scenario(write_scenario(tmp_path, body))

    def test_load_error_carries_script_traceback(self, tmp_path):
        with pytest.raises(ScriptError, match="scenario"):
            load_scenario(write_scenario(tmp_path, "1 / 0\n"))


class TestConfig:
    def test_quantities_reach_the_tree(self, tmp_path):
        registry = load_scenario(write_scenario(tmp_path, CHANNEL_SCENARIO))
        tree = invoke_config(registry)
        nu = tree["Physical"]["viscosity"]
        assert isinstance(nu, Quantity)
        assert nu.magnitude == 1e-6
        assert nu.dims == (2, 0, -1)

    def test_non_mapping_return_rejected(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return 42
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        with pytest.raises(ScriptError, match="must return a mapping"):
            invoke_config(registry)

    def test_script_exception_propagates_with_traceback(self, tmp_path):
        body = """
            @callback("config")
            def config():
                raise ValueError("bad parameter")
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        with pytest.raises(ScriptError, match="bad parameter"):
            invoke_config(registry)


class TestDomainInit:
    def _registry(self, tmp_path):
        registry = load_scenario(write_scenario(tmp_path, CHANNEL_SCENARIO))
        bind_domain_size(registry, (30, 10, 10))
        return registry

    def test_west_border_cell_gets_pressure(self, tmp_path):
        result = invoke_domain_init(self._registry(tmp_path), (0, 5, 5))
        assert result["boundary"] == ["pressure", 1.001]

    def test_bubble_interior_cell_is_gas(self, tmp_path):
        registry = self._registry(tmp_path)
        pack = registry.globals["gas_bubbles"]
        center = tuple(pack.centers[0])
        result = invoke_domain_init(registry, tuple(int(c) for c in center))
        assert result["fill_level"] == pytest.approx(0.0)

    def test_unregistered_callback_defaults(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return {}
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        assert invoke_domain_init(registry, (0, 0, 0)) == {}

    def test_unrecognized_key_rejected(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return {}

            @callback("domain_init")
            def init(cell):
                return {'velocity': (1, 0, 0)}
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        with pytest.raises(ScriptError, match="unrecognized key"):
            invoke_domain_init(registry, (0, 0, 0))

    def test_fill_level_out_of_range(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return {}

            @callback("domain_init")
            def init(cell):
                return {'fill_level': 1.5}
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        with pytest.raises(ScriptError, match="outside"):
            invoke_domain_init(registry, (0, 0, 0))

    def test_pipe_scenario_initial_velocity(self, tmp_path):
        body = """
            pipe = Pipe(6.0, 20.0, (8.0, 8.0, 0.0))
            max_vel = 0.05

            @callback("config")
            def config():
                return {}

            @callback("domain_init")
            def init(cell):
                if pipe.contains(cell):
                    return {'initVel': pipe.parabolicVel(cell, max_vel)}
                if pipe.shellContains(cell):
                    return {'boundary': ['noslip']}
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        bind_domain_size(registry, (16, 16, 24))
        on_axis = invoke_domain_init(registry, (8, 8, 10))
        np.testing.assert_allclose(on_axis["initVel"], (0.0, 0.0, 0.05), atol=1e-12)
        shell = invoke_domain_init(registry, (11, 8, 10))
        assert shell["boundary"] == ["noslip"]


class TestTimestepCallback:
    def test_distributed_max_reduction(self, tmp_path):
        body = """
            seen = {}

            @callback("config")
            def config():
                return {}

            @callback("at_end_of_timestep")
            def evaluation(blockstorage, comm, log, **kwargs):
                x_vel_max = 0
                for block in blockstorage:
                    vel_field = np.asarray(block['velocity'])
                    x_vel_max = max(vel_field[:, :, :, 0].max(), x_vel_max)
                x_vel_max = comm.reduce(x_vel_max, comm.MAX)
                if x_vel_max is not None:
                    log.result("Max X Vel", x_vel_max)
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        storage = make_storage((8, 4, 4), (4, 4, 4), worker_count=1)
        for block in storage.blocks.values():
            block.add_field("velocity", f_size=3, ghost_layers=1)
            block.fields["velocity"].interior_view()[..., 0] = 0.01 * block.id

        logged = {}

        class FakeLog:
            def result(self, name, value):
                logged[name] = value

        from blockforge.comms import serial_transport
        from blockforge.scripting import CommProxy
        exposures = {
            "blockstorage": BlockCollectionProxy(storage, 0),
            "comm": CommProxy(serial_transport()),
            "log": FakeLog(),
            "step": 1,
        }
        invoke_timestep_callback(registry, "at_end_of_timestep", exposures)
        assert logged["Max X Vel"] == pytest.approx(0.01)

    def test_absent_callback_is_noop(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return {}
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        invoke_timestep_callback(registry, "at_end_of_timestep", {"step": 1})

    def test_zero_copy_view_mutation_reaches_host(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return {}

            @callback("at_end_of_timestep")
            def poke(blockstorage, **kwargs):
                for block in blockstorage:
                    block['velocity'][0, 0, 0, 0] = 42.0
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        storage = make_storage((4, 4, 4), (4, 4, 4))
        block = storage.local_blocks(0)[0]
        block.add_field("velocity", f_size=3, ghost_layers=1)
        exposures = {"blockstorage": BlockCollectionProxy(storage, 0)}
        invoke_timestep_callback(registry, "at_end_of_timestep", exposures)
        assert block.fields["velocity"].get(0, 0, 0, 0) == 42.0

    def test_script_error_aborts_with_diagnostics(self, tmp_path):
        body = """
            @callback("config")
            def config():
                return {}

            @callback("at_end_of_timestep")
            def broken(**kwargs):
                raise RuntimeError("callback exploded")
        """
        registry = load_scenario(write_scenario(tmp_path, body))
        with pytest.raises(ScriptError, match="callback exploded"):
            invoke_timestep_callback(registry, "at_end_of_timestep", {})


class TestExposure:
    def test_by_reference_field_aliases_memory(self):
        field = create_field("v", (2, 2, 2, 1))
        exp = host_expose("v", field, BY_REFERENCE)
        exp.object[1, 1, 1, 0] = 3.5
        assert field.get(1, 1, 1, 0) == 3.5

    def test_by_copy_mapping_is_snapshot(self):
        config = {"Physical": {"omega_e": 1.4}}
        exp = host_expose("config", config, BY_COPY)
        exp.object["Physical"]["omega_e"] = 1.9
        assert config["Physical"]["omega_e"] == 1.4

    def test_by_reference_scalar_rejected(self):
        with pytest.raises(ScriptError, match="by_copy"):
            host_expose("dx", 0.01, BY_REFERENCE)

    def test_block_collection_iterates_local_blocks(self):
        storage = make_storage((8, 4, 4), (4, 4, 4), worker_count=2)
        proxy = BlockCollectionProxy(storage, 0)
        ids = [b.id for b in proxy]
        expect = [b.id for b in storage.local_blocks(0)]
        assert ids == expect
        assert proxy.numberOfCells() == (8, 4, 4)
