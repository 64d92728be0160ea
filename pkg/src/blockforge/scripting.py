"""Scenario script runtime: callbacks, exposures, zero-copy field access.

A scenario is a script file executed in a fresh, pre-seeded namespace (one
per worker, never shared).  Functions register themselves under the literal
names "config", "domain_init", and "at_end_of_timestep" via the injected
``callback`` decorator; the host invokes them at the matching stages and
exposes its objects either by reference (proxies, aliasing views) or by
value (snapshots).
"""

from __future__ import annotations

import copy
import inspect
import traceback

import numpy as np

from . import geometry, unitsconfig
from .field import Field, FieldView, export_array_view
from .unitsconfig import Quantity, UNIT_CONSTANTS

CONFIG_CB = "config"
DOMAIN_INIT_CB = "domain_init"
TIMESTEP_CB = "at_end_of_timestep"

DOMAIN_INIT_KEYS = {"fill_level", "boundary", "initVel", "initDensity"}


class ScriptError(RuntimeError):
    """Script-side failure, carrying the script traceback text."""

    def __init__(self, message, detail=""):
        super().__init__(message + ("\n" + detail if detail else ""))
        self.detail = detail


class CallbackRegistry:
    """Callbacks registered by a scenario, keyed by their decorator string."""

    def __init__(self, source_path="<script>"):
        self.source_path = source_path
        self.callbacks = {}
        self.globals = {}

    def register(self, name, fn):
        if name in self.callbacks:
            raise ScriptError(f"duplicate registration of callback {name!r} "
                              f"in {self.source_path}")
        self.callbacks[name] = fn

    def get(self, name):
        return self.callbacks.get(name)

    def __contains__(self, name):
        return name in self.callbacks


def _script_builtins(registry: CallbackRegistry):
    """Names injected into every scenario namespace."""
    def callback(name):
        def deco(fn):
            registry.register(name, fn)
            return fn
        return deco

    def nondimensionalize(tree):
        """In-place replacement of every quantity by its lattice value."""
        scale = unitsconfig.scale_from_tree(tree)
        converted = unitsconfig.nondimensionalize_tree(tree, scale)
        tree.clear()
        tree.update(converted)
        return tree

    def is_at_border(cell, side):
        size = registry.globals.get("__domain_size__")
        if size is None:
            raise ScriptError("is_at_border is only available once the domain "
                              "size is known (inside domain_init)")
        return geometry.is_at_border(cell, size, side)

    env = {
        "callback": callback,
        "Quantity": Quantity,
        "parse_quantity": unitsconfig.parse_quantity,
        "find_optimal_dt": unitsconfig.find_optimal_dt,
        "nondimensionalize": nondimensionalize,
        "is_at_border": is_at_border,
        "sphere_pack": geometry.sphere_pack,
        "Pipe": geometry.Pipe,
        "make_pipe": geometry.make_pipe,
        "np": np,
    }
    env.update(UNIT_CONSTANTS)
    return env


def load_scenario(script_path) -> CallbackRegistry:
    """Execute a scenario file and collect its callback registrations."""
    registry = CallbackRegistry(str(script_path))
    env = _script_builtins(registry)
    try:
        with open(script_path, "r", encoding="utf-8") as fh:
            source = fh.read()
    except OSError as exc:
        raise ScriptError(f"cannot read scenario {script_path}: {exc}")
    try:
        code = compile(source, str(script_path), "exec")
        exec(code, env)  # noqa: S102 - scenario scripts are trusted input
    except ScriptError:
        raise
    except BaseException:
        raise ScriptError(f"error while loading scenario {script_path}",
                          traceback.format_exc())
    if CONFIG_CB not in registry:
        raise ScriptError(f"scenario {script_path} is missing the mandatory "
                          f"\"{CONFIG_CB}\" callback")
    registry.globals = env
    return registry


def bind_domain_size(registry: CallbackRegistry, domain_size):
    registry.globals["__domain_size__"] = tuple(domain_size)


def invoke_config(registry: CallbackRegistry) -> dict:
    """Run the config callback; its return value must be a mapping."""
    fn = registry.get(CONFIG_CB)
    try:
        tree = fn()
    except BaseException:
        raise ScriptError("config callback failed", traceback.format_exc())
    if not isinstance(tree, dict):
        raise ScriptError(f"config callback must return a mapping, "
                          f"got {type(tree).__name__}")
    _check_tree(tree, ())
    return tree


def _check_tree(node, path):
    if isinstance(node, dict):
        for k, v in node.items():
            if not isinstance(k, str):
                raise ScriptError(f"config key {k!r} at {'.'.join(path)} is not a string")
            _check_tree(v, path + (k,))
    elif isinstance(node, (list, tuple)):
        for i, v in enumerate(node):
            _check_tree(v, path + (str(i),))
    elif not isinstance(node, (int, float, str, bool, Quantity, type(None))):
        raise ScriptError(
            f"config value at {'.'.join(path)} has unsupported type {type(node).__name__}")


def invoke_domain_init(registry: CallbackRegistry, cell) -> dict:
    """Per-cell initialization; defaults to resting liquid when unregistered."""
    fn = registry.get(DOMAIN_INIT_CB)
    if fn is None:
        return {}
    try:
        result = fn(tuple(int(c) for c in cell))
    except BaseException:
        raise ScriptError(f"domain_init failed for cell {tuple(cell)}",
                          traceback.format_exc())
    if result is None:
        return {}
    if not isinstance(result, dict):
        raise ScriptError(f"domain_init must return a mapping or None, "
                          f"got {type(result).__name__}")
    for key, value in result.items():
        if key not in DOMAIN_INIT_KEYS:
            raise ScriptError(f"domain_init returned unrecognized key {key!r} "
                              f"(known: {sorted(DOMAIN_INIT_KEYS)})")
        if key == "fill_level" and not 0.0 <= float(value) <= 1.0:
            raise ScriptError(f"fill_level {value} outside [0, 1] for cell {tuple(cell)}")
    return result


def invoke_timestep_callback(registry: CallbackRegistry, name, exposures) -> None:
    """Run a timestep callback with the exposure set it asks for; no-op if absent."""
    fn = registry.get(name)
    if fn is None:
        return
    sig = inspect.signature(fn)
    has_kwargs = any(p.kind is inspect.Parameter.VAR_KEYWORD
                     for p in sig.parameters.values())
    if has_kwargs:
        kwargs = dict(exposures)
    else:
        kwargs = {k: v for k, v in exposures.items() if k in sig.parameters}
    try:
        fn(**kwargs)
    except BaseException:
        raise ScriptError(f"callback {name!r} failed", traceback.format_exc())


# -- exposures ----------------------------------------------------------------

BY_REFERENCE = "by_reference"
BY_COPY = "by_copy"


class Exposure:
    def __init__(self, name, obj, mode):
        self.name = name
        self.object = obj
        self.mode = mode


class BlockProxy:
    """Mapping-style view of one block: ``block['velocity']`` aliases field memory."""

    def __init__(self, block):
        self._block = block

    @property
    def id(self):
        return self._block.id

    @property
    def offset(self):
        return self._block.offset

    @property
    def size(self):
        return self._block.size

    def __contains__(self, name):
        return name in self._block.fields

    def __getitem__(self, name):
        try:
            fld = self._block.fields[name]
        except KeyError:
            raise KeyError(f"block {self._block.id} has no field {name!r}")
        return export_array_view(fld, writable=True).ndarray()

    def keys(self):
        return self._block.fields.keys()


class BlockCollectionProxy:
    """The local blocks of one worker, exposed as an iterable mapping type."""

    def __init__(self, storage, worker_id):
        self._storage = storage
        self._worker_id = worker_id

    def __iter__(self):
        for block in self._storage.local_blocks(self._worker_id):
            yield BlockProxy(block)

    def __len__(self):
        return len(self._storage.local_blocks(self._worker_id))

    def numberOfCells(self):
        return self._storage.cell_count()

    cell_count = numberOfCells


def host_expose(name, obj, mode) -> Exposure:
    """Wrap a host object for script consumption.

    By-reference exposures alias host state (block collections, fields); by
    copy exposures are deep snapshots.  Immutable scalar kinds must go by
    copy.
    """
    if mode == BY_COPY:
        return Exposure(name, copy.deepcopy(obj), mode)
    if mode != BY_REFERENCE:
        raise ScriptError(f"unknown exposure mode {mode!r}")
    from .blockgrid import BlockStorage
    if isinstance(obj, BlockCollectionProxy):
        return Exposure(name, obj, mode)
    if isinstance(obj, BlockStorage):
        return Exposure(name, BlockCollectionProxy(obj, 0), mode)
    if isinstance(obj, (Field, FieldView)):
        return Exposure(name, export_array_view(obj, writable=True).ndarray(), mode)
    if isinstance(obj, (int, float, str, bool, Quantity, type(None))):
        raise ScriptError(
            f"scalar {name!r} cannot be exposed by reference; use by_copy")
    return Exposure(name, obj, mode)


class CommProxy:
    """Collective operations available inside callbacks and console commands."""

    MIN = "MIN"
    MAX = "MAX"
    SUM = "SUM"

    def __init__(self, transport):
        self._transport = transport

    @property
    def rank(self):
        return self._transport.self_id

    @property
    def size(self):
        return self._transport.worker_count

    def reduce(self, value, op):
        from .comms import reduce_scalar
        return reduce_scalar(value, op, self._transport)

    def broadcast(self, text):
        from .comms import broadcast_line
        return broadcast_line(text, self._transport)
