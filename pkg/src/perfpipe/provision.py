"""Host fleet lifecycle: deploy, probe, prepare, publish, destroy.

Backends are pluggable behind one contract. mock_cloud fabricates
addressed hosts and keeps a census on disk so teardown works from a
separate process; local gives every host a sandbox directory and runs
its commands as subprocesses; static_hosts passes operator-supplied
addresses through untouched. Any failure after partial creation
destroys what was created before the error surfaces, and provision
never reuses hosts left over from an earlier run.
"""

from __future__ import annotations

import os
import signal
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import config as config_mod
from .channel import LocalChannel, RecordingChannel, SshChannel
from .errors import ConfigError, ProvisioningError, TeardownError

MOCK_STATE_FILE = "mock_cloud_state.yml"
HOSTS_DIR = "hosts"


@dataclass
class HostRecord:
    category: str
    index: int
    public_ip: str
    private_ip: str
    channel: object

    @property
    def key(self):
        return f"{self.category}.{self.index}"


@dataclass
class FleetState:
    status: str
    hosts: list = field(default_factory=list)
    lifecycle_log: list = field(default_factory=list)

    def host(self, category, index):
        for record in self.hosts:
            if record.category == category and record.index == int(index):
                return record
        raise ConfigError(f"no provisioned host {category}.{index}")

    def category(self, name):
        return sorted(
            (h for h in self.hosts if h.category == name), key=lambda h: h.index
        )


@dataclass
class RuntimeSettings:
    parallelism: int
    connect_timeout: float
    command_timeout: float
    ssh_user: str
    ssh_key_file: str
    env: dict

    @classmethod
    def from_root(cls, root):
        return cls(
            parallelism=int(root.get("bootstrap.runtime.parallelism")),
            connect_timeout=float(root.get("bootstrap.runtime.connect_timeout")),
            command_timeout=float(root.get("bootstrap.runtime.command_timeout")),
            ssh_user=root.get("bootstrap.runtime.ssh_user"),
            ssh_key_file=root.get("bootstrap.runtime.ssh_key_file"),
            env=root.get("bootstrap.runtime.env"),
        )


class MockCloudBackend:
    """Synthetic hosts with a persisted census.

    Addresses come from two documented loopback-adjacent blocks: host k
    (a monotonic per-workspace counter, so recreated fleets never alias
    old ones) gets public 10.2.0.(1+k) and private 10.2.0.(100+k).
    backend_params.failures is a list of {op: create|probe|setup,
    host: "<category>.<index>"} entries for fault injection.
    """

    name = "mock_cloud"

    def __init__(self, params, workdir, runtime):
        self.workdir = Path(workdir)
        self.failures = [
            (f["op"], f["host"]) for f in params.get("failures", [])
        ]
        self._lock = threading.Lock()
        self._state = self._read_state()

    def _state_path(self):
        return self.workdir / MOCK_STATE_FILE

    def _read_state(self):
        path = self._state_path()
        if not path.is_file():
            return {"counter": 0, "live": {}}
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        data.setdefault("counter", 0)
        data.setdefault("live", {})
        return data

    def _save_state(self):
        self._state_path().write_text(
            yaml.safe_dump(self._state, default_flow_style=False, sort_keys=False),
            encoding="utf-8",
        )

    def _injected(self, op, key):
        return (op, key) in self.failures

    def _respond(self, key):
        def respond(command):
            probing = command.startswith("echo perfpipe-probe")
            if probing and self._injected("probe", key):
                from .channel import CommandResult
                return CommandResult(1, "", f"{key} unreachable", 0.0, time.time())
            if not probing and self._injected("setup", key):
                from .channel import CommandResult
                return CommandResult(1, "", f"{key} refused command", 0.0, time.time())
            return None
        return respond

    def census(self):
        with self._lock:
            return list(self._state["live"])

    def create(self, category, index):
        key = f"{category}.{index}"
        if self._injected("create", key):
            raise ProvisioningError(f"mock backend refused to create {key}")
        with self._lock:
            k = self._state["counter"]
            if k >= 99:
                raise ProvisioningError("mock address space exhausted")
            self._state["counter"] = k + 1
            public = f"10.2.0.{1 + k}"
            private = f"10.2.0.{100 + k}"
            self._state["live"][key] = {"public_ip": public, "private_ip": private}
            self._save_state()
        return HostRecord(category, index, public, private,
                          RecordingChannel(key, respond=self._respond(key)))

    def attach(self, category, index, facts):
        key = f"{category}.{index}"
        return RecordingChannel(key)

    def destroy_host(self, key):
        with self._lock:
            self._state["live"].pop(key, None)
            self._save_state()


class LocalBackend:
    """One sandbox directory per host under <workspace>/hosts/."""

    name = "local"

    def __init__(self, params, workdir, runtime):
        self.workdir = Path(workdir)
        self.runtime = runtime
        self.hosts_dir = self.workdir / HOSTS_DIR

    def _sandbox(self, key):
        return self.hosts_dir / key

    def _channel(self, key):
        return LocalChannel(
            self._sandbox(key),
            env=self.runtime.env,
            command_timeout=self.runtime.command_timeout,
        )

    def census(self):
        if not self.hosts_dir.is_dir():
            return []
        return sorted(p.name for p in self.hosts_dir.iterdir() if p.is_dir())

    def create(self, category, index):
        key = f"{category}.{index}"
        sandbox = self._sandbox(key)
        sandbox.mkdir(parents=True, exist_ok=True)
        # Loopback stands in for both address kinds; node-to-host
        # mapping therefore goes by category and index, not address.
        return HostRecord(category, index, "127.0.0.1", "127.0.0.1",
                          self._channel(key))

    def attach(self, category, index, facts):
        return self._channel(f"{category}.{index}")

    def destroy_host(self, key):
        sandbox = self._sandbox(key)
        pid_dir = sandbox / "pids"
        if pid_dir.is_dir():
            for pid_file in sorted(pid_dir.glob("*.pid")):
                try:
                    os.kill(int(pid_file.read_text().strip()), signal.SIGKILL)
                except (ValueError, OSError):
                    pass
        shutil.rmtree(sandbox, ignore_errors=True)


class StaticHostsBackend:
    """Pass-through for operator-managed machines.

    backend_params.hosts maps category name to a list of
    {public_ip, private_ip} entries. Nothing is created or destroyed.
    """

    name = "static_hosts"

    def __init__(self, params, workdir, runtime):
        self.addresses = params.get("hosts", {})
        self.runtime = runtime

    def _channel(self, address):
        return SshChannel(
            address,
            user=self.runtime.ssh_user,
            key_file=self.runtime.ssh_key_file,
            connect_timeout=self.runtime.connect_timeout,
            command_timeout=self.runtime.command_timeout,
            env=self.runtime.env,
        )

    def census(self):
        return []

    def create(self, category, index):
        entries = self.addresses.get(category, [])
        if index >= len(entries):
            raise ProvisioningError(
                f"static backend has no address for {category}.{index}"
            )
        entry = entries[index]
        return HostRecord(category, index, entry["public_ip"],
                          entry["private_ip"], self._channel(entry["public_ip"]))

    def attach(self, category, index, facts):
        return self._channel(facts["public_ip"])

    def destroy_host(self, key):
        pass


_BACKENDS = {
    "mock_cloud": MockCloudBackend,
    "local": LocalBackend,
    "static_hosts": StaticHostsBackend,
}


def make_backend(root, workdir):
    name = root.get("infrastructure_provisioning.backend")
    params = root.get("infrastructure_provisioning.backend_params")
    if name not in _BACKENDS:
        raise ConfigError(
            f"unknown provisioning backend {name!r}; "
            f"known: {', '.join(sorted(_BACKENDS))}"
        )
    if not isinstance(params, dict):
        raise ConfigError("infrastructure_provisioning.backend_params must be a mapping")
    return _BACKENDS[name](params, workdir, RuntimeSettings.from_root(root))


def _read_fleet_spec(root):
    categories = root.get("infrastructure_provisioning.categories")
    if not isinstance(categories, dict) or not categories:
        raise ConfigError("infrastructure_provisioning.categories must be a non-empty mapping")
    plan = []
    for category, spec in categories.items():
        if "." in category:
            raise ConfigError(f"category name {category!r} is not a valid path segment")
        try:
            count = int(spec["count"])
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"category {category!r} needs an integer count") from exc
        if count < 1:
            raise ConfigError(f"category {category!r} count must be positive")
        plan.extend((category, i) for i in range(count))
    return list(categories), plan


def provision(root, workdir):
    """Create, probe, and prepare the whole fleet; publish the out-file."""
    workdir = Path(workdir)
    category_order, plan = _read_fleet_spec(root)
    backend = make_backend(root, workdir)
    runtime = RuntimeSettings.from_root(root)

    log = []
    log_lock = threading.Lock()

    def note(event, host_key):
        with log_lock:
            log.append({"ts": time.time(), "event": event, "host": host_key})

    # Never reuse leftovers from a previous run.
    for key in backend.census():
        backend.destroy_host(key)
        note("destroy", key)

    hosts = []

    def fail(status, message):
        for record in list(hosts):
            try:
                backend.destroy_host(record.key)
                note("destroy", record.key)
            except Exception:
                pass
        error = ProvisioningError(message)
        error.state = FleetState(status, [], log)
        raise error

    def fan_out(work, items):
        problems = []
        with ThreadPoolExecutor(max_workers=runtime.parallelism) as pool:
            futures = {pool.submit(work, item): item for item in items}
            for future in as_completed(futures):
                try:
                    future.result()
                except Exception as exc:
                    problems.append(exc)
        return problems

    def create_one(item):
        category, index = item
        record = backend.create(category, index)
        note("create", record.key)
        with log_lock:
            hosts.append(record)

    problems = fan_out(create_one, plan)
    if problems:
        fail("provisioning", f"host creation failed: {problems[0]}")

    hosts.sort(key=lambda h: (category_order.index(h.category), h.index))

    probe_timeout = float(root.get("infrastructure_provisioning.probe.timeout"))
    probe_retries = int(root.get("infrastructure_provisioning.probe.retries"))

    def probe_one(record):
        last = None
        for _ in range(probe_retries):
            result = record.channel.run(
                f"echo perfpipe-probe-{record.key}", timeout=probe_timeout
            )
            if result.exit_code == 0:
                note("probe", record.key)
                return
            last = result.stderr.strip()
        raise ProvisioningError(f"reachability probe failed for {record.key}: {last}")

    problems = fan_out(probe_one, list(hosts))
    if problems:
        fail("degraded", f"fleet degraded: {problems[0]}")

    setup_commands = root.get("infrastructure_provisioning.system_setup")

    def setup_one(record):
        for command in setup_commands:
            result = record.channel.run(command)
            if result.exit_code != 0:
                raise ProvisioningError(
                    f"system setup on {record.key} failed: {command!r} "
                    f"exited {result.exit_code}: {result.stderr.strip()}"
                )

    problems = fan_out(setup_one, list(hosts))
    if problems:
        fail("provisioning", str(problems[0]))

    body = {}
    for category in category_order:
        body[category] = [
            {"public_ip": h.public_ip, "private_ip": h.private_ip}
            for h in sorted(
                (h for h in hosts if h.category == category), key=lambda h: h.index
            )
        ]
    config_mod.write_out(workdir, "infrastructure_provisioning", body)
    return FleetState("ready", hosts, log)


def destroy(root, workdir):
    """Tear the fleet down; safe to call in any state, any number of times."""
    workdir = Path(workdir)
    backend = make_backend(root, workdir)
    log = []
    problems = []
    for key in backend.census():
        try:
            backend.destroy_host(key)
            log.append({"ts": time.time(), "event": "destroy", "host": key})
        except Exception as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise TeardownError("teardown failed for " + "; ".join(problems))
    body = config_mod.read_out(workdir, "infrastructure_provisioning")
    if body is not None and "destroyed_at" not in body:
        body["destroyed_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        config_mod.write_out(workdir, "infrastructure_provisioning", body)
    return FleetState("absent", [], log)


def fleet_from_out(root, workdir):
    """Rebuild host handles from the published out-file.

    This is how every stage after provisioning finds its hosts, which
    is also what makes hand-written out-files (skipped modules) work.
    """
    facts = root.get("infrastructure_provisioning.out", default=None)
    if not isinstance(facts, dict):
        raise ConfigError(
            "infrastructure_provisioning.out.yml is missing; run "
            "infrastructure_provisioning first or supply the file by hand"
        )
    backend = make_backend(root, workdir)
    hosts = []
    for category, entries in facts.items():
        if not isinstance(entries, list):
            continue
        for index, entry in enumerate(entries):
            if not isinstance(entry, dict) or "public_ip" not in entry:
                continue
            hosts.append(
                HostRecord(
                    category,
                    index,
                    entry["public_ip"],
                    entry.get("private_ip", entry["public_ip"]),
                    backend.attach(category, index, entry),
                )
            )
    if not hosts:
        raise ConfigError("infrastructure_provisioning.out.yml lists no hosts")
    return FleetState("ready", hosts, [])
