"""Deploys systems under test from the declarative topology.

Every node-facing command is a configuration-supplied template with
$name placeholders, so the same machinery drives a stub server in
tests, a real database in production, or nothing at all when the
module's config is replaced wholesale. Nodes map to provisioned hosts
by role name and ordinal; start order is config servers, then data
nodes, then routers; cluster initialization runs once everything in
the topology is up.
"""

from __future__ import annotations

import string
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import config as config_mod
from . import control
from .errors import ConfigError, DeployError

TIER_ORDER = ("configsvr", "mongod", "mongos")
RESERVED_CLUSTER_KEYS = {"cluster_type", "id"}


def fill(template, variables):
    return string.Template(template).safe_substitute(variables)


def deep_merge(base, override):
    if not isinstance(base, dict) or not isinstance(override, dict):
        return override
    merged = dict(base)
    for key, value in override.items():
        merged[key] = deep_merge(base.get(key), value) if key in base else value
    return merged


@dataclass
class Node:
    cluster_index: int
    cluster_id: str
    cluster_type: str
    role: str
    ordinal: int
    host: object
    port: int
    detached: bool
    config_body: dict
    paths: dict
    templates: dict

    @property
    def name(self):
        return f"{self.cluster_id}.{self.role}.{self.ordinal}"

    def variables(self, **extra):
        variables = {
            "role": self.role,
            "cluster_id": self.cluster_id,
            "cluster_type": self.cluster_type,
            "ordinal": self.ordinal,
            "node_index": self.host.index,
            "port": self.port,
            "host": self.host.public_ip,
            "public_ip": self.host.public_ip,
            "private_ip": self.host.private_ip,
        }
        variables.update(self.paths)
        variables.update(extra)
        return variables


def _tier_rank(role):
    return (TIER_ORDER.index(role), "") if role in TIER_ORDER else (len(TIER_ORDER), role)


def _assemble(root, fleet):
    topology = root.get("mongodb_setup.topology")
    if not isinstance(topology, list) or not topology:
        raise ConfigError("mongodb_setup.topology must be a non-empty sequence")
    shared_templates = root.get("mongodb_setup.templates")
    default_port = int(root.get("mongodb_setup.port"))
    default_paths = {
        key: root.get(f"mongodb_setup.{key}")
        for key in ("data_dir", "log_dir", "pidfile", "config_file")
    }
    host_counters = {}
    nodes = []
    for cluster_index, cluster in enumerate(topology):
        if not isinstance(cluster, dict):
            raise ConfigError(f"topology.{cluster_index} must be a mapping")
        cluster_type = cluster.get("cluster_type")
        if cluster_type is None:
            raise ConfigError(f"topology.{cluster_index} lacks cluster_type")
        cluster_id = str(cluster.get("id", f"cluster{cluster_index}"))
        roles = [
            key for key, value in cluster.items()
            if key not in RESERVED_CLUSTER_KEYS and isinstance(value, list)
        ]
        if not roles:
            raise ConfigError(f"topology.{cluster_index} defines no node groups")
        for role in roles:
            for ordinal, raw in enumerate(cluster[role]):
                if not isinstance(raw, dict):
                    raise ConfigError(
                        f"topology.{cluster_index}.{role}.{ordinal} must be a mapping"
                    )
                host_index = host_counters.get(role, 0)
                host_counters[role] = host_index + 1
                host = fleet.host(role, host_index)
                declared = raw.get("public_ip")
                if declared is not None and declared != host.public_ip:
                    raise ConfigError(
                        f"topology node {cluster_id}.{role}.{ordinal} declares "
                        f"public_ip {declared} but host {host.key} has {host.public_ip}"
                    )
                config_key = f"{role}_config_file"
                body = deep_merge(
                    deep_merge(
                        root.get(f"mongodb_setup.{config_key}", default={}),
                        cluster.get(config_key, {}),
                    ),
                    raw.get(config_key, {}),
                )
                paths = {
                    key: raw.get(key, default_paths[key]) for key in default_paths
                }
                templates = deep_merge(
                    deep_merge(shared_templates, cluster.get("templates", {})),
                    raw.get("templates", {}),
                )
                nodes.append(
                    Node(
                        cluster_index=cluster_index,
                        cluster_id=cluster_id,
                        cluster_type=cluster_type,
                        role=role,
                        ordinal=ordinal,
                        host=host,
                        port=int(raw.get("port", default_port)),
                        detached=bool(raw.get("detached", False)),
                        config_body=body,
                        paths=paths,
                        templates=templates,
                    )
                )
    return nodes


def _fan_out(work, items, parallelism):
    problems = []
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = {pool.submit(work, item): item for item in items}
        for future in as_completed(futures):
            try:
                future.result()
            except Exception as exc:
                problems.append(exc)
    if problems:
        raise problems[0]


def _upload_config(node):
    text = yaml.safe_dump(node.config_body, default_flow_style=False, sort_keys=False)
    with tempfile.NamedTemporaryFile("w", suffix=".conf", delete=False) as handle:
        handle.write(text)
        local = handle.name
    try:
        node.host.channel.upload(local, node.paths["config_file"])
    finally:
        Path(local).unlink(missing_ok=True)


def _launch(node, events, lock):
    command = fill(node.templates["launch"], node.variables())
    result = node.host.channel.run(command)
    if result.exit_code != 0:
        raise DeployError(
            f"launch of {node.name} exited {result.exit_code}: "
            f"{result.stderr.strip() or result.stdout.strip()}"
        )
    with lock:
        events.append({"ts": time.time(), "action": "launch", "node": node.name})


def _read_pid(node):
    probe = node.host.channel.run(fill(node.templates["read_pid"], node.variables()))
    text = probe.stdout.strip()
    if probe.exit_code == 0 and text.isdigit():
        return int(text)
    return None


def _wait_ready(node, timeout, interval):
    deadline = time.time() + timeout
    pid = None
    while time.time() < deadline:
        if pid is None:
            pid = _read_pid(node)
        if pid is not None:
            check = node.host.channel.run(
                fill(node.templates["ready"], node.variables(pid=pid))
            )
            if check.exit_code == 0:
                return pid
        time.sleep(interval)
    raise DeployError(f"node {node.name} not ready within {timeout}s")


def _stop_node(node, pid, grace_period, events, force_only=False):
    escalated = False
    if pid is None:
        return
    alive = lambda: node.host.channel.run(f"kill -0 {pid}").exit_code == 0
    if not force_only:
        node.host.channel.run(fill(node.templates["stop"], node.variables(pid=pid)))
        deadline = time.time() + grace_period
        while time.time() < deadline:
            if not alive():
                break
            time.sleep(0.1)
    if force_only or alive():
        node.host.channel.run(
            fill(node.templates["force_stop"], node.variables(pid=pid))
        )
        escalated = not force_only
        deadline = time.time() + grace_period
        while alive() and time.time() < deadline:
            time.sleep(0.1)
    events.append(
        {
            "ts": time.time(),
            "action": "stop",
            "node": node.name,
            "escalated": escalated,
        }
    )


def _members(nodes, target):
    return ",".join(
        f"{n.host.private_ip}:{n.port}"
        for n in nodes
        if n.cluster_index == target.cluster_index
        and n.role == target.role
        and not n.detached
    )


def deploy(root, fleet, workdir):
    """Materialize configs, start every node, initialize each cluster."""
    workdir = Path(workdir)
    control.run_hooks(root, fleet, "pre_cluster_start", workdir)
    nodes = _assemble(root, fleet)
    parallelism = int(root.get("bootstrap.runtime.parallelism"))
    ready_timeout = float(root.get("mongodb_setup.readiness.timeout"))
    ready_interval = float(root.get("mongodb_setup.readiness.interval"))
    events = []
    lock = threading.Lock()
    pids = {}
    started = []
    try:
        _fan_out(_upload_config, nodes, parallelism)
        tiers = sorted({n.role for n in nodes}, key=_tier_rank)
        for role in tiers:
            tier_nodes = [n for n in nodes if n.role == role]

            def bring_up(node):
                _launch(node, events, lock)
                with lock:
                    started.append(node)
                pid = _wait_ready(node, ready_timeout, ready_interval)
                with lock:
                    pids[node.name] = pid
                    events.append(
                        {"ts": time.time(), "action": "ready", "node": node.name}
                    )

            _fan_out(bring_up, tier_nodes, parallelism)
        for cluster_index in sorted({n.cluster_index for n in nodes}):
            cluster_nodes = sorted(
                (n for n in nodes if n.cluster_index == cluster_index),
                key=lambda n: (_tier_rank(n.role), n.ordinal),
            )
            target = next((n for n in cluster_nodes if not n.detached), None)
            if target is None:
                continue
            commands = root.get(
                f"mongodb_setup.init.{target.cluster_type}", default=[]
            )
            for command in commands:
                text = fill(
                    command,
                    target.variables(
                        pid=pids.get(target.name, ""),
                        members=_members(nodes, target),
                    ),
                )
                result = target.host.channel.run(text)
                if result.exit_code != 0:
                    raise DeployError(
                        f"initialization of {target.cluster_id} failed, "
                        f"{text!r} exited {result.exit_code}: "
                        f"{result.stderr.strip() or result.stdout.strip()}"
                    )
                events.append(
                    {"ts": time.time(), "action": "init", "node": target.name}
                )
    except Exception:
        for node in reversed(started):
            try:
                pid = pids.get(node.name)
                if pid is None:
                    # launched but never confirmed ready; the pidfile is
                    # the only lead on what to kill
                    pid = _read_pid(node)
                _stop_node(node, pid, 1.0, events, force_only=True)
            except Exception:
                pass
        raise
    body = {"topology": []}
    for cluster_index in sorted({n.cluster_index for n in nodes}):
        entry = {}
        for node in (n for n in nodes if n.cluster_index == cluster_index):
            entry.setdefault(node.role, []).append(
                {
                    "pid": pids[node.name],
                    "port": node.port,
                    "host": node.host.key,
                    "public_ip": node.host.public_ip,
                    "private_ip": node.host.private_ip,
                    "data_dir": node.paths["data_dir"],
                    "log_dir": node.paths["log_dir"],
                    "started_at": next(
                        e["ts"] for e in events
                        if e["action"] == "launch" and e["node"] == node.name
                    ),
                }
            )
        body["topology"].append(entry)
    config_mod.write_out(workdir, "mongodb_setup", body)
    return {"nodes": nodes, "pids": pids, "events": events}


def _published_pid(out_body, node):
    try:
        return out_body["topology"][node.cluster_index][node.role][node.ordinal]["pid"]
    except (KeyError, IndexError, TypeError):
        return None


def restart(root, fleet, workdir, clean_db=False):
    """Stop every node (escalating past the grace period), optionally
    clear data directories, then run the full deploy sequence again."""
    workdir = Path(workdir)
    out_body = config_mod.read_out(workdir, "mongodb_setup")
    if out_body is None:
        raise DeployError("restart without a prior deploy in this workspace")
    nodes = _assemble(root, fleet)
    grace = float(root.get("mongodb_setup.grace_period"))
    stop_events = []
    for node in sorted(nodes, key=lambda n: (_tier_rank(n.role), n.ordinal), reverse=True):
        _stop_node(node, _published_pid(out_body, node), grace, stop_events)
    if clean_db:
        for node in nodes:
            command = fill(node.templates["clean_db"], node.variables())
            result = node.host.channel.run(command)
            if result.exit_code != 0:
                raise DeployError(
                    f"clean_db on {node.name} exited {result.exit_code}: "
                    f"{result.stderr.strip()}"
                )
            stop_events.append(
                {"ts": time.time(), "action": "clean_db", "node": node.name}
            )
    state = deploy(root, fleet, workdir)
    state["events"] = stop_events + state["events"]
    return state


def stop_all(root, fleet, workdir, force=False):
    """Best-effort stop of whatever the out-file says is running."""
    out_body = config_mod.read_out(workdir, "mongodb_setup")
    if out_body is None:
        return []
    try:
        nodes = _assemble(root, fleet)
    except ConfigError:
        return []
    grace = float(root.get("mongodb_setup.grace_period"))
    events = []
    for node in sorted(nodes, key=lambda n: (_tier_rank(n.role), n.ordinal), reverse=True):
        try:
            _stop_node(node, _published_pid(out_body, node), grace, events,
                       force_only=force)
        except Exception:
            pass
    return events
