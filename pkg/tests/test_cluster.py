"""Cluster orchestration against a scripted process-table simulator.

The simulator speaks a tiny command grammar wired in through the
template settings, so every launch/readiness/stop decision the deploy
logic makes shows up in one ordered log.
"""

import threading
import time

import yaml
import pytest

from conftest import recording_fleet
from perfpipe import cluster
from perfpipe.config import read_out
from perfpipe.errors import ConfigError, DeployError

SIM_TEMPLATES = {
    "launch": "start $pidfile $port",
    "read_pid": "readpid $pidfile",
    "ready": "checkready $pid",
    "stop": "stop $pid",
    "force_stop": "forcestop $pid",
    "clean_db": "cleandb $data_dir",
}


class HostSim:
    """Process table shared by all scripted hosts."""

    def __init__(self, stubborn=False, ready_after=0, fail_start=(),
                 fail_commands=()):
        self.lock = threading.Lock()
        self.next_pid = 100
        self.procs = {}      # (host, pid) -> alive
        self.pidfiles = {}   # (host, pidfile) -> pid
        self.polls_left = {}
        self.log = []        # (host, command) in arrival order
        self.stubborn = stubborn
        self.ready_after = ready_after
        self.fail_start = set(fail_start)
        self.fail_commands = set(fail_commands)

    def respond(self, host, command):
        from perfpipe.channel import CommandResult

        def r(code, out=""):
            return CommandResult(code, out, "", 0.0, time.time())

        with self.lock:
            self.log.append((host, command))
            words = command.split()
            if command in self.fail_commands:
                return r(1)
            if words[0] == "start":
                if host in self.fail_start:
                    return r(1)
                pid = self.next_pid
                self.next_pid += 1
                self.procs[(host, pid)] = True
                self.pidfiles[(host, words[1])] = pid
                self.polls_left[(host, pid)] = self.ready_after
                return r(0)
            if words[0] == "readpid":
                pid = self.pidfiles.get((host, words[1]))
                return r(1) if pid is None else r(0, f"{pid}\n")
            if words[0] == "checkready":
                pid = int(words[1])
                if not self.procs.get((host, pid)):
                    return r(1)
                left = self.polls_left.get((host, pid), 0)
                if left > 0:
                    self.polls_left[(host, pid)] = left - 1
                    return r(1)
                return r(0)
            if words[0] == "stop":
                if not self.stubborn:
                    self._kill(host, int(words[1]))
                return r(0)
            if words[0] == "forcestop":
                self._kill(host, int(words[1]))
                return r(0)
            if words[:2] == ["kill", "-0"]:
                pid = int(words[2])
                return r(0 if self.procs.get((host, pid)) else 1)
            return r(0)  # hooks, cleandb, initiate: succeed and be logged

    def _kill(self, host, pid):
        if (host, pid) in self.procs:
            self.procs[(host, pid)] = False

    def live_pids(self):
        with self.lock:
            return [key for key, alive in self.procs.items() if alive]

    def first_index(self, predicate):
        with self.lock:
            for i, (host, command) in enumerate(self.log):
                if predicate(host, command):
                    return i
        return None


def sim_fleet(sim, spec):
    return recording_fleet(spec, respond=sim.respond)


def write_cluster_config(ws, topology, **extra):
    doc = {
        "topology": topology,
        "templates": dict(SIM_TEMPLATES),
        "grace_period": 0.3,
        "readiness": {"timeout": 2.0, "interval": 0.02},
        "init": {"replset": ["initiate $cluster_id $members"]},
    }
    doc.update(extra)
    ws.write("mongodb_setup.yml", doc)
    return ws.load()


def replset(count, **node_extra):
    return [
        {
            "cluster_type": "replset",
            "id": "rs0",
            "mongod": [dict(node_extra) for _ in range(count)],
        }
    ]


def test_deploy_happy_path(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 3})
    root = write_cluster_config(ws, replset(3))

    state = cluster.deploy(root, fleet, ws.path)

    assert sorted(state["pids"]) == ["rs0.mongod.0", "rs0.mongod.1", "rs0.mongod.2"]
    actions = [e["action"] for e in state["events"]]
    assert actions.count("launch") == 3
    assert actions.count("ready") == 3
    assert actions.count("init") == 1

    body = read_out(ws.path, "mongodb_setup")
    entries = body["topology"][0]["mongod"]
    assert [e["host"] for e in entries] == ["mongod.0", "mongod.1", "mongod.2"]
    for e in entries:
        assert e["pid"] in {p for (_, p) in sim.live_pids()}
        assert e["port"] == root.get("mongodb_setup.port")
        assert e["started_at"] > 0

    init_line = next(c for _, c in sim.log if c.startswith("initiate"))
    assert init_line == (
        "initiate rs0 10.9.0.101:27017,10.9.0.102:27017,10.9.0.103:27017"
    )
    # init belongs on the first member
    host = next(h for h, c in sim.log if c.startswith("initiate"))
    assert host == "mongod.0"


def test_deploy_uploads_merged_node_configs(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 2})
    topology = [
        {
            "cluster_type": "replset",
            "id": "rs0",
            "mongod_config_file": {"replication": {"replSetName": "rs0"}},
            "mongod": [
                {},
                {"mongod_config_file": {"storage": {"cache_gb": 7}}},
            ],
        }
    ]
    root = write_cluster_config(
        ws,
        topology,
        mongod_config_file={"storage": {"engine": "wiredTiger"}},
    )
    cluster.deploy(root, fleet, ws.path)

    first = yaml.safe_load(fleet.host("mongod", 0).channel.files["server.conf"])
    assert first == {
        "storage": {"engine": "wiredTiger"},
        "replication": {"replSetName": "rs0"},
    }
    second = yaml.safe_load(fleet.host("mongod", 1).channel.files["server.conf"])
    assert second["storage"] == {"engine": "wiredTiger", "cache_gb": 7}
    assert second["replication"] == {"replSetName": "rs0"}


def test_tier_order_and_unknown_roles_last(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"configsvr": 1, "mongod": 1, "mongos": 1, "arbiter": 1})
    topology = [
        {
            "cluster_type": "sharded",
            "id": "sh0",
            "arbiter": [{}],
            "mongos": [{}],
            "mongod": [{}],
            "configsvr": [{}],
        }
    ]
    root = write_cluster_config(ws, topology)
    cluster.deploy(root, fleet, ws.path)

    def start_index(role):
        return sim.first_index(
            lambda host, c: c.startswith("start") and host.startswith(role)
        )

    assert start_index("configsvr") < start_index("mongod")
    assert start_index("mongod") < start_index("mongos")
    assert start_index("mongos") < start_index("arbiter")


def test_detached_nodes_start_but_stay_out_of_members(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 3})
    topology = [
        {
            "cluster_type": "replset",
            "id": "rs0",
            "mongod": [{}, {}, {"detached": True}],
        }
    ]
    root = write_cluster_config(ws, topology)
    state = cluster.deploy(root, fleet, ws.path)

    assert len(state["pids"]) == 3  # detached node still runs
    init_line = next(c for _, c in sim.log if c.startswith("initiate"))
    assert init_line == "initiate rs0 10.9.0.101:27017,10.9.0.102:27017"


def test_per_node_port_overrides(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 2})
    topology = [
        {
            "cluster_type": "replset",
            "id": "rs0",
            "mongod": [{"port": 28017}, {}],
        }
    ]
    root = write_cluster_config(ws, topology)
    cluster.deploy(root, fleet, ws.path)
    starts = sorted(c for _, c in sim.log if c.startswith("start"))
    assert starts == ["start pids/server.pid 27017", "start pids/server.pid 28017"]
    body = read_out(ws.path, "mongodb_setup")
    assert body["topology"][0]["mongod"][0]["port"] == 28017


def test_declared_public_ip_must_match_fleet(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 1})
    root = write_cluster_config(ws, replset(1, public_ip="192.0.2.99"))
    with pytest.raises(ConfigError) as excinfo:
        cluster.deploy(root, fleet, ws.path)
    assert "192.0.2.99" in str(excinfo.value)

    # the matching declaration sails through
    root = write_cluster_config(ws, replset(1, public_ip="10.9.0.1"))
    cluster.deploy(root, fleet, ws.path)


def test_topology_larger_than_fleet(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 2})
    root = write_cluster_config(ws, replset(3))
    with pytest.raises(ConfigError) as excinfo:
        cluster.deploy(root, fleet, ws.path)
    assert "mongod.2" in str(excinfo.value)


def test_readiness_survives_slow_starters(ws):
    sim = HostSim(ready_after=2)
    fleet = sim_fleet(sim, {"mongod": 1})
    root = write_cluster_config(ws, replset(1))
    state = cluster.deploy(root, fleet, ws.path)
    checks = [c for _, c in sim.log if c.startswith("checkready")]
    assert len(checks) >= 3


def test_launch_failure_rolls_back_started_nodes(ws):
    sim = HostSim(fail_start=("mongod.1",))
    fleet = sim_fleet(sim, {"mongod": 2})
    root = write_cluster_config(ws, replset(2))
    with pytest.raises(DeployError) as excinfo:
        cluster.deploy(root, fleet, ws.path)
    assert "rs0.mongod.1" in str(excinfo.value)
    assert sim.live_pids() == []
    assert read_out(ws.path, "mongodb_setup") is None


def test_readiness_timeout_rolls_back(ws):
    sim = HostSim(ready_after=10_000)
    fleet = sim_fleet(sim, {"mongod": 1})
    root = write_cluster_config(ws, replset(1))
    start = time.time()
    with pytest.raises(DeployError) as excinfo:
        cluster.deploy(root, fleet, ws.path)
    assert "not ready" in str(excinfo.value)
    assert time.time() - start < 10
    assert sim.live_pids() == []


def test_init_failure_rolls_back(ws):
    sim = HostSim(fail_commands=("failinit rs0",))
    fleet = sim_fleet(sim, {"mongod": 1})
    root = write_cluster_config(
        ws,
        replset(1),
        init={"replset": ["initiate $cluster_id $members", "failinit $cluster_id"]},
    )
    with pytest.raises(DeployError) as excinfo:
        cluster.deploy(root, fleet, ws.path)
    assert "initialization of rs0" in str(excinfo.value)
    assert sim.live_pids() == []


def test_restart_cycles_every_node(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 3})
    root = write_cluster_config(ws, replset(3))
    first = cluster.deploy(root, fleet, ws.path)
    old_pids = dict(first["pids"])

    state = cluster.restart(root, fleet, ws.path)

    stops = [e for e in state["events"] if e["action"] == "stop"]
    assert [e["node"] for e in stops] == [
        "rs0.mongod.2", "rs0.mongod.1", "rs0.mongod.0"
    ]
    assert all(e["escalated"] is False for e in stops)
    assert all(state["pids"][k] != old_pids[k] for k in old_pids)
    body = read_out(ws.path, "mongodb_setup")
    published = {e["pid"] for e in body["topology"][0]["mongod"]}
    assert published == set(state["pids"].values())


def test_restart_escalates_stubborn_processes(ws):
    sim = HostSim(stubborn=True)
    fleet = sim_fleet(sim, {"mongod": 2})
    root = write_cluster_config(ws, replset(2))
    cluster.deploy(root, fleet, ws.path)

    state = cluster.restart(root, fleet, ws.path)
    stops = [e for e in state["events"] if e["action"] == "stop"]
    assert len(stops) == 2
    assert all(e["escalated"] is True for e in stops)
    force_count = sum(1 for _, c in sim.log if c.startswith("forcestop"))
    assert force_count == 2


def test_restart_clean_db_wipes_between_stop_and_start(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 2})
    root = write_cluster_config(ws, replset(2))
    cluster.deploy(root, fleet, ws.path)

    state = cluster.restart(root, fleet, ws.path, clean_db=True)
    assert [e["action"] for e in state["events"]].count("clean_db") == 2

    last_stop = max(
        i for i, (_, c) in enumerate(sim.log) if c.startswith("stop")
    )
    cleans = [i for i, (_, c) in enumerate(sim.log) if c.startswith("cleandb")]
    second_starts = [
        i for i, (_, c) in enumerate(sim.log) if c.startswith("start")
    ][2:]
    assert len(cleans) == 2
    assert all(last_stop < i < min(second_starts) for i in cleans)
    assert all(c == "cleandb data" for _, c in sim.log if c.startswith("cleandb"))


def test_restart_requires_prior_deploy(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 1})
    root = write_cluster_config(ws, replset(1))
    with pytest.raises(DeployError) as excinfo:
        cluster.restart(root, fleet, ws.path)
    assert "prior deploy" in str(excinfo.value)


def test_stop_all_graceful_and_force(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 2})
    root = write_cluster_config(ws, replset(2))
    cluster.deploy(root, fleet, ws.path)

    events = cluster.stop_all(root, fleet, ws.path)
    assert [e["action"] for e in events] == ["stop", "stop"]
    assert sim.live_pids() == []

    # nothing deployed: nothing to do
    empty_ws_events = cluster.stop_all(root, fleet, ws.path / "nowhere")
    assert empty_ws_events == []


def test_pre_cluster_start_hooks_run_before_any_launch(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 1})
    write_cluster_config(ws, replset(1))
    ws.write(
        "test_control.yml",
        {"pre_cluster_start": [{"command": "hookmark", "on": "all"}]},
    )
    root = ws.load()
    cluster.deploy(root, fleet, ws.path)
    hook_at = sim.first_index(lambda h, c: c == "hookmark")
    start_at = sim.first_index(lambda h, c: c.startswith("start"))
    assert hook_at is not None
    assert hook_at < start_at


def test_two_clusters_share_role_hosts_by_ordinal(ws):
    sim = HostSim()
    fleet = sim_fleet(sim, {"mongod": 3})
    topology = [
        {"cluster_type": "replset", "id": "rs0", "mongod": [{}, {}]},
        {"cluster_type": "standalone", "id": "solo", "mongod": [{}]},
    ]
    root = write_cluster_config(ws, topology, init={"replset": [], "standalone": []})
    state = cluster.deploy(root, fleet, ws.path)
    body = read_out(ws.path, "mongodb_setup")
    assert [e["host"] for e in body["topology"][0]["mongod"]] == [
        "mongod.0", "mongod.1"
    ]
    # the second cluster continues the global ordinal sequence
    assert [e["host"] for e in body["topology"][1]["mongod"]] == ["mongod.2"]
    assert len(state["pids"]) == 3
