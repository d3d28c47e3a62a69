import pytest
import yaml

from perfpipe import config as config_mod
from perfpipe.channel import RecordingChannel
from perfpipe.provision import FleetState, HostRecord


def dump(doc):
    return yaml.safe_dump(doc, default_flow_style=False, sort_keys=False)


class Workspace:
    """Thin handle on a temp directory holding config files."""

    def __init__(self, path):
        self.path = path

    def write(self, name, content):
        text = content if isinstance(content, str) else dump(content)
        target = self.path / name
        target.write_text(text, encoding="utf-8")
        return target

    def load(self, defaults_file=None):
        return config_mod.load_workspace(self.path, defaults_file=defaults_file)


@pytest.fixture
def ws(tmp_path):
    return Workspace(tmp_path)


def recording_fleet(spec, respond=None):
    """Build a ready FleetState of RecordingChannels.

    spec maps category name to host count; respond, when given, is
    called as respond(host_key, command_text) and may return a
    CommandResult to script per-host behavior.
    """
    hosts = []
    for category, count in spec.items():
        for index in range(count):
            key = f"{category}.{index}"
            k = len(hosts)
            hook = (lambda key: lambda cmd: respond(key, cmd))(key) if respond else None
            hosts.append(
                HostRecord(
                    category,
                    index,
                    f"10.9.0.{1 + k}",
                    f"10.9.0.{101 + k}",
                    RecordingChannel(key, respond=hook),
                )
            )
    return FleetState("ready", hosts, [])


@pytest.fixture
def fleet():
    return recording_fleet({"mongod": 3, "workload_client": 1})
