"""Installs benchmark dependencies on the workload-client hosts before
the system under test comes up.

Only test types that actually appear in the run list trigger their
setup commands, each type once per host, lists in declared order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

from . import config as config_mod
from .errors import WorkloadSetupError

OUT_MODULE = "workload_setup"


def _types_in_run_order(root):
    run_list = root.get("test_control.run", default=None)
    if not isinstance(run_list, list):
        return []
    types = []
    for test in run_list:
        if isinstance(test, dict):
            test_type = test.get("type")
            if test_type and test_type not in types:
                types.append(test_type)
    return types


def setup(root, fleet, workdir):
    """Run each needed type's command list on every client host, record
    every command in workload_setup.out.yml, fail on the first nonzero."""
    client_spec = str(root.get("test_control.client"))
    category = client_spec.partition(".")[0]
    hosts = fleet.category(category)
    if not hosts:
        raise WorkloadSetupError(f"no hosts in client category {category!r}")
    types = _types_in_run_order(root)
    plans = []
    skipped = []
    for test_type in types:
        commands = root.get(f"workload_setup.{test_type}", default=None)
        if not commands:
            skipped.append(test_type)
            continue
        plans.append((test_type, list(commands)))
    parallelism = int(root.get("bootstrap.runtime.parallelism"))
    timeout = float(root.get("bootstrap.runtime.command_timeout"))
    failures = []

    def run_host(host):
        records = []
        for test_type, commands in plans:
            for command in commands:
                started = time.time()
                result = host.channel.run(command, timeout=timeout)
                records.append(
                    {
                        "type": test_type,
                        "host": host.key,
                        "cmd": command,
                        "exit_code": result.exit_code,
                        "started_at": started,
                        "duration": result.duration,
                    }
                )
                if result.exit_code != 0:
                    failures.append(
                        f"{command!r} on {host.key} exited {result.exit_code}: "
                        f"{result.stderr.strip() or result.stdout.strip()}"
                    )
                    return records
        return records

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        per_host = list(pool.map(run_host, hosts))
    commands_run = [record for records in per_host for record in records]
    body = {
        "commands": commands_run,
        "types": [test_type for test_type, _ in plans],
        "skipped_types": skipped,
    }
    config_mod.write_out(workdir, OUT_MODULE, body)
    if failures:
        raise WorkloadSetupError("; ".join(failures))
    return body
