"""Command-line entry point: one sub-command per pipeline module and
nothing else.

There are deliberately no flags. Everything that could influence a run
lives in the workspace configuration so the artifact bundle is a
complete record of what happened. Exit codes: 0 success, 1 module
failure, 2 configuration or usage error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import analysis as analysis_mod
from . import bootstrap as bootstrap_mod
from . import cluster, config, control, provision, workload
from .errors import ConfigError, PerfPipeError, StageError

LOCK_FILE = ".perfpipe.lock"
LOG = logging.getLogger("perfpipe")

COMMANDS = (
    "bootstrap",
    "infrastructure_provisioning",
    "workload_setup",
    "mongodb_setup",
    "test_control",
    "analysis",
    "infrastructure_teardown",
)


def _usage():
    lines = ["usage: perfpipe <module>", "", "modules:"]
    lines += [f"  {name}" for name in COMMANDS]
    return "\n".join(lines)


def _load(workdir):
    root = config.load_workspace(workdir)
    level = str(root.get("bootstrap.runtime.log_level")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    return root


def _require_out(workdir, module):
    if config.read_out(workdir, module) is None:
        raise ConfigError(
            f"{module}.out.yml is missing; run {module} first "
            "or supply the file by hand"
        )


def cmd_bootstrap(workdir):
    spec = workdir / "bootstrap.yml"
    if not spec.is_file():
        raise ConfigError(f"{spec} not found; a workspace starts from bootstrap.yml")
    report = bootstrap_mod.bootstrap(spec, workdir)
    for entry in report["written"]:
        print(f"{entry['status']:7s} {entry['file']}  <- {entry['source']}")
    return 0


def cmd_provision(workdir):
    root = _load(workdir)
    fleet = provision.provision(root, workdir)
    print(f"provisioned {len(fleet.hosts)} hosts ({fleet.status})")
    return 0


def cmd_workload_setup(workdir):
    root = _load(workdir)
    _require_out(workdir, "infrastructure_provisioning")
    fleet = provision.fleet_from_out(root, workdir)
    report = workload.setup(root, fleet, workdir)
    print(
        f"workload setup ran {len(report['commands'])} commands "
        f"for types {report['types'] or '[]'}"
    )
    return 0


def cmd_mongodb_setup(workdir):
    root = _load(workdir)
    _require_out(workdir, "infrastructure_provisioning")
    fleet = provision.fleet_from_out(root, workdir)
    deployed = cluster.deploy(root, fleet, workdir)
    print(f"deployed {len(deployed['nodes'])} nodes")
    return 0


def cmd_test_control(workdir):
    root = _load(workdir)
    _require_out(workdir, "infrastructure_provisioning")
    _require_out(workdir, "mongodb_setup")
    fleet = provision.fleet_from_out(root, workdir)
    code = control.run_task(root, fleet, workdir)
    print(f"test control finished with exit {code}; see {control.RESULTS_FILE}")
    return code


def cmd_analysis(workdir):
    root = _load(workdir)
    staging = workdir / str(root.get("bootstrap.runtime.artifact_dir"))
    if not (staging / control.RESULTS_FILE).is_file():
        raise ConfigError(
            f"{staging / control.RESULTS_FILE} is missing; run test_control "
            "first or supply the bundle by hand"
        )
    report = analysis_mod.analyze(root, workdir)
    print(f"analysis overall: {report['overall']} (see {analysis_mod.REPORT_TEXT})")
    return 0 if report["overall"] == "pass" else 1


def cmd_teardown(workdir):
    root = _load(workdir)
    fleet = provision.destroy(root, workdir)
    events = [e for e in fleet.lifecycle_log if e["event"] == "destroy"]
    print(f"teardown destroyed {len(events)} hosts")
    return 0


DISPATCH = {
    "bootstrap": cmd_bootstrap,
    "infrastructure_provisioning": cmd_provision,
    "workload_setup": cmd_workload_setup,
    "mongodb_setup": cmd_mongodb_setup,
    "test_control": cmd_test_control,
    "analysis": cmd_analysis,
    "infrastructure_teardown": cmd_teardown,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    if len(argv) != 1 or argv[0] not in COMMANDS:
        print(_usage(), file=sys.stderr)
        return 2
    workdir = Path.cwd()
    lock = FileLock(workdir / LOCK_FILE)
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(
            f"another perfpipe command holds {LOCK_FILE} in this workspace",
            file=sys.stderr,
        )
        return 1
    try:
        return DISPATCH[argv[0]](workdir)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"{argv[0]} failed: {exc}", file=sys.stderr)
        return 1
    except PerfPipeError as exc:
        print(f"{argv[0]} failed: {exc}", file=sys.stderr)
        return 1
    finally:
        lock.release()


if __name__ == "__main__":
    sys.exit(main())
