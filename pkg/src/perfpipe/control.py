"""Runs the ordered benchmark list with lifecycle hooks and gathers
every log, diagnostic, and input config into the run's artifact bundle.

Tests run strictly sequentially on the configured client host. A test
that fails keeps the run going (its outcome is recorded); a hook that
fails aborts the remaining tests but never the artifact collection,
which is the whole point of the audit trail.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
import shutil
import tarfile
import tempfile
import time
from pathlib import Path

from .errors import ChannelError, ConfigError, StageError, TaskError

RESULTS_FILE = "results.json"
ARCHIVE_FILE = "dsi-artifacts.tgz"
MANIFEST_FILE = "manifest.json"


def client_host(root, fleet):
    spec = str(root.get("test_control.client"))
    category, _, index = spec.partition(".")
    return fleet.host(category, int(index or 0))


def _target_hosts(fleet, on, default_host):
    if on is None:
        return [default_host()]
    if on == "all":
        return list(fleet.hosts)
    category, _, index = str(on).partition(".")
    if index:
        return [fleet.host(category, int(index))]
    hosts = fleet.category(category)
    if not hosts:
        raise ConfigError(f"hook target {on!r} matches no provisioned host")
    return hosts


def run_hooks(root, fleet, phase, workdir, records=None, test_id=None, extra=None):
    """Execute one lifecycle phase's action list.

    Actions are {command, on}, {restart: {clean_db}}, or
    {upload: {source, target, on}}. Any failure raises TaskError.
    """
    actions = list(root.get(f"test_control.{phase}"))
    if extra:
        actions.extend(extra)
    if not actions:
        return
    timeout = float(root.get("test_control.timeout"))
    # Resolved on first use: a phase whose actions all name explicit
    # targets must work in fleets that have no client host at all.
    default_host = functools.lru_cache(maxsize=1)(
        lambda: client_host(root, fleet)
    )
    for index, action in enumerate(actions):
        if not isinstance(action, dict):
            raise ConfigError(f"test_control.{phase}.{index} must be a mapping")
        started = time.time()
        record = {
            "phase": phase,
            "test": test_id,
            "index": index,
            "started_at": started,
        }
        try:
            if "command" in action:
                record["command"] = action["command"]
                for host in _target_hosts(fleet, action.get("on"), default_host):
                    result = host.channel.run(action["command"], timeout=timeout)
                    record["exit_code"] = result.exit_code
                    if result.exit_code != 0:
                        raise TaskError(
                            f"{phase} hook {action['command']!r} on {host.key} "
                            f"exited {result.exit_code}: {result.stderr.strip()}"
                        )
            elif "restart" in action:
                from . import cluster
                spec = action.get("restart") or {}
                clean_db = bool(spec.get("clean_db", False))
                record["restart"] = {"clean_db": clean_db}
                cluster.restart(root, fleet, workdir, clean_db=clean_db)
                record["exit_code"] = 0
            elif "upload" in action:
                spec = action["upload"]
                record["upload"] = dict(spec)
                source = Path(workdir) / spec["source"]
                for host in _target_hosts(fleet, spec.get("on"), default_host):
                    host.channel.upload(source, spec["target"])
                record["exit_code"] = 0
            else:
                raise ConfigError(
                    f"test_control.{phase}.{index} is not a recognized action"
                )
        except TaskError:
            record["failed"] = True
            raise
        except (ChannelError, StageError) as exc:
            record["failed"] = True
            raise TaskError(f"{phase} hook failed: {exc}") from exc
        finally:
            record["duration"] = time.time() - started
            if records is not None:
                records.append(record)


def _validate_run_list(run_list):
    seen = set()
    for position, test in enumerate(run_list):
        if not isinstance(test, dict) or "id" not in test:
            raise ConfigError(f"test_control.run.{position} needs an id")
        test_id = test["id"]
        if test_id in seen:
            raise ConfigError(f"duplicate test id {test_id!r}")
        seen.add(test_id)
        for key in ("cmd", "config_filename", "workload_config"):
            if key not in test:
                raise ConfigError(f"test {test_id!r} lacks {key!r}")
        if test["config_filename"] not in test["cmd"]:
            raise ConfigError(
                f"test {test_id!r}: cmd does not mention its "
                f"config_filename {test['config_filename']!r}"
            )


def _extract_metrics(root, test_type, output):
    specs = root.get(f"test_control.metrics.{test_type}", default=[])
    metrics = []
    for spec in specs:
        pattern = re.compile(spec["pattern"])
        for line in output.splitlines():
            match = pattern.search(line)
            if match:
                try:
                    value = float(match.group(1))
                except ValueError:
                    continue
                metrics.append(
                    {
                        "name": spec["name"],
                        "value": value,
                        "unit": spec.get("unit", ""),
                    }
                )
                break
    return metrics


def run_tests(root, fleet, workdir):
    """Execute hooks and tests in order; returns (outcomes, hook records,
    extracted workload configs keyed by test id)."""
    run_list = root.get("test_control.run", default=None)
    if not isinstance(run_list, list) or not run_list:
        raise TaskError("test_control.run is empty; nothing to execute")
    _validate_run_list(run_list)
    client = client_host(root, fleet)
    timeout = float(root.get("test_control.timeout"))
    outcomes = []
    records = []
    extracted = {}
    try:
        run_hooks(root, fleet, "pre_task", workdir, records=records)
        for position, test in enumerate(run_list):
            test_id = test["id"]
            test_hooks = test.get("hooks", {})
            run_hooks(root, fleet, "pre_test", workdir, records=records,
                      test_id=test_id, extra=test_hooks.get("pre_test"))
            # workload_config arrives with every reference already
            # resolved; what lands on the client is concrete.
            text = str(test["workload_config"])
            with tempfile.NamedTemporaryFile("w", delete=False) as handle:
                handle.write(text)
                local = handle.name
            try:
                client.channel.upload(local, test["config_filename"])
            finally:
                Path(local).unlink(missing_ok=True)
            extracted[test_id] = (test["config_filename"], text)
            started = time.time()
            error_text = None
            result = None
            try:
                result = client.channel.run(
                    test["cmd"], timeout=float(test.get("timeout", timeout))
                )
                status = "passed" if result.exit_code == 0 else "failed"
            except ChannelError as exc:
                status = "error"
                error_text = str(exc)
            ended = time.time()
            outcome = {
                "id": test_id,
                "type": test.get("type"),
                "status": status,
                "started_at": started,
                "ended_at": ended,
                "exit_code": None if result is None else result.exit_code,
                "error": error_text,
                "metrics": [] if result is None else _extract_metrics(
                    root, test.get("type"), result.stdout + "\n" + result.stderr
                ),
                "stdout": "" if result is None else result.stdout,
                "stderr": (error_text or "") if result is None else result.stderr,
            }
            outcomes.append(outcome)
            run_hooks(root, fleet, "post_test", workdir, records=records,
                      test_id=test_id, extra=test_hooks.get("post_test"))
            if position < len(run_list) - 1:
                run_hooks(root, fleet, "between_tests", workdir, records=records,
                          test_id=test_id)
        run_hooks(root, fleet, "post_task", workdir, records=records)
    except TaskError as exc:
        exc.outcomes = outcomes
        exc.hook_records = records
        exc.extracted = extracted
        raise
    return outcomes, records, extracted


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def collect_artifacts(root, fleet, outcomes, records, extracted, workdir,
                      task_error=None):
    """Stage configs, test output, host logs, and diagnostics, then pack
    the lot into the run archive. Per-file failures become manifest
    entries marked missing, never exceptions."""
    workdir = Path(workdir)
    staging = workdir / str(root.get("bootstrap.runtime.artifact_dir"))
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    sources = {}
    missing = []

    def stage_text(relative, text, source):
        target = staging / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        sources[str(relative)] = source

    for pattern in ("*.yml", "*.yaml"):
        for path in sorted(workdir.glob(pattern)):
            shutil.copyfile(path, staging / path.name)
            sources[path.name] = "control"

    for outcome in outcomes:
        base = Path("tests") / outcome["id"]
        stage_text(base / "stdout.log", outcome.pop("stdout", ""), "control")
        stage_text(base / "stderr.log", outcome.pop("stderr", ""), "control")
        if outcome["id"] in extracted:
            filename, text = extracted[outcome["id"]]
            stage_text(base / Path(filename).name, text, "control")

    host_globs = root.get("test_control.collect.host_globs")
    diagnostics = root.get("test_control.collect.diagnostics")
    for host in fleet.hosts:
        host_dir = staging / "reports" / host.key
        for pattern in host_globs:
            try:
                retrieved = host.channel.download(pattern, host_dir)
            except Exception as exc:
                missing.append(
                    {
                        "name": f"{host.key}:{pattern}",
                        "source": host.key,
                        "status": "missing",
                        "error": str(exc),
                    }
                )
                continue
            for path in retrieved:
                sources[str(path.relative_to(staging))] = host.key
        for diag in diagnostics:
            try:
                result = host.channel.run(diag["cmd"])
                text = result.stdout
                if result.stderr:
                    text += "\n[stderr]\n" + result.stderr
                stage_text(
                    Path("reports") / host.key / "diag" / f"{diag['name']}.txt",
                    text,
                    host.key,
                )
            except Exception as exc:
                missing.append(
                    {
                        "name": f"{host.key}:diag.{diag['name']}",
                        "source": host.key,
                        "status": "missing",
                        "error": str(exc),
                    }
                )

    results = {
        "tests": outcomes,
        "hooks": records,
        "task_error": task_error,
    }
    results_text = json.dumps(results, indent=2, sort_keys=True) + "\n"
    (workdir / RESULTS_FILE).write_text(results_text, encoding="utf-8")
    stage_text(RESULTS_FILE, results_text, "control")

    entries = []
    for path in sorted(staging.rglob("*")):
        if not path.is_file():
            continue
        relative = str(path.relative_to(staging))
        entries.append(
            {
                "name": relative,
                "source": sources.get(relative, "control"),
                "path": relative,
                "size": path.stat().st_size,
                "sha256": _sha256(path),
                "status": "collected",
            }
        )
    manifest = {"files": entries + missing}
    (staging / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    archive = pack_archive(workdir, staging)
    return {"archive": archive, "staging": staging, "manifest": manifest}


def pack_archive(workdir, staging):
    archive = Path(workdir) / ARCHIVE_FILE
    with tarfile.open(archive, "w:gz") as tar:
        for path in sorted(Path(staging).rglob("*")):
            if path.is_file():
                tar.add(path, arcname=str(path.relative_to(staging)))
    return archive


def run_task(root, fleet, workdir):
    """CLI entry: run everything, collect no matter what, report exit."""
    task_error = None
    try:
        outcomes, records, extracted = run_tests(root, fleet, workdir)
    except TaskError as exc:
        outcomes = exc.outcomes
        records = getattr(exc, "hook_records", [])
        extracted = getattr(exc, "extracted", {})
        task_error = str(exc)
    collect_artifacts(root, fleet, outcomes, records, extracted, workdir,
                      task_error=task_error)
    if task_error is not None:
        return 1
    return 0 if all(o["status"] == "passed" for o in outcomes) else 1
