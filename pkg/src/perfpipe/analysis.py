"""Single-run static checks over a collected artifact bundle: log
scanning, core-file detection, and exit-code verification.

Nothing here looks at prior runs; the report depends only on the bundle
contents and the analysis configuration, so identical inputs give a
byte-identical report.json.
"""

from __future__ import annotations

import fnmatch
import glob
import json
import re
from pathlib import Path

from . import control
from .errors import AnalysisError

EVIDENCE_CAP = 20
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"


def _compile(patterns):
    return [re.compile(p) for p in patterns]


def _scan_file(path, relative, fail_patterns, allowlist):
    evidence = []
    with open(path, encoding="utf-8", errors="replace") as handle:
        for lineno, line in enumerate(handle, 1):
            text = line.rstrip("\n")
            if not any(p.search(text) for p in fail_patterns):
                continue
            if any(p.search(text) for p in allowlist):
                continue
            evidence.append(f"{relative}:{lineno}: {text.strip()}")
    return evidence


def _check(name, target, evidence, suppressed=0):
    result = {
        "check": name,
        "target": target,
        "status": "fail" if evidence else "pass",
        "evidence": evidence,
    }
    if suppressed:
        result["suppressed"] = suppressed
    return result


def analyze(root, workdir):
    """Run every check, write report.json / report.txt into the
    workspace, fold both into the bundle, and return the report."""
    workdir = Path(workdir)
    staging = workdir / str(root.get("bootstrap.runtime.artifact_dir"))
    manifest_path = staging / control.MANIFEST_FILE
    results_path = staging / control.RESULTS_FILE
    if not staging.is_dir() or not manifest_path.is_file():
        raise AnalysisError(f"artifact bundle not readable under {staging}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        results = json.loads(results_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise AnalysisError(f"artifact bundle not readable: {exc}") from exc

    checks = []
    for entry in manifest.get("files", []):
        if entry.get("status") == "missing":
            checks.append(
                {
                    "check": "collection",
                    "target": entry.get("name", "?"),
                    "status": "skip",
                    "evidence": [entry.get("error", "not collected")],
                }
            )

    fail_patterns = _compile(root.get("analysis.fail_patterns"))
    allowlist = _compile(root.get("analysis.allowlist"))
    scanned = []
    for pattern in root.get("analysis.scan_globs"):
        for match in sorted(glob.glob(pattern, root_dir=staging)):
            if match not in scanned and (staging / match).is_file():
                scanned.append(match)
    for relative in scanned:
        try:
            evidence = _scan_file(
                staging / relative, relative, fail_patterns, allowlist
            )
        except OSError as exc:
            checks.append(
                {
                    "check": "log_scan",
                    "target": relative,
                    "status": "skip",
                    "evidence": [str(exc)],
                }
            )
            continue
        suppressed = max(0, len(evidence) - EVIDENCE_CAP)
        checks.append(
            _check("log_scan", relative, evidence[:EVIDENCE_CAP], suppressed)
        )

    core_pattern = str(root.get("analysis.core_pattern"))
    cores = sorted(
        str(path.relative_to(staging))
        for path in staging.rglob("*")
        if path.is_file() and fnmatch.fnmatch(path.name, core_pattern)
    )
    checks.append(_check("core_files", "bundle", cores))

    for outcome in results.get("tests", []):
        status = outcome.get("status")
        if status == "passed":
            checks.append(_check("exit_code", outcome.get("id", "?"), []))
        else:
            checks.append(
                _check(
                    "exit_code",
                    outcome.get("id", "?"),
                    [f"status {status}, exit code {outcome.get('exit_code')}"],
                )
            )
    if results.get("task_error"):
        checks.append(_check("exit_code", "task", [results["task_error"]]))

    overall = "pass" if all(c["status"] != "fail" for c in checks) else "fail"
    report = {"overall": overall, "checks": checks}
    report_text = _render_text(report)
    report_json = json.dumps(report, indent=2, sort_keys=True) + "\n"

    (workdir / REPORT_JSON).write_text(report_json, encoding="utf-8")
    (workdir / REPORT_TEXT).write_text(report_text, encoding="utf-8")
    (staging / REPORT_JSON).write_text(report_json, encoding="utf-8")
    (staging / REPORT_TEXT).write_text(report_text, encoding="utf-8")
    _extend_manifest(manifest, staging, [REPORT_JSON, REPORT_TEXT])
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    control.pack_archive(workdir, staging)
    return report


def _render_text(report):
    lines = [f"overall: {report['overall']}"]
    for check in report["checks"]:
        count = len(check["evidence"])
        suffix = f" ({count} evidence)" if count else ""
        lines.append(
            f"{check['status'].upper():4s} {check['check']} "
            f"{check['target']}{suffix}"
        )
        for item in check["evidence"]:
            lines.append(f"    {item}")
        if check.get("suppressed"):
            lines.append(f"    ... {check['suppressed']} more suppressed")
    return "\n".join(lines) + "\n"


def _extend_manifest(manifest, staging, names):
    entries = manifest.setdefault("files", [])
    for name in names:
        entries[:] = [e for e in entries if e.get("path") != name]
        path = staging / name
        entries.append(
            {
                "name": name,
                "source": "analysis",
                "path": name,
                "size": path.stat().st_size,
                "sha256": control._sha256(path),
                "status": "collected",
            }
        )
