"""Composes a runnable workspace from the canned configuration library.

`bootstrap.yml` names one canned file per pipeline module; each is
copied verbatim (comments and all) unless an override patches it, in
which case the file is parsed, patched path-wise, and re-dumped.
Existing files are only tolerated when byte-identical to what would be
written, so re-running in a restored workspace is safe but a genuine
conflict refuses loudly.
"""

from __future__ import annotations

import importlib.resources
import shutil
from pathlib import Path

import yaml

from .errors import ConfigError

SELECTABLE = (
    "infrastructure_provisioning",
    "workload_setup",
    "mongodb_setup",
    "test_control",
    "analysis",
)


def library_root():
    return Path(str(importlib.resources.files("perfpipe") / "configurations"))


def available_ids(library, module):
    directory = Path(library) / module
    if not directory.is_dir():
        return []
    return sorted(path.stem for path in directory.glob("*.yml"))


def _library_file(library, module, ident):
    path = Path(library) / module / f"{ident}.yml"
    if not path.is_file():
        options = ", ".join(available_ids(library, module)) or "none"
        raise ConfigError(
            f"unknown {module} configuration {ident!r}; available: {options}"
        )
    return path


def _apply_overrides(node, patch, path):
    if isinstance(node, dict):
        for key, value in patch.items():
            key = str(key)
            here = f"{path}.{key}"
            if (
                isinstance(value, dict)
                and key in node
                and isinstance(node[key], (dict, list))
            ):
                _apply_overrides(node[key], value, here)
            else:
                node[key] = value
        return
    if isinstance(node, list):
        for key, value in patch.items():
            text = str(key)
            here = f"{path}.{text}"
            if not text.isdigit():
                raise ConfigError(f"override {here}: list index expected")
            index = int(text)
            if index > len(node):
                raise ConfigError(
                    f"override {here}: index {index} beyond list of {len(node)}"
                )
            if index == len(node):
                node.append(value)
            elif isinstance(value, dict) and isinstance(node[index], (dict, list)):
                _apply_overrides(node[index], value, here)
            else:
                node[index] = value
        return
    raise ConfigError(f"override {path}: cannot descend into a scalar")


def _render(library_path, module, overrides):
    raw = library_path.read_bytes()
    if not overrides:
        return raw
    doc = yaml.safe_load(raw.decode("utf-8"))
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{library_path} top level must be a mapping")
    _apply_overrides(doc, overrides, module)
    return yaml.safe_dump(doc, default_flow_style=False, sort_keys=False).encode(
        "utf-8"
    )


def bootstrap(spec_path, workdir, library=None):
    """Build the workspace named by `spec_path`; returns a report of
    every file and where it came from."""
    spec_path = Path(spec_path)
    workdir = Path(workdir)
    library = Path(library) if library else library_root()
    try:
        spec = yaml.safe_load(spec_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {spec_path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {spec_path}: {exc}") from exc
    if spec is None:
        spec = {}
    if not isinstance(spec, dict):
        raise ConfigError(f"{spec_path} top level must be a mapping")
    overrides = spec.get("overrides") or {}
    if not isinstance(overrides, dict):
        raise ConfigError("bootstrap overrides must be a mapping")
    for module in overrides:
        if module not in SELECTABLE:
            raise ConfigError(
                f"override target {module!r} is not a pipeline module file"
            )

    planned = []
    for module in SELECTABLE:
        ident = spec.get(module)
        if ident is None:
            continue
        if not isinstance(ident, str):
            raise ConfigError(f"bootstrap selection {module} must be a string")
        source = _library_file(library, module, ident)
        content = _render(source, module, overrides.get(module))
        planned.append(
            (f"{module}.yml", content, f"{source.parent.name}/{source.name}")
        )
    planned.append(("bootstrap.yml", spec_path.read_bytes(), str(spec_path.name)))

    workdir.mkdir(parents=True, exist_ok=True)
    conflicts = []
    for name, content, _ in planned:
        target = workdir / name
        if target.exists() and target.read_bytes() != content:
            conflicts.append(name)
    if conflicts:
        raise ConfigError(
            "refusing to overwrite differing files: " + ", ".join(conflicts)
        )
    report = {"written": []}
    for name, content, source in planned:
        target = workdir / name
        if target.exists():
            status = "exists"
        else:
            target.write_bytes(content)
            status = "written"
        report["written"].append({"file": name, "source": source, "status": status})
    return report
