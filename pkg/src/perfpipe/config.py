"""Unified multi-file configuration namespace with defaults overlay and
cross-file references.

A workspace is a directory holding one YAML file per pipeline module
(mongodb_setup.yml, test_control.yml, ...) plus machine-written
<module>.out.yml files. All of them are loaded into a single namespace
whose first path segment is the module name. Values anywhere in the
tree may point at values elsewhere with ${dotted.path} references,
including into the <module>.out namespaces. Lookup precedence at every
path is: out-file, then user file, then the bundled defaults.yml.

Resolution strategy: load_workspace eagerly resolves every reachable
path so that reference cycles, malformed references, and non-scalar
references embedded in strings all fail the load. References whose
target does not exist yet are collected in ConfigRoot.dangling and
raise only when actually read: a workspace legitimately contains
references into out-files that an earlier pipeline stage has not
written yet.
"""

from __future__ import annotations

import json
import os
import tempfile
from importlib import resources
from pathlib import Path

import yaml

from .errors import (
    ConfigError,
    MissingKeyError,
    OutFileContractError,
    ReferenceCycleError,
    ShapeError,
)

MODULES = (
    "bootstrap",
    "infrastructure_provisioning",
    "workload_setup",
    "mongodb_setup",
    "test_control",
    "analysis",
)

# Backstop against pathological reference chains; real cycles are caught
# structurally before this limit matters.
MAX_REF_CHAIN = 64

_MISSING = object()


def canonical_text(value):
    """Text form used when a scalar is spliced into a longer string."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, str)):
        return str(value)
    return str(value)


def split_path(path):
    """Accept 'a.b.0' or a list of segments; return a list of strings."""
    if isinstance(path, str):
        segments = path.split(".")
    else:
        segments = [str(s) for s in path]
    if not segments or any(s == "" for s in segments):
        raise ConfigError(f"invalid configuration path {path!r}")
    return segments


def join_path(segments):
    return ".".join(segments)


def _as_index(segment):
    return int(segment) if segment.isdigit() else None


def _tokenize(text):
    """Split a string into ('lit', s) and ('ref', path) parts.

    '$$' is an escaped dollar and produces a literal '$'; any other '$'
    not followed by '{' passes through untouched, so shell-style $var
    templates survive resolution.
    """
    parts = []
    buf = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c != "$":
            buf.append(c)
            i += 1
            continue
        nxt = text[i + 1] if i + 1 < n else ""
        if nxt == "$":
            buf.append("$")
            i += 2
            continue
        if nxt != "{":
            buf.append("$")
            i += 1
            continue
        end = text.find("}", i + 2)
        if end < 0:
            raise ConfigError(f"unterminated reference in {text!r}")
        target = text[i + 2 : end].strip()
        if not target:
            raise ConfigError(f"empty reference in {text!r}")
        if buf:
            parts.append(("lit", "".join(buf)))
            buf = []
        parts.append(("ref", target))
        i = end + 1
    if buf:
        parts.append(("lit", "".join(buf)))
    return parts


def has_reference(text):
    """True if the string contains an unescaped ${...} occurrence."""
    return any(kind == "ref" for kind, _ in _tokenize(text))


def _coerce_keys(node):
    # YAML happily parses `0:` or `true:` as non-string keys; the
    # namespace is string-keyed, so canonicalize them once at load.
    if isinstance(node, dict):
        return {
            (k if isinstance(k, str) else canonical_text(k)): _coerce_keys(v)
            for k, v in node.items()
        }
    if isinstance(node, list):
        return [_coerce_keys(v) for v in node]
    return node


def _load_mapping(path):
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _coerce_keys(data)


def _pick_file(workdir, stem):
    candidates = [workdir / f"{stem}.yml", workdir / f"{stem}.yaml"]
    present = [p for p in candidates if p.is_file()]
    if len(present) > 1:
        raise ConfigError(
            f"both {present[0].name} and {present[1].name} exist; keep exactly one"
        )
    return present[0] if present else None


def _descend_layers(layers, segment):
    """One descent step through precedence-ordered raw trees.

    Mappings merge key-wise across layers; any non-mapping value wins
    wholesale for its layer and shadows everything beneath it, so
    sequences and scalars are atomic.
    """
    new = []
    seen_dict = False
    for node, tag in layers:
        if isinstance(node, dict):
            seen_dict = True
            if segment in node:
                child = node[segment]
                new.append((child, tag))
                if not isinstance(child, dict):
                    break
        elif isinstance(node, list):
            if seen_dict or new:
                break
            i = _as_index(segment)
            if i is not None and 0 <= i < len(node):
                new.append((node[i], tag))
            break
        else:
            break
    return new


def _merge_raw(nodes):
    """Materialize the merged raw view of layered nodes (front wins)."""
    first = nodes[0]
    if not isinstance(first, dict):
        return first
    dicts = []
    for n in nodes:
        if isinstance(n, dict):
            dicts.append(n)
        else:
            break
    merged = {}
    for d in dicts:
        for key in d:
            if key not in merged:
                merged[key] = True
    for key in merged:
        merged[key] = _merge_raw([d[key] for d in dicts if key in d])
    return merged


def _scan_for_references(node, where):
    if isinstance(node, dict):
        for k, v in node.items():
            if "${" in k:
                raise ConfigError(
                    f"{where}: references are not allowed in mapping keys ({k!r})"
                )
            _scan_for_references(v, where)
    elif isinstance(node, list):
        for v in node:
            _scan_for_references(v, where)


class ConfigRoot:
    """Immutable view over one workspace's merged configuration."""

    def __init__(self, user, out, defaults, files):
        self._files = dict(files)
        self.dangling = ()
        out_wrapper = {m: {"out": body} for m, body in out.items()}
        self._layers = [
            (out_wrapper, "out"),
            (dict(user), "user"),
            (dict(defaults), "default"),
        ]

    # -- lookup ---------------------------------------------------------

    def get(self, path, default=_MISSING):
        try:
            return self._resolve_path(split_path(path), [], None)
        except MissingKeyError:
            if default is _MISSING:
                raise
            return default

    def has(self, path):
        return self.get(path, default=_MISSING_SENTINEL) is not _MISSING_SENTINEL

    def _resolve_path(self, segments, stack, referrer):
        layers = self._layers
        for pos, segment in enumerate(segments):
            front = layers[0][0] if layers else None
            if layers and not isinstance(front, (dict, list)):
                # Scalar met mid-path: descending further only works if
                # it is a reference yielding a container.
                value = front
                if isinstance(front, str):
                    value = self._resolve_scalar(
                        front, stack, join_path(segments[:pos])
                    )
                if isinstance(value, (dict, list)):
                    return _plain_descend(value, segments, pos, referrer)
                raise MissingKeyError(join_path(segments), referrer)
            layers = _descend_layers(layers, segment)
            if not layers:
                raise MissingKeyError(join_path(segments), referrer)
        origin = join_path(segments)
        node = layers[0][0]
        if isinstance(node, dict):
            return self._deep_resolve(_merge_raw([n for n, _ in layers]), stack, origin)
        if isinstance(node, (list, str)):
            return self._deep_resolve(node, stack, origin)
        return node

    def _deep_resolve(self, node, stack, origin):
        if isinstance(node, dict):
            return {
                k: self._deep_resolve(v, stack, f"{origin}.{k}")
                for k, v in node.items()
            }
        if isinstance(node, list):
            return [
                self._deep_resolve(v, stack, f"{origin}.{i}")
                for i, v in enumerate(node)
            ]
        if isinstance(node, str):
            return self._resolve_scalar(node, stack, origin)
        return node

    def _resolve_scalar(self, text, stack, origin):
        parts = _tokenize(text)
        if len(parts) == 1 and parts[0][0] == "ref":
            return self._follow(parts[0][1], stack, origin)
        rendered = []
        for kind, part in parts:
            if kind == "lit":
                rendered.append(part)
                continue
            value = self._follow(part, stack, origin)
            if isinstance(value, (dict, list)):
                shape = "mapping" if isinstance(value, dict) else "sequence"
                raise ShapeError(
                    f"reference ${{{part}}} at {origin} is embedded in a longer "
                    f"string and must resolve to a scalar, not a {shape}"
                )
            rendered.append(canonical_text(value))
        return "".join(rendered)

    def _follow(self, target, stack, origin):
        segments = split_path(target)
        normalized = join_path(segments)
        if normalized in stack:
            raise ReferenceCycleError(stack[stack.index(normalized):] + [normalized])
        if len(stack) >= MAX_REF_CHAIN:
            raise ConfigError(
                f"reference chain deeper than {MAX_REF_CHAIN} at ${{{target}}} "
                f"(reached from {origin})"
            )
        stack.append(normalized)
        try:
            return self._resolve_path(segments, stack, origin)
        finally:
            stack.pop()

    # -- enumeration and provenance ------------------------------------

    def leaf_paths(self):
        """All addressable raw paths in the merged namespace.

        Empty containers count as leaves; paths that only exist behind a
        container-valued reference are not enumerated (they have no raw
        location of their own).
        """
        found = []

        def walk(layers, prefix):
            front = layers[0][0]
            if isinstance(front, dict):
                keys = {}
                for node, _ in layers:
                    if not isinstance(node, dict):
                        break
                    for k in node:
                        keys[k] = True
                if not keys:
                    if prefix:
                        found.append(join_path(prefix))
                    return
                for key in keys:
                    sub = _descend_layers(layers, key)
                    if sub:
                        walk(sub, prefix + [key])
            elif isinstance(front, list):
                if not front:
                    found.append(join_path(prefix))
                    return
                for i in range(len(front)):
                    sub = _descend_layers(layers, str(i))
                    walk(sub, prefix + [str(i)])
            else:
                found.append(join_path(prefix))

        walk(self._layers, [])
        return found

    def provenance(self, path):
        """Which kind of file supplied the raw value at path.

        Returns (kind, filename) with kind one of out|user|default.
        Follows container-valued references to the file that actually
        holds the referenced data.
        """
        segments = split_path(path)
        layers = self._layers
        for pos, segment in enumerate(segments):
            front = layers[0][0] if layers else None
            if layers and isinstance(front, str):
                parts = _tokenize(front)
                if len(parts) == 1 and parts[0][0] == "ref":
                    target = split_path(parts[0][1])
                    return self.provenance(target + segments[pos:])
                raise MissingKeyError(join_path(segments))
            layers = _descend_layers(layers, segment)
            if not layers:
                raise MissingKeyError(join_path(segments))
        kind = layers[0][1]
        module = segments[0]
        filename = {
            "out": f"{module}.out.yml",
            "user": f"{module}.yml",
            "default": "defaults.yml",
        }[kind]
        return kind, filename

    # -- rendering ------------------------------------------------------

    def render_external(self, path, fmt):
        value = self.get(path)
        if fmt == "yaml":
            return yaml.safe_dump(value, default_flow_style=False, sort_keys=False)
        if fmt == "json":
            return json.dumps(value, indent=2, sort_keys=True)
        if fmt == "properties":
            if not isinstance(value, dict):
                raise ShapeError(
                    f"properties rendering needs a mapping at {path}, "
                    f"got {type(value).__name__}"
                )
            lines = []
            for key, item in value.items():
                if isinstance(item, (dict, list)):
                    raise ShapeError(
                        f"properties rendering needs a flat mapping; "
                        f"{path}.{key} is nested"
                    )
                lines.append(f"{key}={canonical_text(item)}")
            return "\n".join(lines) + "\n"
        raise ConfigError(f"unknown rendering format {fmt!r}")

    # -- eager validation ----------------------------------------------

    def validate(self):
        for node, tag in self._layers:
            _scan_for_references(node, tag)
        dangling = []
        for path in self.leaf_paths():
            try:
                self._resolve_path(split_path(path), [], None)
            except MissingKeyError as exc:
                # Legitimate before earlier stages have written their
                # out-files; reading the path later still errors.
                dangling.append((path, exc.path))
        self.dangling = tuple(dangling)
        return self


def _plain_descend(value, segments, pos, referrer):
    # Walking inside an already-resolved container (reached through a
    # reference); everything here is concrete.
    node = value
    for segment in segments[pos:]:
        if isinstance(node, dict) and segment in node:
            node = node[segment]
            continue
        if isinstance(node, list):
            i = _as_index(segment)
            if i is not None and 0 <= i < len(node):
                node = node[i]
                continue
        raise MissingKeyError(join_path(segments), referrer)
    return node


_MISSING_SENTINEL = object()


def bundled_defaults_text():
    return resources.files("perfpipe").joinpath("defaults.yml").read_text("utf-8")


def load_workspace(workdir, defaults_file=None):
    """Load every recognized config file under workdir into one root.

    Missing files are fine (modules may be skipped); present files must
    parse as mappings. The returned root has passed eager validation.
    """
    workdir = Path(workdir)
    if not workdir.is_dir():
        raise ConfigError(f"workspace directory {workdir} does not exist")
    user, out, files = {}, {}, {}
    for module in MODULES:
        path = _pick_file(workdir, module)
        if path is not None:
            user[module] = _load_mapping(path)
            files[f"{module}.yml"] = path
        out_path = _pick_file(workdir, f"{module}.out")
        if out_path is not None:
            out[module] = _load_mapping(out_path)
            files[f"{module}.out.yml"] = out_path
    if defaults_file is not None:
        defaults_raw = _load_mapping(defaults_file)
    else:
        try:
            data = yaml.safe_load(bundled_defaults_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"bundled defaults.yml: {exc}") from exc
        defaults_raw = _coerce_keys(data or {})
    defaults = {k: v for k, v in defaults_raw.items() if k in MODULES}
    root = ConfigRoot(user, out, defaults, files)
    root.validate()
    return root


def write_out(workdir, module, body):
    """Atomically publish <module>.out.yml holding only concrete values."""
    if module not in MODULES:
        raise ConfigError(f"unknown module {module!r} for out-file")
    if not isinstance(body, dict):
        raise ConfigError("out-file body must be a mapping")
    _check_concrete(body, module)
    workdir = Path(workdir)
    text = yaml.safe_dump(body, default_flow_style=False, sort_keys=False)
    fd, tmp = tempfile.mkstemp(
        dir=workdir, prefix=f".{module}.out.", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, workdir / f"{module}.out.yml")
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return workdir / f"{module}.out.yml"


def _check_concrete(node, module):
    if isinstance(node, dict):
        for k, v in node.items():
            if isinstance(k, str) and "${" in k:
                raise OutFileContractError(
                    f"{module}.out.yml must hold concrete values, found key {k!r}"
                )
            _check_concrete(v, module)
    elif isinstance(node, list):
        for v in node:
            _check_concrete(v, module)
    elif isinstance(node, str) and "${" in node:
        raise OutFileContractError(
            f"{module}.out.yml must hold concrete values, found {node!r}"
        )


def read_out(workdir, module):
    """Raw body of <module>.out.yml, or None if the file is absent."""
    path = _pick_file(Path(workdir), f"{module}.out")
    return None if path is None else _load_mapping(path)
