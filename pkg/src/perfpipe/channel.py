"""Command execution and file transfer on hosts.

Three channel flavors share one interface: LocalChannel runs commands
as subprocesses inside a per-host sandbox directory, SshChannel shells
out to the stock ssh/scp binaries for real remote hosts, and
RecordingChannel is the no-op used for synthetic mock-cloud hosts and
in tests. run() never raises on a nonzero exit; callers look at the
exit code. Operations on one channel are serialized with a lock so
concurrent pipeline stages can share handles safely.
"""

from __future__ import annotations

import glob
import os
import shlex
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import ChannelError, ChannelTimeout


@dataclass
class CommandResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    started_at: float


def _as_shell_text(command):
    if isinstance(command, str):
        return command
    return " ".join(shlex.quote(str(part)) for part in command)


class LocalChannel:
    """Runs everything inside a sandbox directory standing in for one host.

    Absolute remote paths are re-rooted under the sandbox so configs
    written for real hosts keep working unchanged.
    """

    def __init__(self, base_dir, env=None, command_timeout=600):
        self.base = Path(base_dir)
        self.base.mkdir(parents=True, exist_ok=True)
        self.env = dict(env or {})
        self.command_timeout = command_timeout
        self._lock = threading.Lock()

    def _resolve_remote(self, remote_path):
        remote = str(remote_path)
        return self.base / remote.lstrip("/")

    def run(self, command, timeout=None):
        text = _as_shell_text(command)
        timeout = self.command_timeout if timeout is None else timeout
        env = dict(os.environ)
        env.update({str(k): str(v) for k, v in self.env.items()})
        with self._lock:
            started = time.time()
            try:
                proc = subprocess.run(
                    ["sh", "-c", text],
                    cwd=self.base,
                    env=env,
                    capture_output=True,
                    text=True,
                    timeout=timeout,
                )
            except subprocess.TimeoutExpired as exc:
                raise ChannelTimeout(
                    f"command timed out after {timeout}s: {text}",
                    stdout=_decode(exc.output),
                    stderr=_decode(exc.stderr),
                ) from exc
            except OSError as exc:
                raise ChannelError(f"cannot execute {text!r}: {exc}") from exc
            return CommandResult(
                exit_code=proc.returncode,
                stdout=proc.stdout,
                stderr=proc.stderr,
                duration=time.time() - started,
                started_at=started,
            )

    def upload(self, local_path, remote_path):
        source = Path(local_path)
        if not source.is_file():
            raise ChannelError(f"upload source {source} does not exist")
        target = self._resolve_remote(remote_path)
        with self._lock:
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(source, target)

    def download(self, pattern, dest_dir):
        dest = Path(dest_dir)
        with self._lock:
            matches = sorted(
                glob.glob(str(pattern), root_dir=self.base, recursive=True)
            )
            retrieved = []
            for rel in matches:
                source = self.base / rel
                if not source.is_file():
                    continue
                target = dest / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(source, target)
                retrieved.append(target)
        return retrieved


class SshChannel:
    """Thin wrapper over the system ssh/scp binaries.

    Uses the one configured credential for everything; commands run
    under the remote login shell non-interactively.
    """

    def __init__(self, address, user, key_file, connect_timeout=30,
                 command_timeout=600, env=None):
        self.address = address
        self.user = user
        self.key_file = str(Path(key_file).expanduser())
        self.connect_timeout = connect_timeout
        self.command_timeout = command_timeout
        self.env = dict(env or {})
        # Reentrant: upload/download run helper commands while held.
        self._lock = threading.RLock()

    def _ssh_base(self):
        return [
            "ssh",
            "-i", self.key_file,
            "-o", "BatchMode=yes",
            "-o", "StrictHostKeyChecking=no",
            "-o", f"ConnectTimeout={self.connect_timeout}",
            f"{self.user}@{self.address}",
        ]

    def run(self, command, timeout=None):
        text = _as_shell_text(command)
        exports = "".join(
            f"export {k}={shlex.quote(str(v))}; " for k, v in self.env.items()
        )
        timeout = self.command_timeout if timeout is None else timeout
        with self._lock:
            started = time.time()
            try:
                proc = subprocess.run(
                    self._ssh_base() + [exports + text],
                    capture_output=True,
                    text=True,
                    timeout=timeout,
                )
            except subprocess.TimeoutExpired as exc:
                raise ChannelTimeout(
                    f"command timed out after {timeout}s on {self.address}: {text}",
                    stdout=_decode(exc.output),
                    stderr=_decode(exc.stderr),
                ) from exc
            except OSError as exc:
                raise ChannelError(f"cannot reach {self.address}: {exc}") from exc
            if proc.returncode == 255:
                # ssh itself reserves 255 for connection-level failures
                raise ChannelError(
                    f"connection to {self.address} failed: {proc.stderr.strip()}"
                )
            return CommandResult(
                exit_code=proc.returncode,
                stdout=proc.stdout,
                stderr=proc.stderr,
                duration=time.time() - started,
                started_at=started,
            )

    def _scp(self, args, timeout):
        cmd = [
            "scp",
            "-i", self.key_file,
            "-o", "BatchMode=yes",
            "-o", "StrictHostKeyChecking=no",
            "-o", f"ConnectTimeout={self.connect_timeout}",
            "-r",
        ] + args
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
        if proc.returncode != 0:
            raise ChannelError(
                f"transfer with {self.address} failed: {proc.stderr.strip()}"
            )

    def upload(self, local_path, remote_path):
        if not Path(local_path).exists():
            raise ChannelError(f"upload source {local_path} does not exist")
        with self._lock:
            self.run(f"mkdir -p {shlex.quote(str(Path(remote_path).parent))}")
            self._scp(
                [str(local_path), f"{self.user}@{self.address}:{remote_path}"],
                self.command_timeout,
            )

    def download(self, pattern, dest_dir):
        dest = Path(dest_dir)
        dest.mkdir(parents=True, exist_ok=True)
        with self._lock:
            listing = self.run(f"ls -1d {pattern} 2>/dev/null || true")
            names = [line for line in listing.stdout.splitlines() if line.strip()]
            retrieved = []
            for name in names:
                target = dest / name.lstrip("/")
                target.parent.mkdir(parents=True, exist_ok=True)
                self._scp(
                    [f"{self.user}@{self.address}:{name}", str(target)],
                    self.command_timeout,
                )
                retrieved.append(target)
        return retrieved


@dataclass
class RecordedCall:
    kind: str
    detail: str


class RecordingChannel:
    """Channel double: records every call, answers through a hook.

    respond, when given, is called with the command text and may return
    a CommandResult (or raise) to script failures; otherwise every
    command succeeds with empty output.
    """

    def __init__(self, name="", respond=None):
        self.name = name
        self.respond = respond
        self.calls = []
        self.files = {}
        self._lock = threading.Lock()

    def run(self, command, timeout=None):
        text = _as_shell_text(command)
        with self._lock:
            self.calls.append(RecordedCall("run", text))
        if self.respond is not None:
            result = self.respond(text)
            if result is not None:
                return result
        return CommandResult(0, "", "", 0.0, time.time())

    def upload(self, local_path, remote_path):
        data = Path(local_path).read_bytes()
        with self._lock:
            self.calls.append(RecordedCall("upload", str(remote_path)))
            self.files[str(remote_path)] = data

    def download(self, pattern, dest_dir):
        with self._lock:
            self.calls.append(RecordedCall("download", str(pattern)))
        return []

    def commands(self):
        return [c.detail for c in self.calls if c.kind == "run"]


def _decode(raw):
    if raw is None:
        return ""
    if isinstance(raw, bytes):
        return raw.decode("utf-8", "replace")
    return raw
