"""Stand-in benchmark runner with a YCSB-shaped command line:

    bench <load|run> <db> -s -P <properties-file> [-threads N]

Reads the workload properties file, connects to the server named by
mongodb.url, issues one bench request, and prints the two [OVERALL]
lines the metric patterns expect. The properties `stub_exit_code` and
`stub_runtime_ms` steer the stub for failure drills.
"""

from __future__ import annotations

import socket
import sys
import time
from urllib.parse import urlparse

VERSION = "stub bench 1.0"


def parse_properties(path):
    values = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    return values


def parse_argv(argv):
    positional = []
    options = {}
    index = 0
    while index < len(argv):
        arg = argv[index]
        if arg in ("-P", "-threads", "-p"):
            if index + 1 >= len(argv):
                raise SystemExit(f"option {arg} needs a value")
            options[arg] = argv[index + 1]
            index += 2
        elif arg.startswith("-"):
            index += 1
        else:
            positional.append(arg)
            index += 1
    return positional, options


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv and argv[0] == "--version":
        print(VERSION)
        return 0
    positional, options = parse_argv(argv)
    if not positional or "-P" not in options:
        print("usage: bench <load|run> <db> -s -P <file> [-threads N]",
              file=sys.stderr)
        return 2
    phase = positional[0]
    try:
        props = parse_properties(options["-P"])
    except OSError as exc:
        print(f"cannot read workload file: {exc}", file=sys.stderr)
        return 1
    url = props.get("mongodb.url", "")
    parsed = urlparse(url)
    host = parsed.hostname or "127.0.0.1"
    port = parsed.port or 27017
    threads = options.get("-threads", "1")
    records = props.get("recordcount", "0")
    started = time.time()
    try:
        with socket.create_connection((host, port), timeout=10) as conn:
            conn.sendall(
                f"bench {phase} records={records} threads={threads}\n".encode()
            )
            reply = conn.recv(65536).decode("utf-8", "replace").strip()
    except OSError as exc:
        print(f"connection to {host}:{port} failed: {exc}", file=sys.stderr)
        return 1
    if not reply.startswith("OK"):
        print(f"server rejected bench request: {reply}", file=sys.stderr)
        return 1
    elapsed_ms = max((time.time() - started) * 1000.0, 1.0)
    runtime_ms = float(props.get("stub_runtime_ms", elapsed_ms))
    ops = float(records) if float(records or 0) > 0 else 1000.0
    throughput = ops / (runtime_ms / 1000.0)
    print(f"[OVERALL], RunTime(ms), {runtime_ms:.1f}")
    print(f"[OVERALL], Throughput(ops/sec), {throughput:.2f}")
    return int(props.get("stub_exit_code", "0"))


if __name__ == "__main__":
    sys.exit(main())
