"""Stand-in database node: binds a loopback port, answers the line
protocol, and behaves like a well-mannered daemon (pidfile after bind,
graceful stop on SIGTERM).

Protocol, one line per connection:
    ping                        -> OK pong
    initiate <group> <members>  -> OK initiated <group>
    bench <args...>             -> OK bench done
"""

from __future__ import annotations

import argparse
import os
import signal
import socket
import sys
import time
from pathlib import Path


class Server:
    def __init__(self, args):
        self.args = args
        self.log_path = Path(args.log)
        self.running = True
        self.group = None

    def log(self, message):
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        with open(self.log_path, "a", encoding="utf-8") as handle:
            handle.write(f"{stamp} note: {message}\n")

    def handle(self, line):
        parts = line.split()
        if not parts:
            return "ERR empty request"
        verb = parts[0]
        if verb == "ping":
            self.log("request ping")
            return "OK pong"
        if verb == "initiate":
            self.group = parts[1] if len(parts) > 1 else "?"
            members = parts[2] if len(parts) > 2 else ""
            self.log(f"initiated group {self.group} members {members}")
            return f"OK initiated {self.group}"
        if verb == "bench":
            self.log(f"bench request: {' '.join(parts[1:])}")
            if self.args.data_dir:
                data = Path(self.args.data_dir)
                data.mkdir(parents=True, exist_ok=True)
                with open(data / "records.dat", "a", encoding="utf-8") as handle:
                    handle.write(f"{time.time()} {' '.join(parts[1:])}\n")
            return "OK bench done"
        self.log(f"unrecognized request {verb!r}")
        return "ERR unrecognized request"

    def stop(self, signum, frame):
        if self.args.ignore_sigterm:
            self.log("termination request ignored by configuration")
            return
        self.log("stopping on termination request")
        self.running = False

    def serve(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(("127.0.0.1", self.args.port))
        sock.listen(16)
        sock.settimeout(0.2)
        # Only advertise the pid once the port is actually ours, so a
        # readable pidfile means the node accepts connections.
        Path(self.args.pidfile).parent.mkdir(parents=True, exist_ok=True)
        Path(self.args.pidfile).write_text(f"{os.getpid()}\n", encoding="utf-8")
        self.log(f"listening on 127.0.0.1:{self.args.port} pid {os.getpid()}")
        signal.signal(signal.SIGTERM, self.stop)
        signal.signal(signal.SIGINT, self.stop)
        while self.running:
            try:
                conn, _ = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                try:
                    data = conn.recv(65536).decode("utf-8", "replace")
                    reply = self.handle(data.strip())
                    conn.sendall((reply + "\n").encode("utf-8"))
                except OSError:
                    pass
        sock.close()
        # A stale pidfile would fool the next deploy's readiness poll.
        Path(self.args.pidfile).unlink(missing_ok=True)
        self.log("stopped")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--pidfile", required=True)
    parser.add_argument("--log", required=True)
    parser.add_argument("--data-dir", default="")
    parser.add_argument("--ignore-sigterm", action="store_true")
    args = parser.parse_args(argv)
    Path(args.log).parent.mkdir(parents=True, exist_ok=True)
    server = Server(args)
    try:
        server.serve()
    except OSError as exc:
        server.log(f"unable to serve on port {args.port}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
