"""One-shot protocol client: sends a single request line to a stub
server and prints the reply. Exit 0 on an OK reply, 1 otherwise.

    client --port N <words...>
"""

from __future__ import annotations

import argparse
import socket
import sys


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("words", nargs="+")
    args = parser.parse_args(argv)
    request = " ".join(args.words)
    try:
        with socket.create_connection((args.host, args.port), timeout=10) as conn:
            conn.sendall((request + "\n").encode("utf-8"))
            reply = conn.recv(65536).decode("utf-8", "replace").strip()
    except OSError as exc:
        print(f"request failed: {exc}", file=sys.stderr)
        return 1
    print(reply)
    return 0 if reply.startswith("OK") else 1


if __name__ == "__main__":
    sys.exit(main())
