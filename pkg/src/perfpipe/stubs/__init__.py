"""Desk-scale stand-ins for the server and benchmark binaries.

These exist so the whole pipeline can run for real (processes, ports,
pidfiles, logs) on one machine. They speak a one-line-per-request text
protocol over TCP and deliberately log with benign wording so a clean
run stays clean under log scanning.
"""
