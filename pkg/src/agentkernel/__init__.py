"""Deterministic reliability kernel for tool-using agents.

Typed tool contracts, a permissioned execution gateway, governed memory,
budgeted planning and search, a multi-agent dialogue engine, a safety
supervisor and a hash-chained audit log with bit-exact replay.
"""

__version__ = "0.1.0"

# Recorded in every trace header; replay refuses traces built by other versions.
COMPONENT_VERSIONS = {
    "kernel": __version__,
    "contracts": "1.0",
    "gateway": "1.0",
    "memory": "1.0",
    "planner": "1.0",
    "assurance": "1.0",
    "protocol": "1.0",
    "audit": "1.0",
    "harness": "1.0",
}
