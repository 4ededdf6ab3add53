"""DatChain: an IoT data marketplace on a local distributed ledger.

Sensor payloads are encrypted at rest and every marketplace action is
committed to a ledger — a hash-linked block chain or a Tangle-style DAG
— under a pluggable consensus engine. Ships with a deterministic
multi-node simulator, an HTTP service, and an operator CLI.
"""

__version__ = "0.1.0"
