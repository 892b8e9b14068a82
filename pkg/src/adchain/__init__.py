"""adchain: a desk-scale simulator for a blockchain-backed,
privacy-preserving mobile advertising platform.

Modules: `profile` (on-device interest derivation), `admatch` (tf-idf
ad-to-interest assignment), `cryptokit` (keys, digests, hybrid envelopes),
`policy` (access-policy trees), `ledger` (transactions, Merkle batching),
`nodes` (the five simulated entities and their flows), `bench` (the
measurement suites) and `sim`/`cli` (scenario runner and command line).
"""

__version__ = "0.1.0"
