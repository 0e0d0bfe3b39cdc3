"""Object ledger with sponsored transactions, zkLogin-style authentication and hash-locked escrow."""

__version__ = "0.1.0"
