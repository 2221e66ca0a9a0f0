"""End-to-end secure firmware update: OEM authorization tokens, TUF-style
repository metadata, an untrusted mirror, a verifying controller, and a
simulated constrained device, plus a deterministic scenario/bench harness."""

__version__ = "0.1.0"
