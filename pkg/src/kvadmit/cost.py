"""Parametric timing model for prefill, decode and host<->device transfers."""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from kvadmit.errors import ConfigError


@dataclass(frozen=True)
class CostParams:
    """Simulated-latency coefficients (seconds, bytes)."""

    prefill_linear: float
    prefill_quadratic: float
    decode_base: float
    decode_context: float
    bytes_per_token: float
    pcie_bandwidth: float
    transfer_sync_overhead: float

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"cost.{f.name} must be >= 0")
        if self.pcie_bandwidth <= 0:
            raise ConfigError("cost.pcie_bandwidth must be > 0")

    @classmethod
    def defaults(cls) -> "CostParams":
        return cls(**load_defaults()["cost"])

    def replace(self, **changes) -> "CostParams":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(changes) - set(values)
        if unknown:
            raise ConfigError(f"unknown cost keys: {sorted(unknown)}")
        values.update(changes)
        return CostParams(**values)


def load_defaults() -> dict:
    """The versioned calibration file shipped with the package."""
    text = resources.files("kvadmit").joinpath("data/defaults.toml").read_text()
    return tomllib.loads(text)


def prefill_time(params: CostParams, new_tokens: int, context_len: int) -> float:
    """Time to prefill ``new_tokens`` at the end of a ``context_len`` context.

    Attention over the whole context makes this quadratic when the entire
    prefix is recomputed (``new_tokens == context_len``).
    """
    if new_tokens < 0 or context_len < new_tokens:
        raise ValueError(f"bad prefill shape new={new_tokens} ctx={context_len}")
    return (params.prefill_linear * new_tokens
            + params.prefill_quadratic * new_tokens * context_len)


def decode_time(params: CostParams, decode_len: int, context_len: int) -> float:
    """Sum of per-token decode costs; token ``j`` sees ``context_len + j``."""
    if decode_len < 0:
        raise ValueError("decode_len must be >= 0")
    if decode_len == 0:
        return 0.0
    ctx_sum = decode_len * context_len + decode_len * (decode_len - 1) / 2
    return params.decode_base * decode_len + params.decode_context * ctx_sum


def decode_iteration_time(params: CostParams, batch_context: float) -> float:
    """One batched decode iteration; every member emits one token.

    ``batch_context`` is the summed context length of the batch. A batch of
    one request whose context is ``ctx + (n - 1) / 2`` reproduces
    :func:`decode_time` exactly over ``n`` iterations.
    """
    return params.decode_base + params.decode_context * batch_context


def transfer_time(params: CostParams, nbytes: float, concurrent_transfers: int) -> float:
    """Fair-share PCIe model: bandwidth divides across concurrent transfers."""
    if concurrent_transfers < 1:
        raise ValueError("concurrent_transfers must be >= 1")
    return (params.transfer_sync_overhead
            + nbytes * concurrent_transfers / params.pcie_bandwidth)


def offload_crossover(params: CostParams, nbytes: float, tokens: int,
                      max_concurrency: int = 64) -> int | None:
    """Smallest concurrency at which moving ``nbytes`` costs more than
    recomputing ``tokens`` from scratch, or None if it never does."""
    recompute = prefill_time(params, tokens, tokens)
    for c in range(1, max_concurrency + 1):
        if transfer_time(params, nbytes, c) > recompute:
            return c
    return None
