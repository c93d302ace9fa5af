"""Reproducible, splittable random streams.

Every stream is keyed by ``(seed, stream_id)`` and backed by numpy's
counter-based Philox generator, so a stream's output never depends on how
many other streams exist or in which order they are consumed.  A stream id is
either a single non-negative integer or a tuple of them, which lets callers
address substreams such as ``(run, purpose, step)`` directly.
"""

from __future__ import annotations

from typing import Tuple, Union

import numpy as np

StreamId = Union[int, Tuple[int, ...]]

_TWO_PI = 2.0 * np.pi


def _as_key(stream_id: StreamId) -> Tuple[int, ...]:
    key = (stream_id,) if isinstance(stream_id, (int, np.integer)) else tuple(stream_id)
    for k in key:
        if int(k) < 0 or int(k) >= 2**64:
            raise ValueError(f"stream id components must be 64-bit unsigned, got {k}")
    return tuple(int(k) for k in key)


class RngStream:
    """A deterministic random stream identified by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: StreamId = 0):
        if int(seed) < 0 or int(seed) >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream_id = _as_key(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, *ids: int) -> "RngStream":
        """Stream keyed by this stream's id extended with ``ids``."""
        return RngStream(self.seed, self.stream_id + _as_key(ids))

    def uniform(self, size) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller.

        Consumes exactly ``2 * ceil(n / 2)`` uniforms for ``n`` requested
        values, so the stream position after a call depends only on ``size``.
        """
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        if count == 0:
            return np.zeros(shape)
        half = (count + 1) // 2
        u = self._gen.random(2 * half)
        radius = np.sqrt(-2.0 * np.log1p(-u[:half]))
        angle = _TWO_PI * u[half:]
        out = np.empty(2 * half)
        out[:half] = radius * np.cos(angle)
        out[half:] = radius * np.sin(angle)
        return out[:count].reshape(shape)


def make_stream(seed: int, stream_id: StreamId = 0) -> RngStream:
    return RngStream(seed, stream_id)


def sample_std_normal(stream: RngStream, count: int) -> np.ndarray:
    if count < 0:
        raise ValueError("count must be non-negative")
    return stream.normal(count)
