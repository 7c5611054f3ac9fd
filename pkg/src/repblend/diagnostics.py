"""Process-wide counters for degenerate numeric cases.

Several operations define a fallback instead of raising (zero-norm vectors
in cosine similarity, batches of one image, samples with no known label).
Each fallback bumps a named counter here so training anomalies stay visible
without poisoning the run with NaNs or exceptions.
"""

from __future__ import annotations

from collections import Counter


class DiagnosticCounters:
    def __init__(self) -> None:
        self._counts: Counter[str] = Counter()

    def increment(self, name: str, amount: int = 1) -> None:
        self._counts[name] += amount

    def count(self, name: str) -> int:
        return self._counts[name]

    def snapshot(self) -> dict[str, int]:
        return dict(self._counts)

    def reset(self, name: str | None = None) -> None:
        if name is None:
            self._counts.clear()
        else:
            self._counts.pop(name, None)


# Shared instance used across the package; tests may reset() it.
counters = DiagnosticCounters()
