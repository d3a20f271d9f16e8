"""Float accounting for training state.

Persistent categories hold what lives across iterations; the transient peak
is the largest number of scratch floats an estimator held at once.  Frozen
model weights are not training state and never appear here.
"""

from __future__ import annotations

CATEGORIES = ("theta", "last_good", "moments", "buffer", "basis")


class TransientCounter:
    __slots__ = ("live", "peak")

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, n: int) -> None:
        self.live += n
        self.peak = max(self.peak, self.live)

    def free(self, n: int) -> None:
        self.live -= n


class AllocationLedger:
    def __init__(self):
        self.persistent = dict.fromkeys(CATEGORIES, 0)
        self.transient_peak = 0

    def set(self, category: str, floats: int) -> None:
        if category not in self.persistent:
            raise KeyError(f"unknown ledger category {category!r}")
        self.persistent[category] = int(floats)

    def note_transient(self, floats: int) -> None:
        self.transient_peak = max(self.transient_peak, int(floats))

    @property
    def total_persistent(self) -> int:
        return sum(self.persistent.values())

    def check(self, d: int, tau: int, basis_rows: int) -> None:
        """Raise if persistent floats exceed ``d*(tau+4) + basis_rows*d`` or the transient exceeds 3d.

        ``basis_rows`` is ``tau - i*`` for the default removal rule.
        """
        bound = d * (tau + 4) + max(basis_rows, 0) * d
        if self.total_persistent > bound:
            raise AssertionError(f"persistent floats {self.total_persistent} exceed bound {bound}")
        if self.transient_peak > 3 * d:
            raise AssertionError(f"estimator transient {self.transient_peak} exceeds 3d = {3 * d}")

    def report(self) -> dict:
        return {"persistent": dict(self.persistent), "persistent_total": self.total_persistent,
                "transient_peak": self.transient_peak}
