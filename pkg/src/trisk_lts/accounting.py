"""Work ledger: counts of tendency evaluations per region and stage."""

from __future__ import annotations

import csv
import threading
import time
from collections import defaultdict
from contextlib import contextmanager


class WorkLedger:
    """Owned-element tendency evaluations, keyed by (region, stage).

    Counters only grow; ``reset`` is meant for the start of a run.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.cell_evals = defaultdict(int)
        self.edge_evals = defaultdict(int)
        self.calls = defaultdict(int)
        self.wall_time = defaultdict(float)

    def reset(self):
        with self._lock:
            self.cell_evals.clear()
            self.edge_evals.clear()
            self.calls.clear()
            self.wall_time.clear()

    def add(self, region, stage, n_cells, n_edges, times=1):
        with self._lock:
            self.cell_evals[(region, stage)] += int(n_cells) * times
            self.edge_evals[(region, stage)] += int(n_edges) * times

    def add_counts(self, stage, cell_counts, edge_counts, times=1):
        """Add per-region counts, ``{region: n}`` for cells and for edges."""
        with self._lock:
            for name, n in cell_counts.items():
                self.cell_evals[(name, stage)] += int(n) * times
            for name, n in edge_counts.items():
                self.edge_evals[(name, stage)] += int(n) * times
            self.calls[stage] += times

    @contextmanager
    def timed(self, phase):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            with self._lock:
                self.wall_time[phase] += time.perf_counter() - t0

    def total_cells(self, region=None, stage=None):
        return sum(n for (r, s), n in self.cell_evals.items()
                   if (region is None or r == region) and (stage is None or s == stage))

    def total_edges(self, region=None, stage=None):
        return sum(n for (r, s), n in self.edge_evals.items()
                   if (region is None or r == region) and (stage is None or s == stage))

    def total_work(self):
        """Cell plus edge evaluations: the machine-independent cost surrogate."""
        return self.total_cells() + self.total_edges()

    def as_rows(self):
        keys = sorted(set(self.cell_evals) | set(self.edge_evals))
        return [(r, s, self.cell_evals.get((r, s), 0), self.edge_evals.get((r, s), 0)) for r, s in keys]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "stage", "cell_evals", "edge_evals"])
            for row in self.as_rows():
                w.writerow(row)

    def __eq__(self, other):
        if not isinstance(other, WorkLedger):
            return NotImplemented
        return self.as_rows() == other.as_rows()


def read_ledger_csv(path):
    led = WorkLedger()
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            led.add(row["region"], row["stage"], int(row["cell_evals"]), int(row["edge_evals"]))
    return led

