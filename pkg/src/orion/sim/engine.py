"""Deterministic discrete-event core: one clock, one queue, one seeded RNG."""

from __future__ import annotations

import enum
import heapq
import json
import random
from typing import Callable

from ..core import ReplicaId


def _plain(value):
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()[:16]
    if isinstance(value, ReplicaId):
        return str(value)
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class Trace:
    """Append-only event log; one JSON object per line with sorted keys."""

    def __init__(self):
        self.records: list = []

    def add(self, t: int, replica, ev: str, fields: dict):
        rec = {k: _plain(v) for k, v in fields.items()}
        rec["t"] = t
        rec["ev"] = ev
        rec["replica"] = str(replica) if replica is not None else None
        rec["seq"] = len(self.records)
        self.records.append(rec)

    def lines(self):
        for rec in self.records:
            yield json.dumps(rec, sort_keys=True, separators=(",", ":"))

    def to_bytes(self) -> bytes:
        return ("\n".join(self.lines()) + "\n").encode()

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line)
                fh.write("\n")

    @staticmethod
    def read(path) -> list:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


class Simulator:
    def __init__(self, seed: int):
        self.now = 0
        self.rng = random.Random(seed)
        self.trace = Trace()
        self._queue: list = []
        self._seq = 0
        self.stopped = False

    def at(self, time: int, fn: Callable, *args):
        self._seq += 1
        heapq.heappush(self._queue, (max(time, self.now), self._seq, fn, args))

    def after(self, delay: int, fn: Callable, *args):
        self.at(self.now + delay, fn, *args)

    def run(self, until: int, stop: Callable[[], bool] = lambda: False):
        while self._queue and not self.stopped:
            time, _, fn, args = self._queue[0]
            if time > until:
                break
            heapq.heappop(self._queue)
            self.now = time
            fn(*args)
            if stop():
                break
        return self.now

    def pending(self) -> int:
        return len(self._queue)
