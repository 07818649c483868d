"""In-process multi-rank message fabric.

Each rank runs on its own thread and talks to the others only through the
collectives on :class:`Fabric`. A collective is one lockstep exchange: every
rank enqueues exactly one message for every rank (empty if it has nothing to
say), all ranks meet at a barrier, then each rank dequeues one message from
each peer. Per-pair queues are FIFO, so delivery is ordered and exactly-once.

Byte accounting (the pinned encoding used by the cost model):

* every message to a *remote* rank costs ``HEADER_BYTES`` of incidental data;
  messages a rank sends to itself never touch the wire and cost nothing;
* for :meth:`Fabric.relay`, payload bytes (request out + response back) are
  charged to the requesting rank;
* for :meth:`Fabric.all_to_all`, payload bytes are charged to the receiver.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

HEADER_BYTES = 16  # type, src, length, tag


class FabricError(RuntimeError):
    pass


class RelayAborted(FabricError):
    """Raised on every rank when some other rank failed inside a collective."""


class ProtocolError(FabricError):
    pass


class RankFailure(RuntimeError):
    def __init__(self, rank: int, phase: str, cause: BaseException):
        super().__init__(f"rank {rank} failed during {phase}: {cause!r}")
        self.rank = rank
        self.phase = phase
        self.cause = cause


def nbytes(payload) -> int:
    if payload is None:
        return 0
    if isinstance(payload, (bytes, bytearray, memoryview)):
        return len(payload)
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, (tuple, list)):
        return sum(nbytes(p) for p in payload)
    raise TypeError(f"cannot size payload of type {type(payload).__name__}")


def _copy(payload):
    if isinstance(payload, np.ndarray):
        return payload.copy()
    if isinstance(payload, (tuple, list)):
        return type(payload)(_copy(p) for p in payload)
    return payload


@dataclass
class CommCounters:
    relays: int = 0
    features_fetched_remote: int = 0
    features_fetched_total: int = 0
    cache_rows_fetched_remote: int = 0
    cache_rows_fetched_total: int = 0
    payload_bytes: int = 0
    incidental_bytes: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    relays_by_tag: dict[str, int] = field(default_factory=dict)
    payload_by_tag: dict[str, int] = field(default_factory=dict)

    def copy(self) -> "CommCounters":
        d = asdict(self)
        return CommCounters(**d)

    def relays_with_prefix(self, prefix: str) -> int:
        return sum(v for k, v in self.relays_by_tag.items() if k.startswith(prefix))

    def payload_with_prefix(self, prefix: str) -> int:
        return sum(v for k, v in self.payload_by_tag.items() if k.startswith(prefix))

    def minus(self, other: "CommCounters") -> "CommCounters":
        """Field-wise difference, for measuring one span of work."""
        out = CommCounters()
        for name in ("relays", "features_fetched_remote", "features_fetched_total",
                     "cache_rows_fetched_remote", "cache_rows_fetched_total",
                     "payload_bytes", "incidental_bytes", "bytes_sent", "bytes_received"):
            setattr(out, name, getattr(self, name) - getattr(other, name))
        for name in ("relays_by_tag", "payload_by_tag"):
            a, b = getattr(self, name), getattr(other, name)
            diff = {k: a.get(k, 0) - b.get(k, 0) for k in sorted(set(a) | set(b))}
            setattr(out, name, {k: v for k, v in diff.items() if v})
        return out

    def to_lines(self, **labels) -> list[str]:
        """key=value lines; ``labels`` (e.g. rank, epoch) prefix every line."""
        prefix = " ".join(f"{k}={v}" for k, v in labels.items())
        out = []
        for name, value in asdict(self).items():
            if isinstance(value, dict):
                for tag, v in sorted(value.items()):
                    out.append(f"{prefix} {name}.{tag}={v}".strip())
            else:
                out.append(f"{prefix} {name}={value}".strip())
        return out


class Fabric:
    def __init__(self, num_ranks: int, header_bytes: int = HEADER_BYTES):
        if num_ranks < 1:
            raise ValueError("num_ranks must be >= 1")
        self.num_ranks = num_ranks
        self.header_bytes = header_bytes
        self._queues = {(s, d): deque() for s in range(num_ranks) for d in range(num_ranks)}
        self._barrier = threading.Barrier(num_ranks)
        self.counters = [CommCounters() for _ in range(num_ranks)]
        self.phase = ["idle"] * num_ranks

    # -- plumbing -----------------------------------------------------------

    def abort(self) -> None:
        self._barrier.abort()

    def _sync(self) -> None:
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise RelayAborted("a peer rank failed during a collective") from None

    def _exchange(self, rank: int, outgoing: dict[int, Any], tag: str) -> list[Any]:
        for dst in range(self.num_ranks):
            self._queues[rank, dst].append((tag, _copy(outgoing.get(dst))))
        self._sync()
        incoming = []
        for src in range(self.num_ranks):
            got_tag, payload = self._queues[src, rank].popleft()
            if got_tag != tag:
                self.abort()
                raise ProtocolError(f"rank {rank} in collective {tag!r} got message for {got_tag!r} from rank {src}")
            incoming.append(payload)
        return incoming

    def _count_relay(self, rank: int, tag: str) -> CommCounters:
        c = self.counters[rank]
        c.relays += 1
        c.relays_by_tag[tag] = c.relays_by_tag.get(tag, 0) + 1
        c.payload_by_tag.setdefault(tag, 0)
        c.incidental_bytes += self.header_bytes * 2 * (self.num_ranks - 1)
        return c

    # -- collectives ---------------------------------------------------------

    def relay(
        self,
        rank: int,
        requests: dict[int, Any],
        handler: Callable[[int, Any], Any],
        tag: str = "relay",
    ) -> dict[int, Any]:
        """One request/response round.

        ``requests`` maps destination rank to payload. ``handler(src, payload)``
        serves requests that arrive at this rank. Returns ``{dst: response}`` for
        every destination this rank sent a (non-None) request to.
        """
        incoming = self._exchange(rank, requests, tag + "/req")
        responses: dict[int, Any] = {}
        try:
            for src, req in enumerate(incoming):
                if req is not None:
                    responses[src] = handler(src, req)
        except BaseException:
            self.abort()
            raise
        answers = self._exchange(rank, responses, tag + "/resp")

        c = self._count_relay(rank, tag)
        out = {}
        for dst, req in requests.items():
            if req is None:
                continue
            out[dst] = answers[dst]
            if dst != rank:
                moved = nbytes(req) + nbytes(answers[dst])
                c.payload_bytes += moved
                c.payload_by_tag[tag] += moved
                c.bytes_sent += nbytes(req)
                c.bytes_received += nbytes(answers[dst])
        for src, resp in responses.items():
            if src != rank:
                c.bytes_received += nbytes(incoming[src])
                c.bytes_sent += nbytes(resp)
        return out

    def all_to_all(self, rank: int, payloads: dict[int, Any], tag: str = "a2a") -> dict[int, Any]:
        """Rank ``rank`` sends ``payloads[d]`` to each ``d``; returns ``{src: payload}``."""
        incoming = self._exchange(rank, payloads, tag)
        c = self._count_relay(rank, tag)
        for dst, p in payloads.items():
            if dst != rank:
                c.bytes_sent += nbytes(p)
        out = {}
        for src, p in enumerate(incoming):
            if p is None:
                continue
            out[src] = p
            if src != rank:
                c.payload_bytes += nbytes(p)
                c.payload_by_tag[tag] += nbytes(p)
                c.bytes_received += nbytes(p)
        return out

    def allreduce_mean(self, rank: int, vec: np.ndarray, tag: str = "grad") -> np.ndarray:
        """Mean over ranks, summed in rank order so every rank gets identical bits."""
        got = self.all_to_all(rank, {d: vec for d in range(self.num_ranks)}, tag)
        acc = got[0].copy()
        for src in range(1, self.num_ranks):
            acc += got[src]
        acc /= vec.dtype.type(self.num_ranks)
        return acc

    def allgather(self, rank: int, value: np.ndarray, tag: str = "control") -> list[np.ndarray]:
        got = self.all_to_all(rank, {d: value for d in range(self.num_ranks)}, tag)
        return [got[s] for s in range(self.num_ranks)]

    def barrier(self, rank: int) -> None:
        self._sync()

    # -- counters ------------------------------------------------------------

    def snapshot_counters(self, rank: int) -> CommCounters:
        return self.counters[rank].copy()

    def reset_counters(self, rank: int) -> None:
        self.counters[rank] = CommCounters()


def run_ranks(fabric: Fabric, target: Callable[[int], Any]) -> list[Any]:
    """Run ``target(rank)`` on one thread per rank and join them.

    The first genuine failure (not a secondary :class:`RelayAborted`) is
    re-raised as :class:`RankFailure` carrying the rank and its last phase.
    """
    n = fabric.num_ranks
    results: list[Any] = [None] * n
    errors: list[BaseException | None] = [None] * n

    def body(rank: int) -> None:
        try:
            results[rank] = target(rank)
        except BaseException as exc:  # noqa: BLE001 - forwarded to caller
            errors[rank] = exc
            fabric.abort()

    if n == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    failed = [(r, e) for r, e in enumerate(errors) if e is not None]
    if failed:
        primary = next(((r, e) for r, e in failed if not isinstance(e, RelayAborted)), failed[0])
        rank, exc = primary
        raise RankFailure(rank, fabric.phase[rank], exc) from exc
    return results
