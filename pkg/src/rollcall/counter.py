"""The central tally service.

The counter accepts one wire line per exchange, enforces the per-round
acceptance window and token, counts each (round, nonce) pair at most once,
and appends every tally-relevant event to an append-only text log *before*
acknowledging, so replaying the log always reconstructs the exact state:

    <arrival_ms> ACCEPT <report line>
    <arrival_ms> REJECT <offending line>
    <arrival_ms> SURVEY <survey line>
    <arrival_ms> CLOSE <kind> <index>

Sync exchanges are answered but not logged; they carry no tally state.
"""

from __future__ import annotations

import os
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

from .protocol import (
    Ack,
    ExperimentConfig,
    MalformedLine,
    Reject,
    Report,
    RoundRef,
    Survey,
    SyncRequest,
    SyncResponse,
    decode_message,
    derive_token,
    encode_message,
)
from .timesync import Clock, SystemClock

MAX_LINE_BYTES = 8192

TAG_ACCEPT = "ACCEPT"
TAG_REJECT = "REJECT"
TAG_SURVEY = "SURVEY"
TAG_CLOSE = "CLOSE"
_TAGS = frozenset({TAG_ACCEPT, TAG_REJECT, TAG_SURVEY, TAG_CLOSE})


class CounterError(RuntimeError):
    """Invalid counter operation or a corrupt event log."""


@dataclass
class RoundTally:
    """Per-round result; immutable once closed."""

    round: RoundRef
    count: int
    window_open_ms: int
    window_close_ms: int
    closed: bool = False


@dataclass(frozen=True)
class LogEvent:
    arrival_ms: int
    tag: str
    raw: str

    def line(self) -> str:
        return f"{self.arrival_ms} {self.tag} {self.raw}"


def parse_log_line(line: str) -> LogEvent:
    parts = line.split(" ", 2)
    if len(parts) != 3 or not parts[0].lstrip("-").isdigit() or parts[1] not in _TAGS:
        raise CounterError(f"corrupt log line: {line!r}")
    return LogEvent(int(parts[0]), parts[1], parts[2])


def read_log(path: str | Path) -> list[LogEvent]:
    """Read a counter log, discarding a torn trailing line from a crash."""
    data = Path(path).read_bytes()
    if not data:
        return []
    complete, _, tail = data.rpartition(b"\n")
    # bytes after the final newline were never acknowledged; drop them
    text = complete.decode("utf-8")
    del tail
    return [parse_log_line(line) for line in text.splitlines()]


class EventLog:
    """Append-only sink; an append is durable before the caller proceeds."""

    def __init__(self, path: str | Path | None = None, fsync: bool = True) -> None:
        self.lines: list[str] = []
        self._fsync = fsync
        self._fh: IO[str] | None = None
        if path is not None:
            self._fh = open(path, "a", encoding="utf-8")

    def append(self, arrival_ms: int, tag: str, raw: str) -> str:
        line = f"{arrival_ms} {tag} {raw}"
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()
            if self._fsync:
                os.fsync(self._fh.fileno())
        return line

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class CounterCore:
    """Tally state machine; callers serialize access (see CounterService)."""

    def __init__(self, config: ExperimentConfig, log: EventLog | None = None) -> None:
        self.config = config
        self.log = log if log is not None else EventLog()
        self.tallies: dict[RoundRef, RoundTally] = {
            r: RoundTally(r, 0, config.window_open(r), config.window_close(r))
            for r in config.rounds()
        }
        self.seen: set[tuple[RoundRef, str]] = set()
        self.surveys: list[Survey] = []

    # -- ingest ---------------------------------------------------------

    def accept_report(self, report: Report, arrival_ms: int) -> Ack | Reject:
        raw = encode_message(report)
        reason = self._rejection_reason(report, arrival_ms)
        if reason is not None:
            self.log.append(arrival_ms, TAG_REJECT, raw)
            return Reject(reason)
        self.log.append(arrival_ms, TAG_ACCEPT, raw)
        self.seen.add((report.round, report.nonce))
        self.tallies[report.round].count += 1
        return Ack(report.round)

    def _rejection_reason(self, report: Report, arrival_ms: int) -> str | None:
        if report.token != derive_token(self.config.secret, report.round):
            return "BADTOKEN"
        if not self.config.has_round(report.round):
            return "BADROUND"
        tally = self.tallies[report.round]
        if arrival_ms < tally.window_open_ms:
            return "EARLY"
        if arrival_ms > tally.window_close_ms or tally.closed:
            return "LATE"
        if (report.round, report.nonce) in self.seen:
            return "DUP"
        return None

    def accept_survey(self, survey: Survey, arrival_ms: int) -> Ack:
        # surveys are never gated on participation; all of them are kept
        self.log.append(arrival_ms, TAG_SURVEY, encode_message(survey))
        self.surveys.append(survey)
        return Ack(RoundRef.exe())

    def handle_line(self, line: str, arrival_ms: int, send_ms: int | None = None) -> str:
        """Decode and dispatch one inbound line; always returns a response line."""
        try:
            msg = decode_message(line)
        except MalformedLine:
            self.log.append(arrival_ms, TAG_REJECT, line)
            return encode_message(Reject("MALFORMED"))
        if isinstance(msg, SyncRequest):
            t3 = arrival_ms if send_ms is None else send_ms
            return encode_message(SyncResponse(msg.t1, arrival_ms, t3))
        if isinstance(msg, Report):
            return encode_message(self.accept_report(msg, arrival_ms))
        if isinstance(msg, Survey):
            return encode_message(self.accept_survey(msg, arrival_ms))
        # a syntactically valid line that is not a client-to-counter message
        self.log.append(arrival_ms, TAG_REJECT, line)
        return encode_message(Reject("MALFORMED"))

    # -- round lifecycle --------------------------------------------------

    def close_round(self, round: RoundRef, now_ms: int) -> RoundTally:
        tally = self.tallies.get(round)
        if tally is None:
            raise CounterError(f"no such round: {round}")
        if tally.closed:
            return tally
        if now_ms <= tally.window_close_ms:
            raise CounterError(
                f"round {round.wire()} window is open until {tally.window_close_ms}"
            )
        tally.closed = True
        self.log.append(now_ms, TAG_CLOSE, round.wire())
        return tally

    def close_due(self, now_ms: int) -> list[RoundTally]:
        """Close every round whose acceptance window has passed."""
        return [
            self.close_round(t.round, now_ms)
            for t in self.tallies.values()
            if not t.closed and now_ms > t.window_close_ms
        ]

    def all_closed(self) -> bool:
        return all(t.closed for t in self.tallies.values())

    # -- reads -----------------------------------------------------------

    def distribution(self) -> tuple[list[int], int | None]:
        """Calibration counts in round order, plus the execution count if closed."""
        counts = []
        for i in range(self.config.n_rounds):
            tally = self.tallies[RoundRef.cal(i)]
            if not tally.closed:
                raise CounterError(f"calibration round {i} is still open")
            counts.append(tally.count)
        exe = self.tallies[RoundRef.exe()]
        return counts, exe.count if exe.closed else None


def replay_events(
    config: ExperimentConfig, events: Iterable[LogEvent], log: EventLog | None = None
) -> CounterCore:
    """Rebuild counter state from logged events.

    The log is authoritative: recorded outcomes are applied, not re-decided.
    Inconsistent events (an ACCEPT duplicating a seen pair, an unknown round)
    mean the log does not belong to this config and raise CounterError.
    """
    core = CounterCore(config, log=log)
    for event in events:
        if event.tag == TAG_ACCEPT:
            try:
                msg = decode_message(event.raw)
            except MalformedLine as exc:
                raise CounterError(f"corrupt ACCEPT event: {event.raw!r}") from exc
            if not isinstance(msg, Report) or not config.has_round(msg.round):
                raise CounterError(f"ACCEPT event is not a valid report: {event.raw!r}")
            key = (msg.round, msg.nonce)
            if key in core.seen:
                raise CounterError(f"log accepts {key} twice")
            core.seen.add(key)
            core.tallies[msg.round].count += 1
        elif event.tag == TAG_SURVEY:
            msg = decode_message(event.raw)
            if not isinstance(msg, Survey):
                raise CounterError(f"SURVEY event is not a survey: {event.raw!r}")
            core.surveys.append(msg)
        elif event.tag == TAG_CLOSE:
            kind, _, index = event.raw.partition(" ")
            try:
                round = RoundRef(kind, int(index))
            except ValueError as exc:
                raise CounterError(f"corrupt CLOSE event: {event.raw!r}") from exc
            if round not in core.tallies:
                raise CounterError(f"CLOSE event for unknown round: {event.raw!r}")
            core.tallies[round].closed = True
        # REJECT events never mutated state; nothing to apply
    return core


def replay_log_file(
    config: ExperimentConfig, path: str | Path, attach: bool = True, fsync: bool = True
) -> CounterCore:
    """Recover state from a log file and keep appending to it when `attach`."""
    events = read_log(path) if Path(path).exists() else []
    log = EventLog(path, fsync=fsync) if attach else None
    return replay_events(config, events, log=log)


def log_distribution(events: Iterable[LogEvent]) -> tuple[list[int], int]:
    """Counts per closed round from a finished log, without needing the config.

    Requires every calibration round 0..n-1 and the execution round closed;
    n is inferred from the CLOSE events.
    """
    counts: dict[RoundRef, int] = {}
    seen: set[tuple[RoundRef, str]] = set()
    closed: set[RoundRef] = set()
    for event in events:
        if event.tag == TAG_ACCEPT:
            msg = decode_message(event.raw)
            if not isinstance(msg, Report):
                raise CounterError(f"ACCEPT event is not a report: {event.raw!r}")
            key = (msg.round, msg.nonce)
            if key in seen:
                raise CounterError(f"log accepts {key} twice")
            seen.add(key)
            counts[msg.round] = counts.get(msg.round, 0) + 1
        elif event.tag == TAG_CLOSE:
            kind, _, index = event.raw.partition(" ")
            closed.add(RoundRef(kind, int(index)))
    cal_indices = sorted(r.index for r in closed if not r.is_execution)
    if not cal_indices or cal_indices != list(range(cal_indices[-1] + 1)):
        raise CounterError("log is incomplete: not every calibration round is closed")
    if RoundRef.exe() not in closed:
        raise CounterError("log is incomplete: the execution round is not closed")
    if any(r not in closed for r in counts):
        raise CounterError("log accepts reports for a round that never closed")
    cal_counts = [counts.get(RoundRef.cal(i), 0) for i in cal_indices]
    return cal_counts, counts.get(RoundRef.exe(), 0)


# --- TCP service -------------------------------------------------------------


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: CounterService = self.server.service  # type: ignore[attr-defined]
        while True:
            raw = self.rfile.readline(MAX_LINE_BYTES)
            if not raw:
                return
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError:
                line = ""
            response = service.handle(line)
            try:
                self.wfile.write(response.encode("utf-8") + b"\n")
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class CounterService:
    """TCP front end: serialized core access, lazy round closing, durable log.

    With `until_complete` the service shuts itself down once every round is
    closed, which keeps scripted runs and tests from hanging.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        address: tuple[str, int],
        log_path: str | Path | None = None,
        *,
        fsync: bool = True,
        clock: Clock | None = None,
        until_complete: bool = False,
        close_poll_ms: int = 200,
    ) -> None:
        self.config = config
        self.clock = clock if clock is not None else SystemClock()
        self._lock = threading.Lock()
        self._until_complete = until_complete
        self._close_poll_ms = close_poll_ms
        if log_path is not None:
            self.core = replay_log_file(config, log_path, attach=True, fsync=fsync)
        else:
            self.core = CounterCore(config)
        self._server = _Server(address, _LineHandler)
        self._server.service = self  # type: ignore[attr-defined]
        self._closer = threading.Thread(target=self._close_loop, daemon=True)
        self._stopping = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    def handle(self, line: str) -> str:
        arrival = self.clock.now_ms()
        with self._lock:
            self.core.close_due(arrival)
            return self.core.handle_line(line, arrival, send_ms=self.clock.now_ms())

    def snapshot_distribution(self) -> tuple[list[int], int | None]:
        """Consistent read of the tallies, closing whatever is already due."""
        with self._lock:
            self.core.close_due(self.clock.now_ms())
            return self.core.distribution()

    def _close_loop(self) -> None:
        while not self._stopping.wait(self._close_poll_ms / 1000.0):
            with self._lock:
                self.core.close_due(self.clock.now_ms())
                done = self.core.all_closed()
            if done and self._until_complete:
                self.shutdown()
                return

    def serve_forever(self) -> None:
        self._closer.start()
        try:
            self._server.serve_forever(poll_interval=0.1)
        finally:
            self._stopping.set()
            self._server.server_close()
            self.core.log.close()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self) -> None:
        self._stopping.set()
        self._server.shutdown()
