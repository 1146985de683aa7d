"""The distributed volunteer client.

Per round: prompt the user, monitor the no-interaction window, and report
compliance to the counter; at the execution round, certify the shutdown from
uptime records after reconnection and offer the questionnaire when the plan
was not followed.

Activity events and uptime records come from pluggable sources (plain-text
files in the shipped implementations; the simulator injects them), so the
decision logic stays deterministic and testable. Real OS input hooks and
actual power-off are deployment adapters, not part of this package.
"""

from __future__ import annotations

import secrets
import socket
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .protocol import (
    Ack,
    ExperimentConfig,
    MalformedLine,
    Reject,
    Report,
    RoundRef,
    Survey,
    SyncResponse,
    decode_message,
    derive_token,
    encode_message,
)
from .timesync import (
    Clock,
    ClockEstimate,
    ClockSyncError,
    SyncSample,
    best_estimate,
    wait_until,
)

DEFAULT_PROMPT_LEAD_MS = 120_000
DEFAULT_START_TOL_MS = 60_000


class ClientError(RuntimeError):
    """Unrecoverable client-side failure (e.g. the counter never answered)."""


class TransportError(RuntimeError):
    """A request could not be delivered or answered."""


class Transport(Protocol):
    def request(self, line: str) -> str: ...


class TcpTransport:
    """One-line-per-exchange client over a persistent TCP connection."""

    def __init__(self, host: str, port: int, timeout_s: float = 5.0) -> None:
        self.host = host
        self.port = port
        self.timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._rfile = None

    def _connect(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout_s)
        self._sock = sock
        self._rfile = sock.makefile("rb")

    def request(self, line: str) -> str:
        try:
            if self._sock is None:
                self._connect()
            assert self._sock is not None and self._rfile is not None
            self._sock.sendall(line.encode("utf-8") + b"\n")
            raw = self._rfile.readline()
            if not raw:
                raise ConnectionError("counter closed the connection")
            return raw.decode("utf-8").rstrip("\r\n")
        except (OSError, ConnectionError) as exc:
            self.close()
            raise TransportError(str(exc)) from exc

    def close(self) -> None:
        if self._rfile is not None:
            try:
                self._rfile.close()
            except OSError:
                pass
            self._rfile = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None


# --- domain types and pure decision core -------------------------------------


@dataclass(frozen=True)
class ActivityEvent:
    """One mechanical input event (keyboard/pointer), in counter time."""

    timestamp_ms: int


@dataclass(frozen=True)
class UptimeRecord:
    kind: str  # DOWN or UP
    timestamp_ms: int

    def __post_init__(self) -> None:
        if self.kind not in ("DOWN", "UP"):
            raise ValueError(f"uptime record kind must be DOWN or UP, got {self.kind!r}")


class RoundOutcome(Enum):
    REPORTED = "REPORTED"
    DECLINED = "DECLINED"
    VIOLATED = "VIOLATED"
    SKIPPED = "SKIPPED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class NextRound:
    round: RoundRef
    start_ms: int
    prompt_ms: int
    report_open_ms: int
    report_close_ms: int


def next_wakeup(
    config: ExperimentConfig, now_counter_ms: int, prompt_lead_ms: int = DEFAULT_PROMPT_LEAD_MS
) -> NextRound | None:
    """Earliest round this client can still take part in, or None when done.

    A calibration round needs the client present from its start (monitoring is
    live), so it is only offered while its start lies ahead. The execution
    round is certified retrospectively from uptime records and stays available
    until its report window closes.
    """

    def bundle(round: RoundRef) -> NextRound:
        start = config.round_start(round)
        return NextRound(
            round=round,
            start_ms=start,
            prompt_ms=start - prompt_lead_ms,
            report_open_ms=config.window_open(round),
            report_close_ms=config.window_close(round),
        )

    for i in range(config.n_rounds):
        if now_counter_ms <= config.round_start(RoundRef.cal(i)):
            return bundle(RoundRef.cal(i))
    exe = RoundRef.exe()
    if now_counter_ms <= config.window_close(exe):
        return bundle(exe)
    return None


def first_violation(
    events: Iterable[ActivityEvent], start_ms: int, end_ms: int
) -> int | None:
    """Timestamp of the first input event inside [start_ms, end_ms], if any."""
    hits = [e.timestamp_ms for e in events if start_ms <= e.timestamp_ms <= end_ms]
    return min(hits) if hits else None


def records_well_formed(records: Iterable[UptimeRecord]) -> bool:
    """True when kinds alternate DOWN/UP and timestamps never decrease."""
    last_kind: str | None = None
    last_ts: int | None = None
    for record in records:
        if record.kind == last_kind:
            return False
        if last_ts is not None and record.timestamp_ms < last_ts:
            return False
        last_kind = record.kind
        last_ts = record.timestamp_ms
    return True


def certify_shutdown(
    records: Iterable[UptimeRecord],
    config: ExperimentConfig,
    start_tol_ms: int = DEFAULT_START_TOL_MS,
) -> bool:
    """Whether the records show the host off for the whole shutdown window.

    Compliant when some DOWN at time d with its matching UP at time u
    satisfies d <= t* + start_tol and u >= t* + delta_tau. A malformed record
    stream is simply not compliant.
    """
    records = list(records)
    if not records_well_formed(records):
        return False
    need_from = config.t_star_ms + start_tol_ms
    need_until = config.t_star_ms + config.delta_tau_ms
    down_at: int | None = None
    for record in records:
        if record.kind == "DOWN":
            down_at = record.timestamp_ms
        elif down_at is not None:
            if down_at <= need_from and record.timestamp_ms >= need_until:
                return True
            down_at = None
    return False


# --- file-backed sources ------------------------------------------------------


def parse_activity_text(text: str) -> list[ActivityEvent]:
    """One integer millisecond timestamp per line; blanks and # comments skipped."""
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            events.append(ActivityEvent(int(line)))
        except ValueError as exc:
            raise ValueError(f"activity file line {lineno}: {raw!r}") from exc
    return events


def parse_uptime_text(text: str) -> list[UptimeRecord]:
    """Lines of `DOWN <ms>` / `UP <ms>`; blanks and # comments skipped."""
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("DOWN", "UP"):
            raise ValueError(f"uptime file line {lineno}: {raw!r}")
        try:
            records.append(UptimeRecord(parts[0], int(parts[1])))
        except ValueError as exc:
            raise ValueError(f"uptime file line {lineno}: {raw!r}") from exc
    return records


def activity_from_file(path: str | Path) -> Callable[[int, int], list[ActivityEvent]]:
    events = parse_activity_text(Path(path).read_text(encoding="utf-8"))

    def events_between(start_ms: int, end_ms: int) -> list[ActivityEvent]:
        return [e for e in events if start_ms <= e.timestamp_ms <= end_ms]

    return events_between


def uptime_from_file(path: str | Path) -> Callable[[], list[UptimeRecord]]:
    path = Path(path)

    def read() -> list[UptimeRecord]:
        if not path.exists():
            return []
        return parse_uptime_text(path.read_text(encoding="utf-8"))

    return read


# --- sync and survey over a transport ----------------------------------------


def sync_clock(transport: Transport, clock: Clock, samples: int = 8) -> ClockEstimate:
    """Run `samples` four-timestamp exchanges and keep the lowest-delay one."""
    collected: list[SyncSample] = []
    failures: Exception | None = None
    for _ in range(samples):
        t1 = clock.now_ms()
        try:
            response = transport.request(f"SYNC {t1}")
        except TransportError as exc:
            failures = exc
            continue
        t4 = clock.now_ms()
        try:
            msg = decode_message(response)
        except MalformedLine:
            continue
        if not isinstance(msg, SyncResponse) or msg.t1 != t1:
            continue
        try:
            collected.append(SyncSample(t1=t1, t2=msg.t2, t3=msg.t3, t4=t4))
        except ValueError:
            continue
    if not collected:
        raise ClockSyncError(f"no usable sync exchange ({failures})")
    return best_estimate(collected, k=max(len(collected), 1))


def run_survey(
    transport: Transport, nonce: str, code: str, text: str, retries: int = 3
) -> bool:
    """Send one questionnaire answer; invalid codes are rejected locally."""
    line = encode_message(Survey(nonce, code, text))  # raises ValueError on a bad code
    for _ in range(retries + 1):
        try:
            response = transport.request(line)
        except TransportError:
            continue
        try:
            return isinstance(decode_message(response), Ack)
        except MalformedLine:
            return False
    return False


# --- blocking lifecycle runner -------------------------------------------------

ConsentFn = Callable[[RoundRef, int], bool]  # (round, local deadline ms) -> yes/no
ActivityFn = Callable[[int, int], list[ActivityEvent]]
UptimeFn = Callable[[], list[UptimeRecord]]
SurveyFn = Callable[[], "tuple[str, str] | None"]


@dataclass
class ClientOptions:
    nonce: str = field(default_factory=lambda: secrets.token_hex(8))
    prompt_lead_ms: int = DEFAULT_PROMPT_LEAD_MS
    start_tol_ms: int = DEFAULT_START_TOL_MS
    sync_samples: int = 8
    sync_attempts: int = 5
    retry_ms: int = 500
    send_margin_ms: int = 50
    survey_retries: int = 3


class ClientRunner:
    """Drives one client through every remaining round against a live counter.

    All timing flows through the injected clock and every exchange through the
    injected transport, so the produced message sequence is a deterministic
    function of config, consent script, activity events and uptime records.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        transport: Transport,
        clock: Clock,
        consent: ConsentFn,
        activity: ActivityFn,
        uptime: UptimeFn,
        options: ClientOptions | None = None,
        survey: SurveyFn | None = None,
        notify: Callable[[str], None] | None = None,
    ) -> None:
        self.config = config
        self.transport = transport
        self.clock = clock
        self.consent = consent
        self.activity = activity
        self.uptime = uptime
        self.options = options if options is not None else ClientOptions()
        self.survey = survey
        self.notify = notify if notify is not None else lambda _line: None
        self.outcomes: dict[RoundRef, RoundOutcome] = {}
        self.trace: list[tuple[str, str]] = []  # ("send"|"recv", line)
        self._estimate: ClockEstimate | None = None
        self._surveyed = False

    # -- plumbing ---------------------------------------------------------

    def _request(self, line: str) -> str:
        self.trace.append(("send", line))
        response = self.transport.request(line)
        self.trace.append(("recv", response))
        return response

    def _counter_now(self) -> int:
        assert self._estimate is not None
        return self._estimate.counter_now(self.clock.now_ms())

    def _wait_counter(self, target_ms: int) -> None:
        assert self._estimate is not None
        wait_until(target_ms, self._estimate, self.clock)

    def _sync(self) -> bool:
        try:
            self._estimate = sync_clock(
                TracedTransport(self), self.clock, self.options.sync_samples
            )
            return True
        except ClockSyncError:
            return False

    def _ensure_synced(self) -> None:
        if self._estimate is not None:
            return
        for _ in range(self.options.sync_attempts):
            if self._sync():
                assert self._estimate is not None
                self.notify(f"clock offset {self._estimate.offset_ms} ms")
                return
            self.clock.sleep_ms(self.options.retry_ms)
        raise ClientError("could not synchronize with the counter")

    # -- lifecycle ---------------------------------------------------------

    def run(self) -> dict[RoundRef, RoundOutcome]:
        self._ensure_synced()
        while True:
            nxt = next_wakeup(self.config, self._counter_now(), self.options.prompt_lead_ms)
            if nxt is None:
                self.notify("experiment complete")
                return self.outcomes
            if nxt.round in self.outcomes:
                # already handled; idle out its report window
                self._wait_counter(nxt.report_close_ms + 1)
                continue
            self._wait_counter(nxt.prompt_ms)
            self._sync()  # best-effort refresh; the previous estimate stays valid
            if nxt.round.is_execution:
                outcome = self._run_execution(nxt)
            else:
                outcome = self._run_calibration(nxt)
            self.outcomes[nxt.round] = outcome
            self.notify(f"round {nxt.round.wire()}: {outcome.value}")

    def _local_deadline(self, counter_ms: int) -> int:
        assert self._estimate is not None
        return counter_ms - self._estimate.offset_ms

    def _run_calibration(self, nxt: NextRound) -> RoundOutcome:
        if not self.consent(nxt.round, self._local_deadline(nxt.start_ms)):
            self._wait_counter(nxt.start_ms + 1)
            return RoundOutcome.DECLINED
        self._wait_counter(nxt.start_ms)
        window_end = nxt.start_ms + self.config.delta_tau_ms
        violation = first_violation(self.activity(nxt.start_ms, window_end), nxt.start_ms, window_end)
        if violation is not None:
            # outcome already decided; no need to sit out the window
            self._wait_counter(nxt.start_ms + 1)
            return RoundOutcome.VIOLATED
        self._wait_counter(window_end)
        return self._send_report(nxt)

    def _run_execution(self, nxt: NextRound) -> RoundOutcome:
        if not self.consent(nxt.round, self._local_deadline(nxt.start_ms)):
            self._wait_counter(nxt.report_close_ms + 1)
            return RoundOutcome.DECLINED
        # the host is nominally powered off during [t*, t* + delta_tau];
        # certification happens from records after reconnection
        self._wait_counter(nxt.start_ms + self.config.delta_tau_ms)
        records = self.uptime()
        well_formed = records_well_formed(records)
        compliant = well_formed and certify_shutdown(
            records, self.config, self.options.start_tol_ms
        )
        if compliant:
            return self._send_report(nxt)
        self._offer_survey(forced_obstacle=not well_formed)
        self._wait_counter(nxt.report_close_ms + 1)
        return RoundOutcome.VIOLATED

    def _send_report(self, nxt: NextRound) -> RoundOutcome:
        report = Report(
            nxt.round, self.options.nonce, derive_token(self.config.secret, nxt.round)
        )
        line = encode_message(report)
        self._wait_counter(nxt.report_open_ms + self.options.send_margin_ms)
        while self._counter_now() <= nxt.report_close_ms:
            try:
                response = self._request(line)
            except TransportError:
                self.clock.sleep_ms(self.options.retry_ms)
                continue
            try:
                msg = decode_message(response)
            except MalformedLine:
                self.clock.sleep_ms(self.options.retry_ms)
                continue
            if isinstance(msg, Ack):
                return RoundOutcome.REPORTED
            if isinstance(msg, Reject) and msg.reason == "DUP":
                # an earlier attempt landed; the counter already has us
                return RoundOutcome.REPORTED
            if isinstance(msg, Reject) and msg.reason == "EARLY":
                self.clock.sleep_ms(self.options.retry_ms)
                continue
            return RoundOutcome.FAILED
        return RoundOutcome.FAILED

    def _offer_survey(self, forced_obstacle: bool) -> None:
        if self._surveyed:
            return
        self._surveyed = True
        if forced_obstacle:
            answer: tuple[str, str] | None = ("OBSTACLE", "")
        else:
            answer = self.survey() if self.survey is not None else None
        if answer is None:
            return
        code, text = answer
        sent = run_survey(
            TracedTransport(self), self.options.nonce, code, text, self.options.survey_retries
        )
        self.notify(f"survey {code}: {'sent' if sent else 'dropped'}")


class TracedTransport:
    """Routes requests through a runner so its trace stays complete."""

    def __init__(self, runner: ClientRunner) -> None:
        self._runner = runner

    def request(self, line: str) -> str:
        return self._runner._request(line)
