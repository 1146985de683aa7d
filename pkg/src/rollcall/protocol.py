"""Wire protocol shared by clients and the counter.

Everything on the wire is a single UTF-8 text line. Client-to-counter lines
are ``SYNC``, ``REPORT`` and ``SURVEY``; counter-to-client lines are
``SYNCR``, ``ACK`` and ``REJ``. The per-round participation token is derived
deterministically from the experiment secret, so every client holding the
config file produces the same token for the same round without any extra
distribution step.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import re
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

CAL = "CAL"
EXE = "EXE"

REJECT_REASONS = frozenset({"BADTOKEN", "EARLY", "LATE", "DUP", "BADROUND", "MALFORMED"})
SURVEY_CODES = frozenset({"FORGOT", "OBSTACLE", "CHANGED_MIND", "INTERFERENCE", "OTHER"})

TOKEN_HEX_LEN = 32
NONCE_MIN_LEN = 8
NONCE_MAX_LEN = 64

_TOKEN_RE = re.compile(r"^[0-9a-f]{32}$")
_NONCE_RE = re.compile(r"^\S{8,64}$")
_UINT_RE = re.compile(r"^(?:0|[1-9][0-9]*)$")
_INT_RE = re.compile(r"^-?(?:0|[1-9][0-9]*)$")
_NO_WS_RE = re.compile(r"^\S+$")


class ProtocolError(ValueError):
    """Base class for wire and config format violations."""


class MalformedLine(ProtocolError):
    """A wire line that does not match the message grammar."""


class ConfigError(ProtocolError):
    """A config file or config value that violates the schedule contract."""


@dataclass(frozen=True)
class RoundRef:
    """Reference to one scheduled round: a calibration index or the execution round."""

    kind: str
    index: int

    def __post_init__(self) -> None:
        if self.kind not in (CAL, EXE):
            raise ValueError(f"unknown round kind {self.kind!r}")
        if self.kind == EXE and self.index != 0:
            raise ValueError("execution round carries no index other than 0")
        if self.index < 0:
            raise ValueError("round index must be non-negative")

    @classmethod
    def cal(cls, index: int) -> "RoundRef":
        return cls(CAL, index)

    @classmethod
    def exe(cls) -> "RoundRef":
        return cls(EXE, 0)

    @property
    def is_execution(self) -> bool:
        return self.kind == EXE

    def wire(self) -> str:
        return f"{self.kind} {self.index}"


@dataclass(frozen=True)
class ExperimentConfig:
    """The shared schedule and secret that define one experiment.

    Calibration round ``i`` (0-based) starts at ``epoch_ms + i * delta_t_ms``
    and runs for ``delta_tau_ms``; the execution round starts at ``t_star_ms``
    which must equal ``epoch_ms + n_rounds * delta_t_ms``. Reports for a round
    are accepted for ``grace_ms`` after its window ends.
    """

    experiment_id: str
    secret: str
    epoch_ms: int
    delta_t_ms: int
    n_rounds: int
    delta_tau_ms: int
    t_star_ms: int
    grace_ms: int = 300_000

    def __post_init__(self) -> None:
        if not _NO_WS_RE.match(self.experiment_id):
            raise ConfigError("experiment_id must be non-empty without whitespace")
        if not _NO_WS_RE.match(self.secret):
            raise ConfigError("secret must be non-empty without whitespace")
        if self.n_rounds < 2:
            raise ConfigError("n_rounds must be at least 2 (spread is undefined otherwise)")
        if self.delta_tau_ms <= 0:
            raise ConfigError("delta_tau_ms must be positive")
        if self.delta_t_ms <= self.delta_tau_ms:
            raise ConfigError("delta_t_ms must exceed delta_tau_ms")
        if self.grace_ms <= 0:
            raise ConfigError("grace_ms must be positive")
        expected_t_star = self.epoch_ms + self.n_rounds * self.delta_t_ms
        if self.t_star_ms != expected_t_star:
            raise ConfigError(
                f"t_star_ms must equal epoch_ms + n_rounds * delta_t_ms "
                f"({expected_t_star}), got {self.t_star_ms}"
            )

    def round_start(self, round: RoundRef) -> int:
        if round.kind == EXE:
            return self.t_star_ms
        return self.epoch_ms + round.index * self.delta_t_ms

    def window_open(self, round: RoundRef) -> int:
        """Counter time from which reports for `round` are accepted."""
        return self.round_start(round) + self.delta_tau_ms

    def window_close(self, round: RoundRef) -> int:
        """Last counter time (inclusive) at which reports for `round` are accepted."""
        return self.window_open(round) + self.grace_ms

    def has_round(self, round: RoundRef) -> bool:
        if round.kind == EXE:
            return True
        return 0 <= round.index < self.n_rounds

    def rounds(self) -> list[RoundRef]:
        """All rounds in schedule order, the execution round last."""
        return [RoundRef.cal(i) for i in range(self.n_rounds)] + [RoundRef.exe()]


# --- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class SyncRequest:
    t1: int


@dataclass(frozen=True)
class SyncResponse:
    t1: int
    t2: int
    t3: int


@dataclass(frozen=True)
class Report:
    """One client's per-round participation certificate."""

    round: RoundRef
    nonce: str
    token: str

    def __post_init__(self) -> None:
        if not _NONCE_RE.match(self.nonce):
            raise ValueError("nonce must be 8-64 characters without whitespace")
        if not _TOKEN_RE.match(self.token):
            raise ValueError("token must be exactly 32 lowercase hex characters")


@dataclass(frozen=True)
class Ack:
    round: RoundRef


@dataclass(frozen=True)
class Reject:
    reason: str

    def __post_init__(self) -> None:
        if self.reason not in REJECT_REASONS:
            raise ValueError(f"unknown reject reason {self.reason!r}")


@dataclass(frozen=True)
class Survey:
    """A questionnaire answer; `text` is the decoded free text (may be empty)."""

    nonce: str
    code: str
    text: str

    def __post_init__(self) -> None:
        if not _NONCE_RE.match(self.nonce):
            raise ValueError("nonce must be 8-64 characters without whitespace")
        if self.code not in SURVEY_CODES:
            raise ValueError(f"unknown survey code {self.code!r}")


Message = SyncRequest | SyncResponse | Report | Ack | Reject | Survey


@lru_cache(maxsize=4096)
def _token_digest(secret: str, kind: str, index: int) -> str:
    preimage = f"{secret}:{index}:{kind}".encode("utf-8")
    return hashlib.sha256(preimage).hexdigest()[:TOKEN_HEX_LEN]


def derive_token(secret: str, round: RoundRef) -> str:
    """Deterministic per-round token shared by every client holding `secret`.

    The token is the first 32 hex characters of SHA-256 over
    ``secret ":" index ":" kind`` (the execution round uses index 0), so it is
    unique per round but identical across clients.
    """
    if not secret:
        raise ValueError("secret must be non-empty")
    return _token_digest(secret, round.kind, round.index)


def encode_survey_text(text: str) -> str:
    if not text:
        return "-"
    return base64.urlsafe_b64encode(text.encode("utf-8")).decode("ascii")


def decode_survey_text(field: str) -> str:
    if field == "-":
        return ""
    try:
        return base64.urlsafe_b64decode(field.encode("ascii")).decode("utf-8")
    except (binascii.Error, UnicodeDecodeError, ValueError) as exc:
        raise MalformedLine(f"bad survey text field: {exc}") from exc


def encode_message(msg: Message) -> str:
    """Render a message as its wire line (without the trailing newline)."""
    if isinstance(msg, SyncRequest):
        return f"SYNC {msg.t1}"
    if isinstance(msg, SyncResponse):
        return f"SYNCR {msg.t1} {msg.t2} {msg.t3}"
    if isinstance(msg, Report):
        return f"REPORT {msg.round.wire()} {msg.nonce} {msg.token}"
    if isinstance(msg, Ack):
        return f"ACK {msg.round.wire()}"
    if isinstance(msg, Reject):
        return f"REJ {msg.reason}"
    if isinstance(msg, Survey):
        return f"SURVEY {msg.nonce} {msg.code} {encode_survey_text(msg.text)}"
    raise TypeError(f"not a protocol message: {msg!r}")


def _parse_round(kind: str, index: str) -> RoundRef:
    if kind not in (CAL, EXE):
        raise MalformedLine(f"unknown round kind {kind!r}")
    if not _UINT_RE.match(index):
        raise MalformedLine(f"round index must be a decimal integer, got {index!r}")
    if kind == EXE and index != "0":
        raise MalformedLine("execution round index must be the literal 0")
    return RoundRef(kind, int(index))


def _parse_ms(field: str) -> int:
    if not _INT_RE.match(field):
        raise MalformedLine(f"expected integer milliseconds, got {field!r}")
    return int(field)


def decode_message(line: str) -> Message:
    """Parse one wire line. Raises MalformedLine for anything off-grammar."""
    if "\n" in line or "\r" in line:
        raise MalformedLine("line contains a line break")
    parts = line.split(" ")
    if parts != [p for p in parts if p]:
        raise MalformedLine("empty or repeated separators")
    verb = parts[0]
    args = parts[1:]
    try:
        if verb == "SYNC" and len(args) == 1:
            return SyncRequest(_parse_ms(args[0]))
        if verb == "SYNCR" and len(args) == 3:
            return SyncResponse(*(_parse_ms(a) for a in args))
        if verb == "REPORT" and len(args) == 4:
            round = _parse_round(args[0], args[1])
            if not _NONCE_RE.match(args[2]):
                raise MalformedLine(f"bad nonce {args[2]!r}")
            if not _TOKEN_RE.match(args[3]):
                raise MalformedLine("token must be 32 lowercase hex characters")
            return Report(round, args[2], args[3])
        if verb == "ACK" and len(args) == 2:
            return Ack(_parse_round(args[0], args[1]))
        if verb == "REJ" and len(args) == 1:
            if args[0] not in REJECT_REASONS:
                raise MalformedLine(f"unknown reject reason {args[0]!r}")
            return Reject(args[0])
        if verb == "SURVEY" and len(args) == 3:
            if not _NONCE_RE.match(args[0]):
                raise MalformedLine(f"bad nonce {args[0]!r}")
            if args[1] not in SURVEY_CODES:
                raise MalformedLine(f"unknown survey code {args[1]!r}")
            return Survey(args[0], args[1], decode_survey_text(args[2]))
    except MalformedLine:
        raise
    except ValueError as exc:
        raise MalformedLine(str(exc)) from exc
    raise MalformedLine(f"unrecognized line {line!r}")


# --- config file ------------------------------------------------------------

_CONFIG_INT_FIELDS = {
    "epoch_ms",
    "delta_t_ms",
    "n_rounds",
    "delta_tau_ms",
    "t_star_ms",
    "grace_ms",
}
_CONFIG_STR_FIELDS = {"experiment_id", "secret"}
_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    """Parse `key = value` config text.

    ``#`` starts a comment and whitespace around ``=`` is ignored. Keys are
    exactly the ExperimentConfig field names; ``t_star_ms`` may be omitted
    (computed from the schedule) and ``grace_ms`` defaults to 5 minutes.
    """
    values: dict[str, int | str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        if key in _CONFIG_INT_FIELDS:
            if not _INT_RE.match(value):
                raise ConfigError(f"line {lineno}: {key} must be an integer, got {value!r}")
            values[key] = int(value)
        else:
            values[key] = value
    missing = (_CONFIG_STR_FIELDS | _CONFIG_INT_FIELDS) - {"t_star_ms", "grace_ms"} - set(values)
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(sorted(missing))}")
    if "t_star_ms" not in values:
        values["t_star_ms"] = (
            int(values["epoch_ms"]) + int(values["n_rounds"]) * int(values["delta_t_ms"])
        )
    return ExperimentConfig(**values)  # type: ignore[arg-type]


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(config: ExperimentConfig) -> str:
    """Render a config back to the `key = value` file format."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"
