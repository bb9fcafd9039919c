"""Simulated multi-site topology with a serialization boundary.

Exactly two message kinds cross site boundaries: per-round gradient
reports (uplink) and mean broadcasts (downlink).  Every message round
trips through the canonical byte encoding even in-process, so payloads
are auditable, byte counts are exact, and a recorded message log can be
replayed through a fresh lead site.

Canonical encoding (little endian):

    header  : magic ``FDEM`` (4s) | version u16 | kind u16 | round u32 | site u32
    report  : header + f64 lambda_update + S*d f64 gradient entries
    broadcast: header + S*d f64 mean entries (site field zero)

Header size is 16 bytes; a gradient report therefore occupies
16 + 8 * (1 + S*d) bytes and a broadcast 16 + 8 * S*d bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ContractViolation,
    FederationError,
    IncompleteRoundError,
    UnsupportedConfigurationError,
)
from .model import (
    Covariance,
    ModelParams,
    SiteDataset,
    clamp_mixing_rows,
    responsibilities,
    weighted_mean_gradient,
)

MAGIC = b"FDEM"
VERSION = 1
KIND_REPORT = 1
KIND_BROADCAST = 2
_HEADER = struct.Struct("<4sHHII")
HEADER_SIZE = _HEADER.size  # 16


@dataclass(frozen=True)
class GradientReport:
    """One site's per-round uplink: refreshed mixing weight plus mean gradient."""

    site_id: int
    round_index: int
    lambda_update: float
    grad_mu: np.ndarray  # stacked S*d vector

    def __post_init__(self):
        grad = np.asarray(self.grad_mu, dtype=float)
        if grad.ndim != 1:
            raise ContractViolation("grad_mu must be a flat vector")
        if not np.all(np.isfinite(grad)) or not np.isfinite(self.lambda_update):
            raise ContractViolation("gradient report entries must be finite")
        grad = grad.copy()
        grad.setflags(write=False)
        object.__setattr__(self, "grad_mu", grad)


@dataclass(frozen=True)
class MeanBroadcast:
    """Per-round downlink: the refreshed component means."""

    round_index: int
    means: np.ndarray  # (S, d)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if not np.all(np.isfinite(means)):
            raise ContractViolation("broadcast means must be finite")
        means = means.copy()
        means.setflags(write=False)
        object.__setattr__(self, "means", means)


def encode_report(report: GradientReport) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, KIND_REPORT, report.round_index, report.site_id)
    payload = struct.pack("<d", report.lambda_update)
    payload += np.asarray(report.grad_mu, dtype="<f8").tobytes()
    return header + payload


def encode_broadcast(msg: MeanBroadcast) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, KIND_BROADCAST, msg.round_index, 0)
    return header + np.asarray(msg.means, dtype="<f8").reshape(-1).tobytes()


def _decode_header(frame: bytes):
    if len(frame) < HEADER_SIZE:
        raise ContractViolation("frame shorter than header")
    magic, version, kind, round_index, site = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise ContractViolation(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContractViolation(f"unsupported message version {version}")
    return kind, round_index, site


def frame_kind(frame: bytes) -> int:
    return _decode_header(frame)[0]


def decode_report(frame: bytes) -> GradientReport:
    kind, round_index, site = _decode_header(frame)
    if kind != KIND_REPORT:
        raise ContractViolation(f"expected a report frame, got kind {kind}")
    payload = frame[HEADER_SIZE:]
    if len(payload) < 16 or len(payload) % 8 != 0:
        raise ContractViolation("malformed report payload")
    (lam,) = struct.unpack_from("<d", payload)
    grad = np.frombuffer(payload[8:], dtype="<f8").astype(float)
    return GradientReport(site, round_index, lam, grad)


def decode_broadcast(frame: bytes, n_components: int) -> MeanBroadcast:
    kind, round_index, _ = _decode_header(frame)
    if kind != KIND_BROADCAST:
        raise ContractViolation(f"expected a broadcast frame, got kind {kind}")
    payload = np.frombuffer(frame[HEADER_SIZE:], dtype="<f8").astype(float)
    if payload.size % n_components != 0:
        raise ContractViolation("broadcast payload does not split into components")
    return MeanBroadcast(round_index, payload.reshape(n_components, -1))


# ---------------------------------------------------------------------------
# Accounting and logging
# ---------------------------------------------------------------------------


@dataclass
class RoundTraffic:
    round_index: int
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    uplink_messages: int = 0
    downlink_messages: int = 0


class CommLedger:
    """Per-round and cumulative byte/message counters."""

    def __init__(self):
        self._rounds: dict[int, RoundTraffic] = {}
        self.total_uplink_bytes = 0
        self.total_downlink_bytes = 0
        self.total_messages = 0

    def _row(self, round_index: int) -> RoundTraffic:
        return self._rounds.setdefault(round_index, RoundTraffic(round_index))

    def record_uplink(self, round_index: int, nbytes: int):
        row = self._row(round_index)
        row.uplink_bytes += nbytes
        row.uplink_messages += 1
        self.total_uplink_bytes += nbytes
        self.total_messages += 1

    def record_downlink(self, round_index: int, nbytes: int):
        row = self._row(round_index)
        row.downlink_bytes += nbytes
        row.downlink_messages += 1
        self.total_downlink_bytes += nbytes
        self.total_messages += 1

    def rounds(self):
        return [self._rounds[k] for k in sorted(self._rounds)]

    def round_traffic(self, round_index: int) -> RoundTraffic:
        return self._rounds[round_index]


class MessageLog:
    """Ordered record of every frame, replayable and savable to disk.

    On disk each frame is length-prefixed with a u32 (little endian).
    """

    def __init__(self, frames: Sequence[bytes] = ()):
        self.frames: list[bytes] = list(frames)

    def append(self, frame: bytes):
        self.frames.append(frame)

    def reports_for_round(self, round_index: int):
        out = []
        for frame in self.frames:
            kind, rnd, _ = _decode_header(frame)
            if kind == KIND_REPORT and rnd == round_index:
                out.append(frame)
        return out

    def broadcast_for_round(self, round_index: int):
        for frame in self.frames:
            kind, rnd, _ = _decode_header(frame)
            if kind == KIND_BROADCAST and rnd == round_index:
                return frame
        return None

    def save(self, path):
        with open(path, "wb") as fh:
            for frame in self.frames:
                fh.write(struct.pack("<I", len(frame)))
                fh.write(frame)

    @classmethod
    def load(cls, path) -> "MessageLog":
        frames = []
        with open(path, "rb") as fh:
            while True:
                prefix = fh.read(4)
                if not prefix:
                    break
                if len(prefix) != 4:
                    raise ContractViolation("truncated length prefix in message log")
                (length,) = struct.unpack("<I", prefix)
                frame = fh.read(length)
                if len(frame) != length:
                    raise ContractViolation("truncated frame in message log")
                frames.append(frame)
        return cls(frames)


# ---------------------------------------------------------------------------
# Sites and federation
# ---------------------------------------------------------------------------


class SiteNode:
    """Computation that runs at one site.

    Holds the site's raw data, its private mixing row (seeded uniform),
    and the most recent broadcast means.  Each collect evaluates the
    responsibilities once at the current (mixing, means) state, reports
    the refreshed mixing weight together with the mean gradient at that
    state, and adopts the refreshed weight for the next round.
    """

    def __init__(self, data: SiteDataset, cov: Covariance, site_index: int):
        self.data = data
        self.cov = cov
        self.site_index = site_index
        self.mixing_row: np.ndarray | None = None
        self.means: np.ndarray | None = None
        self.last_broadcast_round = -1

    def handle_broadcast(self, msg: MeanBroadcast):
        means = msg.means
        if means.shape[1] != self.data.dim:
            raise ContractViolation(
                f"site {self.site_index}: broadcast dim {means.shape[1]} != data dim {self.data.dim}"
            )
        if msg.round_index < self.last_broadcast_round:
            raise ContractViolation(
                f"site {self.site_index}: broadcast round went backwards"
            )
        if self.mixing_row is None:
            self.mixing_row = np.full(means.shape[0], 1.0 / means.shape[0])
        self.means = means
        self.last_broadcast_round = msg.round_index

    def handle_collect(self, round_index: int) -> GradientReport:
        if self.means is None:
            raise FederationError(
                f"site {self.site_index} collected before any broadcast", round_index
            )
        obs = self.data.observations
        resp = responsibilities(obs, self.mixing_row, self.means, self.cov, self.site_index)
        new_row = clamp_mixing_rows(resp.mean(axis=0))[0]
        grad = weighted_mean_gradient(obs, resp, self.means, self.cov, self.site_index)
        # Adopt exactly the state that goes on the wire: for two components the
        # report carries one weight, so the site's view and the lead's
        # reconstruction stay bitwise identical.
        if new_row.size == 2:
            self.mixing_row = np.array([new_row[0], 1.0 - new_row[0]])
        else:
            self.mixing_row = new_row
        return GradientReport(self.site_index, round_index, float(new_row[0]), grad)


class InProcessTransport:
    """Drives site handlers through the serialization boundary."""

    def __init__(self, fail_plan=frozenset()):
        # fail_plan: set of (round_index, site_id) pairs that drop their report.
        self.fail_plan = frozenset(fail_plan)

    def collect(self, sites, round_index: int, ledger: CommLedger, log: MessageLog):
        reports = []
        for site in sites:
            if (round_index, site.site_index) in self.fail_plan:
                raise IncompleteRoundError(
                    f"site {site.site_index} failed to report in round {round_index}",
                    round_index,
                )
            frame = encode_report(site.handle_collect(round_index))
            ledger.record_uplink(round_index, len(frame))
            log.append(frame)
            reports.append(decode_report(frame))
        return reports

    def broadcast(self, sites, msg: MeanBroadcast, ledger: CommLedger, log: MessageLog) -> int:
        frame = encode_broadcast(msg)
        log.append(frame)
        acks = 0
        for site in sites:
            ledger.record_downlink(msg.round_index, len(frame))
            site.handle_broadcast(decode_broadcast(frame, msg.means.shape[0]))
            acks += 1
        return acks


class Federation:
    """A lead site with raw-data access plus K-1 sites reachable only by message.

    ``datasets[0]`` is the lead site.  All sites must hold the same number
    of observations (the surrogate's normalization assumes it) and the
    message layer carries a single mixing weight, so only two-component
    models are supported here.
    """

    def __init__(self, datasets: Sequence[SiteDataset], cov: Covariance,
                 transport: InProcessTransport | None = None):
        if not datasets:
            raise ContractViolation("a federation needs at least one site")
        if cov.n_sites != len(datasets):
            raise ContractViolation("one covariance per site required")
        sizes = {data.n for data in datasets}
        if len(sizes) != 1:
            raise UnsupportedConfigurationError(
                f"sites must hold equal sample sizes, got {sorted(sizes)}"
            )
        by_id = sorted(datasets, key=lambda d: d.site_id)
        if [d.site_id for d in by_id] != list(range(len(datasets))):
            raise ContractViolation("site ids must be 0..K-1 without gaps")
        self.cov = cov
        self.sites = [SiteNode(d, cov, d.site_id) for d in by_id]
        self.transport = transport or InProcessTransport()
        self.ledger = CommLedger()
        self.log = MessageLog()

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def lead_data(self) -> SiteDataset:
        return self.sites[0].data

    def broadcast_means(self, round_index: int, means) -> int:
        means = np.atleast_2d(np.asarray(means, dtype=float))
        if means.shape[0] != 2:
            raise UnsupportedConfigurationError(
                "the message layer carries one mixing weight, so it is two-component only"
            )
        msg = MeanBroadcast(round_index, means)
        return self.transport.broadcast(self.sites, msg, self.ledger, self.log)

    def collect_reports(self, round_index: int):
        reports = self.transport.collect(self.sites, round_index, self.ledger, self.log)
        seen = {r.site_id for r in reports}
        if seen != set(range(self.n_sites)):
            raise IncompleteRoundError(
                f"round {round_index}: reports from {sorted(seen)}, expected all "
                f"{self.n_sites} sites",
                round_index,
            )
        return reports


class ReplayFederation:
    """Feeds a recorded message log back to a fresh lead site.

    Collects return the recorded reports verbatim; broadcasts are checked
    byte-for-byte against the recorded ones, so any divergence in the lead
    site's computation surfaces immediately.
    """

    def __init__(self, lead_data: SiteDataset, cov: Covariance, log: MessageLog,
                 n_sites: int):
        self.cov = cov
        self.lead_data = lead_data
        self.n_sites = n_sites
        self._source = log
        self.ledger = CommLedger()
        self.log = MessageLog()

    def broadcast_means(self, round_index: int, means) -> int:
        means = np.atleast_2d(np.asarray(means, dtype=float))
        frame = encode_broadcast(MeanBroadcast(round_index, means))
        recorded = self._source.broadcast_for_round(round_index)
        if recorded is None:
            raise FederationError(
                f"no recorded broadcast for round {round_index}", round_index
            )
        if recorded != frame:
            raise FederationError(
                f"replayed broadcast diverges from the recorded one in round {round_index}",
                round_index,
            )
        self.log.append(frame)
        for _ in range(self.n_sites):
            self.ledger.record_downlink(round_index, len(frame))
        return self.n_sites

    def collect_reports(self, round_index: int):
        frames = self._source.reports_for_round(round_index)
        if len(frames) != self.n_sites:
            raise IncompleteRoundError(
                f"recorded round {round_index} holds {len(frames)} reports, "
                f"expected {self.n_sites}",
                round_index,
            )
        reports = []
        for frame in frames:
            self.ledger.record_uplink(round_index, len(frame))
            self.log.append(frame)
            reports.append(decode_report(frame))
        return reports


# ---------------------------------------------------------------------------
# Round operations
# ---------------------------------------------------------------------------


def round_collect(federation, round_index: int, params: ModelParams | None = None):
    """Collect one gradient report per site, validating shapes when given params."""
    reports = federation.collect_reports(round_index)
    if params is not None:
        expected = params.n_components * params.dim
        for report in reports:
            if report.grad_mu.size != expected:
                raise ContractViolation(
                    f"site {report.site_id} gradient has {report.grad_mu.size} entries, "
                    f"expected {expected}"
                )
    return reports


def round_broadcast(federation, msg: MeanBroadcast) -> int:
    """Broadcast refreshed means to every site; returns the acknowledgement count."""
    return federation.broadcast_means(msg.round_index, msg.means)
