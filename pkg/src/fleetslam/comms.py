"""Inter-robot messaging: wire formats and a simulated acoustic channel.

Every message payload starts with a 7-byte header (sender u8, sequence
u32, record count u16) followed by fixed-size little-endian records, so
sizes are exact and auditable:

    object map      56 + 176 * count bits   (22-byte box records)
    pose update     56 + 128 * count bits   (16-byte pose records)
    scan request    56 +  32 * count bits   (u32 keyframe ids)
    scan            88 +  64 * count bits   (u32 keyframe + 8-byte points)
    loop closures   56 + 208 * count bits   (26-byte closure records)

The channel models a shared low-rate acoustic link: per-sender
per-step bit budgets, delivery only within communication range at send
time, optional fixed latency, and seeded random drops. Delivery is a
serial barrier: all outboxes of a step are collected, then delivered
together.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from fleetslam.consistency import LoopClosure
from fleetslam.geometry import Pose2
from fleetslam.objectmap import ObjectBox, ObjectMap

BROADCAST = 255

KIND_OBJECT_MAP = "object_map"
KIND_POSE_UPDATE = "pose_update"
KIND_SCAN_REQUEST = "scan_request"
KIND_SCAN = "scan"
KIND_LOOP_CLOSURES = "loop_closures"

_HEADER = struct.Struct("<BIH")
_BOX = struct.Struct("<fffffH")
_POSE = struct.Struct("<Ifff")
_KF = struct.Struct("<I")
_POINT = struct.Struct("<ff")
_CLOSURE = struct.Struct("<BIBIffff")


class WireError(ValueError):
    """Raised when a payload cannot be decoded."""


@dataclass(frozen=True)
class Envelope:
    """One message in flight.

    Attributes:
        src: sender id.
        dst: receiver id, or BROADCAST.
        kind: payload kind, one of the KIND_* constants.
        payload: encoded bytes.
        seq: per-sender sequence number, also encoded in the payload;
            receivers drop (src, kind, seq) duplicates.
        sent_at: send timestep.
    """

    src: int
    dst: int
    kind: str
    payload: bytes
    seq: int
    sent_at: int = 0

    @property
    def size_bits(self) -> int:
        return 8 * len(self.payload)


def _pack(src: int, seq: int, records: list[bytes]) -> bytes:
    if len(records) > 0xFFFF:
        raise ValueError("record count exceeds u16")
    return _HEADER.pack(src, seq, len(records)) + b"".join(records)


def _unpack_header(payload: bytes) -> tuple[int, int, int]:
    if len(payload) < _HEADER.size:
        raise WireError("payload shorter than header")
    return _HEADER.unpack_from(payload, 0)


def _records(payload: bytes, offset: int, count: int, fmt: struct.Struct):
    expected = offset + count * fmt.size
    if len(payload) != expected:
        raise WireError(f"payload length {len(payload)} != {expected}")
    for i in range(count):
        yield fmt.unpack_from(payload, offset + i * fmt.size)


def object_map_bits(count: int) -> int:
    """Exact object map message size in bits."""
    return 8 * (_HEADER.size + count * _BOX.size)


def pose_update_bits(count: int) -> int:
    return 8 * (_HEADER.size + count * _POSE.size)


def scan_request_bits(count: int) -> int:
    return 8 * (_HEADER.size + count * _KF.size)


def scan_bits(count: int) -> int:
    return 8 * (_HEADER.size + _KF.size + count * _POINT.size)


def loop_closures_bits(count: int) -> int:
    return 8 * (_HEADER.size + count * _CLOSURE.size)


def encode_object_map(omap: ObjectMap, seq: int) -> bytes:
    """Encodes an object map; ids are positional.

    Raises:
        ValueError: an object's support exceeds u16.
    """
    records = []
    for box in omap.objects:
        if box.support > 0xFFFF:
            raise ValueError("object support exceeds u16")
        records.append(_BOX.pack(box.center[0], box.center[1], box.length,
                                 box.breadth, box.orientation, box.support))
    return _pack(omap.robot_id, seq, records)


def decode_object_map(payload: bytes, stamp: int = 0) -> ObjectMap:
    src, _, count = _unpack_header(payload)
    boxes = []
    for i, rec in enumerate(_records(payload, _HEADER.size, count, _BOX)):
        x, y, length, breadth, orient, support = rec
        boxes.append(ObjectBox(id=i, center=np.array([x, y]),
                               length=float(length), breadth=float(breadth),
                               orientation=float(orient),
                               support=int(support)))
    return ObjectMap(robot_id=src, objects=boxes, stamp=stamp)


def encode_pose_update(robot: int, seq: int,
                       poses: list[tuple[int, Pose2]]) -> bytes:
    records = [_POSE.pack(kf, p.x, p.y, p.theta) for kf, p in poses]
    return _pack(robot, seq, records)


def decode_pose_update(payload: bytes) -> tuple[int, list[tuple[int, Pose2]]]:
    src, _, count = _unpack_header(payload)
    poses = [(int(kf), Pose2(x, y, theta))
             for kf, x, y, theta in _records(payload, _HEADER.size, count,
                                             _POSE)]
    return src, poses


def encode_scan_request(robot: int, seq: int, keyframes: list[int]) -> bytes:
    return _pack(robot, seq, [_KF.pack(kf) for kf in keyframes])


def decode_scan_request(payload: bytes) -> tuple[int, list[int]]:
    src, _, count = _unpack_header(payload)
    return src, [int(kf) for (kf,) in _records(payload, _HEADER.size, count,
                                               _KF)]


def encode_scan(robot: int, seq: int, keyframe: int, points) -> bytes:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] > 0xFFFF:
        raise ValueError("scan too large for u16 count")
    body = _KF.pack(keyframe) + b"".join(
        _POINT.pack(float(p[0]), float(p[1])) for p in points)
    return _HEADER.pack(robot, seq, points.shape[0]) + body


def decode_scan(payload: bytes) -> tuple[int, int, np.ndarray]:
    src, _, count = _unpack_header(payload)
    if len(payload) < _HEADER.size + _KF.size:
        raise WireError("scan payload missing keyframe id")
    (kf,) = _KF.unpack_from(payload, _HEADER.size)
    pts = np.array([[x, y] for x, y in
                    _records(payload, _HEADER.size + _KF.size, count,
                             _POINT)], dtype=np.float64).reshape(-1, 2)
    return src, int(kf), pts


def encode_loop_closures(robot: int, seq: int,
                         closures: list[LoopClosure]) -> bytes:
    records = [_CLOSURE.pack(z.local_robot, z.local_kf, z.neighbor_robot,
                             z.neighbor_kf, z.measurement.x, z.measurement.y,
                             z.measurement.theta, z.overlap)
               for z in closures]
    return _pack(robot, seq, records)


def decode_loop_closures(payload: bytes, cov=None,
                         stamp: int = 0) -> list[LoopClosure]:
    _, _, count = _unpack_header(payload)
    if cov is None:
        cov = np.diag([0.01, 0.01, 4e-4])
    out = []
    for rec in _records(payload, _HEADER.size, count, _CLOSURE):
        lr, lkf, nr, nkf, x, y, theta, overlap = rec
        out.append(LoopClosure(local_robot=int(lr), local_kf=int(lkf),
                               neighbor_robot=int(nr), neighbor_kf=int(nkf),
                               measurement=Pose2(x, y, theta),
                               covariance=cov,
                               overlap=min(max(float(overlap), 0.0), 1.0),
                               stamp=stamp))
    return out


@dataclass
class ChannelConfig:
    """Acoustic channel model parameters.

    Attributes:
        bandwidth_bps: per-sender budget in bits per second.
        step_seconds: simulation step length; budget per step is
            bandwidth_bps * step_seconds.
        comm_range: maximum sender-receiver distance at send time;
            non-positive disables the range check.
        latency_steps: fixed delivery delay in steps.
        drop_rate: independent per-delivery loss probability.
    """

    bandwidth_bps: float = 62_500.0
    step_seconds: float = 1.0
    comm_range: float = 0.0
    latency_steps: int = 0
    drop_rate: float = 0.0

    @property
    def budget_bits(self) -> float:
        return self.bandwidth_bps * self.step_seconds


@dataclass
class ChannelLogRow:
    step: int
    src: int
    dst: int
    kind: str
    seq: int
    bits: int
    delivered: int


@dataclass
class Channel:
    """Shared broadcast medium with budget accounting.

    step() consumes all envelopes sent in one timestep and returns the
    per-receiver inboxes due this step, honoring latency. Budget
    violations are recorded, not enforced; senders are expected to
    defer traffic themselves.
    """

    config: ChannelConfig = field(default_factory=ChannelConfig)
    rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))
    log: list[ChannelLogRow] = field(default_factory=list)
    violations: list[tuple[int, int, int]] = field(default_factory=list)
    _pending: list[tuple[int, int, Envelope]] = field(default_factory=list)

    def step(self, now: int, envelopes: list[Envelope],
             positions: dict[int, np.ndarray]) -> dict[int, list[Envelope]]:
        """Transmits one step's traffic and collects due deliveries.

        Args:
            now: current timestep; envelopes must have sent_at == now.
            envelopes: all messages sent this step, sender order
                preserved.
            positions: robot id -> (2,) world position at send time,
                used for the range check.

        Returns:
            receiver id -> envelopes due this step, in send order.
        """
        sent_bits: dict[int, int] = {}
        for env in envelopes:
            sent_bits[env.src] = sent_bits.get(env.src, 0) + env.size_bits
            receivers = ([d for d in sorted(positions) if d != env.src]
                         if env.dst == BROADCAST else [env.dst])
            for dst in receivers:
                ok = 1
                if self.config.comm_range > 0:
                    p1, p2 = positions.get(env.src), positions.get(dst)
                    if p1 is None or p2 is None or \
                            float(np.hypot(*(p1 - p2))) > self.config.comm_range:
                        ok = 0
                if ok and self.config.drop_rate > 0 and \
                        self.rng.random() < self.config.drop_rate:
                    ok = 0
                self.log.append(ChannelLogRow(now, env.src, dst, env.kind,
                                              env.seq, env.size_bits, ok))
                if ok:
                    self._pending.append(
                        (now + self.config.latency_steps, dst, env))
        for src, bits in sorted(sent_bits.items()):
            if bits > self.config.budget_bits:
                self.violations.append((now, src, bits))

        inboxes: dict[int, list[Envelope]] = {}
        still = []
        for due, dst, env in self._pending:
            if due <= now:
                inboxes.setdefault(dst, []).append(env)
            else:
                still.append((due, dst, env))
        self._pending = still
        return inboxes

    def kind_stats(self) -> dict[str, tuple[int, float, int]]:
        """Per-kind (count, mean bits, max bits) over sent messages.

        The log holds one row per receiver; a broadcast is one
        transmission, so rows are deduplicated on (step, src, seq,
        kind) before aggregating.
        """
        uniq: dict[tuple[int, int, int, str], int] = {}
        for row in self.log:
            uniq[(row.step, row.src, row.seq, row.kind)] = row.bits
        stats: dict[str, list[int]] = {}
        for (_, _, _, kind), bits in sorted(uniq.items()):
            stats.setdefault(kind, []).append(bits)
        return {kind: (len(v), float(np.mean(v)), int(max(v)))
                for kind, v in sorted(stats.items())}
