"""
Wire protocol between the flight controller and the perception process.

Frames travel controller -> perception over a TCP stream, each message
preceded by a little-endian uint32 length. Avoidance commands travel back as
single ASCII UDP datagrams ("LEFT 42 0.1200"). The controller keeps only the
newest command and treats commands older than the staleness window as absent.
"""
import asyncio
import logging
import re
import struct
import time
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Deque, Dict, Optional, Tuple

import numpy as np

from src.config import format_addr, parse_addr
from src.percept import AvoidCommandMsg, Direction
from src.simcam import DepthMap

logger = logging.getLogger(__name__)

MAGIC = b"FRM1"
HEADER = struct.Struct("<4sIQHHB")
LENGTH_PREFIX = struct.Struct("<I")
PENDING_FRAMES = 8
DEFAULT_STALENESS = 0.6

_SEQ = re.compile(r"[0-9]+")
_FRACTION = re.compile(r"[0-9]+\.[0-9]+")


class LinkError(Exception):
    pass


class BadMagicError(LinkError):
    pass


class TruncatedError(LinkError):
    pass


class LengthMismatchError(LinkError):
    pass


class CommandFormatError(LinkError):
    pass


class UnknownTokenError(CommandFormatError):
    pass


class NonNumericFieldError(CommandFormatError):
    pass


class TrailingGarbageError(CommandFormatError):
    pass


class ChannelError(LinkError):
    pass


class FrameKind(IntEnum):
    PSEUDO_DEPTH = 0
    REFERENCE = 1


@dataclass(frozen=True)
class FrameMessage:
    seq: int
    timestamp_us: int
    width: int
    height: int
    kind: int
    payload: bytes

    @classmethod
    def from_depth(cls, depth: DepthMap, seq: int, timestamp_us: int,
                   kind: FrameKind = FrameKind.PSEUDO_DEPTH) -> "FrameMessage":
        samples = np.rint(depth.values).astype("<u2")
        return cls(seq=seq, timestamp_us=timestamp_us, width=depth.width,
                   height=depth.height, kind=int(kind), payload=samples.tobytes())

    def to_depth(self) -> DepthMap:
        samples = np.frombuffer(self.payload, dtype="<u2").reshape(self.height, self.width)
        return DepthMap(width=self.width, height=self.height, values=samples.astype(float))


def encode_frame(msg: FrameMessage) -> bytes:
    expected = msg.width * msg.height * 2
    if len(msg.payload) != expected:
        raise LengthMismatchError(f"payload is {len(msg.payload)} bytes, header implies {expected}")
    return HEADER.pack(MAGIC, msg.seq, msg.timestamp_us, msg.width, msg.height, msg.kind) + msg.payload


def decode_frame(data: bytes) -> FrameMessage:
    if len(data) < HEADER.size:
        raise TruncatedError(f"frame header needs {HEADER.size} bytes, got {len(data)}")
    magic, seq, ts, width, height, kind = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad frame magic {magic!r}")
    body = data[HEADER.size:]
    expected = width * height * 2
    if len(body) < expected:
        raise TruncatedError(f"payload truncated: {len(body)} of {expected} bytes")
    if len(body) > expected:
        raise LengthMismatchError(f"payload is {len(body)} bytes, header implies {expected}")
    return FrameMessage(seq=seq, timestamp_us=ts, width=width, height=height, kind=kind, payload=bytes(body))


def frame_to_stream(msg: FrameMessage) -> bytes:
    data = encode_frame(msg)
    return LENGTH_PREFIX.pack(len(data)) + data


def unframe(buffer: bytes) -> Tuple[FrameMessage, int]:
    """
    Decodes the first length-prefixed message of `buffer`.
    Returns the message and the number of bytes consumed.
    """
    if len(buffer) < LENGTH_PREFIX.size:
        raise TruncatedError("length prefix incomplete")
    (length,) = LENGTH_PREFIX.unpack_from(buffer)
    end = LENGTH_PREFIX.size + length
    if len(buffer) < end:
        raise TruncatedError(f"declared length {length}, only {len(buffer) - LENGTH_PREFIX.size} bytes available")
    return decode_frame(buffer[LENGTH_PREFIX.size:end]), end


def encode_command(cmd: AvoidCommandMsg) -> bytes:
    return f"{cmd.direction.value} {cmd.seq} {cmd.white_fraction:.4f}".encode("ascii")


def decode_command(data: bytes) -> AvoidCommandMsg:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as e:
        raise CommandFormatError(f"command is not ASCII: {data!r}") from e
    tokens = text.split(" ")
    try:
        direction = Direction(tokens[0])
    except ValueError:
        raise UnknownTokenError(f"unknown command token {tokens[0]!r}") from None
    if len(tokens) < 3:
        raise NonNumericFieldError(f"command {text!r} is missing fields")
    if len(tokens) > 3:
        raise TrailingGarbageError(f"unexpected trailing data in {text!r}")
    seq, fraction = tokens[1], tokens[2]
    if not _SEQ.fullmatch(seq):
        raise NonNumericFieldError(f"seq {seq!r} is not a decimal integer")
    if not _FRACTION.fullmatch(fraction):
        if fraction[:1].isdigit():
            raise TrailingGarbageError(f"unexpected trailing data in {fraction!r}")
        raise NonNumericFieldError(f"white fraction {fraction!r} is not a decimal number")
    try:
        return AvoidCommandMsg(direction=direction, seq=int(seq), white_fraction=float(fraction))
    except ValueError as e:
        raise CommandFormatError(str(e)) from e


class LatestCommandSlot:
    """
    Latest-wins holder for received commands, timed by an injected clock.
    Older or repeated seqs are ignored.
    """

    def __init__(self, staleness_window: float = DEFAULT_STALENESS, clock: Callable[[], float] = time.monotonic):
        self.staleness_window = staleness_window
        self.clock = clock
        self.latest: Optional[AvoidCommandMsg] = None
        self.received_at: Optional[float] = None
        self.last_taken_seq = -1

    def offer(self, msg: AvoidCommandMsg, now: Optional[float] = None) -> bool:
        if self.latest is not None and msg.seq <= self.latest.seq:
            return False
        self.latest = msg
        self.received_at = self.clock() if now is None else now
        return True

    def is_stale(self, now: Optional[float] = None) -> bool:
        if self.latest is None:
            return True
        now = self.clock() if now is None else now
        return now - self.received_at > self.staleness_window

    def take_new(self, now: Optional[float] = None) -> Optional[AvoidCommandMsg]:
        """The newest command, once, unless it went stale before being taken."""
        if self.latest is None or self.latest.seq <= self.last_taken_seq:
            return None
        self.last_taken_seq = self.latest.seq
        if self.is_stale(now):
            logger.warning("[Link] Command %d went stale before use", self.latest.seq)
            return None
        return self.latest


class _CommandProtocol(asyncio.DatagramProtocol):
    def __init__(self, owner: "ControllerLink"):
        self.owner = owner

    def datagram_received(self, data: bytes, addr):
        try:
            msg = decode_command(data)
        except CommandFormatError as e:
            logger.warning("[Link] Dropping malformed datagram from %s: %s", addr, e)
            return
        self.owner._on_command(msg)


class ControllerLink:
    """
    Controller end of the channel pair: serves the frame stream and receives
    command datagrams. Frames sent before perception connects are buffered,
    keeping the newest 8.
    """

    def __init__(self, staleness_window: float, clock: Callable[[], float]):
        self.slot = LatestCommandSlot(staleness_window, clock)
        self.pending: Deque[bytes] = deque(maxlen=PENDING_FRAMES)
        self.dropped_frames = 0
        self.frame_addr = ""
        self.command_addr = ""
        self._server: Optional[asyncio.AbstractServer] = None
        self._udp: Optional[asyncio.DatagramTransport] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._connected = asyncio.Event()
        self._arrived = asyncio.Event()

    async def _bind(self, frame_endpoint: str, command_endpoint: str):
        loop = asyncio.get_running_loop()
        f_host, f_port = parse_addr(frame_endpoint)
        c_host, c_port = parse_addr(command_endpoint)
        try:
            self._server = await asyncio.start_server(self._on_connect, f_host, f_port)
            self._udp, _ = await loop.create_datagram_endpoint(
                lambda: _CommandProtocol(self), local_addr=(c_host, c_port))
        except OSError as e:
            await self.close()
            raise ChannelError(f"cannot bind link endpoints {frame_endpoint} / {command_endpoint}: {e}") from e
        self.frame_addr = format_addr(*self._server.sockets[0].getsockname()[:2])
        self.command_addr = format_addr(*self._udp.get_extra_info("sockname")[:2])
        logger.debug("[Link] Frames on %s, commands on %s", self.frame_addr, self.command_addr)

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if self._writer is not None:
            logger.warning("[Link] Rejecting second perception peer %s", writer.get_extra_info("peername"))
            writer.close()
            return
        self._writer = writer
        while self.pending:
            writer.write(self.pending.popleft())
        await writer.drain()
        self._connected.set()
        logger.info("[Link] Perception connected from %s", writer.get_extra_info("peername"))

    def _on_command(self, msg: AvoidCommandMsg):
        if self.slot.offer(msg):
            logger.debug("[Link] Command %s %d %.4f", msg.direction.value, msg.seq, msg.white_fraction)
        self._arrived.set()

    async def wait_connected(self, timeout: float) -> bool:
        try:
            await asyncio.wait_for(self._connected.wait(), timeout)
            return True
        except asyncio.TimeoutError:
            return False

    async def send_frame(self, msg: FrameMessage):
        data = frame_to_stream(msg)
        if self._writer is None:
            if len(self.pending) == self.pending.maxlen:
                self.dropped_frames += 1
                logger.warning("[Link] No perception peer, dropping oldest buffered frame")
            self.pending.append(data)
            return
        self._writer.write(data)
        await self._writer.drain()

    async def wait_for_command(self, seq: int, timeout: float) -> bool:
        """Waits until a command with at least this seq has been received."""
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while self.slot.latest is None or self.slot.latest.seq < seq:
            remaining = deadline - loop.time()
            if remaining <= 0:
                return False
            self._arrived.clear()
            try:
                await asyncio.wait_for(self._arrived.wait(), remaining)
            except asyncio.TimeoutError:
                return False
        return True

    def take_new(self, now: Optional[float] = None) -> Optional[AvoidCommandMsg]:
        return self.slot.take_new(now)

    async def close(self):
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            self._writer = None
        if self._udp is not None:
            self._udp.close()
            self._udp = None
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None


async def run_channel_pair(
    frame_endpoint: str,
    command_endpoint: str,
    staleness_window: float = DEFAULT_STALENESS,
    clock: Callable[[], float] = time.monotonic,
) -> ControllerLink:
    """
    Binds the controller side of both channels. Port 0 picks a free port;
    the bound addresses are on the returned handle.
    """
    link = ControllerLink(staleness_window, clock)
    await link._bind(frame_endpoint, command_endpoint)
    return link


class FrameReceiver:
    """
    Reads the frame stream in the background and keeps only the newest
    pseudo-depth frame, plus the reference frame sharing its seq.
    """

    def __init__(self, reader: asyncio.StreamReader):
        self.reader = reader
        self.newest: Optional[FrameMessage] = None
        self.references: Dict[int, FrameMessage] = {}
        self.last_returned = -1
        self.dropped = 0
        self.closed = False
        self._changed = asyncio.Event()
        self._task: Optional[asyncio.Task] = None

    def start(self):
        self._task = asyncio.create_task(self._pump())

    async def _pump(self):
        try:
            while True:
                (length,) = LENGTH_PREFIX.unpack(await self.reader.readexactly(LENGTH_PREFIX.size))
                msg = decode_frame(await self.reader.readexactly(length))
                if msg.kind == FrameKind.REFERENCE:
                    self.references[msg.seq] = msg
                    continue
                if self.newest is not None and self.newest.seq > self.last_returned:
                    self.dropped += 1
                    logger.warning("[Link] Frame %d superseded by %d before use", self.newest.seq, msg.seq)
                self.newest = msg
                self._changed.set()
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except LinkError as e:
            logger.error("[Link] Corrupt frame stream: %s", e)
        finally:
            self.closed = True
            self._changed.set()

    async def next_frame(self) -> Optional[Tuple[FrameMessage, Optional[FrameMessage]]]:
        """Newest unseen frame and its reference, or None once the stream has ended."""
        while self.newest is None or self.newest.seq <= self.last_returned:
            if self.closed:
                return None
            self._changed.clear()
            await self._changed.wait()
        frame = self.newest
        self.last_returned = frame.seq
        reference = self.references.pop(frame.seq, None)
        for seq in [s for s in self.references if s < frame.seq]:
            del self.references[seq]
        return frame, reference


class PerceptionLink:
    """Perception end: consumes the frame stream, sends command datagrams."""

    def __init__(self, reader, writer, udp: asyncio.DatagramTransport):
        self.frames = FrameReceiver(reader)
        self._writer = writer
        self._udp = udp

    def send_command(self, msg: AvoidCommandMsg):
        self._udp.sendto(encode_command(msg))

    async def close(self):
        self._udp.close()
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def connect_perception(frame_addr: str, command_addr: str) -> PerceptionLink:
    loop = asyncio.get_running_loop()
    f_host, f_port = parse_addr(frame_addr)
    c_host, c_port = parse_addr(command_addr)
    try:
        reader, writer = await asyncio.open_connection(f_host, f_port)
        udp, _ = await loop.create_datagram_endpoint(asyncio.DatagramProtocol, remote_addr=(c_host, c_port))
    except OSError as e:
        raise ChannelError(f"cannot reach controller at {frame_addr} / {command_addr}: {e}") from e
    link = PerceptionLink(reader, writer, udp)
    link.frames.start()
    return link
