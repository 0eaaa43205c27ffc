"""Websocket bridge between a live session and the operator console.

Wire format: every websocket text message carries one length-prefixed JSON
frame, ``<byte length of JSON>\\n<JSON>``.  Messages are ``hello`` (role
handshake), ``snapshot`` (server to clients, 60 Hz of simulated time),
``command`` (operator handle position) and ``error``.

One operator connection drives the session; any number of observers watch.
The session ticker is the single writer: commands land in a queue and are
applied only at haptic tick boundaries, and the ticker pauses whenever the
operator is away.  Slow observers lose oldest snapshots first; the
operator's stream is never dropped.
"""

from __future__ import annotations

import asyncio
import json
import math
from dataclasses import dataclass

from websockets.asyncio.server import serve as ws_serve
from websockets.exceptions import ConnectionClosed

from .session import Scenario, SessionEngine, write_report

DEFAULT_PORT = 8732
MESSAGE_TYPES = ("hello", "snapshot", "command", "error")
OBSERVER_QUEUE = 32  # snapshots buffered per observer before dropping oldest


class ProtocolError(ValueError):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


# --------------------------------------------------------------------------
# Frame codec
# --------------------------------------------------------------------------

def encode_frame(message: dict) -> bytes:
    """Length-prefixed JSON frame bytes for one protocol message."""
    if "type" not in message:
        raise ProtocolError("missing-type", "message has no type field")
    if message["type"] not in MESSAGE_TYPES:
        raise ProtocolError("unknown-type", f"unknown message type {message['type']!r}")
    body = json.dumps(message, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return str(len(body)).encode("ascii") + b"\n" + body


def decode_frame(data: bytes | str) -> dict:
    """Decode one frame; raises ProtocolError on any malformation."""
    raw = data.encode("utf-8") if isinstance(data, str) else data
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ProtocolError("bad-frame", "missing length prefix")
    try:
        length = int(head)
    except ValueError:
        raise ProtocolError("bad-frame", f"invalid length prefix {head!r}") from None
    if len(body) < length:
        raise ProtocolError("truncated-frame", f"expected {length} bytes, got {len(body)}")
    if len(body) > length:
        raise ProtocolError("bad-frame", f"expected {length} bytes, got {len(body)}")
    try:
        message = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("bad-json", str(exc)) from None
    if not isinstance(message, dict):
        raise ProtocolError("bad-frame", "frame payload is not an object")
    mtype = message.get("type")
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError("unknown-type", f"unknown message type {mtype!r}")
    return message


def error_message(code: str, detail: str) -> dict:
    return {"type": "error", "code": code, "detail": detail}


# --------------------------------------------------------------------------
# Messages
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HandleCommand:
    client_t: float
    position_mm: float
    engaged: bool

    def to_message(self) -> dict:
        return {
            "type": "command",
            "t_s": self.client_t,
            "position_mm": self.position_mm,
            "engaged": self.engaged,
        }


def parse_command(message: dict) -> HandleCommand:
    if message.get("type") != "command":
        raise ProtocolError("unknown-type", f"expected a command, got {message.get('type')!r}")
    try:
        t = float(message["t_s"])
        pos = float(message["position_mm"])
        engaged = message["engaged"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError("invalid-command", f"malformed command fields: {exc}") from None
    if not isinstance(engaged, bool):
        raise ProtocolError("invalid-command", "engaged must be a boolean")
    if not (math.isfinite(t) and math.isfinite(pos)):
        raise ProtocolError("invalid-command", "command fields must be finite")
    return HandleCommand(client_t=t, position_mm=pos, engaged=engaged)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

class BridgeServer:
    """Running bridge around one live session engine.

    `speed` scales simulated time against wall time (1.0 = real time);
    tests crank it up so sessions finish quickly.
    """

    def __init__(self, scenario: Scenario, port: int = DEFAULT_PORT, speed: float = 1.0):
        if scenario.operator.kind != "live":
            raise ValueError("bridge serving requires a scenario with a live operator")
        self.engine = SessionEngine(scenario)
        self.port = port
        self.speed = speed
        self._server = None
        self._ticker_task = None
        self._operator = None  # the websocket currently driving the session
        self._observers: dict[object, asyncio.Queue] = {}
        self._last_published_t = -1.0

    # -- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        # Protocol keepalive stays off: the bridge is a localhost service,
        # disconnects arrive as close frames, and fast-forwarded sessions can
        # stall the loop long enough to miss a pong deadline.
        self._server = await ws_serve(
            self._handle, "127.0.0.1", self.port, ping_interval=None
        )
        self.port = self._server.sockets[0].getsockname()[1]
        self._ticker_task = asyncio.create_task(self._run_ticker())

    async def stop(self) -> None:
        if self._ticker_task is not None:
            self._ticker_task.cancel()
            try:
                await self._ticker_task
            except asyncio.CancelledError:
                pass
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    # -- publishing ----------------------------------------------------------

    def _publish(self) -> None:
        snap = self.engine.snapshot()
        if snap.t <= self._last_published_t:
            return  # stream must never reorder or repeat t
        self._last_published_t = snap.t
        payload = encode_frame(snap.to_dict()).decode("utf-8")
        if self._operator is not None:
            self._operator_queue.put_nowait(payload)
        for queue in self._observers.values():
            if queue.full():
                queue.get_nowait()  # drop the oldest for slow observers
            queue.put_nowait(payload)

    async def _run_ticker(self) -> None:
        # 60 Hz of simulated time at real-time speed; when fast-forwarding,
        # stretch the simulated interval so clients still see ~60 frames per
        # wall second instead of a flood that swamps their socket buffers.
        publish_dt = (1.0 / 60.0) * max(self.speed, 1.0)
        next_publish = 0.0
        loop = asyncio.get_running_loop()
        last_wall = loop.time()
        while not self.engine.done:
            if self._operator is None:
                # Session pauses at the current tick until an operator is in.
                last_wall = loop.time()
                await asyncio.sleep(0.02)
                continue
            if self._operator_queue.qsize() > 8:
                # Operator snapshots are never dropped; when the operator
                # cannot keep up the session itself waits (backpressure).
                last_wall = loop.time()
                await asyncio.sleep(0.005)
                continue
            now = loop.time()
            # Short bursts keep the event loop responsive (pings, commands)
            # even when simulated time runs far faster than wall time.
            budget = min((now - last_wall) * self.speed, 0.02 * self.speed)
            last_wall = now
            target = self.engine.t + budget
            while self.engine.t < target and not self.engine.done:
                self.engine.step_once()
                if self.engine.t >= next_publish:
                    self._publish()
                    next_publish = self.engine.t + publish_dt
            await asyncio.sleep(0.002)
        self._publish()

    # -- connections -----------------------------------------------------------

    async def _send_error(self, ws, code: str, detail: str) -> None:
        try:
            await ws.send(encode_frame(error_message(code, detail)).decode("utf-8"))
        except ConnectionClosed:
            pass

    async def _handle(self, ws) -> None:
        try:
            hello_raw = await ws.recv()
        except ConnectionClosed:
            return
        try:
            hello = decode_frame(hello_raw)
            if hello.get("type") != "hello" or hello.get("role") not in ("operator", "observer"):
                raise ProtocolError("bad-hello", "first frame must be a hello with a role")
        except ProtocolError as exc:
            await self._send_error(ws, exc.code, exc.detail)
            return

        role = hello["role"]
        if role == "operator":
            if self._operator is not None:
                await self._send_error(ws, "operator-slot-taken", "operator slot taken")
                return
            self._operator = ws
            self._operator_queue = asyncio.Queue()
            sender = asyncio.create_task(self._pump(ws, self._operator_queue))
            try:
                await self._operator_loop(ws)
            finally:
                sender.cancel()
                self._operator = None
        else:
            queue: asyncio.Queue = asyncio.Queue(maxsize=OBSERVER_QUEUE)
            self._observers[ws] = queue
            sender = asyncio.create_task(self._pump(ws, queue))
            try:
                async for raw in ws:
                    await self._send_error(ws, "not-operator", "observers are read-only")
            except ConnectionClosed:
                pass
            finally:
                sender.cancel()
                self._observers.pop(ws, None)

    async def _pump(self, ws, queue: asyncio.Queue) -> None:
        try:
            while True:
                await ws.send(await queue.get())
        except (ConnectionClosed, asyncio.CancelledError):
            pass

    async def _operator_loop(self, ws) -> None:
        try:
            async for raw in ws:
                try:
                    message = decode_frame(raw)
                    if message["type"] == "command":
                        cmd = parse_command(message)
                        self.engine.submit_command(
                            cmd.position_mm, cmd.engaged, cmd.client_t
                        )
                    elif message["type"] != "hello":
                        raise ProtocolError(
                            "unexpected-type", f"cannot handle {message['type']!r} here"
                        )
                except ProtocolError as exc:
                    await self._send_error(ws, exc.code, exc.detail)
                except ValueError as exc:
                    await self._send_error(ws, "invalid-command", str(exc))
        except ConnectionClosed:
            pass


async def serve(scenario: Scenario, port: int = DEFAULT_PORT, speed: float = 1.0) -> BridgeServer:
    """Start a bridge for a live session; returns the running server handle."""
    server = BridgeServer(scenario, port=port, speed=speed)
    await server.start()
    return server


def serve_forever(scenario: Scenario, port: int = DEFAULT_PORT, out_dir=None) -> int:
    """Blocking entry point used by the CLI serve subcommand."""

    async def _main() -> int:
        server = await serve(scenario, port)
        print(f"bridge listening on ws://127.0.0.1:{server.port}")
        try:
            while not server.engine.done:
                await asyncio.sleep(0.2)
        finally:
            await server.stop()
        if out_dir is not None:
            path = write_report(server.engine.report(), out_dir)
            print(f"report written to {path}")
        return 0

    try:
        return asyncio.run(_main())
    except KeyboardInterrupt:
        print("interrupted")
        return 130
    except OSError as exc:
        print(f"startup error: {exc}")
        return 1
