"""Newline-delimited JSON front end of the sustainability service, plus a trace-replay source."""
from __future__ import annotations

import asyncio
import json
import logging

import numpy as np

from todqos.errors import ConfigError
from todqos.inference import InferenceEngine, PredictionRequest
from todqos.simkit.trace import TraceLog
from todqos.sustain.core import FlowSnapshot, SustainService

log = logging.getLogger(__name__)


class TraceReplay:
    """Serves the ToD flow of a recorded trace as if it were unfolding live.

    At time ``now`` only windows that have finished are history. In perfect
    input mode the recorded future stands in for exact input estimates.
    """

    def __init__(self, trace: TraceLog, engine: InferenceEngine, request: PredictionRequest):
        self.trace = trace
        self.engine = engine
        self.request = request
        self.sw = engine.sample_window
        self._ends = np.asarray(trace.t, dtype=float) + self.sw

    @property
    def horizon_windows(self) -> int:
        return self.request.n_steps * self.engine.windows_per_step(self.request.step)

    def available(self, now: float) -> int:
        return int(np.searchsorted(self._ends, now + 1e-9, side="right"))

    @property
    def last_time(self) -> float:
        """Latest ``now`` at which a full horizon of ground truth remains."""
        return float(self._ends[len(self.trace) - self.horizon_windows - 1]) if len(self.trace) > self.horizon_windows else 0.0

    def __call__(self, now: float) -> FlowSnapshot:
        i = self.available(now)
        hist = self.trace.slice(max(0, i - self.engine.history_len), i)
        fut = self.trace.slice(i, i + self.horizon_windows)
        series = self.engine.handle_request(self.request, hist, fut)
        if i:
            loc = (float(self.trace.tod_pos[i - 1, 0]), float(self.trace.tod_pos[i - 1, 1]))
            cell = int(self.trace.serving_cell[i - 1])
        else:
            loc, cell = (float(self.trace.tod_pos[0, 0]), float(self.trace.tod_pos[0, 1])), int(self.trace.serving_cell[0])
        return FlowSnapshot(series, loc, cell)


def _dump(msg: dict) -> bytes:
    return (json.dumps(msg, sort_keys=True) + "\n").encode()


class SustainServer:
    """TCP server: clients subscribe, the evaluation loop pushes ``notify`` lines.

    Service time starts at ``t_start`` and advances by ``period`` per cycle;
    ``speed`` > 1 replays faster than wall-clock time.
    """

    def __init__(self, service: SustainService, *, host: str = "127.0.0.1", port: int = 0,
                 period: float = 1.0, t_start: float = 0.0, t_end: float | None = None,
                 speed: float = 1.0, grace: float = 30.0):
        self.service = service
        self.host, self.port = host, port
        self.period = period
        self.now = t_start
        self.t_end = t_end
        self.speed = speed
        self.grace = grace
        self.lock = asyncio.Lock()
        self._owner: dict[str, asyncio.StreamWriter] = {}
        self._gone: dict[str, float] = {}  # sub_id -> time its client disconnected
        self._server = None
        self.delivered: list = []

    async def start(self):
        self._server = await asyncio.start_server(self._client, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("sustainability service listening on %s:%d", self.host, self.port)
        return self.host, self.port

    async def close(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        mine = []
        try:
            while line := await reader.readline():
                reply = await self._handle(line, writer, mine)
                if reply is not None:
                    writer.write(_dump(reply))
                    await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            for sid in mine:
                if self._owner.get(sid) is writer:
                    self._gone[sid] = self.now
            writer.close()

    async def _handle(self, line: bytes, writer, mine: list) -> dict | None:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"type": "error", "field": "message", "message": f"invalid JSON: {exc.msg}"}
        if not isinstance(msg, dict):
            return {"type": "error", "field": "message", "message": "expected a JSON object"}
        kind, rid = msg.get("type"), msg.get("request_id")
        async with self.lock:
            if kind == "subscribe":
                try:
                    sid = self.service.registry.subscribe(msg, request_id=rid)
                except ConfigError as exc:
                    return {"type": "error", "request_id": rid, "field": exc.field, "message": str(exc)}
                self._owner[sid] = writer
                self._gone.pop(sid, None)
                if sid not in mine:
                    mine.append(sid)
                return {"type": "subscribe_ack", "request_id": rid, "sub_id": sid}
            if kind == "unsubscribe":
                sid = msg.get("sub_id")
                if not self.service.registry.unsubscribe(sid):
                    return {"type": "error", "request_id": rid, "field": "sub_id",
                            "message": f"unknown subscription {sid!r}"}
                self._owner.pop(sid, None)
                return {"type": "unsubscribe", "request_id": rid, "sub_id": sid, "ok": True}
        return {"type": "error", "request_id": rid, "field": "type", "message": f"unknown message type {kind!r}"}

    async def step(self) -> list:
        """Run one evaluation cycle at the current service time and deliver its output."""
        async with self.lock:
            for sid, t in list(self._gone.items()):
                if self.now - t > self.grace:
                    self.service.registry.unsubscribe(sid)
                    self._gone.pop(sid)
                    self._owner.pop(sid, None)
            notes = self.service.cycle(self.now)
            for n in notes:
                self.delivered.append(n)
                w = self._owner.get(n.sub_id)
                if w is not None and not w.is_closing():
                    w.write(_dump(n.to_message()))
            for w in {id(w): w for w in self._owner.values()}.values():
                if not w.is_closing():
                    try:
                        await w.drain()
                    except ConnectionError:
                        pass
            self.now += self.period
        return notes

    async def run(self, cycles: int | None = None):
        done = 0
        while (cycles is None or done < cycles) and (self.t_end is None or self.now <= self.t_end):
            await asyncio.sleep(self.period / self.speed)
            await self.step()
            done += 1
