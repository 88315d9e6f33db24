"""Live asyncio driver: one node per process, speaking RESP to clients.

A process hosts one :class:`Node` plus one :class:`Client` machine per RESP
connection; the client machine coordinates that connection's transactions.
Peers talk over TCP on the same port: a peer connection opens with
``MAGIC + u16 len + sender id`` and then carries :class:`Message` frames in
order. Each destination gets one outgoing connection, so every link is FIFO.

Message destinations are node ids or client ids. Client ids look like
``<node>/<boot nonce>/c<n>``, so any node can route a reply to the process
that owns the client. Protocol ticks become wall-clock time at ``tick_ms``.

There is no failure detector in live mode: roles come from the config file
and stay fixed. A durable node recovers from its log file on restart.
"""

from __future__ import annotations

import asyncio
import logging
import os
import secrets
import signal
import struct

from .client import Client
from .commands import OK, Command, ReplyError, Status
from .common import EngineMode
from .config import ClusterConfig
from .machine import ClusterView, Effects
from .node import Node
from .protocol import Message, ProtocolError as FrameError
from .resp import ProtocolError, decode_command, encode_reply
from .wal import FileDevice, WalIoError, WriteAheadLog

MAGIC = b"\x00XKV"
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")
# largest frame accepted from a peer
MAX_FRAME = 64 << 20

log = logging.getLogger("crosskv.server")


class BindFailure(OSError):
    pass


class _Link:
    """Ordered outgoing stream to one peer; reconnects and keeps queued frames."""

    def __init__(self, server: "NodeServer", dst: str):
        self.server = server
        self.dst = dst
        self.queue: asyncio.Queue[bytes] = asyncio.Queue()
        self.task = asyncio.get_running_loop().create_task(self._run())

    def put(self, frame: bytes) -> None:
        self.queue.put_nowait(frame)

    async def _run(self) -> None:
        spec = self.server.config.node(self.dst)
        backoff = 0.02
        pending: bytes | None = None
        while True:
            try:
                reader, writer = await asyncio.open_connection(spec.host, spec.port)
            except OSError:
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, 0.5)
                continue
            backoff = 0.02
            me = self.server.node_id.encode()
            try:
                writer.write(MAGIC + _U16.pack(len(me)) + me)
                while True:
                    if pending is None:
                        pending = await self.queue.get()
                    writer.write(pending)
                    await writer.drain()
                    pending = None
            except (OSError, ConnectionError):
                # the frame in hand may or may not have arrived; the protocol retries
                pending = None
                log.debug("link to %s lost", self.dst)
            finally:
                writer.close()

    def close(self) -> None:
        self.task.cancel()


class NodeServer:
    def __init__(self, config: ClusterConfig, node_id: str):
        self.config = config
        self.node_id = node_id
        self.spec = config.node(node_id)
        self.slot_map = config.slot_map()
        self.view = ClusterView(tuple(config.groups()))
        self.nonce = secrets.token_hex(4)
        self.clients: dict[str, Client] = {}
        self.waiters: dict[str, asyncio.Queue] = {}
        self.links: dict[str, _Link] = {}
        self.device: FileDevice | None = None
        self.node: Node | None = None
        self._server: asyncio.AbstractServer | None = None
        self._t0 = 0.0
        self._conn_counter = 0
        self._stopped: asyncio.Event | None = None
        self.failed: BaseException | None = None

    # ------------------------------------------------------------- lifecycle

    def _build_node(self) -> Node:
        c = self.config
        if c.engine is EngineMode.DURABLE:
            os.makedirs(c.wal_dir, exist_ok=True)
            path = c.wal_path(self.node_id)
            existed = os.path.exists(path) and os.path.getsize(path) > 0
            self.device = FileDevice(path)
            wal = WriteAheadLog.open(self.device)
            if existed:
                node = Node.recover(self.node_id, self.slot_map, self.view, wal, c.timing)
                r = node.recovered
                log.info("%s recovered %d keys, %d commits, %d in doubt", self.node_id,
                         len(r.committed), len(r.commit_order), len(r.in_doubt))
                return node
            return Node(self.node_id, self.slot_map, self.view, c.engine, c.replication, c.timing, wal)
        # highly available: memory is empty at every boot, replicas copy the master
        return Node.rejoin(self.node_id, self.slot_map, self.view, c.engine, c.replication, c.timing)

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._t0 = loop.time()
        self._stopped = asyncio.Event()
        self.node = self._build_node()
        try:
            self._server = await asyncio.start_server(self._on_connection, self.spec.host, self.spec.port)
        except OSError as exc:
            self._close_device()
            raise BindFailure(f"cannot bind {self.spec.addr}: {exc}") from exc
        log.info("%s (%s) listening on %s, engine=%s replication=%s", self.node_id, self.node.role,
                 self.spec.addr, self.config.engine.value, self.config.replication.value)
        self._run_machine(self.node_id, self.node.start)

    async def serve_forever(self) -> None:
        await self.start()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            try:
                loop.add_signal_handler(sig, self.stop)
            except (NotImplementedError, RuntimeError):
                pass
        await self._stopped.wait()
        await self.shutdown()
        if self.failed is not None:
            raise self.failed

    def stop(self) -> None:
        if self._stopped is not None:
            self._stopped.set()

    async def shutdown(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for link in self.links.values():
            link.close()
        self._close_device()
        log.info("%s stopped", self.node_id)

    def _close_device(self) -> None:
        if self.device is not None:
            self.device.close()
            self.device = None

    # -------------------------------------------------------------- machines

    def now(self) -> int:
        loop = asyncio.get_running_loop()
        return int((loop.time() - self._t0) * 1000 / self.config.tick_ms)

    def _run_machine(self, proc: str, fn, *args) -> None:
        if self.failed is not None:
            return
        ctx = Effects(self.now())
        try:
            fn(*args, ctx)
        except WalIoError as exc:
            log.error("%s: write-ahead log failure, stopping: %s", self.node_id, exc)
            self.failed = exc
            self.stop()
            return
        for kind, fields in ctx.events:
            log.debug("%s %s", kind, fields)
        loop = asyncio.get_running_loop()
        for delay, key in ctx.timers:
            loop.call_later(delay * self.config.tick_ms / 1000, self._fire, proc, key)
        for msg in ctx.out:
            self._route(msg)
        client = self.clients.get(proc)
        if client is not None and client.completed:
            done, client.completed = client.completed, []
            for _, reply in done:
                self.waiters[proc].put_nowait(reply)

    def _fire(self, proc: str, key: tuple) -> None:
        if proc == self.node_id:
            self._run_machine(proc, self.node.on_timer, key)
        elif proc in self.clients:
            self._run_machine(proc, self.clients[proc].on_timer, key)

    def _deliver(self, msg: Message) -> None:
        if msg.dst == self.node_id:
            self._run_machine(self.node_id, self.node.on_message, msg)
        elif msg.dst in self.clients:
            self._run_machine(msg.dst, self.clients[msg.dst].on_message, msg)
        # else: a reply for a client whose connection has gone

    def _route(self, msg: Message) -> None:
        home = msg.dst.split("/", 1)[0]
        if home == self.node_id:
            asyncio.get_running_loop().call_soon(self._deliver, msg)
            return
        link = self.links.get(home)
        if link is None:
            try:
                self.config.node(home)
            except ValueError:
                log.warning("no route to %s", msg.dst)
                return
            link = self.links[home] = _Link(self, home)
        link.put(msg.encode())

    # ----------------------------------------------------------- connections

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            head = await reader.readexactly(1)
        except (asyncio.IncompleteReadError, ConnectionError):
            writer.close()
            return
        try:
            if head == MAGIC[:1]:
                await self._peer(head, reader)
            else:
                await self._resp(head, reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    async def _peer(self, head: bytes, reader: asyncio.StreamReader) -> None:
        rest = await reader.readexactly(len(MAGIC) - 1)
        if head + rest != MAGIC:
            return
        (n,) = _U16.unpack(await reader.readexactly(2))
        peer = (await reader.readexactly(n)).decode()
        log.debug("peer link from %s", peer)
        while True:
            raw = await reader.readexactly(4)
            (length,) = _U32.unpack(raw)
            if not 22 <= length <= MAX_FRAME:
                log.warning("bad frame length %d from %s", length, peer)
                return
            frame = raw + await reader.readexactly(length)
            try:
                msg = Message.decode(frame)
            except (FrameError, ValueError) as exc:
                log.warning("dropping link from %s: %s", peer, exc)
                return
            self._deliver(msg)

    async def _resp(self, head: bytes, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._conn_counter += 1
        cid = f"{self.node_id}/{self.nonce}/c{self._conn_counter}"
        spec_of = self.config.node

        def slots_reply():
            out = []
            for i, (lo, hi) in enumerate(self.slot_map.ranges()):
                members = [spec_of(m) for m in self.view.groups[i].members]
                out.append([lo, hi] + [[m.host.encode(), m.port, m.id.encode()] for m in members])
            return out

        client = Client(cid, self.slot_map, self.view, self.config.timing, slots_reply)
        self.clients[cid] = client
        self.waiters[cid] = asyncio.Queue()
        buf = bytearray(head)
        try:
            while True:
                while True:
                    try:
                        got = decode_command(bytes(buf))
                    except ProtocolError as exc:
                        writer.write(encode_reply(ReplyError(f"ERR protocol error: {exc}")))
                        await writer.drain()
                        return
                    if got is None:
                        break
                    cmd, used = got
                    del buf[:used]
                    reply = await self._execute(cid, client, cmd)
                    writer.write(encode_reply(reply))
                    await writer.drain()
                    if cmd.verb == "QUIT":
                        return
                data = await reader.read(65536)
                if not data:
                    return
                buf += data
        finally:
            del self.clients[cid]
            del self.waiters[cid]

    async def _execute(self, cid: str, client: Client, cmd: Command):
        if cmd.verb == "QUIT":
            return OK
        if cmd.verb == "DEBUG":
            return self._debug(cmd)
        self._run_machine(cid, client.submit, cmd)
        return await self.waiters[cid].get()

    def _debug(self, cmd: Command):
        sub = cmd.args[0].upper() if cmd.args else b""
        store = self.node.store
        if sub == b"COMMITTED" and len(cmd.args) == 1:
            items = sorted(store.committed_items().items())
            return [x for kv in items for x in kv]
        if sub == b"ROLE" and len(cmd.args) == 1:
            return Status(self.node.role)
        if sub == b"INDOUBT" and len(cmd.args) == 1:
            return [str(t).encode() for t in store.undecided()]
        return ReplyError("ERR DEBUG subcommands: COMMITTED | ROLE | INDOUBT")


def serve(config: ClusterConfig, node_id: str) -> None:
    asyncio.run(NodeServer(config, node_id).serve_forever())
