"""Distributed candidate evaluation over a seeds-and-scalars protocol.

A coordinator drives the optimizer loop; workers evaluate candidates they
reconstruct locally. Every side keeps a mirror of the optimizer state,
built from the same run description and advanced by the same
deterministic updates, so the wire never carries distributions or
weights. One generation:

    coordinator  ask -> EvalJob per candidate, contiguous blocks per worker
    workers      rebuild candidate from counter-based seed, evaluate
    coordinator  gather reports, re-broadcast all of them, tell
    workers      collect the broadcast reports, tell

Reports are deduplicated by candidate index. Candidates that fail or go
missing are reassigned once across responsive workers; a generation that
still cannot complete fails the run rather than dropping candidates.
Resume replays recorded per-generation rewards through the same message
vocabulary so fresh workers fast-forward their mirrors.
"""

from __future__ import annotations

import math
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import cmaes, rng
from .errors import (
    ConfigMismatch,
    CorruptCheckpoint,
    GenerationFailed,
    InvalidCluster,
    InvalidConfig,
    ProtocolViolation,
    WorkerUnreachable,
)
from .fitness import FitnessSpec, evaluate, subset_hash, subset_select
from .lowrank import PerturbationLayout, adapters_digest, apply_candidate
from .wire import (
    ACK_BAD_VERSION,
    ACK_CONFIG_MISMATCH,
    ACK_OK,
    EvalJob,
    FrameDecoder,
    Hello,
    HelloAck,
    JobError,
    Message,
    PROTOCOL_VERSION,
    RewardReport,
    Shutdown,
    encode_frame,
)

ERR_EVAL_FAILED = 1
ERR_SEED_MISMATCH = 2
ERR_CONFIG_MISMATCH = 3
ERR_BAD_INDEX = 4

REPLAY_WORKER_ID = 0xFFFFFFFF

STATE_FILE = "cma_state.bin"
BEST_FILE = "best_candidate.bin"
HISTORY_FILE = "reward_log.bin"
METRICS_FILE = "run_metrics.csv"
SUBSETS_FILE = "subset_manifest.csv"
METRICS_HEADER = "generation,evaluations,best,mean,worst,wall_millis,subset_hash"

BEST_MAGIC = b"ESBS"
HISTORY_MAGIC = b"ESRH"
SIDE_VERSION = 1

MIN_TOP_SIGMA = 1e-4


# --- run description --------------------------------------------------------


@dataclass(frozen=True)
class ClusterConfig:
    population: int
    workers: int
    transport: str = "inproc"
    host: str = "127.0.0.1"
    port: int = 0
    generation_timeout: float = 300.0
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.population <= 0 or self.workers <= 0:
            raise InvalidCluster(
                f"population {self.population} and workers {self.workers} must be positive")
        if self.population % self.workers:
            raise InvalidCluster(
                f"population {self.population} not divisible by workers {self.workers}")
        if self.transport not in ("inproc", "socket"):
            raise InvalidCluster(f"unknown transport {self.transport!r}")
        if self.generation_timeout <= 0 or self.checkpoint_every <= 0:
            raise InvalidCluster("timeout and checkpoint cadence must be positive")


@dataclass(frozen=True)
class RunContext:
    """Everything a worker needs to turn (generation, index, seed) into a
    reward; both sides hash it to detect drift."""

    spec: FitnessSpec
    dim: int
    sigma0: float
    master_seed: int
    model: object = None
    adapters: tuple = ()
    layout: PerturbationLayout | None = None

    def validate(self) -> None:
        if self.dim <= 0:
            raise InvalidConfig(f"dimension must be positive, got {self.dim}")
        if self.sigma0 <= 0:
            raise InvalidConfig(f"sigma0 must be positive, got {self.sigma0}")
        if self.spec.kind == "accuracy":
            if self.model is None or self.layout is None or not self.adapters:
                raise InvalidConfig("accuracy runs need a model, adapters and a layout")
            if self.layout.dim != self.dim:
                raise InvalidConfig(
                    f"layout dimension {self.layout.dim} != run dimension {self.dim}")
            for ad in self.adapters:
                for tag, svd in (("B", ad.svd_b), ("A", ad.svd_a)):
                    if svd is not None and float(np.max(svd.sigma)) <= MIN_TOP_SIGMA:
                        raise InvalidConfig(
                            f"{ad.name}.{tag}: top singular value <= {MIN_TOP_SIGMA:g}; "
                            "perturbing a degenerate factor is meaningless, run sft first")


def config_hash(ctx: RunContext, cluster: ClusterConfig) -> bytes:
    """32-byte digest of everything that must agree across all parties."""
    import hashlib

    h = hashlib.sha256()
    h.update(struct.pack("<IQQI", PROTOCOL_VERSION, ctx.dim, ctx.master_seed,
                         cluster.population))
    h.update(repr(ctx.sigma0).encode())
    h.update(ctx.spec.describe().encode())
    if ctx.model is not None:
        from .model import model_digest

        h.update(model_digest(ctx.model))
    if ctx.adapters:
        h.update(adapters_digest(list(ctx.adapters)))
    if ctx.layout is not None:
        h.update(repr(ctx.layout.entries).encode())
        h.update(repr(ctx.layout.top_percent).encode())
    return h.digest()


def evaluate_candidate(ctx: RunContext, generation: cmaes.Generation, index: int) -> float:
    x = generation.candidates[index]
    if ctx.spec.kind != "accuracy":
        return evaluate(ctx.spec, None, x, generation.id, candidate_index=index)
    from .model import override_map

    pairs = apply_candidate(list(ctx.adapters), ctx.layout, x)
    overrides = override_map(list(ctx.adapters), pairs)
    return evaluate(ctx.spec, ctx.model, overrides, generation.id, candidate_index=index)


# --- worker side ------------------------------------------------------------


class WorkerRuntime:
    """Message handler around a mirrored optimizer state.

    handle() returns a list of reply messages, or None for shutdown.
    """

    def __init__(self, ctx: RunContext, cluster: ClusterConfig, worker_id: int):
        ctx.validate()
        cluster.validate()
        self.ctx = ctx
        self.worker_id = worker_id
        self.lam = cluster.population
        self.expected_hash = config_hash(ctx, cluster)
        self.state = cmaes.init(ctx.dim, ctx.sigma0, self.lam, ctx.master_seed)
        self._gen: cmaes.Generation | None = None
        self._rewards: dict[int, float] = {}

    def _ensure_generation(self, gen_id: int) -> None:
        if self._gen is None and self.state.generation == gen_id:
            self._gen = cmaes.ask(self.state)
            self._rewards = {}
        if self._gen is None or self._gen.id != gen_id:
            at = self._gen.id if self._gen is not None else self.state.generation
            raise ProtocolViolation(
                f"worker {self.worker_id}: message for generation {gen_id} while at {at}")

    def handle(self, msg: Message) -> list[Message] | None:
        if isinstance(msg, Shutdown):
            return None
        if isinstance(msg, EvalJob):
            return self._handle_job(msg)
        if isinstance(msg, RewardReport):
            self._handle_report(msg)
            return []
        raise ProtocolViolation(
            f"worker {self.worker_id}: unexpected {type(msg).__name__}")

    def _handle_job(self, job: EvalJob) -> list[Message]:
        if job.config_hash != self.expected_hash:
            return [JobError(job.generation, job.index, ERR_CONFIG_MISMATCH,
                             "job config hash does not match this worker")]
        if not 0 <= job.index < self.lam:
            return [JobError(job.generation, job.index, ERR_BAD_INDEX,
                             f"index outside population of {self.lam}")]
        expected = rng.candidate_seed(self.ctx.master_seed, job.generation, job.index)
        if job.seed != expected:
            return [JobError(job.generation, job.index, ERR_SEED_MISMATCH,
                             "candidate seed does not match local derivation")]
        self._ensure_generation(job.generation)
        started = time.perf_counter()
        try:
            reward = evaluate_candidate(self.ctx, self._gen, job.index)
        except Exception as e:
            return [JobError(job.generation, job.index, ERR_EVAL_FAILED, repr(e))]
        millis = int(round((time.perf_counter() - started) * 1000.0))
        return [RewardReport(job.generation, job.index, float(reward), millis,
                             self.worker_id)]

    def _handle_report(self, rep: RewardReport) -> None:
        if rep.generation < self.state.generation:
            return
        self._ensure_generation(rep.generation)
        self._rewards.setdefault(rep.index, rep.reward)
        if len(self._rewards) == self.lam:
            ordered = tuple(self._rewards[i] for i in range(self.lam))
            cmaes.tell(self.state, self._gen.with_rewards(ordered))
            self._gen = None
            self._rewards = {}


# --- transports -------------------------------------------------------------


class TransportCounters:
    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0
        self.sent_by_type: dict[str, int] = {}
        self.sent_bytes_by_type: dict[str, int] = {}

    def count_send(self, msg: Message, nbytes: int) -> None:
        name = type(msg).__name__
        self.bytes_sent += nbytes
        self.sent_by_type[name] = self.sent_by_type.get(name, 0) + 1
        self.sent_bytes_by_type[name] = self.sent_bytes_by_type.get(name, 0) + nbytes


class _TransportBase:
    """Shared gather queue, liveness tracking and byte counters."""

    def __init__(self):
        self.counters = TransportCounters()
        self._inbox: queue.Queue = queue.Queue()
        self._alive: set[int] = set()
        self.worker_errors: dict[int, BaseException] = {}

    @property
    def alive_workers(self) -> set[int]:
        return set(self._alive)

    def recv(self, timeout: float):
        """(worker_id, message) from any worker, or None on timeout."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                wid, item = self._inbox.get(timeout=remaining)
            except queue.Empty:
                return None
            if item is None:
                self._alive.discard(wid)
                if not self._alive:
                    raise WorkerUnreachable("all workers are gone")
                continue
            return wid, item


class InProcessTransport(_TransportBase):
    """Worker threads in this process, exchanging the same serialized
    frames the socket transport would."""

    def __init__(self, make_runtime, worker_hash: bytes | None = None):
        super().__init__()
        self._make_runtime = make_runtime
        self._worker_hash = worker_hash
        self._to_worker: list[queue.Queue] = []
        self._threads: list[threading.Thread] = []
        self._decoders: dict[int, FrameDecoder] = {}
        self._raw: queue.Queue = queue.Queue()

    def start(self, n_workers: int, expected_hash: bytes) -> None:
        if self._worker_hash is None:
            self._worker_hash = expected_hash
        for wid in range(n_workers):
            inbox = queue.Queue()
            self._to_worker.append(inbox)
            self._decoders[wid] = FrameDecoder()
            t = threading.Thread(target=self._worker_main, args=(wid, inbox),
                                 name=f"worker-{wid}", daemon=True)
            self._threads.append(t)
            t.start()
        pending = set(range(n_workers))
        deadline = time.monotonic() + 30.0
        while pending:
            try:
                wid, data = self._raw.get(timeout=max(0.01, deadline - time.monotonic()))
            except queue.Empty:
                raise WorkerUnreachable(f"workers {sorted(pending)} never said hello")
            if data is None:
                raise self.worker_errors.get(wid) or WorkerUnreachable(f"worker {wid} died")
            for msg in self._decoders[wid].feed(data):
                if not isinstance(msg, Hello):
                    raise ProtocolViolation(f"worker {wid}: expected Hello")
                if msg.version != PROTOCOL_VERSION:
                    self._push(wid, HelloAck(ACK_BAD_VERSION, wid))
                    raise ConfigMismatch(f"worker {wid} protocol version {msg.version}")
                if msg.config_hash != expected_hash:
                    self._push(wid, HelloAck(ACK_CONFIG_MISMATCH, wid))
                    raise ConfigMismatch(f"worker {wid} config hash mismatch")
                self._push(wid, HelloAck(ACK_OK, wid))
                self._alive.add(wid)
                pending.discard(wid)

    def _worker_main(self, wid: int, inbox: queue.Queue) -> None:
        decoder = FrameDecoder()
        runtime = None
        try:
            self._raw.put((wid, encode_frame(Hello(PROTOCOL_VERSION, self._worker_hash))))
            while True:
                data = inbox.get()
                for msg in decoder.feed(data):
                    if isinstance(msg, HelloAck):
                        if msg.status != ACK_OK:
                            raise ConfigMismatch(f"coordinator refused worker {wid}")
                        runtime = self._make_runtime(msg.worker_id)
                        continue
                    if runtime is None:
                        raise ProtocolViolation(f"worker {wid}: message before handshake")
                    replies = runtime.handle(msg)
                    if replies is None:
                        return
                    for rep in replies:
                        self._raw.put((wid, encode_frame(rep)))
        except BaseException as e:  # noqa: BLE001 - reported to the coordinator
            self.worker_errors[wid] = e
            self._raw.put((wid, None))

    def recv(self, timeout: float):
        deadline = time.monotonic() + timeout
        while True:
            try:
                return self._inbox.get_nowait()
            except queue.Empty:
                pass
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                wid, data = self._raw.get(timeout=remaining)
            except queue.Empty:
                return None
            if data is None:
                self._alive.discard(wid)
                if not self._alive:
                    raise WorkerUnreachable("all workers are gone")
                continue
            self.counters.bytes_received += len(data)
            for msg in self._decoders[wid].feed(data):
                self._inbox.put((wid, msg))

    def _push(self, wid: int, msg: Message) -> bool:
        data = encode_frame(msg)
        self.counters.count_send(msg, len(data))
        self._to_worker[wid].put(data)
        return True

    def send(self, wid: int, msg: Message) -> bool:
        if wid not in self._alive:
            return False
        return self._push(wid, msg)

    def broadcast(self, msg: Message) -> None:
        for wid in sorted(self._alive):
            self._push(wid, msg)

    def close(self) -> None:
        for wid in sorted(self._alive):
            self._push(wid, Shutdown())
        for t in self._threads:
            t.join(timeout=10.0)


class SocketTransport(_TransportBase):
    """Coordinator side of the TCP transport; workers dial in."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 accept_timeout: float = 60.0):
        super().__init__()
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(accept_timeout)
        self.host, self.port = self._listener.getsockname()[:2]
        self._conns: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._threads: list[threading.Thread] = []

    def start(self, n_workers: int, expected_hash: bytes) -> None:
        for wid in range(n_workers):
            try:
                conn, _ = self._listener.accept()
            except TimeoutError:
                raise WorkerUnreachable(
                    f"only {wid} of {n_workers} workers connected")
            conn.settimeout(30.0)
            hello = self._read_hello(conn)
            if hello.version != PROTOCOL_VERSION:
                conn.sendall(encode_frame(HelloAck(ACK_BAD_VERSION, wid)))
                raise ConfigMismatch(f"worker {wid} protocol version {hello.version}")
            if hello.config_hash != expected_hash:
                conn.sendall(encode_frame(HelloAck(ACK_CONFIG_MISMATCH, wid)))
                raise ConfigMismatch(f"worker {wid} config hash mismatch")
            ack = encode_frame(HelloAck(ACK_OK, wid))
            self.counters.count_send(HelloAck(ACK_OK, wid), len(ack))
            conn.sendall(ack)
            conn.settimeout(None)
            self._conns[wid] = conn
            self._locks[wid] = threading.Lock()
            self._alive.add(wid)
            t = threading.Thread(target=self._reader, args=(wid, conn),
                                 name=f"reader-{wid}", daemon=True)
            self._threads.append(t)
            t.start()

    @staticmethod
    def _read_hello(conn: socket.socket) -> Hello:
        decoder = FrameDecoder()
        while True:
            data = conn.recv(65536)
            if not data:
                raise WorkerUnreachable("worker hung up during handshake")
            msgs = decoder.feed(data)
            if msgs:
                if len(msgs) != 1 or not isinstance(msgs[0], Hello):
                    raise ProtocolViolation("expected exactly one Hello")
                return msgs[0]

    def _reader(self, wid: int, conn: socket.socket) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                self.counters.bytes_received += len(data)
                for msg in decoder.feed(data):
                    self._inbox.put((wid, msg))
        except Exception as e:  # corrupt frame or reset: drop the connection
            self.worker_errors[wid] = e
        finally:
            try:
                conn.close()
            except OSError:
                pass
            self._inbox.put((wid, None))

    def send(self, wid: int, msg: Message) -> bool:
        if wid not in self._alive:
            return False
        data = encode_frame(msg)
        try:
            with self._locks[wid]:
                self._conns[wid].sendall(data)
        except OSError:
            self._alive.discard(wid)
            return False
        self.counters.count_send(msg, len(data))
        return True

    def broadcast(self, msg: Message) -> None:
        for wid in sorted(self._alive):
            self.send(wid, msg)

    def close(self) -> None:
        self.broadcast(Shutdown())
        for conn in self._conns.values():
            try:
                conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=10.0)
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._listener.close()


def worker_serve(host: str, port: int, ctx: RunContext, cluster: ClusterConfig,
                 connect_timeout: float = 30.0) -> None:
    """Dial the coordinator and serve jobs until Shutdown."""
    conn = socket.create_connection((host, port), timeout=connect_timeout)
    try:
        conn.sendall(encode_frame(Hello(PROTOCOL_VERSION, config_hash(ctx, cluster))))
        decoder = FrameDecoder()
        runtime = None
        conn.settimeout(None)
        while True:
            data = conn.recv(65536)
            if not data:
                raise WorkerUnreachable("coordinator closed the connection")
            for msg in decoder.feed(data):
                if isinstance(msg, HelloAck):
                    if msg.status != ACK_OK:
                        raise ConfigMismatch("coordinator refused this worker "
                                             f"(status {msg.status})")
                    runtime = WorkerRuntime(ctx, cluster, msg.worker_id)
                    continue
                if runtime is None:
                    raise ProtocolViolation("message before handshake completed")
                replies = runtime.handle(msg)
                if replies is None:
                    return
                for rep in replies:
                    conn.sendall(encode_frame(rep))
    finally:
        conn.close()


# --- run artifacts ----------------------------------------------------------


@dataclass(frozen=True)
class BestCandidate:
    generation: int
    index: int
    reward: float
    candidate: np.ndarray


@dataclass(frozen=True)
class GenerationMetrics:
    id: int
    best: float
    mean: float
    worst: float
    wall_millis: int
    evaluations: int
    subset_digest: str
    rewards: tuple


@dataclass(frozen=True)
class RunResult:
    state: cmaes.CmaState
    best: BestCandidate | None
    metrics: list[GenerationMetrics] = field(default_factory=list)


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_best(path: str, best: BestCandidate) -> None:
    from .binio import pack_f64_array, pack_u32, pack_u64

    _atomic_write(path, b"".join([
        BEST_MAGIC, pack_u32(SIDE_VERSION), pack_u64(best.generation),
        pack_u32(best.index), struct.pack("<d", best.reward),
        pack_u64(best.candidate.shape[0]), pack_f64_array(best.candidate),
    ]))


def load_best(path: str) -> BestCandidate:
    from .binio import Reader

    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(BEST_MAGIC)
    if r.u32() != SIDE_VERSION:
        raise CorruptCheckpoint("unsupported best-candidate version")
    gen = r.u64()
    idx = r.u32()
    reward = struct.unpack("<d", r.take(8))[0]
    dim = r.u64()
    vec = r.f64_array((dim,))
    r.done()
    return BestCandidate(gen, idx, reward, vec)


def append_history(path: str, gen_id: int, rewards: tuple) -> None:
    record = struct.pack("<QI", gen_id, len(rewards)) + struct.pack(
        f"<{len(rewards)}d", *rewards)
    if not os.path.exists(path):
        record = HISTORY_MAGIC + struct.pack("<I", SIDE_VERSION) + record
    with open(path, "ab") as f:
        f.write(record)


def load_history(path: str) -> list[tuple[float, ...]]:
    """Recorded rewards per generation; a partial trailing record (from a
    kill mid-append) is dropped."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != HISTORY_MAGIC:
        raise CorruptCheckpoint("bad reward log magic")
    if struct.unpack_from("<I", data, 4)[0] != SIDE_VERSION:
        raise CorruptCheckpoint("unsupported reward log version")
    at, out = 8, []
    while at + 12 <= len(data):
        gen_id, lam = struct.unpack_from("<QI", data, at)
        if at + 12 + 8 * lam > len(data):
            break
        if gen_id != len(out):
            raise CorruptCheckpoint(
                f"reward log generation {gen_id} out of order at record {len(out)}")
        out.append(struct.unpack_from(f"<{lam}d", data, at + 12))
        at += 12 + 8 * lam
    return out


def rewrite_history(path: str, records: list[tuple[float, ...]]) -> None:
    parts = [HISTORY_MAGIC, struct.pack("<I", SIDE_VERSION)]
    for gen_id, rewards in enumerate(records):
        parts.append(struct.pack("<QI", gen_id, len(rewards)))
        parts.append(struct.pack(f"<{len(rewards)}d", *rewards))
    _atomic_write(path, b"".join(parts))


# --- coordinator ------------------------------------------------------------


class Coordinator:
    """Owns the authoritative optimizer state and the run artifacts."""

    def __init__(self, ctx: RunContext, cluster: ClusterConfig, transport,
                 state: cmaes.CmaState | None = None, out_dir: str | None = None,
                 best: BestCandidate | None = None,
                 history: list[tuple[float, ...]] | None = None):
        ctx.validate()
        cluster.validate()
        self.ctx = ctx
        self.cluster = cluster
        self.transport = transport
        self.out_dir = out_dir
        self.best = best
        self.hash = config_hash(ctx, cluster)
        self.state = state if state is not None else cmaes.init(
            ctx.dim, ctx.sigma0, cluster.population, ctx.master_seed)
        if self.state.pending:
            raise CorruptCheckpoint("cannot start from a mid-generation state")
        if (self.state.dim != ctx.dim
                or self.state.hyper.lam != cluster.population
                or self.state.rng_seed != ctx.master_seed):
            raise ConfigMismatch(
                "restored state disagrees with the run description "
                f"(dim {self.state.dim}/{ctx.dim}, population "
                f"{self.state.hyper.lam}/{cluster.population}, seed "
                f"{self.state.rng_seed}/{ctx.master_seed})")
        self.history: list[tuple[float, ...]] = list(history or [])
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._load_artifacts()
        if len(self.history) < self.state.generation:
            raise CorruptCheckpoint(
                f"reward log has {len(self.history)} generations, "
                f"state is at {self.state.generation}")
        del self.history[self.state.generation:]

    # -- artifact bookkeeping

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _load_artifacts(self) -> None:
        if self.best is None and os.path.exists(self._path(BEST_FILE)):
            self.best = load_best(self._path(BEST_FILE))
        if not self.history and os.path.exists(self._path(HISTORY_FILE)):
            self.history = load_history(self._path(HISTORY_FILE))

    def _truncate_csvs(self) -> None:
        for name, header in ((METRICS_FILE, METRICS_HEADER),
                             (SUBSETS_FILE, "generation,subset_hash,indices")):
            path = self._path(name)
            rows = []
            if os.path.exists(path):
                with open(path) as f:
                    rows = [ln for ln in f.read().splitlines()[1:]
                            if ln and int(ln.split(",", 1)[0]) < self.state.generation]
            with open(path, "w") as f:
                f.write(header + "\n")
                for ln in rows:
                    f.write(ln + "\n")

    def _subset_digest(self, gen_id: int) -> str:
        spec = self.ctx.spec
        if spec.kind != "accuracy" or spec.subset_policy is None:
            return ""
        idx = subset_select(spec.subset_policy, len(spec.dataset), gen_id)
        return subset_hash(idx)

    def _record(self, metrics: GenerationMetrics) -> None:
        if self.out_dir is None:
            return
        with open(self._path(METRICS_FILE), "a") as f:
            f.write(f"{metrics.id},{metrics.evaluations},{metrics.best!r},"
                    f"{metrics.mean!r},{metrics.worst!r},{metrics.wall_millis},"
                    f"{metrics.subset_digest}\n")
        spec = self.ctx.spec
        if spec.kind == "accuracy" and spec.subset_policy is not None:
            idx = subset_select(spec.subset_policy, len(spec.dataset), metrics.id)
            with open(self._path(SUBSETS_FILE), "a") as f:
                f.write(f"{metrics.id},{metrics.subset_digest},"
                        f"{';'.join(str(i) for i in idx)}\n")
        append_history(self._path(HISTORY_FILE), metrics.id, metrics.rewards)

    def _checkpoint(self) -> None:
        if self.out_dir is None:
            return
        _atomic_write(self._path(STATE_FILE), cmaes.checkpoint(self.state))

    # -- protocol steps

    def _replay(self) -> None:
        for gen_id, rewards in enumerate(self.history):
            for idx, reward in enumerate(rewards):
                self.transport.broadcast(
                    RewardReport(gen_id, idx, reward, 0, REPLAY_WORKER_ID))

    def _collect(self, gen_id: int, wanted: set[int], timeout: float,
                 got: dict[int, float], errors: list[JobError]) -> None:
        deadline = time.monotonic() + timeout
        while wanted - got.keys():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            item = self.transport.recv(remaining)
            if item is None:
                return
            _, msg = item
            if isinstance(msg, RewardReport):
                if (msg.generation == gen_id and msg.index in wanted
                        and msg.index not in got and math.isfinite(msg.reward)):
                    got[msg.index] = msg.reward
            elif isinstance(msg, JobError):
                if msg.generation == gen_id:
                    errors.append(msg)
                    wanted.discard(msg.index)

    def _run_generation(self, gen: cmaes.Generation) -> tuple:
        lam = self.cluster.population
        block = lam // self.cluster.workers
        unsent: set[int] = set()
        for wid in range(self.cluster.workers):
            for idx in range(wid * block, (wid + 1) * block):
                job = EvalJob(gen.id, idx, gen.seeds[idx], self.hash)
                if not self.transport.send(wid, job):
                    unsent.add(idx)
        got: dict[int, float] = {}
        errors: list[JobError] = []
        wanted = set(range(lam)) - unsent
        self._collect(gen.id, wanted, self.cluster.generation_timeout, got, errors)
        missing = set(range(lam)) - got.keys()
        if missing:
            alive = sorted(self.transport.alive_workers)
            if not alive:
                raise WorkerUnreachable("no workers left to reassign candidates to")
            retry = sorted(missing)
            for at, idx in enumerate(retry):
                self.transport.send(alive[at % len(alive)],
                                    EvalJob(gen.id, idx, gen.seeds[idx], self.hash))
            self._collect(gen.id, set(retry), self.cluster.generation_timeout,
                          got, errors)
            missing = set(range(lam)) - got.keys()
        if missing:
            detail = f"; last error: {errors[-1].message}" if errors else ""
            raise GenerationFailed(
                f"generation {gen.id}: {len(missing)} of {lam} candidates "
                f"unevaluated{detail}")
        return tuple(got[i] for i in range(lam))

    def run(self, generations: int, on_generation=None) -> RunResult:
        """Advance the run to `generations` total, start to shutdown."""
        if generations < 0:
            raise InvalidConfig(f"generations must be non-negative, got {generations}")
        if self.out_dir is not None:
            self._truncate_csvs()
        metrics_out: list[GenerationMetrics] = []
        self.transport.start(self.cluster.workers, self.hash)
        try:
            self._replay()
            while self.state.generation < generations:
                started = time.perf_counter()
                gen = cmaes.ask(self.state)
                rewards = self._run_generation(gen)
                for idx in range(self.cluster.population):
                    self.transport.broadcast(
                        RewardReport(gen.id, idx, rewards[idx], 0, REPLAY_WORKER_ID))
                cmaes.tell(self.state, gen.with_rewards(rewards))
                self.history.append(rewards)
                top = int(np.argmax(rewards))
                if self.best is None or rewards[top] > self.best.reward:
                    self.best = BestCandidate(gen.id, top, rewards[top],
                                              gen.candidates[top].copy())
                    if self.out_dir is not None:
                        save_best(self._path(BEST_FILE), self.best)
                wall = int(round((time.perf_counter() - started) * 1000.0))
                m = GenerationMetrics(
                    id=gen.id, best=float(np.max(rewards)),
                    mean=float(np.mean(rewards)), worst=float(np.min(rewards)),
                    wall_millis=wall,
                    evaluations=(gen.id + 1) * self.cluster.population,
                    subset_digest=self._subset_digest(gen.id), rewards=rewards)
                self._record(m)
                metrics_out.append(m)
                if on_generation is not None:
                    on_generation(m)
                if self.state.generation % self.cluster.checkpoint_every == 0:
                    self._checkpoint()
            self._checkpoint()
        finally:
            self.transport.close()
        return RunResult(state=self.state, best=self.best, metrics=metrics_out)


# --- scaling harness --------------------------------------------------------


@dataclass(frozen=True)
class ScalingRow:
    workers: int
    seconds: float
    speedup: float
    efficiency: float


def measure_scaling(population: int, delay_ms: float, workers_grid: list[int],
                    generations: int = 3, dim: int = 8, sigma0: float = 0.5,
                    master_seed: int = 1234) -> list[ScalingRow]:
    """Wall time to a fixed generation across worker counts, with a
    synthetic per-evaluation delay; efficiency is speedup / workers."""
    seconds = []
    for n in workers_grid:
        ctx = RunContext(spec=FitnessSpec(kind="sphere", delay_ms=delay_ms),
                         dim=dim, sigma0=sigma0, master_seed=master_seed)
        cluster = ClusterConfig(population=population, workers=n)
        transport = InProcessTransport(lambda wid: WorkerRuntime(ctx, cluster, wid))
        coord = Coordinator(ctx, cluster, transport)
        started = time.perf_counter()
        coord.run(generations)
        seconds.append(time.perf_counter() - started)
    base = seconds[0] * workers_grid[0]
    rows = []
    for n, sec in zip(workers_grid, seconds):
        speedup = base / sec
        rows.append(ScalingRow(workers=n, seconds=sec, speedup=speedup,
                               efficiency=speedup / n))
    return rows
