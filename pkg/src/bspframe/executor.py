"""Stateful worker-gang executor.

An executor owns a fixed gang of p persistent workers. Workers initialize
their communicator exactly once, at startup (which doubles as a barrier),
and keep it plus any installed executable instance alive across
submissions, so repeated submissions reuse the communication context.

Two worker realizations share one protocol: the in-process backend runs
one thread per rank inside this process, and the TCP backend spawns one
OS process per rank (launch contract: BSPF_RANK, BSPF_WORLD,
BSPF_RENDEZVOUS, BSPF_NAMESPACE environment variables; clean stop exits 0).
Submissions execute in FIFO order, one at a time, so collectives from two
submissions can never interleave on a communicator.
"""

from __future__ import annotations

import enum
import os
import pickle
import queue
import socket
import struct
import subprocess
import sys
import threading
import time
import uuid
from concurrent.futures import Future
from concurrent.futures import TimeoutError as _FutureTimeout
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from . import errors as _errors
from .comm import Backend, RendezvousServer, WorldConfig, init as comm_init
from .env import ExecEnv
from .errors import (
    ConstructionError,
    ExecutorError,
    ExecutorStopped,
    NoExecutable,
    ResultTooLarge,
    SpawnFailure,
    Timeout,
    WorkerError,
)
from .store import HostStore, SpillStore, host_store
from .table import Table

__all__ = [
    "ExecutorConfig",
    "ExecutorState",
    "Executor",
    "executor_start",
    "start_executable",
    "execute",
    "run",
    "wait",
    "executor_stop",
    "worker_main",
]

_LEN = struct.Struct("<Q")
DEFAULT_RESULT_CAP = 64 * 2**20


class ExecutorState(enum.Enum):
    STARTING = "starting"
    READY = "ready"
    RUNNING = "running"
    STOPPED = "stopped"


@dataclass(frozen=True)
class ExecutorConfig:
    parallelism: int
    backend: Backend = Backend.INPROCESS
    rendezvous: str | None = None  # TCP: auto-starts an embedded service when unset
    namespace: str | None = None  # default: fresh per executor
    timeout: float = 30.0
    seed: int = 0
    store_dir: str | None = None
    store_namespace: str = "store"
    result_cap: int = DEFAULT_RESULT_CAP
    bind_host: str = "127.0.0.1"

    def __post_init__(self):
        if self.parallelism < 1:
            raise ExecutorError(f"parallelism must be >= 1, got {self.parallelism}")


@dataclass
class _Submission:
    sub_id: int
    job: dict
    future: Future = field(default_factory=Future)


def _send_obj(sock: socket.socket, obj) -> None:
    payload = pickle.dumps(obj)
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("control connection closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _recv_obj(sock: socket.socket):
    (n,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return pickle.loads(_recv_exact(sock, n))


def _rebuild_error(spec) -> Exception:
    if isinstance(spec, Exception):
        return spec
    kind, message = spec
    cls = getattr(_errors, kind, None)
    if cls is not None and issubclass(cls, Exception):
        try:
            return cls(message)
        except TypeError:
            pass
    return WorkerError(-1, f"{kind}: {message}")


def _table_nbytes(t: Table) -> int:
    total = 0
    for col in t.columns:
        total += col.data.nbytes + col.validity.nbytes
        if col.offsets is not None:
            total += col.offsets.nbytes
    return total


def _run_job(job: dict, env: ExecEnv, holder: dict) -> Any:
    kind = job["kind"]
    if kind == "ctor":
        try:
            holder["executable"] = job["fn"](env, *job.get("args", ()))
        except Exception as e:
            raise ConstructionError(env.rank, f"{type(e).__name__}: {e}") from e
        return None
    if kind == "method":
        executable = holder.get("executable")
        if executable is None:
            raise NoExecutable("no executable installed; call start_executable first")
        return getattr(executable, job["name"])(env, *job.get("args", ()))
    if kind == "run":
        return job["fn"](env, *job.get("args", ()))
    if kind == "recover":
        env.comm.barrier(timeout=job["timeout"])
        return None
    raise ExecutorError(f"unknown job kind {kind!r}")


# -- in-process workers ---------------------------------------------------


class _InprocWorker:
    def __init__(self, ex: "Executor", rank: int):
        self.rank = rank
        self.jobs: queue.Queue = queue.Queue()
        self.thread = threading.Thread(
            target=self._main, args=(ex,), name=f"bspf-worker-{rank}", daemon=True
        )
        self.thread.start()

    def send_job(self, sub_id: int, job: dict) -> None:
        # same process: pass by reference, so lambdas and closures work
        self.jobs.put((sub_id, job))

    def _main(self, ex: "Executor") -> None:
        results = ex._results
        try:
            comm = comm_init(
                WorldConfig(
                    world_size=ex.config.parallelism,
                    rank=self.rank,
                    backend=Backend.INPROCESS,
                    namespace=ex.namespace,
                    timeout=ex.config.timeout,
                )
            )
        except Exception as e:
            results.put(("init_error", self.rank, e))
            return
        results.put(("ready", self.rank, None))
        env = ExecEnv(self.rank, ex.config.parallelism, comm, comm.timer,
                      host_store(), ex.config.seed)
        holder: dict = {}
        try:
            while True:
                sub_id, job = self.jobs.get()
                if job["kind"] == "stop":
                    results.put(("stopped", self.rank, None))
                    return
                try:
                    value = _run_job(job, env, holder)
                    if isinstance(value, Table) and _table_nbytes(value) > ex.config.result_cap:
                        raise ResultTooLarge(
                            f"rank {self.rank} returned {_table_nbytes(value)} bytes; "
                            f"cap is {ex.config.result_cap} (use the store or files)"
                        )
                except BaseException as e:  # noqa: BLE001 - worker must always answer
                    results.put(("result", self.rank, (sub_id, False, e)))
                else:
                    results.put(("result", self.rank, (sub_id, True, value)))
        finally:
            comm.close()


# -- TCP worker processes ---------------------------------------------------


class _TcpWorkerChannel:
    def __init__(self, ex: "Executor", rank: int, sock: socket.socket,
                 proc: subprocess.Popen | None):
        self.rank = rank
        self.sock = sock
        self.proc = proc
        self._reader = threading.Thread(
            target=self._read_loop, args=(ex._results,),
            name=f"bspf-ctl-{rank}", daemon=True
        )
        self._reader.start()

    def send_job(self, sub_id: int, job: dict) -> None:
        # Sub id travels outside the pickle so the worker can still answer
        # (with an error) when the job body does not unpickle there.
        payload = pickle.dumps(job)
        try:
            self.sock.sendall(_LEN.pack(len(payload)) + _LEN.pack(sub_id) + payload)
        except OSError as e:
            raise _errors.PeerFailure(f"worker {self.rank} control link: {e}") from e

    def _read_loop(self, results: queue.Queue) -> None:
        while True:
            try:
                msg = _recv_obj(self.sock)
            except (ConnectionError, OSError, pickle.UnpicklingError, EOFError):
                results.put(("lost", self.rank, None))
                return
            kind = msg["kind"]
            if kind == "result":
                err = msg.get("error")
                payload = (
                    (msg["sub"], False, _rebuild_error(err))
                    if err is not None
                    else (msg["sub"], True, msg.get("value"))
                )
                results.put(("result", self.rank, payload))
            elif kind in ("ready", "stopped"):
                results.put((kind, self.rank, None))
            elif kind == "init_error":
                results.put(("init_error", self.rank, _rebuild_error(msg["error"])))


class Executor:
    """Handle to a gang of p stateful workers."""

    def __init__(self, config: ExecutorConfig):
        self.config = config
        self.namespace = config.namespace or f"x{uuid.uuid4().hex[:10]}"
        self.state = ExecutorState.STARTING
        self._results: queue.Queue = queue.Queue()
        self._submissions: queue.Queue = queue.Queue()
        self._sub_counter = 0
        self._lock = threading.Lock()
        self._stopping = False
        self._own_rendezvous: RendezvousServer | None = None
        self.rendezvous: str | None = None
        self._workers: list = []
        self._listener: socket.socket | None = None
        self.store: Any = None

        try:
            if config.backend is Backend.INPROCESS:
                self.store = host_store()
                self._workers = [_InprocWorker(self, r) for r in range(config.parallelism)]
            else:
                self._start_tcp_workers()
            self._await_ready()
        except Exception:
            self._teardown_transport()
            raise
        self.state = ExecutorState.READY
        self._dispatcher = threading.Thread(
            target=self._dispatch_loop, name="bspf-dispatch", daemon=True
        )
        self._dispatcher.start()

    # -- startup ------------------------------------------------------------

    def _start_tcp_workers(self) -> None:
        cfg = self.config
        if cfg.rendezvous is None:
            self._own_rendezvous = RendezvousServer(cfg.bind_host).start()
            self.rendezvous = self._own_rendezvous.address
        else:
            self.rendezvous = cfg.rendezvous
        self.store = SpillStore(self.rendezvous, cfg.store_dir,
                                cfg.store_namespace, cfg.timeout)

        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.bind((cfg.bind_host, 0))
        self._listener.listen(cfg.parallelism + 1)
        host, port = self._listener.getsockname()[:2]

        from .comm.rendezvous import RendezvousClient

        rdv = RendezvousClient(self.rendezvous, timeout=cfg.timeout)
        rdv.put(f"{self.namespace}/driver", f"{host}:{port}")
        rdv.close()

        procs = []
        for rank in range(cfg.parallelism):
            env = dict(
                os.environ,
                BSPF_RANK=str(rank),
                BSPF_WORLD=str(cfg.parallelism),
                BSPF_RENDEZVOUS=self.rendezvous,
                BSPF_NAMESPACE=self.namespace,
                BSPF_TIMEOUT=str(cfg.timeout),
                BSPF_SEED=str(cfg.seed),
                BSPF_STORE_NAMESPACE=cfg.store_namespace,
                BSPF_BIND_HOST=cfg.bind_host,
            )
            if cfg.store_dir:
                env["BSPF_STORE_DIR"] = cfg.store_dir
            try:
                procs.append(subprocess.Popen(
                    [sys.executable, "-m", "bspframe.cli", "worker"], env=env
                ))
            except OSError as e:
                raise SpawnFailure(f"cannot spawn worker {rank}: {e}") from e

        deadline = time.monotonic() + cfg.timeout
        pending = set(range(cfg.parallelism))
        self._workers = [None] * cfg.parallelism
        self._listener.settimeout(0.2)
        while pending:
            if time.monotonic() > deadline:
                raise SpawnFailure(f"workers {sorted(pending)} never connected")
            for proc in procs:
                code = proc.poll()
                if code is not None and code != 0:
                    raise SpawnFailure(f"a worker exited with code {code} during startup")
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            hello = _recv_obj(sock)
            rank = hello["rank"]
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._workers[rank] = _TcpWorkerChannel(self, rank, sock, procs[rank])
            pending.discard(rank)
        self._listener.settimeout(None)

    def _await_ready(self) -> None:
        deadline = time.monotonic() + self.config.timeout + 5.0
        ready = 0
        while ready < self.config.parallelism:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise SpawnFailure("workers never became ready")
            try:
                kind, rank, payload = self._results.get(timeout=remaining)
            except queue.Empty:
                raise SpawnFailure("workers never became ready") from None
            if kind == "ready":
                ready += 1
            elif kind == "init_error":
                raise payload
            elif kind == "lost":
                raise SpawnFailure(f"worker {rank} died during startup")

    # -- submission machinery -------------------------------------------------

    def _submit(self, job: dict) -> Future:
        with self._lock:
            if self.state is ExecutorState.STOPPED or self._stopping:
                raise ExecutorStopped("executor is stopped")
            self._sub_counter += 1
            sub = _Submission(self._sub_counter, job)
        self._submissions.put(sub)
        return sub.future

    def _dispatch_loop(self) -> None:
        while True:
            sub = self._submissions.get()
            if sub is None:
                self._shutdown_workers()
                return
            if self._stopping:
                sub.future.set_exception(ExecutorStopped("executor stopped"))
                continue
            self.state = ExecutorState.RUNNING
            failed = self._dispatch_one(sub)
            self.state = ExecutorState.READY if not self._stopping else self.state
            if failed and not self._stopping:
                if not self._recover():
                    self._degrade()

    def _dispatch_one(self, sub: _Submission) -> bool:
        try:
            for worker in self._workers:
                worker.send_job(sub.sub_id, sub.job)
        except pickle.PicklingError as e:
            sub.future.set_exception(e)
            return False
        except Exception as e:
            sub.future.set_exception(e)
            return True
        values: list = [None] * len(self._workers)
        failures: list[tuple[int, Exception]] = []
        got = 0
        while got < len(self._workers):
            kind, rank, payload = self._results.get()
            if kind == "lost":
                failures.append((rank, _errors.PeerFailure(f"worker {rank} died")))
                got += 1
                continue
            if kind != "result":
                continue
            sub_id, ok, value = payload
            if sub_id != sub.sub_id:
                continue  # stale answer from a cancelled submission
            got += 1
            if ok:
                values[rank] = value
            else:
                failures.append((rank, value))
        if failures:
            rank, err = min(failures, key=lambda f: f[0])
            if isinstance(err, ExecutorError):
                sub.future.set_exception(err)
            else:
                sub.future.set_exception(WorkerError(rank, f"{type(err).__name__}: {err}"))
            return True
        sub.future.set_result(values)
        return False

    def _recover(self) -> bool:
        """Post-failure barrier; True when the gang is still aligned."""
        with self._lock:
            self._sub_counter += 1
            sub = _Submission(
                self._sub_counter,
                {"kind": "recover", "timeout": min(5.0, self.config.timeout)},
            )
        return not self._dispatch_one(sub)

    def _degrade(self) -> None:
        self._stopping = True
        self._submissions.put(None)

    # -- public API -----------------------------------------------------------

    def start_executable(self, ctor: Callable, *args) -> None:
        """Install one executable instance per worker; blocks until constructed."""
        fut = self._submit({"kind": "ctor", "fn": ctor, "args": args})
        fut.result(timeout=self.config.timeout + 5.0)

    def execute(self, method: str, *args) -> Future:
        """Invoke ``method`` of the installed executable on every worker."""
        return self._submit({"kind": "method", "name": method, "args": args})

    def run(self, fn: Callable, *args) -> Future:
        """Run ``fn(env, *args)`` on every worker; resolves to rank-ordered results."""
        return self._submit({"kind": "run", "fn": fn, "args": args})

    def stop(self) -> None:
        """Join workers and release the world; idempotent."""
        with self._lock:
            if self.state is ExecutorState.STOPPED:
                return
            already = self._stopping
            self._stopping = True
        if not already:
            self._submissions.put(None)
        self._dispatcher.join(timeout=self.config.timeout + 10.0)
        self._teardown_transport()
        self.state = ExecutorState.STOPPED

    def _shutdown_workers(self) -> None:
        # Cancel anything still queued.
        while True:
            try:
                sub = self._submissions.get_nowait()
            except queue.Empty:
                break
            if sub is not None:
                sub.future.set_exception(ExecutorStopped("executor stopped"))
        for worker in self._workers:
            try:
                worker.send_job(0, {"kind": "stop"})
            except Exception:
                pass
        deadline = time.monotonic() + min(10.0, self.config.timeout)
        stopped = 0
        while stopped < len(self._workers) and time.monotonic() < deadline:
            try:
                kind, _rank, _ = self._results.get(timeout=deadline - time.monotonic())
            except (queue.Empty, ValueError):
                break
            if kind in ("stopped", "lost"):
                stopped += 1

    def _teardown_transport(self) -> None:
        for worker in self._workers:
            if isinstance(worker, _TcpWorkerChannel):
                try:
                    worker.sock.close()
                except OSError:
                    pass
                if worker.proc is not None:
                    try:
                        worker.proc.wait(timeout=5.0)
                    except subprocess.TimeoutExpired:
                        worker.proc.terminate()
            elif isinstance(worker, _InprocWorker):
                worker.thread.join(timeout=2.0)
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if self._own_rendezvous is not None:
            self._own_rendezvous.stop()


# -- module-level API mirroring the executor endpoints ------------------------


def executor_start(
    parallelism: int,
    backend: Backend = Backend.INPROCESS,
    config: ExecutorConfig | None = None,
    **kwargs,
) -> Executor:
    if config is None:
        config = ExecutorConfig(parallelism=parallelism, backend=backend, **kwargs)
    return Executor(config)


def start_executable(h: Executor, ctor: Callable, *args) -> None:
    h.start_executable(ctor, *args)


def execute(h: Executor, method: str, *args) -> Future:
    return h.execute(method, *args)


def run(h: Executor, fn: Callable, *args) -> Future:
    return h.run(fn, *args)


def wait(future: Future, timeout: float | None = None) -> list:
    """Block for a submission's rank-ordered results (or its error)."""
    try:
        return future.result(timeout)
    except _FutureTimeout:
        raise Timeout(f"submission still running after {timeout}s") from None


def executor_stop(h: Executor) -> None:
    h.stop()


# -- TCP worker process entry point -------------------------------------------


def worker_main() -> int:
    """Rank entry point for the TCP backend (see module docstring for env vars)."""
    rank = int(os.environ["BSPF_RANK"])
    world = int(os.environ["BSPF_WORLD"])
    rendezvous = os.environ["BSPF_RENDEZVOUS"]
    namespace = os.environ["BSPF_NAMESPACE"]
    timeout = float(os.environ.get("BSPF_TIMEOUT", "30"))
    seed = int(os.environ.get("BSPF_SEED", "0"))
    bind_host = os.environ.get("BSPF_BIND_HOST", "127.0.0.1")

    from .comm.rendezvous import RendezvousClient

    rdv = RendezvousClient(rendezvous, timeout=timeout)
    driver_addr = rdv.wait_get(f"{namespace}/driver", timeout)
    rdv.close()
    host, _, port = driver_addr.rpartition(":")
    ctl = socket.create_connection((host, int(port)), timeout=timeout)
    ctl.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    ctl.settimeout(None)
    _send_obj(ctl, {"kind": "hello", "rank": rank})

    try:
        comm = comm_init(WorldConfig(
            world_size=world, rank=rank, backend=Backend.TCP,
            rendezvous=rendezvous, namespace=namespace,
            timeout=timeout, bind_host=bind_host,
        ))
    except Exception as e:
        _send_obj(ctl, {"kind": "init_error", "error": (type(e).__name__, str(e))})
        return 1
    _send_obj(ctl, {"kind": "ready"})

    store = SpillStore(
        rendezvous,
        os.environ.get("BSPF_STORE_DIR"),
        os.environ.get("BSPF_STORE_NAMESPACE", "store"),
        timeout,
    )
    env = ExecEnv(rank, world, comm, comm.timer, store, seed)
    holder: dict = {}
    code = 0
    try:
        while True:
            (n,) = _LEN.unpack(_recv_exact(ctl, _LEN.size))
            (sub_id,) = _LEN.unpack(_recv_exact(ctl, _LEN.size))
            raw = _recv_exact(ctl, n)
            reply: dict = {"kind": "result", "sub": sub_id, "rank": rank}
            try:
                job = pickle.loads(raw)
            except Exception as e:
                reply["error"] = (type(e).__name__, f"job does not unpickle here: {e}")
                _send_obj(ctl, reply)
                continue
            if job["kind"] == "stop":
                _send_obj(ctl, {"kind": "stopped"})
                break
            try:
                value = _run_job(job, env, holder)
                payload = pickle.dumps(value)
                cap = int(os.environ.get("BSPF_RESULT_CAP", DEFAULT_RESULT_CAP))
                if len(payload) > cap:
                    raise ResultTooLarge(
                        f"rank {rank} result is {len(payload)} bytes; cap is {cap} "
                        "(use the store or files)"
                    )
            except BaseException as e:  # noqa: BLE001 - worker must always answer
                reply["error"] = (type(e).__name__, str(e))
            else:
                reply["value"] = value
            _send_obj(ctl, reply)
    except (ConnectionError, OSError):
        code = 1
    finally:
        comm.close()
        ctl.close()
    return code
