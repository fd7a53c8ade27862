"""In-process background job execution with on-disk state, so `serve`
restarts resume queued work."""
from __future__ import annotations

import json
import os
import queue
import threading
import time
import traceback
import uuid
from dataclasses import dataclass, field, replace
from typing import Callable

from .store import FileStore, atomic_write_json

QUEUED = "queued"
RUNNING = "running"
DONE = "done"
FAILED = "failed"

_TRANSITIONS = {QUEUED: {RUNNING}, RUNNING: {DONE, FAILED}, DONE: set(), FAILED: set()}

JOB_KINDS = ("extraction", "brand_persona", "comparative", "persona_batch")


class DuplicateActiveJob(RuntimeError):
    def __init__(self, existing_id: str):
        self.existing_id = existing_id
        super().__init__(f"an identical job is already active: {existing_id}")


class UnknownJob(KeyError):
    pass


@dataclass(frozen=True)
class JobState:
    job_id: str
    kind: str
    params: dict
    state: str = QUEUED
    created: float = 0.0
    started: float | None = None
    finished: float | None = None
    result_path: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "params": self.params,
            "state": self.state,
            "created": self.created,
            "started": self.started,
            "finished": self.finished,
            "result_path": self.result_path,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobState":
        return cls(**d)


def params_key(kind: str, params: dict) -> str:
    return json.dumps([kind, params], sort_keys=True)


Runner = Callable[[str, dict, FileStore], str]


class JobExecutor:
    """Single consumer thread over a FIFO queue; per-job work may fan out
    internally (extraction uses a bounded worker pool)."""

    def __init__(self, store: FileStore, runner: Runner, workers: int = 4):
        self.store = store
        self.runner = runner
        self.workers = workers
        self._jobs: dict[str, JobState] = {}
        self._queue: "queue.Queue[str | None]" = queue.Queue()
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._recover()

    def _recover(self) -> None:
        for fname in sorted(os.listdir(self.store.jobs_dir)):
            if not fname.endswith(".json"):
                continue
            with open(os.path.join(self.store.jobs_dir, fname), "r", encoding="utf-8") as fh:
                job = JobState.from_dict(json.load(fh))
            if job.state == RUNNING:
                # the previous process died mid-run; run it again
                job = replace(job, state=QUEUED, started=None)
                self._persist(job)
            self._jobs[job.job_id] = job
            if job.state == QUEUED:
                self._queue.put(job.job_id)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run_loop, name="job-executor", daemon=True)
        self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        if self._thread is None:
            return
        self._queue.put(None)
        self._thread.join(timeout=timeout)
        self._thread = None

    def _persist(self, job: JobState) -> None:
        atomic_write_json(self.store.job_path(job.job_id), job.to_dict())

    def _set(self, job_id: str, **changes) -> JobState:
        with self._lock:
            job = self._jobs[job_id]
            new_state = changes.get("state")
            if new_state is not None and new_state not in _TRANSITIONS[job.state]:
                raise RuntimeError(f"illegal transition {job.state} -> {new_state}")
            job = replace(job, **changes)
            self._jobs[job_id] = job
        self._persist(job)
        return job

    def submit(self, kind: str, params: dict) -> JobState:
        if kind not in JOB_KINDS:
            raise ValueError(f"unknown job kind {kind!r}; expected one of {JOB_KINDS}")
        key = params_key(kind, params)
        with self._lock:
            for job in self._jobs.values():
                if job.state in (QUEUED, RUNNING) and params_key(job.kind, job.params) == key:
                    raise DuplicateActiveJob(job.job_id)
            job = JobState(
                job_id="job-" + uuid.uuid4().hex[:12],
                kind=kind,
                params=params,
                state=QUEUED,
                created=time.time(),
            )
            self._jobs[job.job_id] = job
        self._persist(job)
        self._queue.put(job.job_id)
        return job

    def get(self, job_id: str) -> JobState:
        with self._lock:
            try:
                return self._jobs[job_id]
            except KeyError:
                raise UnknownJob(job_id) from None

    def _run_loop(self) -> None:
        while True:
            job_id = self._queue.get()
            if job_id is None:
                return
            with self._lock:
                job = self._jobs.get(job_id)
            if job is None or job.state != QUEUED:
                continue
            self._set(job_id, state=RUNNING, started=time.time())
            try:
                result_path = self.runner(job.kind, job.params, self.store)
            except Exception as exc:
                detail = f"{type(exc).__name__}: {exc}"
                traceback.print_exc()
                self._set(job_id, state=FAILED, finished=time.time(), error=detail)
            else:
                self._set(job_id, state=DONE, finished=time.time(), result_path=result_path)

    def wait_for(self, job_id: str, timeout: float = 60.0, poll: float = 0.02) -> JobState:
        """Test/CLI helper: block until the job reaches a terminal state."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            job = self.get(job_id)
            if job.state in (DONE, FAILED):
                return job
            time.sleep(poll)
        raise TimeoutError(f"job {job_id} still {self.get(job_id).state} after {timeout}s")
