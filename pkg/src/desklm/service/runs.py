"""Background run management: each training run executes on its own thread,
writing checkpoints/logbook under its run directory; status is sampled from
the shared in-memory logbook. Mid-flight control commands are queued by
appending to the run's control file, which the trainer polls at step
boundaries."""
from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..errors import ConfigError, UnrecoverableDivergence
from ..logbook import Logbook
from ..trainer import FaultEntry, FaultSchedule, TrainResult, train


@dataclass
class RunRecord:
    run_id: str
    run_dir: Path
    config: RunConfig
    logbook: Logbook
    thread: threading.Thread | None = None
    state: str = "running"
    result: TrainResult | None = None
    error: str | None = None
    exit_code: int = 0
    restarts: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def status_dict(self) -> dict:
        with self.lock:
            steps = [e for e in self.logbook.events if e.kind == "step"]
            restarts = sum(1 for e in self.logbook.events if e.kind == "restart")
            last = steps[-1].payload if steps else None
            state = self.state
            return {
                "run_id": self.run_id,
                "state": state,
                "step": last["step"] if last else 0,
                "total_steps": self.config.total_steps,
                "tokens_seen": (last["step"] if last else 0) * self.config.tokens_per_step,
                "restarts": restarts,
                "last_step": last,
                "error": self.error,
                "exit_code": self.exit_code,
            }


def load_corpus_tokens(config: RunConfig, base_dir: Path | None = None) -> np.ndarray:
    path = config.corpus.tokens_path
    if path is None:
        raise ConfigError("corpus.tokens_path is required to train")
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = base_dir / p
    if not p.exists():
        raise ConfigError(f"corpus.tokens_path: path does not exist: {p}")
    return np.load(p)


class RunManager:
    def __init__(self):
        self._runs: dict[str, RunRecord] = {}
        self._lock = threading.Lock()

    def list(self) -> list[RunRecord]:
        with self._lock:
            return list(self._runs.values())

    def get(self, run_id: str) -> RunRecord:
        with self._lock:
            if run_id not in self._runs:
                raise KeyError(run_id)
            return self._runs[run_id]

    def start(
        self,
        config: RunConfig,
        corpus_tokens: np.ndarray,
        run_dir: str | Path,
        *,
        resume_from: str | None = None,
        faults: list[dict] | None = None,
    ) -> RunRecord:
        run_id = uuid.uuid4().hex[:12]
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        logbook = Logbook(run_dir / "logbook.jsonl")
        record = RunRecord(run_id=run_id, run_dir=run_dir, config=config, logbook=logbook)
        schedule = (
            FaultSchedule([FaultEntry(**f) for f in faults]) if faults else None
        )

        def target():
            try:
                result = train(
                    config,
                    corpus_tokens,
                    run_dir,
                    faults=schedule,
                    resume_from=resume_from,
                    logbook=logbook,
                )
                with record.lock:
                    record.result = result
                    record.restarts = result.restarts
                    record.state = "completed" if result.completed else "stopped"
            except UnrecoverableDivergence as e:
                with record.lock:
                    record.state = "diverged-unrecoverable"
                    record.error = str(e)
                    record.exit_code = 3
            except ConfigError as e:
                with record.lock:
                    record.state = "failed"
                    record.error = str(e)
                    record.exit_code = 2
            except Exception as e:  # surfaced via status; never kills the service
                with record.lock:
                    record.state = "failed"
                    record.error = f"{type(e).__name__}: {e}"
                    record.exit_code = 1

        thread = threading.Thread(target=target, name=f"run-{run_id}", daemon=True)
        record.thread = thread
        with self._lock:
            self._runs[run_id] = record
        thread.start()
        return record

    def queue_control(self, run_id: str, command: dict) -> None:
        record = self.get(run_id)
        control = record.run_dir / "control.jsonl"
        with open(control, "a") as f:
            f.write(json.dumps(command) + "\n")

    def wait(self, run_id: str, timeout: float | None = None) -> RunRecord:
        record = self.get(run_id)
        if record.thread is not None:
            record.thread.join(timeout)
        return record
