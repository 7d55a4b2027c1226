"""The training loop plus process machinery: health telemetry, divergence
detection, restart-checkpoint selection with LR-lowering recovery,
checkpointing, control-file commands, and fault injection.

Determinism contract: every stochastic stream is counter-based — batches from
(data seed, step), dropout from (dropout seed, step, worker, accumulation
index, layer, site) — and all counters live in the checkpoint, so a resumed
trajectory is bit-identical to an uninterrupted one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (
    Checkpoint,
    HealthRecord,
    TrainerState,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from .config import RunConfig
from .errors import ConfigError, UnrecoverableDivergence
from .health import CheckpointMeta, activation_slope, detect_divergence, select_restart_checkpoint
from .logbook import SCHEMA_VERSION, Logbook
from .model import Parameters, forward_batch, init_parameters
from .optim import (
    ClipConfig,
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    lr_at,
    predivide_reduce,
    sgd_step,
)
from .precision import emulate_half, reset_scale, scale_loss, scaler_update, unscale_grads
from .tensor import Tape

FAULT_KINDS = ("crash", "nan-grad", "scaler-reset", "grad-bomb")


class SimulatedCrash(Exception):
    """Stands in for the process dying; the harness auto-restarts."""


class StopRequested(Exception):
    """Raised internally when a control-file stop command arrives."""


@dataclass(frozen=True)
class FaultEntry:
    step: int
    kind: str
    factor: float = 1e6  # grad-bomb magnitude

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}; known: {FAULT_KINDS}")


class FaultSchedule:
    """One-shot faults keyed by the update they affect. An entry fires the
    first time its step comes up and is then consumed, so post-restart replays
    do not re-trigger it."""

    def __init__(self, entries: Sequence[FaultEntry] = ()):
        steps = [e.step for e in entries]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("fault schedule steps must be strictly increasing")
        self.entries = list(entries)
        self._consumed: set[int] = set()

    def due(self, step: int) -> list[FaultEntry]:
        hits = []
        for i, e in enumerate(self.entries):
            if e.step == step and i not in self._consumed:
                self._consumed.add(i)
                hits.append(e)
        return hits

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, str]]) -> "FaultSchedule":
        return cls([FaultEntry(step=s, kind=k) for s, k in pairs])

    @classmethod
    def from_file(cls, path: str | Path) -> "FaultSchedule":
        data = json.loads(Path(path).read_text())
        return cls([FaultEntry(**row) for row in data])


@dataclass
class TrainResult:
    state: TrainerState
    history: list[HealthRecord]
    restarts: int
    completed: bool
    stop_reason: str = "budget"
    checkpoints: list[CheckpointMeta] = field(default_factory=list)


def latest_checkpoint(ckpt_dir: str | Path) -> Path | None:
    paths = sorted(Path(ckpt_dir).glob("ckpt_*.dlm"))
    return paths[-1] if paths else None


class Trainer:
    def __init__(
        self,
        run: RunConfig,
        corpus_tokens: np.ndarray,
        run_dir: str | Path,
        logbook: Logbook | None = None,
    ):
        self.run = run
        self.run_dir = Path(run_dir)
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.control_path = self.run_dir / "control.jsonl"
        self.logbook = logbook if logbook is not None else Logbook(self.run_dir / "logbook.jsonl")

        tokens = np.asarray(corpus_tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ConfigError("tokenized corpus must be a nonempty 1-D id array")
        t = run.training
        min_train = t.seq_len + 2
        val_len = max(t.seq_len + 1, int(round(tokens.size * t.validation_fraction)))
        if tokens.size < min_train + val_len:
            raise ConfigError(
                f"corpus too small: {tokens.size} tokens, need >= {min_train + val_len}"
            )
        self.val_tokens = tokens[-val_len:]
        self.train_tokens = tokens[:-val_len]
        self.total_steps = run.total_steps
        if self.total_steps < 1:
            raise ConfigError("token budget smaller than one step's tokens")
        self.divergence_restarts = 0
        self._segment_history: list[HealthRecord] = []

        # Fixed validation batches, chosen once, independent of training state.
        vrng = np.random.default_rng((run.seeds["validation"],))
        n_val = max(1, min(4, (self.val_tokens.size - 1) // t.seq_len))
        hi = self.val_tokens.size - t.seq_len - 1
        self._val_starts = (
            vrng.integers(0, hi + 1, size=n_val) if hi > 0 else np.zeros(n_val, dtype=int)
        )

    # -- state construction -------------------------------------------------

    def fresh_state(self) -> TrainerState:
        run = self.run
        dtype = np.float64 if run.training.dtype == "float64" else np.float32
        params = init_parameters(run.model, seed=run.seeds["init"], dtype=dtype)
        opt = OptimizerState.for_params({k: v.data for k, v in params.tensors.items()})
        return TrainerState(
            step=0,
            tokens_seen=0,
            params=params,
            opt_state=opt,
            scaler=run.scaler,
            clip=run.clip,
            overrides=run.schedule.overrides,
            seed=run.seeds["data"],
        )

    def load_state(self, path: str | Path) -> tuple[TrainerState, list[HealthRecord]]:
        ckpt = load_checkpoint(path, expect_config=self.run.model)
        return ckpt.state, list(ckpt.health_tail)

    # -- batches ------------------------------------------------------------

    def _batch_starts(self, update: int) -> np.ndarray:
        t = self.run.training
        world = self.run.predivide.world_size
        rng = np.random.default_rng((self.run.seeds["data"], update))
        hi = self.train_tokens.size - t.seq_len - 1
        return rng.integers(0, hi + 1, size=(world, t.grad_accum, t.micro_batch))

    def _gather(self, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = self.run.training
        idx = starts[:, None] + np.arange(t.seq_len + 1)[None, :]
        window = self.train_tokens[idx]
        return window[:, :-1], window[:, 1:]

    # -- one update ---------------------------------------------------------

    def _forward_params(self, state: TrainerState) -> Parameters:
        if self.run.precision.weight_mode == "emulated-half":
            quant = Parameters()
            for name, tns in state.params.tensors.items():
                quant.tensors[name] = emulate_half(tns, self.run.precision)
            return quant
        return state.params

    def _compute_grads(self, state: TrainerState, update: int, poison: bool):
        run = self.run
        t = run.training
        vocab = run.model.vocab_size
        starts = self._batch_starts(update)
        fwd = self._forward_params(state)
        train_mode = run.model.dropout > 0.0

        losses: list[float] = []
        act_norms: list[float] = []
        worker_grads = []
        overflow = False
        for w in range(run.predivide.world_size):
            fwd.zero_grad()
            with Tape() as tape:
                total = None
                for a in range(t.grad_accum):
                    x, y = self._gather(starts[w, a])
                    capture: dict = {}
                    logits = forward_batch(
                        fwd, run.model, x,
                        train=train_mode,
                        dropout_seed=(run.seeds["dropout"], update, w, a),
                        capture=capture,
                    )
                    flat = T.reshape(logits, (x.size, vocab))
                    loss, _ = T.cross_entropy(flat, y.reshape(-1))
                    losses.append(loss.item())
                    act_norms.append(float(np.linalg.norm(capture["final_activation"])))
                    piece = loss if t.grad_accum == 1 else T.mul(loss, 1.0 / t.grad_accum)
                    piece = scale_loss(piece, state.scaler)
                    total = piece if total is None else T.add(total, piece)
            T.backward(tape, total)
            grads = {name: tns.grad for name, tns in fwd.trainable().items()}
            if poison and w == 0:
                first = sorted(grads)[0]
                grads[first] = grads[first].copy()
                grads[first].reshape(-1)[0] = np.nan
            unscaled, bad = unscale_grads(grads, state.scaler)
            if bad:
                overflow = True
                break
            worker_grads.append(unscaled)

        mean_loss = float(np.mean(losses))
        mean_act = float(np.mean(act_norms))
        if overflow:
            return mean_loss, None, None, mean_act, True
        if run.predivide.world_size > 1:
            reduced = predivide_reduce(worker_grads, run.predivide)
        else:
            reduced = worker_grads[0]
        clipped, grad_norm = clip_grad_norm(reduced, state.clip)
        return mean_loss, clipped, grad_norm, mean_act, False

    def _validate(self, state: TrainerState) -> float:
        t = self.run.training
        params = self._forward_params(state)
        nlls = []
        for s in self._val_starts:
            window = self.val_tokens[s : s + t.seq_len + 1]
            x, y = window[None, :-1], window[None, 1:]
            logits = forward_batch(params, self.run.model, x)
            flat = T.reshape(logits, (x.size, self.run.model.vocab_size))
            loss, _ = T.cross_entropy(flat, y.reshape(-1))
            nlls.append(loss.item())
        return float(np.mean(nlls))

    # -- control file -------------------------------------------------------

    def _apply_control(self, state: TrainerState) -> None:
        if not self.control_path.exists():
            return
        lines = [ln for ln in self.control_path.read_text().splitlines() if ln.strip()]
        for raw in lines[state.control_consumed :]:
            try:
                cmd = json.loads(raw)
            except json.JSONDecodeError:
                raise ConfigError(f"control file: invalid JSON line: {raw!r}") from None
            name = cmd.get("cmd")
            if name == "set-lr-factor":
                state.overrides = (*state.overrides, (state.step, float(cmd["factor"])))
            elif name == "set-clip":
                state.clip = ClipConfig(max_norm=float(cmd["max_norm"]))
            elif name == "reset-scaler":
                state.scaler = reset_scale(state.scaler, initial_scale=self.run.scaler.scale)
            elif name == "checkpoint-now":
                self._save(state, self._segment_history)
            elif name == "stop":
                state.control_consumed += 1
                self.logbook.append("override", step=state.step, command=name, args={})
                raise StopRequested()
            else:
                raise ConfigError(f"control file: unknown command {name!r}")
            state.control_consumed += 1
            args = {k: v for k, v in cmd.items() if k != "cmd"}
            self.logbook.append("override", step=state.step, command=name, args=args)

    # -- checkpointing ------------------------------------------------------

    def _ckpt_path(self, step: int) -> Path:
        return self.ckpt_dir / f"ckpt_{step:08d}.dlm"

    def _save(self, state: TrainerState, history: list[HealthRecord]) -> CheckpointMeta:
        tail = history[-self.run.training.health_tail_len :]
        ckpt = Checkpoint(version=1, config=self.run.model, state=state, health_tail=tail)
        path = save_checkpoint(ckpt, self._ckpt_path(state.step))
        meta = CheckpointMeta(step=state.step, path=path, scale=state.scaler.scale)
        self.logbook.append("checkpoint", step=state.step, path=str(path), scale=state.scaler.scale)
        return meta

    # -- the loop -----------------------------------------------------------

    def run_segment(
        self,
        state: TrainerState,
        faults: FaultSchedule,
        segment_history: list[HealthRecord],
        segment_ckpts: list[CheckpointMeta],
    ) -> TrainResult:
        run = self.run
        t = run.training
        self._segment_history = segment_history

        while state.step < self.total_steps:
            update = state.step + 1
            try:
                self._apply_control(state)
            except StopRequested:
                self._save(state, segment_history)
                return TrainResult(
                    state, segment_history, self.divergence_restarts, False, "stopped", segment_ckpts
                )

            poison = False
            bomb: float | None = None
            for fault in faults.due(update):
                self.logbook.append("fault", step=update, fault_kind=fault.kind)
                if fault.kind == "crash":
                    raise SimulatedCrash(f"injected crash at step {update}")
                elif fault.kind == "nan-grad":
                    poison = True
                elif fault.kind == "scaler-reset":
                    state.scaler = reset_scale(state.scaler, initial_scale=run.scaler.scale)
                elif fault.kind == "grad-bomb":
                    bomb = fault.factor

            loss, grads, grad_norm, act_norm, overflow = self._compute_grads(state, update, poison)
            lr = lr_at(
                self._schedule_with(state.overrides), update, update * run.tokens_per_step
            )
            if overflow:
                state.scaler = scaler_update(state.scaler, True)
            else:
                arrays = {k: v.data for k, v in state.params.tensors.items()}
                if bomb is not None:
                    # Corrupted update reaching the weights: the bombed gradient
                    # lands raw (no optimizer normalization to absorb it).
                    sgd_step(arrays, grads, lr * bomb)
                elif t.optimizer == "adamw":
                    adamw_step(arrays, grads, state.opt_state, lr, run.adamw)
                else:
                    sgd_step(arrays, grads, lr)
                state.scaler = scaler_update(state.scaler, False)

            state.step = update
            state.tokens_seen = update * run.tokens_per_step
            val_loss = self._validate(state) if update % t.validation_cadence == 0 else None
            record = HealthRecord(
                step=update,
                loss=loss,
                val_loss=val_loss,
                scale=state.scaler.scale,
                grad_norm=grad_norm,
                act_norm=act_norm,
            )
            segment_history.append(record)
            self.logbook.append(
                "step",
                step=update,
                loss=loss,
                lr=lr,
                scale=state.scaler.scale,
                grad_norm=grad_norm,
                act_norm=act_norm,
                val_loss=val_loss,
                skipped=overflow,
            )

            if update % t.checkpoint_cadence == 0:
                segment_ckpts.append(self._save(state, segment_history))

            verdict = detect_divergence(segment_history, run.health)
            if verdict:
                self.logbook.append("divergence", step=update, reason=verdict.reason)
                state, segment_history, segment_ckpts = self._recover(
                    segment_history, segment_ckpts
                )
                self._segment_history = segment_history
                self.divergence_restarts += 1

        if state.step % t.checkpoint_cadence != 0:
            segment_ckpts.append(self._save(state, segment_history))
        self.logbook.append("complete", step=state.step, tokens_seen=state.tokens_seen)
        return TrainResult(
            state, segment_history, self.divergence_restarts, True, "budget", segment_ckpts
        )

    def _schedule_with(self, overrides):
        from dataclasses import replace

        return replace(self.run.schedule, overrides=tuple(overrides))

    def _recover(self, segment_history, segment_ckpts):
        """Pick a restart point per the health rule, reload it, lower LR.

        Checkpoints newer than the restart point are rolled back (deleted):
        they hold post-divergence state and must not be resumed from.
        """
        policy = self.run.health
        following = {
            meta.step: [r for r in segment_history if r.step > meta.step]
            for meta in segment_ckpts
        }
        chosen = select_restart_checkpoint(segment_ckpts, following, policy)
        slope = activation_slope(following[chosen.step][: policy.trend_window])
        state, tail = self.load_state(chosen.path)
        for stale in self.ckpt_dir.glob("ckpt_*.dlm"):
            if int(stale.stem.split("_")[1]) > chosen.step:
                stale.unlink()
        recovery = self.run.recovery
        state.overrides = (*state.overrides, (state.step, recovery.lr_factor))
        new_clip = None
        if recovery.tighten_clip:
            state.clip = ClipConfig(max_norm=recovery.tightened_max_norm)
            new_clip = recovery.tightened_max_norm
        self.logbook.append(
            "restart",
            checkpoint_step=chosen.step,
            checkpoint_path=str(chosen.path),
            checkpoint_scale=chosen.scale,
            activation_slope=slope,
            lr_factor=recovery.lr_factor,
            new_clip=new_clip,
        )
        return state, tail, [chosen]


def train(
    run: RunConfig,
    corpus_tokens: np.ndarray,
    run_dir: str | Path,
    *,
    faults: FaultSchedule | None = None,
    resume_from: str | Path | None = None,
    logbook: Logbook | None = None,
) -> TrainResult:
    """Run to the token budget, surviving injected crashes and divergences.

    Crashes kill the current segment; the harness resumes from the last saved
    checkpoint. Divergences are handled inside the loop via the restart rule.
    Raises UnrecoverableDivergence when no checkpoint passes the health rule.
    """
    trainer = Trainer(run, corpus_tokens, run_dir, logbook=logbook)
    trainer.logbook.append(
        "header",
        schema=SCHEMA_VERSION,
        config=run.echo(),
        total_steps=trainer.total_steps,
        tokens_per_step=run.tokens_per_step,
    )
    faults = faults if faults is not None else FaultSchedule()

    if resume_from is not None:
        state, history = trainer.load_state(resume_from)
        meta = CheckpointMeta(
            step=state.step, path=Path(resume_from), scale=state.scaler.scale
        )
        ckpts = [meta]
    else:
        state = trainer.fresh_state()
        history = []
        ckpts = [trainer._save(state, history)]

    while True:
        try:
            return trainer.run_segment(state, faults, history, ckpts)
        except SimulatedCrash:
            last = latest_checkpoint(trainer.ckpt_dir)
            assert last is not None  # the step-0 checkpoint always exists
            state, history = trainer.load_state(last)
            ckpts = [CheckpointMeta(step=state.step, path=last, scale=state.scaler.scale)]


def checkpoint_scale(path: str | Path) -> float:
    """Snapshot scale from a checkpoint header without loading tensors."""
    return float(read_header(path)["state"]["scaler"]["scale"])
