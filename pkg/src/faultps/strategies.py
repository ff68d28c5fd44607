"""The five training strategies: sync/async checkpointing, sync/async relaxed
chain replication, and the stateless parameter server that trains through
failures on stale gradients.

Each parameter server and each long-lived worker is an independent sequential
actor task on the simulation kernel; actors share nothing except the
coordination service and the object store. Gradients travel by reference:
payloads live in the object store, identity envelopes (worker, batch, base
step, frontend epoch) travel through task results or znode payloads.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from typing import Callable, List, Optional

from . import chaos, checkpoint, coord, data, metrics, nn, objstore, sim

log = logging.getLogger(__name__)

STRATEGY_NAMES = ("sync-ckpt", "async-ckpt", "sync-chain", "async-chain", "stateless")

WEIGHTS_NODE = "/weights"
GRADIENTS_NODE = "/gradient_updates"
SERVERS_NODE = "/servers"
LOCKS_NODE = "/locks"
STATELESS_LOCK = "/locks/stateless"
EPOCH_NODE = "/chain-epoch"


class ConfigError(Exception):
    pass


class ChainDeadError(Exception):
    """Every chain member died; the run cannot continue."""


@dataclass
class StrategyConfig:
    strategy: str = "sync-ckpt"
    num_workers: int = 4
    batch_size: int = 32
    base_lr: float = 0.05
    checkpoint_interval: int = 10
    replication_interval: int = 5
    chain_length: int = 3
    max_steps: Optional[int] = None
    max_time: Optional[float] = None
    eval_interval: int = 10
    eval_size: int = 512
    seed: int = 7
    schedule_seed: Optional[int] = None
    lr_threshold: Optional[int] = None  # defaults to num_workers
    lr_rule: str = "inverse-sqrt-excess"
    # simulated-time cost model
    ps_cadence: float = 0.1
    grad_time: float = 0.05
    spawn_overhead: float = 0.005
    ckpt_time: float = 0.01
    apply_time: float = 0.0005  # per gradient, stateless bulk apply
    sample_period: float = 0.25

    def problems(self) -> List[str]:
        out = []
        if self.strategy not in STRATEGY_NAMES:
            out.append(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGY_NAMES)}")
        if self.num_workers < 1:
            out.append("num_workers must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.base_lr <= 0:
            out.append("base_lr must be positive")
        if self.checkpoint_interval < 1 or self.replication_interval < 1:
            out.append("intervals must be >= 1")
        if self.eval_interval < 1:
            out.append("eval_interval must be >= 1")
        if self.strategy.endswith("chain") and self.chain_length < 2:
            out.append("chain strategies need chain_length >= 2")
        if self.max_steps is None and self.max_time is None:
            out.append("one of max_steps/max_time must be set")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def step_time_hint(self) -> float:
        """Nominal duration of one weight update at full worker parallelism."""
        return self.spawn_overhead + self.grad_time


@dataclass
class RunResult:
    metrics: metrics.MetricLog
    trace: metrics.RunTrace
    final_params: Optional[nn.ParamVector]
    summary: dict


def _dropout_seed(master: int, worker_id: int, batch_id: tuple) -> int:
    return zlib.crc32(f"{master}:{worker_id}:{batch_id}".encode())


def _env_bytes(**fields) -> bytes:
    return json.dumps(fields, sort_keys=True).encode()


def _env_parse(payload: bytes) -> dict:
    return json.loads(payload.decode())


class Lab:
    """Wiring context shared by the actors of one run."""

    def __init__(self, cfg: StrategyConfig, dataset: data.Dataset,
                 model_spec: nn.ModelSpec, run_dir=None, run_id: str = ""):
        cfg.validate()
        self.cfg = cfg
        self.spec = model_spec
        self.sim = sim.Sim(cfg.schedule_seed if cfg.schedule_seed is not None else cfg.seed)
        self.coord = coord.CoordService()
        self.store = objstore.ObjectStore()
        self.run_id = run_id or f"{cfg.strategy}-s{cfg.seed}"
        self.metrics = metrics.MetricLog(cfg.strategy, self.run_id, cfg.num_workers,
                                         clock=lambda: self.sim.now,
                                         stored_bytes=self.store.stored_bytes)
        self.trace = metrics.RunTrace(clock=lambda: self.sim.now)
        self.supervisor = chaos.Supervisor(self.sim, self.metrics, self.trace,
                                           cfg.step_time_hint)
        self.dataset = dataset
        n_eval = min(cfg.eval_size, len(dataset))
        self.eval_set = data.Dataset(dataset.images[:n_eval], dataset.labels[:n_eval],
                                     name="eval", num_classes=dataset.num_classes)
        self.streams = [data.shard(dataset, cfg.num_workers, w, cfg.seed, cfg.batch_size)
                        for w in range(cfg.num_workers)]
        threshold = cfg.lr_threshold if cfg.lr_threshold is not None else cfg.num_workers
        self.policy = nn.LrPolicy(cfg.base_lr, pending_threshold=max(1, threshold),
                                  rule=cfg.lr_rule)
        self.run_dir = run_dir
        self.ckpt_dir = run_dir / "checkpoints" if (
            run_dir is not None and cfg.strategy.endswith("ckpt")) else None
        self.finished = False
        self.failure: Optional[str] = None
        self.final_params: Optional[nn.ParamVector] = None
        self.epoch = 0
        self.last_eval_step = -1
        self._refcounts: dict = {}
        self._chain_refs: List[objstore.ObjectRef] = []
        self.harness_session = self.coord.session("harness")

    # -- shared helpers -----------------------------------------------------

    def done(self, step: int) -> bool:
        if self.failure is not None:
            return True
        if self.cfg.max_steps is not None and step >= self.cfg.max_steps:
            return True
        if self.cfg.max_time is not None and self.sim.now >= self.cfg.max_time:
            return True
        return False

    def publish_weights(self, params: nn.ParamVector, holds: int) -> objstore.ObjectRef:
        """Store a weights payload that self-deletes once every holder released it."""
        ref = self.store.put(nn.serialize_params(params))
        self._refcounts[ref.id] = holds
        return ref

    def release_ref(self, ref: objstore.ObjectRef) -> None:
        left = self._refcounts.get(ref.id)
        if left is None:
            return
        if left <= 1:
            del self._refcounts[ref.id]
            if self.store.contains(ref):
                self.store.delete(ref)
        else:
            self._refcounts[ref.id] = left - 1

    def eval_now(self, params: nn.ParamVector) -> float:
        acc, loss = nn.evaluate(params, self.eval_set)
        self.metrics.set_eval(acc, loss)
        self.metrics.set_step(params.step)
        self.last_eval_step = params.step
        self.metrics.sample()
        self.trace.emit("eval", step=params.step, accuracy=acc, loss=loss)
        return acc

    def eval_due(self, step: int) -> bool:
        # crossing-based: stateless bulk applies jump several steps at once
        return step - self.last_eval_step >= self.cfg.eval_interval

    def fail(self, reason: str) -> None:
        self.failure = reason
        self.finished = True


# ---------------------------------------------------------------------------
# Worker gradient task (checkpointing and chain strategies)


def _gradient_task(lab: Lab, wref: objstore.ObjectRef, worker_id: int, epoch: int):
    cfg = lab.cfg
    batch = lab.streams[worker_id].next_batch()
    lab.sim.current.on_death(lambda: lab.metrics.end_busy(worker_id))
    if cfg.spawn_overhead > 0:
        yield sim.Sleep(cfg.spawn_overhead)
    lab.metrics.begin_busy(worker_id)
    yield sim.Sleep(cfg.grad_time)
    params = nn.deserialize_params(lab.store.get(wref), lab.spec)
    lab.release_ref(wref)
    loss, grad = nn.loss_and_grad(
        params, batch, _dropout_seed(cfg.seed, worker_id, batch.batch_id))
    lab.metrics.end_busy(worker_id)
    gref = lab.store.put(nn.serialize_gradient(grad, lab.spec))
    task = lab.sim.current
    task.orphan_cleanup = lambda _env: (
        lab.store.delete(gref) if lab.store.contains(gref) else None)
    return {"gref": gref.id, "worker": worker_id, "batch_id": list(batch.batch_id),
            "base_step": grad.base_step, "epoch": epoch, "loss": loss}


def _collect_gradient(lab: Lab, env: dict) -> nn.GradientUpdate:
    """Claim a finished gradient task's payload and free it from the store."""
    ref = objstore.ObjectRef(env["gref"])
    payload = lab.store.get(ref)
    lab.store.delete(ref)
    lab.metrics.inc_produced()
    return nn.deserialize_gradient(payload, lab.spec,
                                   worker_id=env["worker"],
                                   batch_id=tuple(env["batch_id"]))


def _discard_results(lab: Lab, tasks: List[sim.Task]):
    """Drop gradients from tasks whose results will never be applied."""
    for t in tasks:
        if t.status == sim.DONE and isinstance(t.result, dict):
            ref = objstore.ObjectRef(t.result["gref"])
            if lab.store.contains(ref):
                lab.store.delete(ref)


# ---------------------------------------------------------------------------
# Checkpointing parameter servers


def _maybe_checkpoint(lab: Lab, params: nn.ParamVector, last_saved: int):
    """Save when an interval of updates has passed; returns the new last-saved step.

    Callers place this after an iteration-boundary yield, so a kill triggered
    at step S lands before the step-S file is written and latest-wins restore
    resumes from the previous boundary, which is what makes the post-failure
    accuracy regression observable.
    """
    cfg = lab.cfg
    if (lab.ckpt_dir is not None and params.step > last_saved
            and params.step - last_saved >= cfg.checkpoint_interval):
        yield sim.Sleep(cfg.ckpt_time)
        checkpoint.save_checkpoint(lab.ckpt_dir, params,
                                   wall_time=lab.sim.now, run_id=lab.run_id)
        lab.trace.emit("checkpoint", step=params.step, digest=nn.params_digest(params))
        return params.step
    return last_saved


def _sync_ckpt_ps(lab: Lab, params: nn.ParamVector):
    cfg = lab.cfg
    me = lab.sim.current
    lab.epoch += 1
    epoch = lab.epoch
    lab.trace.emit("frontend_claim", epoch=epoch, server="ps", step=params.step)
    lab.eval_now(params)
    last_saved = params.step
    while not lab.done(params.step):
        yield  # iteration boundary: pending kills land here, before the save
        last_saved = yield from _maybe_checkpoint(lab, params, last_saved)
        wref = lab.publish_weights(params, holds=cfg.num_workers)
        tasks = [lab.sim.spawn(_gradient_task(lab, wref, w, epoch),
                               name=f"grad-w{w}", owner=me)
                 for w in range(cfg.num_workers)]
        yield lab.sim.wait_all(tasks)
        grads = []
        for t in tasks:  # worker order, not completion order: deterministic averaging
            env = t.result
            if env["epoch"] != epoch:
                lab.trace.emit("reject_stale_epoch", worker=env["worker"])
                continue
            grads.append(_collect_gradient(lab, env))
        mean = nn.average_gradients(grads)
        staleness = params.step - mean.base_step
        params = nn.apply_gradients(params, [mean], lab.policy)
        lab.metrics.inc_applied(len(grads))
        lab.metrics.set_step(params.step)
        lab.trace.emit("apply", step=params.step, staleness=staleness, count=len(grads))
        lab.supervisor.on_step(params.step)
        lab.metrics.sample()  # event-driven record per weight update
        if lab.eval_due(params.step):
            lab.eval_now(params)
    if lab.last_eval_step != params.step:
        lab.eval_now(params)
    lab.final_params = params
    lab.finished = True


def _async_ckpt_ps(lab: Lab, params: nn.ParamVector):
    cfg = lab.cfg
    me = lab.sim.current
    lab.epoch += 1
    epoch = lab.epoch
    lab.trace.emit("frontend_claim", epoch=epoch, server="ps", step=params.step)
    lab.eval_now(params)
    last_saved = params.step

    def spawn_for(worker_id: int) -> sim.Task:
        wref = lab.publish_weights(params, holds=1)
        return lab.sim.spawn(_gradient_task(lab, wref, worker_id, epoch),
                             name=f"grad-w{worker_id}", owner=me)

    outstanding = [spawn_for(w) for w in range(cfg.num_workers)]
    while not lab.done(params.step):
        completed = yield lab.sim.wait_any(outstanding)
        consumed_workers = []
        for t in completed:
            outstanding.remove(t)
            env = t.result
            consumed_workers.append(env["worker"])
            if env["epoch"] != epoch:
                lab.trace.emit("reject_stale_epoch", worker=env["worker"])
                continue
            grad = _collect_gradient(lab, env)
            staleness = params.step - grad.base_step
            params = nn.apply_gradients(params, [grad], lab.policy)
            lab.metrics.inc_applied(1)
            lab.metrics.set_step(params.step)
            lab.trace.emit("apply", step=params.step, staleness=staleness, count=1,
                           worker=grad.worker_id)
            lab.supervisor.on_step(params.step)
            lab.metrics.sample()  # event-driven record per weight update
            if lab.eval_due(params.step):
                lab.eval_now(params)
        if params.step - last_saved >= cfg.checkpoint_interval:
            yield  # boundary so a step-triggered kill lands before the save
            last_saved = yield from _maybe_checkpoint(lab, params, last_saved)
        for w in consumed_workers:
            outstanding.append(spawn_for(w))
    if outstanding:  # drain in-flight tasks; their gradients are discarded
        yield lab.sim.wait_all(outstanding)
        _discard_results(lab, outstanding)
    if lab.last_eval_step != params.step:
        lab.eval_now(params)
    lab.final_params = params
    lab.finished = True


def _ckpt_respawn(lab: Lab, body: Callable) -> Callable[[], sim.Task]:
    def respawn() -> sim.Task:
        restored = None
        if lab.ckpt_dir is not None:
            restored = checkpoint.restore_latest(lab.ckpt_dir, lab.spec)
        if restored is not None:
            lab.trace.emit("restore", step=restored.step,
                           digest=nn.params_digest(restored))
            params = restored
        else:
            params = nn.init_params(lab.spec, lab.cfg.seed)
        return lab.sim.spawn(body(lab, params), name="ps")
    return respawn


# ---------------------------------------------------------------------------
# Chain replication


def _seq_of(name: str) -> int:
    return int(name[1:])


def _member_path(seq: int) -> str:
    return f"{SERVERS_NODE}/s{seq:010d}"


def _chain_server(lab: Lab, mode: str):
    """One chain member: backup following its predecessor, frontend when lowest."""
    cfg = lab.cfg
    session = lab.coord.session("chain-server")
    me = lab.sim.current
    me.on_death(lambda: lab.coord.close_session(session))
    my_path = lab.coord.create(session, f"{SERVERS_NODE}/s", b"",
                               coord.EPHEMERAL, sequential=True)
    my_seq = _seq_of(my_path.rpartition("/")[2])
    lab.trace.emit("chain_join", server=my_seq)
    params = nn.init_params(lab.spec, cfg.seed)

    def acquire_pred():
        """Watch the live node with the greatest index below mine; None if lowest."""
        while True:
            kids = lab.coord.children(session, SERVERS_NODE)
            lower = [s for s in map(_seq_of, kids) if s < my_seq]
            if not lower:
                return None, b""
            path = _member_path(max(lower))
            try:
                payload, _ = lab.coord.get(session, path, watch=True)
                return path, payload
            except coord.NoNodeError:
                continue

    def install(payload: bytes, params: nn.ParamVector) -> nn.ParamVector:
        """Adopt replicated weights if newer, then propagate the same reference."""
        if not payload:
            return params
        env = _env_parse(payload)
        if env["step"] <= params.step:
            return params
        try:
            blob = lab.store.get(objstore.ObjectRef(env["ref"]))
        except objstore.DanglingRefError:
            log.warning("server %d: replication object %s gone, skipping",
                        my_seq, env["ref"])
            return params
        new_params = nn.deserialize_params(blob, lab.spec)
        lab.trace.emit("install", server=my_seq, step=new_params.step)
        lab.coord.set(session, my_path, payload)
        return new_params

    pred_path, payload = acquire_pred()
    if pred_path is None:
        yield from _chain_frontend(lab, mode, session, my_path, my_seq, params)
        return
    params = install(payload, params)
    while not lab.finished:
        event = yield from session.wait_event()
        if lab.finished:
            return
        if event.path != pred_path:
            continue
        pred_died = event.kind == coord.DELETED
        if event.kind == coord.DATA_CHANGED:
            try:
                payload, _ = lab.coord.get(session, pred_path, watch=True)
                params = install(payload, params)
            except coord.NoNodeError:
                # the predecessor vanished after firing our one-shot data
                # watch and before we re-armed: its deletion will never be
                # delivered, so treat this as the death notification
                pred_died = True
        if pred_died:
            pred_path, payload = acquire_pred()
            if pred_path is None:
                lab.trace.emit("promote", server=my_seq, step=params.step)
                yield from _chain_frontend(lab, mode, session, my_path, my_seq, params)
                return
            params = install(payload, params)


def _replicate(lab: Lab, session: coord.Session, my_path: str, my_seq: int,
               params: nn.ParamVector, epoch: int):
    """Publish weights by reference and wait for the immediate successor's ack."""
    ref = lab.store.put(nn.serialize_params(params))
    lab._chain_refs.append(ref)
    while len(lab._chain_refs) > 2:  # keep current + previous for slow fetchers
        old = lab._chain_refs.pop(0)
        if lab.store.contains(old):
            lab.store.delete(old)
    envelope = _env_bytes(ref=ref.id, step=params.step, epoch=epoch, server=my_seq)
    lab.coord.set(session, my_path, envelope)
    lab.trace.emit("replicate", server=my_seq, step=params.step)
    while not lab.finished:
        kids = lab.coord.children(session, SERVERS_NODE)
        higher = [s for s in map(_seq_of, kids) if s > my_seq]
        if not higher:
            return  # no successor left to acknowledge
        try:
            payload, _ = lab.coord.get(session, _member_path(min(higher)), watch=True)
        except coord.NoNodeError:
            continue
        if payload:
            env = _env_parse(payload)
            if env["step"] >= params.step:
                return  # acknowledged
        yield from session.wait_event()


def _chain_frontend(lab: Lab, mode: str, session: coord.Session, my_path: str,
                    my_seq: int, params: nn.ParamVector):
    cfg = lab.cfg
    me = lab.sim.current
    epoch = lab.coord.set(session, EPOCH_NODE, str(my_seq).encode())
    lab.epoch = epoch
    lab.supervisor.rebind("ps", me)
    lab.trace.emit("frontend_claim", epoch=epoch, server=my_seq, step=params.step)
    lab.eval_now(params)
    last_replicated = params.step

    def replication_due() -> bool:
        return params.step % cfg.replication_interval == 0 and params.step != last_replicated

    if mode == "sync":
        while not lab.done(params.step):
            yield
            wref = lab.publish_weights(params, holds=cfg.num_workers)
            tasks = [lab.sim.spawn(_gradient_task(lab, wref, w, epoch),
                                   name=f"grad-w{w}", owner=me)
                     for w in range(cfg.num_workers)]
            yield lab.sim.wait_all(tasks)
            grads = []
            for t in tasks:
                env = t.result
                if env["epoch"] != epoch:
                    lab.trace.emit("reject_stale_epoch", worker=env["worker"])
                    continue
                grads.append(_collect_gradient(lab, env))
            mean = nn.average_gradients(grads)
            staleness = params.step - mean.base_step
            params = nn.apply_gradients(params, [mean], lab.policy)
            lab.metrics.inc_applied(len(grads))
            lab.metrics.set_step(params.step)
            lab.trace.emit("apply", step=params.step, staleness=staleness, count=len(grads))
            lab.supervisor.on_step(params.step)
            lab.metrics.sample()  # event-driven record per weight update
            if lab.eval_due(params.step):
                lab.eval_now(params)
            if replication_due():
                yield from _replicate(lab, session, my_path, my_seq, params, epoch)
                last_replicated = params.step
    else:
        def spawn_for(worker_id: int) -> sim.Task:
            wref = lab.publish_weights(params, holds=1)
            return lab.sim.spawn(_gradient_task(lab, wref, worker_id, epoch),
                                 name=f"grad-w{worker_id}", owner=me)

        outstanding = [spawn_for(w) for w in range(cfg.num_workers)]
        while not lab.done(params.step):
            completed = yield lab.sim.wait_any(outstanding)
            consumed = []
            for t in completed:
                outstanding.remove(t)
                env = t.result
                consumed.append(env["worker"])
                if env["epoch"] != epoch:
                    lab.trace.emit("reject_stale_epoch", worker=env["worker"])
                    continue
                grad = _collect_gradient(lab, env)
                staleness = params.step - grad.base_step
                params = nn.apply_gradients(params, [grad], lab.policy)
                lab.metrics.inc_applied(1)
                lab.metrics.set_step(params.step)
                lab.trace.emit("apply", step=params.step, staleness=staleness,
                               count=1, worker=grad.worker_id)
                lab.supervisor.on_step(params.step)
                lab.metrics.sample()  # event-driven record per weight update
                if lab.eval_due(params.step):
                    lab.eval_now(params)
                if replication_due():
                    yield from _replicate(lab, session, my_path, my_seq, params, epoch)
                    last_replicated = params.step
            for w in consumed:
                outstanding.append(spawn_for(w))
        if outstanding:
            yield lab.sim.wait_all(outstanding)
            _discard_results(lab, outstanding)
    if lab.last_eval_step != params.step:
        lab.eval_now(params)
    lab.final_params = params
    lab.finished = True


def _chain_watchdog(lab: Lab):
    """Ends the run with a diagnostic when every chain member has died."""
    session = lab.coord.session("chain-watchdog")
    while not lab.finished:  # first wait for the chain to form
        if lab.coord.children(session, SERVERS_NODE, watch=True):
            break
        yield from session.wait_event()
    while not lab.finished:
        kids = lab.coord.children(session, SERVERS_NODE, watch=True)
        if not kids:
            lab.fail("full chain death: no live servers remain")
            return
        yield from session.wait_event()


# ---------------------------------------------------------------------------
# Stateless parameter server


def ps_step_stateless(lab: Lab, session: coord.Session) -> int:
    """One stateless server step: under the lock, read all pending gradient
    references in sequence order, fetch the current weights reference, apply
    everything with the down-tuned rate, store the new weights, swap the
    reference, and delete what was consumed.

    Nothing is mutated until after the last yield, so a kill at any point
    either leaves the whole backlog pending or fully applied, never half.
    """
    cfg = lab.cfg
    handle = yield from coord.lock_acquire(lab.coord, session, STATELESS_LOCK)
    kids = lab.coord.children(session, GRADIENTS_NODE)
    if not kids:
        coord.lock_release(lab.coord, handle)
        return 0
    envs = []
    for name in kids:
        payload, _ = lab.coord.get(session, f"{GRADIENTS_NODE}/{name}")
        envs.append((name, _env_parse(payload)))
    lab.metrics.sample()  # pre-apply record: the backlog memory spike is visible here
    if cfg.apply_time > 0:
        yield sim.Sleep(cfg.apply_time * len(envs))
    # atomic from here: no yields until the swap and the deletes are done
    wenv = _env_parse(lab.coord.get(session, WEIGHTS_NODE)[0])
    wref = objstore.ObjectRef(wenv["ref"])
    params = nn.deserialize_params(lab.store.get(wref), lab.spec)
    grads = []
    consumed = []
    for name, env in envs:
        ref = objstore.ObjectRef(env["gref"])
        try:
            blob = lab.store.get(ref)
        except objstore.DanglingRefError:
            log.warning("gradient payload %s vanished; skipping", ref.id)
            lab.coord.delete(session, f"{GRADIENTS_NODE}/{name}")
            continue
        grads.append(nn.deserialize_gradient(blob, lab.spec,
                                             worker_id=env["worker"],
                                             batch_id=tuple(env["batch_id"])))
        consumed.append((name, ref))
    for i, grad in enumerate(grads):
        # staleness at application time: the weights advance through the bulk
        lab.trace.emit("apply", step=params.step + i + 1,
                       staleness=params.step + i - grad.base_step,
                       worker=grad.worker_id, batch_id=list(grad.batch_id), count=1)
    new_params = nn.apply_gradients(params, grads, lab.policy)
    new_ref = lab.store.put(nn.serialize_params(new_params))
    lab.coord.set(session, WEIGHTS_NODE,
                  _env_bytes(ref=new_ref.id, step=new_params.step))
    for name, ref in consumed:
        lab.coord.delete(session, f"{GRADIENTS_NODE}/{name}")
        lab.store.delete(ref)
    lab.store.delete(wref)  # superseded weights object
    coord.lock_release(lab.coord, handle)
    lab.metrics.inc_applied(len(grads))
    lab.metrics.set_step(new_params.step)
    if not lab.finished:
        lab.supervisor.on_step(new_params.step)
    if lab.eval_due(new_params.step):
        lab.eval_now(new_params)
    lab.metrics.sample()  # post-apply record: backlog memory released
    return len(grads)


def worker_step_stateless(lab: Lab, session: coord.Session, worker_id: int,
                          cached: Optional[nn.ParamVector]):
    """One stateless worker step: read the weights reference, falling back to
    the last successfully read weights, compute a gradient on the next batch,
    and append its reference under the gradient queue while holding the lock.
    Never blocks on parameter-server liveness.
    """
    cfg = lab.cfg
    params = cached
    try:
        wenv = _env_parse(lab.coord.get(session, WEIGHTS_NODE)[0])
        params = nn.deserialize_params(
            lab.store.get(objstore.ObjectRef(wenv["ref"])), lab.spec)
    except (coord.CoordError, objstore.DanglingRefError):
        pass
    if params is None:
        yield sim.Sleep(cfg.grad_time)
        return None
    batch = lab.streams[worker_id].next_batch()
    lab.metrics.begin_busy(worker_id)
    yield sim.Sleep(cfg.grad_time)
    loss, grad = nn.loss_and_grad(
        params, batch, _dropout_seed(cfg.seed, worker_id, batch.batch_id))
    lab.metrics.end_busy(worker_id)
    gref = lab.store.put(nn.serialize_gradient(grad, lab.spec))
    handle = yield from coord.lock_acquire(lab.coord, session, STATELESS_LOCK)
    lab.coord.create(session, f"{GRADIENTS_NODE}/g-",
                     _env_bytes(gref=gref.id, worker=worker_id,
                                batch_id=list(batch.batch_id),
                                base_step=grad.base_step),
                     sequential=True)
    coord.lock_release(lab.coord, handle)
    lab.metrics.inc_produced()
    lab.trace.emit("produce", worker=worker_id, batch_id=list(batch.batch_id),
                   base_step=grad.base_step)
    return params


def setup_roots(lab: Lab) -> None:
    """Create the reserved coordination roots used by every strategy."""
    for root in (SERVERS_NODE, GRADIENTS_NODE, LOCKS_NODE):
        lab.coord.create(lab.harness_session, root)
    lab.coord.create(lab.harness_session, STATELESS_LOCK)


def bootstrap_stateless(lab: Lab) -> nn.ParamVector:
    """Initialize /weights with a reference to freshly initialized parameters."""
    params0 = nn.init_params(lab.spec, lab.cfg.seed)
    ref0 = lab.store.put(nn.serialize_params(params0))
    lab.coord.create(lab.harness_session, WEIGHTS_NODE,
                     _env_bytes(ref=ref0.id, step=0))
    return params0


def _stateless_ps(lab: Lab):
    cfg = lab.cfg
    session = lab.coord.session("stateless-ps")
    me = lab.sim.current
    me.on_death(lambda: lab.coord.close_session(session))
    lab.epoch += 1
    lab.trace.emit("frontend_claim", epoch=lab.epoch, server="ps",
                   step=lab.metrics.sim_step)
    while not lab.done(lab.metrics.sim_step):
        yield sim.Sleep(cfg.ps_cadence)
        if lab.done(lab.metrics.sim_step):
            break
        yield from ps_step_stateless(lab, session)
    lab.coord.close_session(session)
    lab.finished = True


def _stateless_worker(lab: Lab, worker_id: int):
    session = lab.coord.session(f"worker-{worker_id}")
    me = lab.sim.current
    me.on_death(lambda: lab.coord.close_session(session))
    me.on_death(lambda: lab.metrics.end_busy(worker_id))  # close in-flight span
    cached: Optional[nn.ParamVector] = None
    while not lab.finished:
        cached = yield from worker_step_stateless(lab, session, worker_id, cached)
    lab.coord.close_session(session)


def _stateless_drain(lab: Lab):
    """After the run budget: apply whatever is still queued so the store ends clean."""
    session = lab.coord.session("drain")
    while True:
        applied = yield from ps_step_stateless(lab, session)
        if applied == 0:
            break
    lab.coord.close_session(session)


# ---------------------------------------------------------------------------
# Harness


def _sampler(lab: Lab):
    while not lab.finished:
        yield sim.Sleep(lab.cfg.sample_period)
        if lab.finished:
            break
        lab.metrics.sample()


def _budget_monitor(lab: Lab):
    """Ends time-budget runs even while the parameter server is down."""
    while not lab.finished:
        yield sim.Sleep(lab.cfg.sample_period)
        if lab.cfg.max_time is not None and lab.sim.now >= lab.cfg.max_time:
            lab.finished = True


def run_strategy(cfg: StrategyConfig, dataset: data.Dataset,
                 model_spec: Optional[nn.ModelSpec] = None,
                 run_dir=None, plan: Optional[chaos.FailurePlan] = None,
                 run_id: str = "") -> RunResult:
    """Wire one strategy, execute it under the failure plan, return its measurements."""
    model_spec = model_spec or nn.small_cnn()
    lab = Lab(cfg, dataset, model_spec, run_dir=run_dir, run_id=run_id)
    co, hs = lab.coord, lab.harness_session
    setup_roots(lab)

    if cfg.strategy in ("sync-ckpt", "async-ckpt"):
        body = _sync_ckpt_ps if cfg.strategy == "sync-ckpt" else _async_ckpt_ps
        respawn = _ckpt_respawn(lab, body)
        lab.supervisor.register_role("ps", respawn)
        lab.supervisor.rebind("ps", respawn())
        if lab.ckpt_dir is not None:
            def flag_downtime(target: str) -> None:
                # downtime samples show the accuracy the run will restart from
                restored = checkpoint.restore_latest(lab.ckpt_dir, lab.spec)
                if restored is not None:
                    acc, loss = nn.evaluate(restored, lab.eval_set)
                    lab.metrics.set_eval(acc, loss)
                    lab.metrics.sample()
            lab.supervisor.on_kill_hooks.append(flag_downtime)
    elif cfg.strategy in ("sync-chain", "async-chain"):
        mode = "sync" if cfg.strategy == "sync-chain" else "async"
        co.create(hs, EPOCH_NODE)

        def spawn_member() -> sim.Task:
            return lab.sim.spawn(_chain_server(lab, mode), name="chain-server")

        def respawn_tail() -> Optional[sim.Task]:
            spawn_member()
            return None  # binding moves only via promotion

        lab.supervisor.register_role("ps", respawn_tail, rebindable=True)
        for _ in range(cfg.chain_length):
            spawn_member()
        lab.sim.spawn(_chain_watchdog(lab), name="chain-watchdog")
    elif cfg.strategy == "stateless":
        params0 = bootstrap_stateless(lab)
        acc, loss = nn.evaluate(params0, lab.eval_set)
        lab.metrics.set_eval(acc, loss)
        lab.metrics.sample()

        def respawn_ps() -> sim.Task:
            return lab.sim.spawn(_stateless_ps(lab), name="stateless-ps")

        lab.supervisor.register_role("ps", respawn_ps)
        lab.supervisor.rebind("ps", respawn_ps())
        for w in range(cfg.num_workers):
            lab.sim.spawn(_stateless_worker(lab, w), name=f"worker-{w}")
    else:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}")

    if plan is not None:
        lab.supervisor.arm(plan)
    lab.sim.spawn(_sampler(lab), name="sampler")
    lab.sim.spawn(_budget_monitor(lab), name="budget-monitor")

    lab.sim.run(until=lambda: lab.finished)

    if cfg.strategy == "stateless" and not lab.failure:
        workers = [t for t in lab.sim.tasks() if t.name.startswith("worker-")]
        lab.sim.run(until=lambda: all(not t.alive for t in workers))
        drain = lab.sim.spawn(_stateless_drain(lab), name="drain")
        lab.sim.run(until=lambda: not drain.alive)
        wenv = _env_parse(co.get(hs, WEIGHTS_NODE)[0])
        lab.final_params = nn.deserialize_params(
            lab.store.get(objstore.ObjectRef(wenv["ref"])), lab.spec)

    for task in lab.sim.tasks():
        if task.alive:
            lab.sim.kill(task)
    lab.metrics.sample()

    if lab.failure:
        raise ChainDeadError(lab.failure)

    downs = metrics.down_intervals(
        [{"ps_alive": r.ps_alive, "wall_time_s": r.wall_time_s}
         for r in lab.metrics.records])
    summary = {
        "strategy": cfg.strategy,
        "run_id": lab.run_id,
        "final_step": lab.final_params.step if lab.final_params else lab.metrics.sim_step,
        "final_accuracy": lab.metrics.accuracy,
        "final_loss": lab.metrics.loss,
        "grads_produced": lab.metrics.grads_produced,
        "grads_applied": lab.metrics.grads_applied,
        "sim_seconds": lab.sim.now,
        "downtime_intervals": downs,
    }
    return RunResult(lab.metrics, lab.trace, lab.final_params, summary)


# Strategy-level entry points ------------------------------------------------


def run_sync_checkpoint(cfg: StrategyConfig, dataset, **kw) -> RunResult:
    cfg.strategy = "sync-ckpt"
    return run_strategy(cfg, dataset, **kw)


def run_async_checkpoint(cfg: StrategyConfig, dataset, **kw) -> RunResult:
    cfg.strategy = "async-ckpt"
    return run_strategy(cfg, dataset, **kw)


def run_chain(cfg: StrategyConfig, dataset, mode: str = "sync", **kw) -> RunResult:
    cfg.strategy = f"{mode}-chain"
    return run_strategy(cfg, dataset, **kw)


def run_stateless(cfg: StrategyConfig, dataset, **kw) -> RunResult:
    cfg.strategy = "stateless"
    return run_strategy(cfg, dataset, **kw)
