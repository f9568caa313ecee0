"""Fault-tolerant asynchronous task engine.

Tasks are identified by their 3-tuple (input dataset, model, output dataset)
plus an explicit id, queued durably in the store, and pulled by agents under
time-bounded leases; an expired lease makes the task claimable again, so a
dead agent's work is replayed automatically. Completion appends a message to
a persisted notification queue consumed by the singleton master, which
advances plan DAGs. The master persists its consumer offset atomically with
the effects of the messages it consumed, so a crash-restarted master never
loses or double-applies a notification.

Task outputs are staged documents committed atomically with the completion
record (see store docs), which keeps at-least-once execution observationally
exactly-once.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field, replace

from forge.clock import Clock
from forge.errors import (
    CycleDetected,
    DuplicateKey,
    InvalidArgument,
    PlanNotFound,
    StaleLease,
    TaskNotFound,
    UnknownModel,
    UnknownView,
)
from forge.faults import KillPoint, kill_point
from forge.query import TagScalar
from forge.store import Document, PutOp, Store
from forge.store.store import CommitGroupOp
from forge.store.types import validate_tags

TASK_PREFIX = "__sys/task/"
PLAN_PREFIX = "__sys/plan/"
NOTIFY_PREFIX = "__sys/notify/"
MASTER_KEY = "__sys/master"

PENDING = "pending"
LEASED = "leased"
COMPLETED = "completed"
DEAD = "dead"

PLAN_RUNNING = "running"
PLAN_COMPLETED = "completed"
PLAN_FAILED = "failed"

KIND_TRAIN = "train"
KIND_USER_FN = "user_fn"
TASK_KINDS = (KIND_TRAIN, KIND_USER_FN)

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_LEASE_TTL_MS = 30_000
MIN_LEASE_TTL_MS = 1_000


@dataclass(frozen=True)
class Task:
    task_id: str
    kind: str
    input_dataset: str
    model_key: str
    output_dataset: str
    params: dict[str, TagScalar] = field(default_factory=dict)
    status: str = PENDING
    attempts: int = 0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    lease_holder: str | None = None
    lease_until: int = 0
    unblocked: bool = True
    plan_id: str | None = None
    depends_on: tuple[str, ...] = ()
    submitted_at: int = 0
    last_error: str | None = None
    output_keys: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["depends_on"] = list(self.depends_on)
        d["output_keys"] = list(self.output_keys)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        d = dict(d)
        d["depends_on"] = tuple(d.get("depends_on", ()))
        d["output_keys"] = tuple(d.get("output_keys", ()))
        return cls(**d)


@dataclass(frozen=True)
class Plan:
    plan_id: str
    task_ids: tuple[str, ...]
    status: str = PLAN_RUNNING
    submitted_at: int = 0


def _json_doc(key: str, payload: dict) -> Document:
    return Document(key=key, payload=json.dumps(payload, sort_keys=True).encode())


class WorkflowManager:
    """Owns the in-memory task/plan tables mirroring the persisted queue.

    All mutations go through the store as atomic op batches; the tables are
    rebuilt from the store on open, so they are a cache, never the truth.
    """

    def __init__(self, store: Store, clock: Clock, view_exists, model_exists):
        self.store = store
        self.clock = clock
        self._view_exists = view_exists
        self._model_exists = model_exists
        self.tasks: dict[str, Task] = {}
        self.plans: dict[str, Plan] = {}
        self._notify_next = 0
        self._rebuild()

    def _rebuild(self) -> None:
        for key in self.store.keys_with_prefix(TASK_PREFIX):
            task = Task.from_dict(json.loads(self.store.get(key).payload.decode()))
            self.tasks[task.task_id] = task
        for key in self.store.keys_with_prefix(PLAN_PREFIX):
            meta = json.loads(self.store.get(key).payload.decode())
            self.plans[meta["plan_id"]] = Plan(plan_id=meta["plan_id"],
                                               task_ids=tuple(meta["task_ids"]),
                                               status=meta["status"],
                                               submitted_at=meta["submitted_at"])
        notes = self.store.keys_with_prefix(NOTIFY_PREFIX)
        self._notify_next = int(notes[-1].rsplit("/", 1)[1]) + 1 if notes else 0

    # -- helpers ----------------------------------------------------------

    def _task_op(self, task: Task, *, exists: bool) -> PutOp:
        return PutOp(_json_doc(TASK_PREFIX + task.task_id, task.to_dict()), replace=exists)

    def _plan_op(self, plan: Plan, *, exists: bool) -> PutOp:
        payload = {"plan_id": plan.plan_id, "task_ids": list(plan.task_ids),
                   "status": plan.status, "submitted_at": plan.submitted_at}
        return PutOp(_json_doc(PLAN_PREFIX + plan.plan_id, payload), replace=exists)

    def _notify_op(self, payload: dict) -> PutOp:
        key = f"{NOTIFY_PREFIX}{self._notify_next:012d}"
        return PutOp(_json_doc(key, payload))

    def _validate_task_fields(self, kind, input_dataset, model_key, output_dataset, params):
        if kind not in TASK_KINDS:
            raise InvalidArgument(f"unknown task kind {kind!r}; choose from {TASK_KINDS}")
        validate_tags(params)
        if input_dataset and not self._view_exists(input_dataset):
            raise UnknownView(f"input dataset view {input_dataset!r} does not exist")
        if model_key and not self._model_exists(model_key):
            raise UnknownModel(f"model {model_key!r} is not registered")

    # -- submission ------------------------------------------------------

    def build_task(self, *, task_id: str, kind: str, input_dataset: str, model_key: str,
                   output_dataset: str, params: dict | None = None,
                   max_attempts: int = DEFAULT_MAX_ATTEMPTS, plan_id: str | None = None,
                   depends_on: tuple[str, ...] = ()) -> Task:
        params = dict(params or {})
        self._validate_task_fields(kind, input_dataset, model_key, output_dataset, params)
        if max_attempts < 1:
            raise InvalidArgument("max_attempts must be >= 1")
        return Task(task_id=task_id, kind=kind, input_dataset=input_dataset,
                    model_key=model_key, output_dataset=output_dataset, params=params,
                    max_attempts=max_attempts, plan_id=plan_id,
                    depends_on=tuple(depends_on), unblocked=not depends_on,
                    submitted_at=self.clock.now_ms())

    def submit_task(self, **kwargs) -> str:
        """Durable enqueue; resubmitting an existing task_id is a no-op."""
        task_id = kwargs.get("task_id") or self._generate_id(kwargs)
        kwargs["task_id"] = task_id
        if task_id in self.tasks:
            return task_id
        task = self.build_task(**kwargs)
        self.store.apply_ops([self._task_op(task, exists=False)])
        self.tasks[task_id] = task
        return task_id

    @staticmethod
    def _generate_id(kwargs) -> str:
        import uuid

        return "t-" + uuid.uuid4().hex[:16]

    def stream_task_ops(self, task_id: str, view_key: str, model_key: str,
                        output_dataset: str, params: dict) -> tuple[Task | None, list[PutOp]]:
        """Ops for a stream-emitted task; None if the id is already queued."""
        if task_id in self.tasks:
            return None, []
        task = self.build_task(task_id=task_id, kind=KIND_TRAIN, input_dataset=view_key,
                               model_key=model_key, output_dataset=output_dataset,
                               params=params)
        return task, [self._task_op(task, exists=False)]

    def register_task(self, task: Task) -> None:
        self.tasks[task.task_id] = task

    # -- leases ----------------------------------------------------------------

    def lease_task(self, agent_id: str, lease_ttl_ms: int,
                   kinds: list[str] | None = None) -> Task | None:
        """Atomically claim the oldest dispatchable task, or None."""
        if lease_ttl_ms < MIN_LEASE_TTL_MS:
            raise InvalidArgument(f"lease ttl must be >= {MIN_LEASE_TTL_MS} ms")
        now = self.clock.now_ms()
        ordered = sorted(self.tasks.values(), key=lambda t: (t.submitted_at, t.task_id))
        ops: list[PutOp] = []
        newly_dead: list[Task] = []
        chosen: Task | None = None
        for task in ordered:
            claimable = ((task.status == PENDING and task.unblocked)
                         or (task.status == LEASED and task.lease_until <= now))
            if not claimable:
                continue
            if kinds is not None and task.kind not in kinds:
                continue
            if task.attempts >= task.max_attempts:
                dead = replace(task, status=DEAD, lease_holder=None, lease_until=0,
                               last_error=task.last_error or "lease expired; attempts exhausted")
                ops.append(self._task_op(dead, exists=True))
                newly_dead.append(dead)
                continue
            chosen = replace(task, status=LEASED, attempts=task.attempts + 1,
                             lease_holder=agent_id, lease_until=now + lease_ttl_ms)
            ops.append(self._task_op(chosen, exists=True))
            break
        if ops:
            self.store.apply_ops(ops)
            for dead in newly_dead:
                self.tasks[dead.task_id] = dead
            if chosen is not None:
                self.tasks[chosen.task_id] = chosen
        return chosen

    def _current_lease(self, task_id: str, agent_id: str) -> Task:
        task = self.tasks.get(task_id)
        if task is None:
            raise TaskNotFound(f"task {task_id!r} not found")
        now = self.clock.now_ms()
        if (task.status != LEASED or task.lease_holder != agent_id
                or task.lease_until <= now):
            raise StaleLease(
                f"agent {agent_id!r} does not hold a live lease on {task_id!r}")
        return task

    def heartbeat(self, task_id: str, agent_id: str, lease_ttl_ms: int) -> None:
        task = self._current_lease(task_id, agent_id)
        extended = replace(task, lease_until=self.clock.now_ms() + lease_ttl_ms)
        self.store.apply_ops([self._task_op(extended, exists=True)])
        self.tasks[task_id] = extended

    # -- outputs and completion -------------------------------------------------

    def write_output(self, task_id: str, agent_id: str, index: int, payload,
                     label: str | None, tags: dict) -> str:
        """Stage one output document; invisible until the task completes."""
        self._current_lease(task_id, agent_id)
        key = f"{task_id}/{index:06d}"
        doc = Document(key=key, payload=payload, label=label, tags=dict(tags or {}))
        self.store.apply_ops([PutOp(doc, group=task_id)])
        return key

    def complete_task(self, task_id: str, agent_id: str, outcome: str,
                      message: str | None = None,
                      output_keys: tuple[str, ...] = ()) -> None:
        if outcome not in ("ok", "error"):
            raise InvalidArgument("outcome must be 'ok' or 'error'")
        task = self._current_lease(task_id, agent_id)
        now = self.clock.now_ms()
        if outcome == "ok":
            done = replace(task, status=COMPLETED, lease_holder=None, lease_until=0,
                           output_keys=tuple(output_keys), last_error=None)
            note = {"task_id": task_id, "agent_id": agent_id, "outcome": "ok",
                    "output_keys": list(output_keys), "at": now}
            ops = [self._task_op(done, exists=True), CommitGroupOp(task_id),
                   self._notify_op(note)]
        else:
            exhausted = task.attempts >= task.max_attempts
            done = replace(task, status=DEAD if exhausted else PENDING,
                           lease_holder=None, lease_until=0, last_error=message)
            note = {"task_id": task_id, "agent_id": agent_id, "outcome": "error",
                    "error": message, "output_keys": [], "at": now}
            ops = [self._task_op(done, exists=True), self._notify_op(note)]
        self.store.apply_ops(ops)
        self.tasks[task_id] = done
        self._notify_next += 1

    # -- plans ---------------------------------------------------------------

    def submit_plan(self, plan_doc: dict) -> str:
        plan_id, tasks = self._parse_plan(plan_doc)
        if plan_id in self.plans:
            raise DuplicateKey(f"plan {plan_id!r} already submitted")
        for task in tasks:
            if task.task_id in self.tasks:
                raise DuplicateKey(f"task id {task.task_id!r} already exists in the queue")
        plan = Plan(plan_id=plan_id, task_ids=tuple(t.task_id for t in tasks),
                    submitted_at=self.clock.now_ms())
        ops = [self._plan_op(plan, exists=False)]
        ops.extend(self._task_op(t, exists=False) for t in tasks)
        self.store.apply_ops(ops)
        self.plans[plan_id] = plan
        for task in tasks:
            self.tasks[task.task_id] = task
        return plan_id

    def _parse_plan(self, doc: dict) -> tuple[str, list[Task]]:
        if not isinstance(doc, dict):
            raise InvalidArgument("plan must be a JSON object")
        plan_id = doc.get("plan_id")
        if not plan_id or not isinstance(plan_id, str):
            raise InvalidArgument("plan.plan_id must be a non-empty string")
        entries = doc.get("tasks")
        if not isinstance(entries, list) or not entries:
            raise InvalidArgument("plan.tasks must be a non-empty list")
        ids = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise InvalidArgument(f"plan.tasks[{i}] must be an object")
            for fieldname in ("task_id", "kind"):
                if fieldname not in entry:
                    raise InvalidArgument(f"plan.tasks[{i}].{fieldname} is required")
            ids.append(entry["task_id"])
        if len(set(ids)) != len(ids):
            raise InvalidArgument("plan task ids must be unique")
        known = set(ids)
        tasks = []
        for i, entry in enumerate(entries):
            deps = entry.get("depends_on", [])
            if not isinstance(deps, list):
                raise InvalidArgument(f"plan.tasks[{i}].depends_on must be a list")
            for dep in deps:
                if dep not in known:
                    raise InvalidArgument(
                        f"plan.tasks[{i}].depends_on references unknown task {dep!r}")
            tasks.append(self.build_task(
                task_id=entry["task_id"],
                kind=entry["kind"],
                input_dataset=entry.get("input_dataset", ""),
                model_key=entry.get("model", entry.get("model_key", "")),
                output_dataset=entry.get("output_dataset", ""),
                params=entry.get("params", {}),
                max_attempts=entry.get("max_attempts", DEFAULT_MAX_ATTEMPTS),
                plan_id=plan_id,
                depends_on=tuple(deps),
            ))
        self._check_acyclic(tasks)
        return plan_id, tasks

    @staticmethod
    def _check_acyclic(tasks: list[Task]) -> None:
        deps = {t.task_id: set(t.depends_on) for t in tasks}
        ready = [tid for tid, d in deps.items() if not d]
        seen = 0
        while ready:
            tid = ready.pop()
            seen += 1
            for other, d in deps.items():
                if tid in d:
                    d.discard(tid)
                    if not d:
                        ready.append(other)
        if seen != len(deps):
            raise CycleDetected("plan dependencies contain a cycle")

    def get_task(self, task_id: str) -> Task:
        task = self.tasks.get(task_id)
        if task is None:
            raise TaskNotFound(f"task {task_id!r} not found")
        return task

    def list_tasks(self, plan_id: str | None = None) -> list[Task]:
        tasks = sorted(self.tasks.values(), key=lambda t: (t.submitted_at, t.task_id))
        if plan_id is not None:
            tasks = [t for t in tasks if t.plan_id == plan_id]
        return tasks

    def plan_status(self, plan_id: str) -> dict:
        plan = self.plans.get(plan_id)
        if plan is None:
            raise PlanNotFound(f"plan {plan_id!r} not found")
        return {
            "plan_id": plan.plan_id,
            "status": plan.status,
            "tasks": {tid: self.tasks[tid].status for tid in plan.task_ids},
        }

    def replay_task(self, task_id: str) -> None:
        """Operator override: resurrect a dead task with a fresh attempt budget."""
        task = self.get_task(task_id)
        if task.status != DEAD:
            raise InvalidArgument(f"task {task_id!r} is {task.status}, not dead")
        revived = replace(task, status=PENDING, attempts=0, lease_holder=None,
                          lease_until=0, last_error=None)
        ops = [self._task_op(revived, exists=True)]
        plan = self.plans.get(task.plan_id) if task.plan_id else None
        revived_plan = None
        if plan is not None and plan.status == PLAN_FAILED:
            others_dead = any(self.tasks[tid].status == DEAD for tid in plan.task_ids
                              if tid != task_id)
            if not others_dead:
                revived_plan = replace(plan, status=PLAN_RUNNING)
                ops.append(self._plan_op(revived_plan, exists=True))
        self.store.apply_ops(ops)
        self.tasks[task_id] = revived
        if revived_plan is not None:
            self.plans[plan.plan_id] = revived_plan

    # -- master --------------------------------------------------------------

    def _master_meta(self) -> dict:
        if self.store.exists(MASTER_KEY):
            return json.loads(self.store.get(MASTER_KEY).payload.decode())
        return {"consumed_upto": -1, "holder": None, "until": 0}

    def master_step(self, master_id: str, lease_ttl_ms: int = DEFAULT_LEASE_TTL_MS) -> dict:
        """One scheduling cycle; all effects and the consumer offset commit in
        one atomic batch. Returns a summary of the actions taken."""
        kill_point("master.before_consume")
        now = self.clock.now_ms()
        meta = self._master_meta()
        if meta["holder"] not in (None, master_id) and meta["until"] > now:
            return {"busy": True, "holder": meta["holder"]}
        consumed_upto = meta["consumed_upto"]
        messages = []
        for key in self.store.keys_with_prefix(NOTIFY_PREFIX):
            seq = int(key.rsplit("/", 1)[1])
            if seq > consumed_upto:
                messages.append((seq, json.loads(self.store.get(key).payload.decode())))
        ops: list = []
        actions = {"busy": False, "consumed": len(messages), "unblocked": [],
                   "plans_completed": [], "plans_failed": [], "ok_applied": 0}

        new_tasks: dict[str, Task] = {}
        new_plans: dict[str, Plan] = {}
        for _, msg in messages:
            if msg["outcome"] == "ok":
                actions["ok_applied"] += 1

        # plan bookkeeping is recomputed from the task table, which makes the
        # step idempotent under replay after a crash
        for plan in self.plans.values():
            statuses = {tid: self.tasks[tid].status for tid in plan.task_ids}
            for tid in plan.task_ids:
                task = self.tasks[tid]
                if task.status == PENDING and not task.unblocked:
                    if all(statuses[d] == COMPLETED for d in task.depends_on):
                        unblocked = replace(task, unblocked=True)
                        ops.append(self._task_op(unblocked, exists=True))
                        new_tasks[tid] = unblocked
                        actions["unblocked"].append(tid)
            if plan.status == PLAN_RUNNING:
                if any(s == DEAD for s in statuses.values()):
                    failed = replace(plan, status=PLAN_FAILED)
                    ops.append(self._plan_op(failed, exists=True))
                    new_plans[plan.plan_id] = failed
                    actions["plans_failed"].append(plan.plan_id)
                elif all(s == COMPLETED for s in statuses.values()):
                    done = replace(plan, status=PLAN_COMPLETED)
                    ops.append(self._plan_op(done, exists=True))
                    new_plans[plan.plan_id] = done
                    actions["plans_completed"].append(plan.plan_id)

        new_upto = messages[-1][0] if messages else consumed_upto
        master_doc = _json_doc(MASTER_KEY, {"consumed_upto": new_upto,
                                            "holder": master_id,
                                            "until": now + lease_ttl_ms})
        ops.append(PutOp(master_doc, replace=self.store.exists(MASTER_KEY)))
        kill_point("master.before_apply")
        self.store.apply_ops(ops)
        self.tasks.update(new_tasks)
        self.plans.update(new_plans)
        kill_point("master.after_apply")
        return actions


# --- long-running loops --------------------------------------------------------


class TaskContext:
    """What a handler gets: the api, its task, and an output-writing helper."""

    def __init__(self, api, task: Task, agent_id: str):
        self.api = api
        self.task = task
        self.agent_id = agent_id
        self.output_keys: list[str] = []

    def param(self, name: str, default=None):
        return self.task.params.get(name, default)

    def write_output(self, payload, label: str | None = None,
                     tags: dict | None = None) -> str:
        key = self.api.write_output(self.task.task_id, self.agent_id,
                                    len(self.output_keys), payload, label, tags or {})
        self.output_keys.append(key)
        return key

    def input_docs(self):
        """Documents of the task's input range (or the whole view), resolved."""
        if not self.task.input_dataset:
            return []
        after = self.task.params.get("from_key", "")
        upto = self.task.params.get("upto_key")
        return self.api.view_slice(self.task.input_dataset, after_key=after, upto_key=upto)


def run_agent(api, agent_id: str, handlers: dict, kinds: list[str] | None = None,
              poll_interval: float = 0.2, lease_ttl_ms: int = DEFAULT_LEASE_TTL_MS,
              stop: threading.Event | None = None, max_loops: int | None = None) -> None:
    """Agent loop: lease, heartbeat, execute, complete. Handler failures become
    error outcomes; only a simulated kill escapes the loop."""
    stop = stop or threading.Event()
    kinds = kinds if kinds is not None else sorted(handlers)
    loops = 0
    while not stop.is_set():
        loops += 1
        if max_loops is not None and loops > max_loops:
            return
        task = api.lease_task(agent_id, lease_ttl_ms, kinds)
        if task is None:
            stop.wait(poll_interval)
            continue
        kill_point("agent.after_lease")
        done = threading.Event()

        def beat(task_id=task.task_id):
            while not done.wait(lease_ttl_ms / 3000.0):
                try:
                    api.heartbeat(task_id, agent_id, lease_ttl_ms)
                except Exception:
                    return

        beater = threading.Thread(target=beat, daemon=True)
        beater.start()
        ctx = TaskContext(api, task, agent_id)
        try:
            handler = handlers.get(task.kind)
            if handler is None:
                raise InvalidArgument(f"agent has no handler for kind {task.kind!r}")
            handler(ctx)
        except KillPoint:
            done.set()
            raise
        except Exception as exc:
            done.set()
            try:
                api.complete_task(task.task_id, agent_id, "error", message=str(exc))
            except StaleLease:
                pass
        else:
            done.set()
            kill_point("agent.before_complete")
            try:
                api.complete_task(task.task_id, agent_id, "ok",
                                  output_keys=tuple(ctx.output_keys))
            except StaleLease:
                pass  # lease lost mid-run; another agent owns the replay
            kill_point("agent.after_complete")


def run_master(api, master_id: str, interval: float = 0.2,
               stop: threading.Event | None = None,
               lease_ttl_ms: int = DEFAULT_LEASE_TTL_MS,
               max_loops: int | None = None) -> None:
    stop = stop or threading.Event()
    loops = 0
    while not stop.is_set():
        loops += 1
        if max_loops is not None and loops > max_loops:
            return
        api.master_step(master_id, lease_ttl_ms)
        stop.wait(interval)


def wait_for_plan(api, plan_id: str, timeout: float = 60.0, poll: float = 0.1) -> dict:
    deadline = time.monotonic() + timeout
    while True:
        status = api.plan_status(plan_id)
        if status["status"] != PLAN_RUNNING:
            return status
        if time.monotonic() >= deadline:
            raise TimeoutError(f"plan {plan_id!r} still running after {timeout}s: {status}")
        time.sleep(poll)
