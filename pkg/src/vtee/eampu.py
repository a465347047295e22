"""TrustLite/TyTAN platform model.

Tasks live in fixed memory regions. An execution-aware MPU decides every
access from the *program counter's* region, so isolation holds regardless of
what the untrusted OS schedules or programs. Secure tasks get locked rules at
load time; the OS can only program rules that do not touch protected regions.
Interrupting a secure task spills its context into a protected save area and
scrubs the live registers before the OS runs.
"""
from __future__ import annotations

import enum
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .core import compute_digest, parse_bool
from .enclave import NUM_REGS, SAVED_STATE_SIZE, SCRUB_VALUE, WORD_MASK, SavedState
from .trace import AccessDenied, IpcRecv, IpcSend, SecureInterrupt, TaskResume, Trace

DEFAULT_RULE_LIMIT = 16
DEFAULT_QUEUE_CAP = 64
OPS = ("r", "w", "x")


class EampuError(Exception):
    pass


class RegionConflict(EampuError):
    pass


class UnknownRegion(EampuError):
    pass


class RuleTableFull(EampuError):
    pass


class AccessDeniedError(EampuError):
    """Rule programming refused (not supervisor, locked, or protected target)."""


class UnmappedAddress(EampuError):
    pass


class EampuFault(EampuError):
    """A memory access was denied by the EA-MPU."""


class NoSavedContext(EampuError):
    pass


class UnknownTask(EampuError):
    pass


class QueueFull(EampuError):
    pass


class QueueEmpty(EampuError):
    pass


class NoRunnableTask(EampuError):
    pass


class NotCurrentTask(EampuError):
    pass


class PlatformError(EampuError):
    pass


class TaskKind(enum.Enum):
    OS = "os"
    Normal = "normal"
    Secure = "secure"


@dataclass
class Region:
    id: int
    base: int
    size: int
    kind: str
    protected: bool
    name: str
    data: bytearray
    owner: int | None = None

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    @property
    def private(self) -> bool:
        """Reachable only through a matching rule."""
        return self.protected or (self.kind == "data" and self.owner is not None)


@dataclass
class Task:
    id: int
    kind: TaskKind
    code_region: int
    data_regions: tuple
    digest: bytes
    name: str
    save_area: int | None = None
    context: SavedState | None = None
    saved: bool = False


@dataclass(frozen=True)
class EampuRule:
    subject_code: int
    object: int
    perms: frozenset
    locked: bool = False

    def __post_init__(self):
        perms = frozenset(self.perms)
        if not perms <= set(OPS):
            raise ValueError(f"perms must be a subset of {OPS}, got {sorted(perms)}")
        object.__setattr__(self, "perms", perms)


@dataclass(frozen=True)
class IpcEnvelope:
    sender_id: int
    sender_digest: bytes
    payload: bytes


class EampuPlatform:
    def __init__(self, rule_limit: int = DEFAULT_RULE_LIMIT, queue_cap: int = DEFAULT_QUEUE_CAP):
        self.rule_limit = rule_limit
        self.queue_cap = queue_cap
        self.regions: dict[int, Region] = {}
        self.tasks: dict[int, Task] = {}
        self.rules: list[EampuRule] = []
        self.queues: dict[int, deque] = {}
        self.trace = Trace()
        self.current: int | None = None
        self.regs: list = [0] * NUM_REGS
        self.pc = 0
        self._next_region = 1
        self._next_task = 1
        self._rr = 0

    # -- layout ------------------------------------------------------------

    def add_region(self, base: int, size: int, kind: str = "data", protected: bool = False,
                   name: str | None = None) -> int:
        if kind not in ("code", "data"):
            raise ValueError(f"region kind is code or data, not {kind!r}")
        if size <= 0 or base < 0:
            raise ValueError("regions need a non-negative base and positive size")
        for r in self.regions.values():
            if base < r.end and r.base < base + size:
                raise RegionConflict(f"new region overlaps region {r.name}")
        rid = self._next_region
        self._next_region += 1
        self.regions[rid] = Region(rid, base, size, kind, protected, name or f"r{rid}",
                                   bytearray(size))
        return rid

    def region(self, rid: int) -> Region:
        try:
            return self.regions[rid]
        except KeyError:
            raise UnknownRegion(f"no region {rid}") from None

    def region_at(self, addr: int) -> Region:
        for r in self.regions.values():
            if r.contains(addr):
                return r
        raise UnmappedAddress(f"0x{addr:x} is not inside any region")

    def task(self, tid: int) -> Task:
        try:
            return self.tasks[tid]
        except KeyError:
            raise UnknownTask(f"no task {tid}") from None

    @property
    def os_task(self) -> int | None:
        for t in self.tasks.values():
            if t.kind is TaskKind.OS:
                return t.id
        return None

    # -- loading -----------------------------------------------------------

    def load_task(self, image: bytes, kind: TaskKind, code_region: int, data_regions=(),
                  save_area: int | None = None, perms: str = "rw", name: str | None = None,
                  ) -> int:
        """Measure ``image`` and bind it to its regions, installing its rules atomically."""
        kind = TaskKind(kind)
        data_regions = tuple(data_regions)
        code = self.region(code_region)
        datas = [self.region(r) for r in data_regions]
        claimed = [code] + datas
        if code.kind != "code":
            raise RegionConflict(f"{code.name} is not a code region")
        if any(d.kind != "data" for d in datas):
            raise RegionConflict("data_regions must be data regions")
        if kind is TaskKind.OS and self.os_task is not None:
            raise PlatformError("only one OS task")
        if kind is TaskKind.Secure:
            if save_area is None:
                raise PlatformError("secure tasks need a save area")
            save = self.region(save_area)
            if save.size < SAVED_STATE_SIZE or save.kind != "data":
                raise RegionConflict(f"save area {save.name} too small or not data")
            claimed.append(save)
        elif save_area is not None:
            raise PlatformError("only secure tasks have a save area")
        elif any(d.protected for d in datas):
            raise RegionConflict("normal and OS tasks cannot own protected regions")
        if len({r.id for r in claimed}) != len(claimed):
            raise RegionConflict("a region is listed twice")
        for r in claimed:
            if r.owner is not None:
                raise RegionConflict(f"region {r.name} already belongs to task {r.owner}")

        secure = kind is TaskKind.Secure
        new_rules = [EampuRule(code.id, d.id, frozenset(perms), locked=secure) for d in datas]
        if secure and code.protected:
            new_rules.append(EampuRule(code.id, code.id, frozenset("rx"), locked=True))
        if secure:
            becoming_protected = {d.id for d in datas} | {save_area}
            kept = [r for r in self.rules if r.locked or r.object not in becoming_protected]
        else:
            kept = list(self.rules)
        if len(kept) + len(new_rules) > self.rule_limit:
            raise RuleTableFull(
                f"{len(new_rules)} more rules do not fit ({len(kept)}/{self.rule_limit} used)")

        tid = self._next_task
        self._next_task += 1
        for r in claimed:
            r.owner = tid
        if secure:
            for d in datas:
                d.protected = True
            self.regions[save_area].protected = True
        self.rules = kept + new_rules
        self.tasks[tid] = Task(tid, kind, code.id, data_regions, compute_digest(image),
                               name or f"task{tid}", save_area=save_area)
        self.queues[tid] = deque()
        code.data[:len(image)] = image[:code.size]
        return tid

    def unload_task(self, tid: int) -> None:
        """Release a task's regions and rules (platform TCB operation)."""
        task = self.task(tid)
        if self.current == tid:
            raise PlatformError("cannot unload the running task")
        owned = {r.id for r in self.regions.values() if r.owner == tid}
        self.rules = [r for r in self.rules if r.subject_code not in owned and r.object not in owned]
        for rid in owned:
            reg = self.regions[rid]
            reg.owner = None
            reg.data[:] = bytes(reg.size)
            if task.kind is TaskKind.Secure and rid != task.code_region:
                reg.protected = False
        del self.tasks[tid]
        del self.queues[tid]

    def boot(self) -> None:
        """Hand the CPU to the OS task."""
        os_tid = self.os_task
        if os_tid is None:
            raise PlatformError("no OS task loaded")
        self.current = os_tid
        self.regs = [0] * NUM_REGS
        self.pc = self.region(self.task(os_tid).code_region).base

    # -- access control ----------------------------------------------------

    def program_rule(self, rule: EampuRule, caller: int) -> None:
        task = self.task(caller)
        if task.kind is not TaskKind.OS or caller != self.current:
            raise AccessDeniedError("rules are programmed by the running OS only")
        if rule.locked:
            raise AccessDeniedError("locked rules are installed by the platform loader")
        self.region(rule.subject_code)
        if self.region(rule.object).protected:
            raise AccessDeniedError("the OS cannot grant access to protected regions")
        if len(self.rules) >= self.rule_limit:
            raise RuleTableFull(f"rule table holds {self.rule_limit} rules")
        self.rules.append(rule)

    def check_access(self, pc: int, target: int, op: str) -> bool:
        if op not in OPS:
            raise ValueError(f"op must be one of {OPS}")
        subject = self.region_at(pc)
        obj = self.region_at(target)
        if not obj.private:
            return True
        for rule in self.rules:
            if rule.subject_code == subject.id and rule.object == obj.id and op in rule.perms:
                return True
        self.trace.append(AccessDenied(pc, target, op))
        return False

    def mem_access(self, task: int, target: int, op: str, value: int = 0):
        if task != self.current:
            raise NotCurrentTask(f"task {task} is not running")
        if not self.check_access(self.pc, target, op):
            raise EampuFault(f"task {task} denied {op} at 0x{target:x}")
        reg = self.region_at(target)
        if op == "r":
            return reg.data[target - reg.base]
        if op == "w":
            reg.data[target - reg.base] = value & 0xFF
        return None

    def set_pc_offset(self, offset: int) -> None:
        """Move the running task's pc within its own code region."""
        code = self.region(self.task(self.current).code_region)
        if not 0 <= offset < code.size:
            raise ValueError("pc must stay inside the task's code region")
        self.pc = code.base + offset

    def set_regs(self, regs) -> None:
        regs = [int(r) & WORD_MASK for r in regs]
        if len(regs) != NUM_REGS:
            raise ValueError(f"register file has {NUM_REGS} words")
        self.regs = regs

    # -- exceptions and scheduling ----------------------------------------

    def interrupt(self) -> None:
        if self.current is None:
            raise PlatformError("no task is running")
        os_tid = self.os_task
        if os_tid is None:
            raise PlatformError("no OS task to take the interrupt")
        task = self.tasks[self.current]
        if task.kind is TaskKind.OS:
            return
        state = SavedState(tuple(self.regs), self.pc)
        if task.kind is TaskKind.Secure:
            save = self.regions[task.save_area]
            save.data[:SAVED_STATE_SIZE] = state.pack()
            self.regs = [SCRUB_VALUE] * NUM_REGS
            self.trace.append(SecureInterrupt(task.id))
        else:
            task.context = state
        task.saved = True
        self.current = os_tid
        self.pc = self.region(self.tasks[os_tid].code_region).base

    def resume_task(self, tid: int) -> None:
        task = self.task(tid)
        if not task.saved:
            raise NoSavedContext(f"task {tid} has no saved context")
        if self.current is not None and self.tasks[self.current].kind is not TaskKind.OS:
            self.interrupt()
        if task.kind is TaskKind.Secure:
            state = SavedState.unpack(bytes(self.regions[task.save_area].data[:SAVED_STATE_SIZE]))
        else:
            state = task.context
        self.regs = list(state.regs)
        self.pc = state.pc
        task.saved = False
        self.current = tid
        self.trace.append(TaskResume(tid))

    def dispatch(self, tid: int) -> None:
        """Make ``tid`` current, resuming it if it was interrupted."""
        task = self.task(tid)
        if self.current == tid:
            return
        if self.current is not None and self.tasks[self.current].kind is not TaskKind.OS:
            self.interrupt()
        if self.current == tid:
            return
        if task.saved:
            self.resume_task(tid)
        else:
            self.current = tid
            self.regs = [0] * NUM_REGS
            self.pc = self.region(task.code_region).base

    def schedule_next(self) -> int:
        runnable = sorted(self.tasks)
        if not runnable:
            raise NoRunnableTask("no tasks loaded")
        tid = runnable[self._rr % len(runnable)]
        self._rr += 1
        self.dispatch(tid)
        return tid

    # -- IPC ---------------------------------------------------------------

    def ipc_send(self, sender: int, receiver: int, payload: bytes) -> None:
        if sender != self.current:
            raise NotCurrentTask(f"task {sender} is not running")
        if receiver not in self.tasks:
            raise UnknownTask(f"no task {receiver}")
        queue = self.queues[receiver]
        if len(queue) >= self.queue_cap:
            raise QueueFull(f"queue of task {receiver} is full")
        queue.append(IpcEnvelope(sender, self.tasks[sender].digest, bytes(payload)))
        self.trace.append(IpcSend(sender, receiver))

    def ipc_recv(self, task: int) -> IpcEnvelope:
        if task != self.current:
            raise NotCurrentTask(f"task {task} is not running")
        queue = self.queues[task]
        if not queue:
            raise QueueEmpty(f"no messages for task {task}")
        env = queue.popleft()
        self.trace.append(IpcRecv(task, env.sender_id))
        return env


# --------------------------------------------------------------------------
# platform description files


@dataclass
class LoadedPlatform:
    platform: EampuPlatform
    regions: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)


def _int(text: str) -> int:
    return int(text, 0)


def _attrs(text: str) -> dict:
    out = {}
    for tok in text.split():
        k, sep, v = tok.partition("=")
        if not sep:
            raise ValueError(f"expected attr=value, got {tok!r}")
        out[k] = v
    return out


def _image(source: str, base_dir: Path) -> bytes:
    scheme, sep, rest = source.partition(":")
    if not sep:
        raise ValueError(f"image needs a hex:/file:/text: prefix, got {source!r}")
    if scheme == "hex":
        return bytes.fromhex(rest)
    if scheme == "file":
        return (base_dir / rest).read_bytes()
    if scheme == "text":
        return rest.encode()
    raise ValueError(f"unknown image scheme {scheme!r}")


def load_platform(text: str, base_dir: str | os.PathLike = ".") -> LoadedPlatform:
    """Build a platform from a key-value description.

    ::

        rule_limit = 16
        region.os_code = base=0x0000 size=0x100 kind=code
        region.sec_data = base=0x1000 size=0x40 kind=data
        task.os = kind=os code=os_code data=os_data image=text:os
        task.vault = kind=secure code=sec_code data=sec_data save=sec_save image=hex:00ff
        init.sec_data = hex:00112233
        rule.1 = subject=os_code object=scratch perms=rw

    Lines are applied in order; rules are programmed by the OS after boot.
    """
    base_dir = Path(base_dir)
    entries = []
    rule_limit = DEFAULT_RULE_LIMIT
    queue_cap = DEFAULT_QUEUE_CAP
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "rule_limit":
            rule_limit = _int(value)
        elif key == "queue_cap":
            queue_cap = _int(value)
        else:
            entries.append((lineno, key, value))

    lp = LoadedPlatform(EampuPlatform(rule_limit=rule_limit, queue_cap=queue_cap))
    p = lp.platform
    rules = []
    for lineno, key, value in entries:
        section, _, name = key.partition(".")
        try:
            if section == "region":
                a = _attrs(value)
                lp.regions[name] = p.add_region(
                    _int(a["base"]), _int(a["size"]), a.get("kind", "data"),
                    parse_bool(a.get("protected", "false")), name)
            elif section == "task":
                a = _attrs(value)
                data = [lp.regions[r] for r in a.get("data", "").split(",") if r]
                save = lp.regions[a["save"]] if "save" in a else None
                lp.tasks[name] = p.load_task(
                    _image(a["image"], base_dir), TaskKind(a["kind"]), lp.regions[a["code"]],
                    data, save_area=save, perms=a.get("perms", "rw"), name=name)
            elif section == "init":
                reg = p.region(lp.regions[name])
                blob = _image(value, base_dir)
                reg.data[:len(blob)] = blob[:reg.size]
            elif section == "rule":
                a = _attrs(value)
                rules.append(EampuRule(lp.regions[a["subject"]], lp.regions[a["object"]],
                                       frozenset(a.get("perms", "r"))))
            else:
                raise ValueError(f"unknown section {section!r}")
        except KeyError as exc:
            raise ValueError(f"line {lineno}: unknown name or missing attribute {exc}") from None
    if p.os_task is not None:
        p.boot()
        for rule in rules:
            p.program_rule(rule, p.os_task)
    elif rules:
        raise ValueError("rules need an OS task to program them")
    return lp
