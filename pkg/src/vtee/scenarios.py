"""Scripted end-to-end scenarios, read from JSON files under ``scenarios/``.

A session scenario runs its steps through a live daemon with the client
library, records what a client application can see, and then evaluates its
checks against the manager (traces, storage files, the TyTAN core policy).
The adversarial scenario pokes the machines directly with a hostile OS.
"""
from __future__ import annotations

import json
import os
import secrets
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import client, daemon, tas
from .backends import CoreMsg, TytanEngine
from .core import (PARAM_TYPES, MemrefIn, MemrefInOut, MemrefOut, NoneParam, Operation,
                   ReturnCode, Reader, ValueIn, ValueInOut, ValueOut, code_name)
from .eampu import AccessDeniedError, EampuFault, EampuRule, load_platform
from .enclave import ABORT_BYTE, NUM_REGS, SCRUB_VALUE, EnclaveMachine
from .manager import ManagerConfig
from .trace import SGX_EVENTS, sgx_grammar_ok

_BY_NAME = {t.__name__: t for t in PARAM_TYPES}
_SGX_NAMES = {cls.NAME for cls in SGX_EVENTS}


def scenario_dir():
    return resources.files("vtee").joinpath("scenarios")


def available() -> tuple:
    """Scenario names: every ``*.json`` script shipped in the scenarios directory."""
    return tuple(sorted(p.name[:-5] for p in scenario_dir().iterdir()
                        if p.name.endswith(".json")))


SCENARIOS = available()


def load_scenario(name: str) -> dict:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    return json.loads(scenario_dir().joinpath(f"{name}.json").read_text())


# -- parameter JSON -----------------------------------------------------------


def param_from_json(d: dict):
    kind = _BY_NAME[d.get("type", "NoneParam")]
    if kind in (ValueIn, ValueOut, ValueInOut):
        return kind(int(d.get("a", 0)), int(d.get("b", 0)))
    if kind is MemrefIn:
        return MemrefIn(bytes.fromhex(d.get("hex", "")))
    if kind is MemrefOut:
        return MemrefOut(int(d["capacity"]), bytes.fromhex(d.get("hex", "")))
    if kind is MemrefInOut:
        return MemrefInOut(bytes.fromhex(d.get("hex", "")), int(d["capacity"]))
    return NoneParam()


def param_to_json(p) -> dict:
    d = {"type": type(p).__name__}
    if isinstance(p, (ValueIn, ValueOut, ValueInOut)):
        d.update(a=p.a, b=p.b)
    elif isinstance(p, MemrefIn):
        d["hex"] = p.data.hex()
    elif isinstance(p, (MemrefOut, MemrefInOut)):
        d.update(capacity=p.capacity, hex=p.data.hex())
    return d


def operation_from_json(items) -> Operation:
    return Operation.of(*(param_from_json(d) for d in items or ()))


# -- results ------------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario: str
    backend: str
    checks: list = field(default_factory=list)
    transcript: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def add(self, label: str, ok: bool, detail: str = "") -> None:
        self.checks.append((label, bool(ok), detail))

    def lines(self) -> list[str]:
        return [f"{'PASS' if ok else 'FAIL'} {self.scenario} [{self.backend}] {label}"
                + (f": {detail}" if detail and not ok else "")
                for label, ok, detail in self.checks]


# -- session scenarios ----------------------------------------------------------


def _start(backend: str, workdir: Path):
    cfg = ManagerConfig(str(workdir / "vtee.sock"), str(workdir / "storage"),
                        secrets.token_bytes(32), backend)
    d = daemon.start(cfg)
    for manifest, image in tas.demo_packages().values():
        d.manager.install_ta(manifest, image)
    return d


def _uuid(name: str):
    return tas.DEMO_TAS[name][0]


def _run_steps(script, d, result, slices):
    m = d.manager
    sessions = {}
    with client.initialize_context(d.socket_path) as ctx:
        for step in script["steps"]:
            op = step["op"]
            label = step.get("label") or (f"open-{step['as']}" if op == "open"
                                          else f"{op}-{step.get('session', '')}")
            marks = {name: len(m.trace(_uuid(name))) for name in tas.DEMO_TAS}
            params = operation_from_json(step.get("params"))
            if op == "open":
                sess, code, out = ctx.open_session(_uuid(step["ta"]), params)
                sessions[step["as"]] = sess
            elif op == "invoke":
                sess = sessions.get(step["session"])
                code, out = ctx.invoke_command(sess, step["cmd"], params)
            elif op == "close":
                code, out = ctx.close_session(sessions[step["session"]]), params
            else:
                raise ValueError(f"unknown step op {op!r}")
            slices[label] = {name: m.trace(_uuid(name))[marks[name]:] for name in tas.DEMO_TAS}
            result.transcript.append({"step": label, "code": code_name(code),
                                      "params": [param_to_json(p) for p in out]})
            want = step.get("expect", "Success")
            result.add(f"{label} returns {want}", code_name(code) == want,
                       f"got {code_name(code)}")
            if "expect_params" in step:
                want_op = operation_from_json(step["expect_params"])
                result.add(f"{label} outputs", out == want_op, f"got {out}")


def _check(chk, d, result, slices, backend):
    kind = chk["check"]
    m = d.manager
    ta = chk.get("ta")
    records = m.trace(_uuid(ta)) if ta else []
    if kind == "trace_names":
        got = [r.name for r in slices[chk["step"]][ta]]
        result.add(f"{chk['step']} trace is {' '.join(chk['names'])}", got == chk["names"],
                   f"got {' '.join(got)}")
    elif kind == "trace_grammar":
        result.add(f"{ta} trace follows the enclave lifecycle grammar",
                   bool(records) and sgx_grammar_ok(records))
    elif kind == "no_sgx_events":
        result.add(f"{ta} trace has no enclave instructions",
                   not any(r.name in _SGX_NAMES for r in records))
    elif kind == "has_events":
        names = {r.name for r in records}
        result.add(f"{ta} trace has {' '.join(chk['names'])}",
                   all(n in names for n in chk["names"]))
    elif kind == "no_syscall_denied":
        result.add(f"{ta} never issued a system call in enclave mode",
                   not any(r.name == "SYSCALL_DENIED" for r in records))
    elif kind == "ta_ran":
        result.add(f"{ta} was launched by the manager", bool(records))
    elif kind == "storage_sealed":
        secret = bytes.fromhex(chk["hex"])
        blobs = [p.read_bytes() for p in Path(m.config.storage_dir).iterdir() if p.is_file()]
        result.add("storage files never contain the plaintext",
                   bool(blobs) and not any(secret in b for b in blobs))
    elif kind == "normal_task_refused":
        engine: TytanEngine = m.backend.engine
        task = engine.load_normal_task(b"rogue client app", name="rogue")
        refused = sum(_refused(engine.raw_core_request(task, _random_core_payload()))
                      for _ in range(int(chk.get("attempts", 10))))
        result.add("Normal task IPC to the TEE Core task is refused",
                   refused == int(chk.get("attempts", 10)), f"{refused} refused")
    else:
        raise ValueError(f"unknown check {kind!r}")


def _random_core_payload() -> bytes:
    from .backends import encode_service
    from .runtime import GetTime, StorageRead

    choice = secrets.randbelow(3)
    if choice == 0:
        return encode_service(GetTime())
    if choice == 1:
        return encode_service(StorageRead(secrets.token_bytes(8)))
    return secrets.token_bytes(1 + secrets.randbelow(32))


def _refused(reply: bytes) -> bool:
    if not reply or reply[0] != CoreMsg.DENIED:
        return False
    return Reader(reply[1:]).u32() == ReturnCode.ErrorAccessDenied


def run_session_scenario(script: dict, backend: str, workdir: Path) -> ScenarioResult:
    result = ScenarioResult(script["name"], backend)
    slices: dict = {}
    with _start(backend, workdir) as d:
        _run_steps(script, d, result, slices)
        for chk in script.get("checks", ()):
            if chk.get("backend", backend) == backend:
                _check(chk, d, result, slices, backend)
    return result


# -- adversarial OS -------------------------------------------------------------


def _rand_regs():
    return [secrets.randbits(64) | 1 for _ in range(NUM_REGS)]


def _tytan_probe(probe, lp, result):
    p, os_tid = lp.platform, lp.tasks["os"]
    op = probe["op"]
    if op in ("os_read", "os_write", "task_read"):
        who = lp.tasks[probe.get("task", "os")]
        reg = p.region(lp.regions[probe["region"]])
        before = bytes(reg.data)
        p.dispatch(who)
        marks = len(p.trace)
        faults = 0
        seen = []
        for addr in range(reg.base, reg.end):
            try:
                v = p.mem_access(who, addr, "w" if op == "os_write" else "r", 0)
                seen.append(v)
            except EampuFault:
                faults += 1
        denials = sum(r.name == "ACCESS_DENIED" for r in p.trace.since(marks))
        if probe.get("allowed"):
            result.add(f"{op} {reg.name} is allowed by the OS rule", faults == 0)
            return
        result.add(f"{op} {reg.name}: every byte faults", faults == reg.size,
                   f"{faults}/{reg.size}")
        result.add(f"{op} {reg.name}: every denial traced", denials == reg.size,
                   f"{denials} records")
        result.add(f"{op} {reg.name}: protected bytes unchanged", bytes(reg.data) == before)
    elif op == "os_grant":
        p.dispatch(os_tid)
        rule = EampuRule(p.task(os_tid).code_region, lp.regions[probe["region"]],
                         frozenset("rw"))
        try:
            p.program_rule(rule, os_tid)
            refused = False
        except AccessDeniedError:
            refused = True
        result.add(f"OS cannot grant itself {probe['region']}", refused)
    elif op == "interrupt_scrub":
        tid = lp.tasks[probe["task"]]
        p.dispatch(tid)
        regs = _rand_regs()
        p.set_regs(regs)
        p.interrupt()
        scrubbed = p.regs == [SCRUB_VALUE] * NUM_REGS and p.current == os_tid
        save = p.region(p.task(tid).save_area)
        try:
            p.mem_access(os_tid, save.base, "r")
            leaked = True
        except EampuFault:
            leaked = False
        p.resume_task(tid)
        result.add("interrupt scrubs registers before the OS runs", scrubbed)
        result.add("OS cannot read the save area", not leaked)
        result.add("resume restores the secure task's registers", p.regs == regs)
        p.dispatch(os_tid)
    else:
        raise ValueError(f"unknown probe {op!r}")


def _sgx_probe(probe, m: EnclaveMachine, eid: int, result):
    enc = m.enclaves[eid]
    op = probe["op"]
    span = range(enc.base, enc.base + 64)
    mark = len(m.trace)
    if op in ("normal_read", "agent_read"):
        if op == "normal_read":
            got = [m.mem_read(a) for a in span]
        else:
            got = [m.agent_access(a, "r") for a in span]
        denials = sum(r.name == "ACCESS_DENIED" for r in m.trace.since(mark))
        result.add(f"{op} of enclave pages returns 0x{ABORT_BYTE:02X}",
                   all(v == ABORT_BYTE for v in got))
        result.add(f"{op}: every denial traced", denials == len(span), f"{denials}")
    elif op in ("normal_write", "agent_write"):
        before = m._raw_read(enc.base, len(span))
        for a in span:
            if op == "normal_write":
                m.mem_write(a, 0x41)
            else:
                m.agent_access(a, "w", 0x41)
        result.add(f"{op} to enclave pages is dropped", m._raw_read(enc.base, len(span)) == before)
    elif op == "aex_scrub":
        m.eenter(eid, enc.base)
        regs = _rand_regs()
        m.set_regs(regs)
        m.aex(0)
        result.add("AEX scrubs registers", m.cpu.regs == [SCRUB_VALUE] * NUM_REGS)
        result.add("SSA frame is unreadable from Normal mode",
                   all(m.mem_read(enc.ssa_base + i) == ABORT_BYTE for i in range(16)))
        m.eresume(eid)
        result.add("ERESUME restores registers", m.cpu.regs == regs)
        m.eexit(eid)
    else:
        raise ValueError(f"unknown probe {op!r}")


def run_adversarial(script: dict, backend: str) -> ScenarioResult:
    result = ScenarioResult(script["name"], backend)
    if backend == "tytan":
        text = scenario_dir().joinpath(script["platform"]).read_text()
        lp = load_platform(text)
        secret = bytes(lp.platform.region(lp.regions["vault_data"]).data)
        for probe in script["probes"]["tytan"]:
            _tytan_probe(probe, lp, result)
        result.add("secret is intact after the attack",
                   bytes(lp.platform.region(lp.regions["vault_data"]).data) == secret)
    else:
        m = EnclaveMachine()
        eid = m.ecreate(b"SECRET-KEY-01234" * 8, 0x10000, heap_pages=1)
        m.einit(eid)
        for probe in script["probes"]["sgx"]:
            _sgx_probe(probe, m, eid, result)
    return result


# -- entry point -----------------------------------------------------------------


def run(name: str, backends=("sgx", "tytan"), workdir: str | os.PathLike | None = None):
    """Run ``name`` on each backend; returns (results, equivalence check or None)."""
    script = load_scenario(name)
    results = []
    with tempfile.TemporaryDirectory(prefix="vtee-demo-") as tmp:
        base = Path(workdir or tmp)
        for backend in backends:
            if "steps" in script:
                wd = base / backend
                wd.mkdir(parents=True, exist_ok=True)
                results.append(run_session_scenario(script, backend, wd))
            else:
                results.append(run_adversarial(script, backend))
    equivalence = None
    if "steps" in script and len(results) > 1:
        first = results[0].transcript
        diffs = [r.backend for r in results[1:] if r.transcript != first]
        equivalence = ("client-visible outputs identical across "
                       + ", ".join(r.backend for r in results), not diffs)
    return results, equivalence


def transcript_diff(a: ScenarioResult, b: ScenarioResult) -> list:
    return [(x, y) for x, y in zip(a.transcript, b.transcript) if x != y] + (
        [("length", len(a.transcript), len(b.transcript))]
        if len(a.transcript) != len(b.transcript) else [])
