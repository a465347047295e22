"""Model-based check of the manager's session state machine.

Ops: ``O`` opens a new session; ``I<k>`` / ``C<k>`` invoke / close the k-th
session opened in this sequence (or an id that was never issued, if fewer
sessions exist). The model tracks each local session as absent, Open or Closed.
"""
import itertools

from vtee import tas
from vtee.core import MemrefInOut, Operation, ReturnCode
from vtee.manager import SessionState

OPS = ("O", "I0", "I1", "C0", "C1")
NEVER_ISSUED = 1 << 62


def _snapshot(manager, ids):
    return tuple((sid, manager.session(sid).state if manager.session(sid) else None)
                 for sid in ids)


def run_sequence(manager, ctx: int, seq) -> list:
    """Apply ``seq``; return a list of human-readable discrepancies."""
    problems = []
    ids: list[int] = []
    model: list[str] = []
    op_echo = Operation.of(MemrefInOut(b"abc", 3))
    for step, op in enumerate(seq):
        before = _snapshot(manager, ids)
        if op == "O":
            rec, code, _ = manager.open_session(ctx, tas.ECHO_UUID)
            if code != ReturnCode.Success or rec is None or rec.state is not SessionState.Open:
                problems.append(f"{seq}[{step}] open -> {code:#x}")
                continue
            if rec.session_id in ids:
                problems.append(f"{seq}[{step}] reused session id")
            ids.append(rec.session_id)
            model.append("Open")
            continue
        k = int(op[1])
        sid = ids[k] if k < len(ids) else NEVER_ISSUED + k
        legal = k < len(model) and model[k] == "Open"
        if op[0] == "I":
            code, out = manager.invoke_command(sid, tas.CMD_ECHO, op_echo)
            want = ReturnCode.Success if legal else ReturnCode.ErrorBadState
            if legal and out.params[0].data != b"abc":
                problems.append(f"{seq}[{step}] echo output {out.params[0]!r}")
        else:
            code = manager.close_session(sid)
            want = ReturnCode.Success if legal else ReturnCode.ErrorBadState
            if legal:
                model[k] = "Closed"
        if code != want:
            problems.append(f"{seq}[{step}] {op} -> {code:#x}, expected {want:#x}")
        if not legal and _snapshot(manager, ids) != before:
            problems.append(f"{seq}[{step}] illegal {op} changed state")
        for i, sid_i in enumerate(ids):
            got = manager.session(sid_i).state.value
            if got != model[i]:
                problems.append(f"{seq}[{step}] session {i} is {got}, model {model[i]}")
    manager.finalize_context(ctx)
    return problems


def all_sequences(max_len: int = 5):
    """Every sequence of length ``max_len``; each shorter one is a prefix of some of them."""
    return itertools.product(OPS, repeat=max_len)


def check_all(manager, max_len: int = 5) -> tuple[int, list]:
    problems = []
    n = 0
    for n, seq in enumerate(all_sequences(max_len), 1):
        problems += run_sequence(manager, (1 << 40) + n, seq)
    return n, problems
