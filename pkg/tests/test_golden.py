import pytest

from conftest import GOLDEN, make_config
from vtee import tas
from vtee.core import Operation, ValueIn
from vtee.manager import Manager
from vtee.trace import EVENT_TYPES, parse_trace

FILES = {"sgx": "probe-lifecycle.trace", "tytan": "probe-lifecycle-tytan.trace"}


def probe_lifecycle(tmp_path, backend: str) -> str:
    m = Manager(make_config(tmp_path, backend))
    try:
        for manifest, image in tas.demo_packages().values():
            m.install_ta(manifest, image)
        rec, code, _ = m.open_session(1, tas.PROBE_UUID)
        assert code == 0
        code, _ = m.invoke_command(rec.session_id, tas.CMD_PROBE_TIME,
                                   Operation.of(ValueIn(1, 0)))
        assert code == 0
        assert m.close_session(rec.session_id) == 0
        return m.trace_text(tas.PROBE_UUID)
    finally:
        m.close()


@pytest.mark.parametrize("backend", sorted(FILES))
def test_probe_lifecycle_matches_golden(tmp_path, backend):
    assert probe_lifecycle(tmp_path, backend) == (GOLDEN / FILES[backend]).read_text()


def test_sgx_golden_rows():
    rows = [name for _, name, _ in parse_trace((GOLDEN / FILES["sgx"]).read_text())]
    call = ["EENTER", "AEX", "ERESUME", "EEXIT"]
    assert rows == ["ECREATE", "EINIT", "EENTER", "EEXIT"] + call * 3 + ["EENTER", "EEXIT"]


@pytest.mark.parametrize("backend", sorted(FILES))
def test_golden_parses_and_reexports(backend):
    text = (GOLDEN / FILES[backend]).read_text()
    parsed = parse_trace(text)
    assert all(name in EVENT_TYPES for _, name, _ in parsed)
    seqs = [s for s, _, _ in parsed]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
    rebuilt = "".join(" ".join([str(s), n] + [f"{k}={v}" for k, v in f.items()]) + "\n"
                      for s, n, f in parsed)
    assert rebuilt == text
