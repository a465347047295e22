import os
import subprocess
import sys

import pytest
from click.testing import CliRunner

from conftest import make_config
from vtee import client, daemon, tas
from vtee.cli import EXIT_CODES, exit_code, main
from vtee.core import Operation, ReturnCode, ValueInOut


@pytest.fixture
def served(tmp_path, backend_name):
    cfg = make_config(tmp_path, backend_name)
    conf = tmp_path / "vtee.conf"
    conf.write_text(cfg.dumps())
    d = daemon.start(cfg, admin=True)
    for manifest, image in tas.demo_packages().values():
        d.manager.install_ta(manifest, image)
    yield d, str(conf)
    d.stop()


def run(*args, env=None):
    return CliRunner().invoke(main, list(args), env=env, catch_exceptions=False)


def test_exit_code_table():
    golden = {0x00000000: 0, 0xFFFF0000: 10, 0xFFFF0001: 11, 0xFFFF0008: 12, 0xFFFF0006: 13,
              0xFFFF0007: 14, 0xFFFF000C: 15, 0xFFFF3024: 16, 0xFFFF000F: 17, 0xFFFF000E: 2}
    assert {int(k): v for k, v in EXIT_CODES.items()} == golden
    assert set(EXIT_CODES) == set(ReturnCode)
    assert exit_code(0x1234) == 20


def test_status_and_list(served):
    d, conf = served
    r = run("manager", "status", "--config", conf)
    assert r.exit_code == 0
    assert f"backend={d.manager.backend.name}" in r.output and "tas=6" in r.output
    r = run("ta", "list", "--config", conf)
    assert r.exit_code == 0 and str(tas.ECHO_UUID) in r.output


def test_socket_env_override(served, tmp_path):
    d, _ = served
    r = run("manager", "status", env={"VTEE_SOCKET": d.socket_path})
    assert r.exit_code == 0


def test_status_without_daemon(tmp_path):
    conf = tmp_path / "vtee.conf"
    conf.write_text(make_config(tmp_path).dumps())
    assert run("manager", "status", "--config", str(conf)).exit_code == 2
    assert run("ta", "list", "--config", str(conf)).exit_code == 2
    r = run("invoke", "--uuid", str(tas.ECHO_UUID), "--cmd", "1", "--config", str(conf))
    assert r.exit_code == 2


def test_bad_config(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("backend=nope\n")
    assert run("manager", "status", "--config", str(conf)).exit_code == 1


def test_doubler_matches_client_api(served):
    d, conf = served
    r = run("invoke", "--uuid", str(tas.DOUBLER_UUID), "--cmd", "1", "--value", "2,3",
            "--config", conf)
    assert r.exit_code == 0
    assert "code=Success" in r.output and "param0 ValueInOut (4,6)" in r.output
    with client.initialize_context(d.socket_path) as ctx:
        sess, _, _ = ctx.open_session(tas.DOUBLER_UUID)
        code, op = ctx.invoke_command(sess, 1, Operation.of(ValueInOut(2, 3)))
    assert (code, op.params[0]) == (ReturnCode.Success, ValueInOut(4, 6))


def test_unknown_uuid_exit(served):
    _, conf = served
    r = run("invoke", "--uuid", "00000000-0000-0000-0000-000000000000", "--cmd", "1",
            "--config", conf)
    assert r.exit_code == 12 and "ErrorItemNotFound" in r.output


def test_bad_arguments(served):
    _, conf = served
    assert run("invoke", "--uuid", "nope", "--cmd", "1", "--config", conf).exit_code == 2
    r = run("invoke", "--uuid", str(tas.ECHO_UUID), "--cmd", "1", "--value", "1,2",
            "--memref", "00", "--config", conf)
    assert r.exit_code == 2


def test_short_buffer_exit(served):
    _, conf = served
    r = run("invoke", "--uuid", str(tas.STORAGE_UUID), "--cmd", "1", "--memref", "00" * 8,
            "--config", conf)
    assert r.exit_code == 0
    r = run("invoke", "--uuid", str(tas.STORAGE_UUID), "--cmd", "2", "--memref-out", "4",
            "--config", conf)
    assert r.exit_code == 13


def test_storage_put_get(served):
    _, conf = served
    put = run("invoke", "--uuid", str(tas.STORAGE_UUID), "--cmd", "1", "--memref",
              b"hello".hex(), "--object", b"note".hex(), "--config", conf)
    assert put.exit_code == 0
    get = run("invoke", "--uuid", str(tas.STORAGE_UUID), "--cmd", "2", "--memref-out", "16",
              "--object", b"note".hex(), "--config", conf)
    assert get.exit_code == 0 and b"hello".hex() in get.output


def test_install(served, tmp_path):
    _, conf = served
    manifest_path, image_path = tas.package_files("echo")
    text = manifest_path.read_text().replace(str(tas.ECHO_UUID),
                                             "01234567-89ab-cdef-0123-456789abcdef")
    m = tmp_path / "e.manifest"
    m.write_text(text)
    img = tmp_path / "e.img"
    img.write_bytes(image_path.read_bytes())
    r = run("ta", "install", "--manifest", str(m), "--image", str(img), "--config", conf)
    assert r.exit_code == 0
    assert "01234567-89ab-cdef-0123-456789abcdef" in run("ta", "list", "--config", conf).output
    bad = bytearray(img.read_bytes())
    bad[-1] ^= 1
    img.write_bytes(bytes(bad))
    r = run("ta", "install", "--manifest", str(m), "--image", str(img), "--config", conf)
    assert r.exit_code == 1 and "digest mismatch" in r.stderr


def test_trace_listing(served):
    d, conf = served
    uuid = str(tas.STORAGE_UUID)
    r = run("trace", "--uuid", uuid, "--config", conf)
    assert r.exit_code == 1
    run("invoke", "--uuid", uuid, "--cmd", "1", "--memref", "aa", "--config", conf)
    listing = run("trace", "--uuid", uuid, "--config", conf).output
    names = [line.split()[1] for line in listing.splitlines()]
    if d.manager.backend.name == "sgx":
        assert names[:4] == ["ECREATE", "EINIT", "EENTER", "EEXIT"]
        joined = " ".join(names)
        assert "EENTER AEX ERESUME EEXIT" in joined
    else:
        assert "IPC_SEND" in names and "IPC_RECV" in names
        assert not {"ECREATE", "EENTER", "AEX"} & set(names)


@pytest.mark.parametrize("scenario", ["paper-3.2", "adversarial-os", "cross-ta"])
def test_demo(scenario):
    r = run("demo", scenario, "--backend", "all")
    assert r.exit_code == 0, r.output
    assert "FAIL" not in r.output and "PASS" in r.output


def test_daemonized_start_stop(tmp_path):
    cfg = make_config(tmp_path)
    conf = tmp_path / "vtee.conf"
    conf.write_text(cfg.dumps())
    env = dict(os.environ)
    env.pop("VTEE_SOCKET", None)
    cli = [sys.executable, "-m", "vtee.cli"]

    def call(*args):
        return subprocess.run(cli + list(args), capture_output=True, text=True, env=env,
                              timeout=60)

    assert call("manager", "start", "--config", str(conf), "--preload-demo").returncode == 0
    try:
        assert call("manager", "start", "--config", str(conf)).returncode == 1
        st = call("manager", "status", "--config", str(conf))
        assert st.returncode == 0 and "tas=6" in st.stdout
    finally:
        assert call("manager", "stop", "--config", str(conf)).returncode == 0
    assert call("manager", "status", "--config", str(conf)).returncode == 2
