"""``vtee`` command line: a thin client of the daemon and the client library."""
from __future__ import annotations

import os
import signal
import subprocess
import sys
import time

import click
import httpx

from . import client, scenarios, tas
from .core import (MalformedUuid, MemrefIn, MemrefInOut, MemrefOut, Operation, ReturnCode,
                   TeeError, ValueIn, ValueInOut, ValueOut, code_name, parse_uuid)
from .daemon import AddressInUse, admin_path, claim_socket, start
from .manager import ConfigError, ManagerConfig

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONNECTION = 2
EXIT_CODES = {
    ReturnCode.Success: 0,
    ReturnCode.ErrorGeneric: 10,
    ReturnCode.ErrorAccessDenied: 11,
    ReturnCode.ErrorItemNotFound: 12,
    ReturnCode.ErrorBadParameters: 13,
    ReturnCode.ErrorBadState: 14,
    ReturnCode.ErrorOutOfMemory: 15,
    ReturnCode.ErrorTargetDead: 16,
    ReturnCode.ErrorSecurity: 17,
    ReturnCode.ErrorCommunication: EXIT_CONNECTION,
}
EXIT_TA_DEFINED = 20
START_TIMEOUT = 15.0


def exit_code(code: int) -> int:
    """Process exit status for a return code; TA-defined codes map to 20."""
    return EXIT_CODES.get(code, EXIT_TA_DEFINED)


def _fail(message: str, status: int = EXIT_FAIL):
    click.echo(f"error: {message}", err=True)
    sys.exit(status)


def _config(path: str | None) -> ManagerConfig:
    if path is None:
        _fail("--config is required")
    try:
        return ManagerConfig.load(path)
    except ConfigError as exc:
        _fail(f"config: {exc}")


def _socket(config_path: str | None) -> str:
    env = os.environ.get("VTEE_SOCKET")
    if env:
        return env
    return _config(config_path).socket_path


def _admin(socket_path: str) -> httpx.Client:
    transport = httpx.HTTPTransport(uds=admin_path(socket_path))
    return httpx.Client(transport=transport, base_url="http://vtee", timeout=10.0)


def _admin_call(socket_path: str, method: str, url: str, **kw) -> httpx.Response:
    try:
        with _admin(socket_path) as c:
            return c.request(method, url, **kw)
    except httpx.TransportError as exc:
        _fail(f"no manager at {socket_path}: {exc}", EXIT_CONNECTION)


def _uuid(text: str):
    try:
        return parse_uuid(text)
    except MalformedUuid as exc:
        raise click.BadParameter(str(exc)) from None


def format_param(i: int, p) -> str | None:
    if isinstance(p, (ValueIn, ValueOut, ValueInOut)):
        return f"param{i} {type(p).__name__} ({p.a},{p.b})"
    if isinstance(p, MemrefIn):
        return f"param{i} MemrefIn {p.data.hex()}"
    if isinstance(p, (MemrefOut, MemrefInOut)):
        return f"param{i} {type(p).__name__} capacity={p.capacity} {p.data.hex()}"
    return None


@click.group()
def main():
    """Virtual TEE manager and client tooling."""


# -- manager -----------------------------------------------------------------


@main.group()
def manager():
    """Run, stop and query the manager daemon."""


@manager.command("start")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--foreground", is_flag=True, help="Serve in this process until stopped.")
@click.option("--preload-demo", is_flag=True, help="Install the shipped demo TAs.")
def manager_start(config_path, foreground, preload_demo):
    cfg = _config(config_path)
    if foreground:
        try:
            d = start(cfg, admin=True)
        except AddressInUse as exc:
            _fail(f"address in use: {exc}")
        except TeeError as exc:
            _fail(str(exc))
        if preload_demo:
            for manifest, image in tas.demo_packages().values():
                d.manager.install_ta(manifest, image)
        signal.signal(signal.SIGTERM, lambda *_: d.stop())
        signal.signal(signal.SIGINT, lambda *_: d.stop())
        click.echo(f"manager listening on {cfg.socket_path} (backend={cfg.backend})")
        d.wait()
        return
    try:
        for path in (cfg.socket_path, admin_path(cfg.socket_path)):
            claim_socket(path)
    except AddressInUse as exc:
        _fail(f"address in use: {exc}")
    argv = [sys.executable, "-m", "vtee.cli", "manager", "start", "--foreground",
            "--config", config_path] + (["--preload-demo"] if preload_demo else [])
    log_path = os.path.join(os.path.dirname(os.path.abspath(cfg.socket_path)), "vtee-manager.log")
    with open(log_path, "ab") as log:
        proc = subprocess.Popen(argv, stdin=subprocess.DEVNULL, stdout=log, stderr=log,
                                start_new_session=True)
    deadline = time.monotonic() + START_TIMEOUT
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            _fail(f"manager exited with status {proc.returncode}; see {log_path}")
        try:
            with _admin(cfg.socket_path) as c:
                c.get("/status").raise_for_status()
            click.echo(f"manager started (pid {proc.pid}) on {cfg.socket_path}")
            return
        except httpx.HTTPError:
            time.sleep(0.05)
    proc.terminate()
    _fail("manager did not come up in time")


@manager.command("stop")
@click.option("--config", "config_path", type=click.Path())
def manager_stop(config_path):
    sock = _socket(config_path)
    _admin_call(sock, "POST", "/shutdown")
    deadline = time.monotonic() + START_TIMEOUT
    while os.path.exists(sock) and time.monotonic() < deadline:
        time.sleep(0.05)
    click.echo("manager stopped")


@manager.command("status")
@click.option("--config", "config_path", type=click.Path())
def manager_status(config_path):
    st = _admin_call(_socket(config_path), "GET", "/status").json()
    click.echo(f"backend={st['backend']} tas={st['tas']} sessions={st['sessions']} "
               f"instances={st['instances']}")


# -- ta ----------------------------------------------------------------------


@main.group()
def ta():
    """Install and list trusted applications."""


@ta.command("install")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--image", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path())
def ta_install(manifest, image, config_path):
    with open(manifest) as fh:
        text = fh.read()
    with open(image, "rb") as fh:
        blob = fh.read()
    r = _admin_call(_socket(config_path), "POST", "/tas",
                    json={"manifest": text, "image_hex": blob.hex()})
    if r.status_code != 201:
        _fail(r.json().get("detail", r.text))
    info = r.json()
    click.echo(f"installed {info['uuid']} {info['name']}")


@ta.command("list")
@click.option("--config", "config_path", type=click.Path())
def ta_list(config_path):
    for t in _admin_call(_socket(config_path), "GET", "/tas").json():
        click.echo(f"{t['uuid']} {t['name']} {'running' if t['running'] else 'stopped'}")


# -- invoke ------------------------------------------------------------------


def _operation(value, memref, capacity, memref_out, object_id) -> Operation:
    given = [x is not None for x in (value, memref, memref_out)]
    if sum(given) > 1:
        raise click.UsageError("use one of --value, --memref, --memref-out")
    params = []
    if value is not None:
        try:
            a, b = (int(x, 0) for x in value.split(","))
        except ValueError:
            raise click.BadParameter("expected a,b", param_hint="--value") from None
        params.append(ValueInOut(a & 0xFFFFFFFF, b & 0xFFFFFFFF))
    elif memref is not None:
        try:
            data = bytes.fromhex(memref)
        except ValueError:
            raise click.BadParameter("not hex", param_hint="--memref") from None
        params.append(MemrefInOut(data, max(capacity or 0, len(data))))
    elif memref_out is not None:
        params.append(MemrefOut(memref_out))
    if object_id is not None:
        while not params:
            params.append(MemrefOut(0))
        params.append(MemrefIn(bytes.fromhex(object_id)))
    return Operation.of(*params)


@main.command()
@click.option("--uuid", "uuid_text", required=True)
@click.option("--cmd", "command_id", type=int, required=True)
@click.option("--value", help="ValueInOut a,b in param0.")
@click.option("--memref", help="MemrefInOut hex data in param0.")
@click.option("--capacity", type=int, help="Capacity of the --memref buffer.")
@click.option("--memref-out", type=int, help="MemrefOut of this capacity in param0.")
@click.option("--object", "object_id", help="Hex object id in param1 (storage TA).")
@click.option("--config", "config_path", type=click.Path())
def invoke(uuid_text, command_id, value, memref, capacity, memref_out, object_id, config_path):
    """Open a session, invoke one command, close."""
    uuid = _uuid(uuid_text)
    op = _operation(value, memref, capacity, memref_out, object_id)
    try:
        with client.initialize_context(_socket(config_path)) as ctx:
            sess, code, out = ctx.open_session(uuid)
            if sess is not None:
                code, out = ctx.invoke_command(sess, command_id, op)
                ctx.close_session(sess)
    except TeeError as exc:
        click.echo(f"code={code_name(exc.code)}")
        _fail(str(exc), exit_code(exc.code))
    click.echo(f"code={code_name(code)}")
    for i, p in enumerate(out):
        line = format_param(i, p)
        if line:
            click.echo(line)
    sys.exit(exit_code(code))


@main.command()
@click.option("--uuid", "uuid_text", required=True)
@click.option("--config", "config_path", type=click.Path())
def trace(uuid_text, config_path):
    """Print the backend trace of a TA."""
    uuid = _uuid(uuid_text)
    try:
        with client.initialize_context(_socket(config_path)) as ctx:
            code, text = ctx.dump_trace(uuid)
    except TeeError as exc:
        _fail(str(exc), EXIT_CONNECTION)
    if code != ReturnCode.Success:
        _fail(f"{code_name(code)}: {text}")
    click.echo(text, nl=False)


@main.command()
@click.argument("scenario", type=click.Choice(scenarios.SCENARIOS))
@click.option("--backend", type=click.Choice(["sgx", "tytan", "all"]), default="all")
def demo(scenario, backend):
    """Run a scripted scenario and print PASS/FAIL per check."""
    backends = ("sgx", "tytan") if backend == "all" else (backend,)
    results, equivalence = scenarios.run(scenario, backends)
    ok = True
    for r in results:
        for line in r.lines():
            click.echo(line)
        ok = ok and r.ok
    if equivalence is not None:
        label, same = equivalence
        click.echo(f"{'PASS' if same else 'FAIL'} {scenario} {label}")
        ok = ok and same
    sys.exit(EXIT_OK if ok else EXIT_FAIL)


if __name__ == "__main__":
    main()
