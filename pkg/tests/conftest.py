import contextlib
import io
import json
import logging
import time
from pathlib import Path

import pytest

from vlsos.certify import run_certification
from vlsos.cli import RunConfig, main, post_fault_state
from vlsos.control import Controller
from vlsos.power import DATA_DIR, NetworkModel, ingest_network, wscc9
from vlsos.roa import estimate_roa
from vlsos.sim import levels_at

HERE = Path(__file__).resolve().parent

logging.getLogger("vlsos").setLevel(logging.WARNING)

# acceptance results collected by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def frozen():
    return json.loads((HERE / "frozen.json").read_text())


@pytest.fixture(scope="session")
def wscc9_model():
    return NetworkModel.build(wscc9())


@pytest.fixture(scope="session")
def twobus_model():
    return NetworkModel.build(ingest_network(DATA_DIR / "twobus.yaml"))


@pytest.fixture(scope="session")
def wscc9_roa(wscc9_model):
    return [estimate_roa(s) for s in wscc9_model.inter]


@pytest.fixture(scope="session")
def twobus_roa(twobus_model):
    return [estimate_roa(s) for s in twobus_model.inter]


@pytest.fixture(scope="session")
def twobus_certified(twobus_model, twobus_roa):
    """Certification of the two-bus network from the full unit level, with control."""
    Vs = [e.V for e in twobus_roa]
    ctl = Controller(twobus_model.control_channels())
    verdict, state, laws = run_certification(twobus_model.inter, Vs, [1.0], controller=ctl)
    return {"verdict": verdict, "state": state, "laws": laws, "Vs": Vs, "controller": ctl}


@pytest.fixture(scope="session")
def wscc9_levels(wscc9_model, wscc9_roa):
    """Levels of the 9-bus subsystems at fault clearance."""
    y0, _ = post_fault_state(RunConfig(), wscc9_model)
    return levels_at(y0, [e.V for e in wscc9_roa], wscc9_model.rmap)


def run_cli(*argv):
    """(exit code, stdout, stderr) of one in-process CLI call."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        rc = main(list(argv))
    return rc, out.getvalue(), err.getvalue()


def run_pipeline(outdir: Path, *extra):
    """roa, certify and controlled simulation of the bundled 9-bus fault scenario."""
    res = {"out": Path(outdir)}
    t0 = time.perf_counter()
    for cmd in ("roa", "certify"):
        res[cmd] = run_cli(cmd, "-o", str(outdir), *extra)
    ctl = Path(outdir) / "controls.json"
    res["simulate"] = run_cli("simulate", "-o", str(outdir), "--controls", str(ctl), *extra)
    res["seconds"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def wscc9_pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("wscc9_run"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
