import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eschil.baseline import BaselineError, FixedStepPlant, be_step, fe_step, run_ts_chil
from eschil.controller import ConstantController, GatePwm, NullController, PwmConfig

from nets import buck, model, oscillator, rc_charge

T = 25e-6
DECAY = model([[-1.0]])
NO_U = np.zeros(0)


def test_fe_plug_in():
    assert fe_step(DECAY, np.array([1.0]), NO_U, 0.1)[0] == pytest.approx(0.9, abs=1e-15)
    assert fe_step(DECAY, np.array([1.0]), NO_U, 0.0)[0] == 1.0


def test_be_plug_in():
    assert be_step(DECAY, np.array([1.0]), NO_U, 0.1)[0] == pytest.approx(1 / 1.1, abs=1e-15)
    assert be_step(DECAY, np.array([1.0]), NO_U, 1e-300)[0] == pytest.approx(1.0, abs=1e-15)


def test_stiff_decay():
    stiff = model([[-1e4]])
    x_fe = x_be = np.array([1.0])
    for _ in range(20):
        x_fe = fe_step(stiff, x_fe, NO_U, 1e-3)
        x_be = be_step(stiff, x_be, NO_U, 1e-3)
    assert abs(x_fe[0]) > 1e10
    assert 0 < x_be[0] < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 1e6), st.floats(1e-3, 0.5))
def test_fe_grows_and_be_shrinks_oscillator_energy(w, wh):
    osc = oscillator(w)
    h = wh / w
    x = np.array([1.0, 0.0])
    energy = lambda v: v[0] ** 2 + (v[1] / w) ** 2  # noqa: E731
    assert energy(fe_step(osc, x, NO_U, h)) > energy(x)
    assert energy(be_step(osc, x, NO_U, h)) < energy(x)


def rc_end_error(method, h, cycles=40):
    w, _ = run_ts_chil(rc_charge(), NullController(), T, cycles, method, h)
    t_end = cycles * T
    exact = 10.0 * (1 - math.exp(-t_end / 1e-3))
    return abs(w.signal("v_c")[-1] - exact)


@pytest.mark.parametrize("method", ["FE", "BE"])
def test_first_order_convergence(method):
    ratio = rc_end_error(method, 1e-7) / rc_end_error(method, 5e-8)
    assert 2 / 1.5 <= ratio <= 2 * 1.5


def test_edges_snap_to_grid():
    h = 1e-7
    cmd = PwmConfig((GatePwm("g1", 20e-6, 0.37, 0.13),))
    w, sched = run_ts_chil(buck(), ConstantController(cmd), T, 40, "FE", h)
    sw = sched.plant.switches
    assert any(not s.passive for s in sw) and any(s.passive for s in sw)
    for s in sw:
        assert abs(s.t / h - round(s.t / h)) < 1e-6


def test_step_must_divide_period():
    with pytest.raises(BaselineError):
        FixedStepPlant(rc_charge(), T, "FE", 3e-6)
    with pytest.raises(BaselineError):
        FixedStepPlant(rc_charge(), T, "RK4", 1e-7)


def test_chattering_shrinks_with_step(fig2a_run):
    ch = fig2a_run.summary["metrics"]["chattering"]
    assert ch["FE_10ns"]["amplitude"] < ch["FE_100ns"]["amplitude"]
    assert ch["FE_100ns"]["alternations"] > 10 * len(ch["FE_100ns"]["per_interval"])
