import math

import numpy as np
import pytest

from eschil import analysis
from eschil.controller import NullController
from eschil.events import CycleTiming, Scheduler
from eschil.oracle import OracleError, OraclePlant
from eschil.scenario import cache_dir, cached_oracle, load_bundled, oracle_self_check

from nets import rc_charge

T = 25e-6


def test_rc_matches_closed_form():
    plant = OraclePlant(rc_charge(), T, 1e-9, record_dt=1e-7)
    Scheduler(plant, NullController(), CycleTiming(T)).run(40)
    w = plant.waveform()
    exact = 10.0 * (1 - np.exp(-w.t / 1e-3))
    assert np.max(np.abs(w.signal("v_c") - exact)) <= 1e-7 * 10.0


def test_rejects_bad_step():
    with pytest.raises(OracleError):
        OraclePlant(rc_charge(), T, 0.0)


def test_submodule_self_check():
    scn = load_bundled("wpt_submodule")
    ref, _ = cached_oracle(scn)
    errs = oracle_self_check(scn, reference=ref)
    assert set(errs) == {"i_tx", "i_rx", "u_cp", "u_cf", "i_buck"}
    assert max(errs.values()) <= 1e-4, errs


def test_cache_roundtrip():
    scn = load_bundled("rc_smoke")
    w1, sw1 = cached_oracle(scn)
    files = list(cache_dir().glob("oracle_rc_smoke_*.npz"))
    assert len(files) == 1
    w2, sw2 = cached_oracle(scn)
    assert w1.t.tobytes() == w2.t.tobytes() and w1.values.tobytes() == w2.values.tobytes()
    assert sw1 == sw2
    v = w1.signal("v_c")
    assert np.max(np.abs(v - 10 * (1 - np.exp(-w1.t / 1e-3)))) <= 1e-7 * 10
