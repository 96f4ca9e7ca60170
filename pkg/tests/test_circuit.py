import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from eschil.circuit import CircuitError, SwitchConfig, mode_cache, netlist_from_dict, parse_netlist, stamp_and_reduce
from eschil.scenario import load_bundled

from nets import element, net, probe_i, probe_v, rc_decay, series_rl


def test_parse_minimal_rc_has_one_state():
    text = json.dumps({"nodes": ["gnd", "a"], "elements": [
        element("resistor", "R", ["a", "gnd"], value=1.0),
        element("capacitor", "C", ["a", "gnd"], value=1.0, v0=1.0)]})
    n = parse_netlist(text)
    assert len(n.state_labels()) == 1
    assert n.initial_state().tolist() == [1.0]


def test_receiver_tank_has_two_states():
    n = net(["a", "b"], [element("inductor", "Lsi", ["a", "b"], value=255e-6),
                         element("capacitor", "Csi", ["b", "gnd"], value=62.34e-9),
                         element("resistor", "Rsi", ["a", "gnd"], value=0.15)])
    assert len(n.state_labels()) == 2


def test_floating_node_is_rejected():
    with pytest.raises(CircuitError, match="(?i)float|connect"):
        net(["n1", "n2"], [element("resistor", "R", ["n1", "n2"], value=1.0)])


@pytest.mark.parametrize("bad, pattern", [
    (element("resistor", "R", ["a", "gnd"], value=0.0), "value"),
    (element("resistor", "R", ["a", "gnd"], value=-1.0), "value"),
    (element("inductor", "L", ["a", "gnd"], value=0.0), "value"),
    (element("mutual_pair", "M", ["a", "gnd", "a", "gnd"], l1=1.0, l2=1.0, m=1.0), "coupling"),
])
def test_invalid_values_are_rejected(bad, pattern):
    with pytest.raises(CircuitError, match=pattern):
        net(["a"], [bad, element("resistor", "R0", ["a", "gnd"], value=1.0)])


def test_duplicate_gate_ids_are_rejected():
    with pytest.raises(CircuitError, match="gate"):
        net(["a"], [element("switch", "S1", ["a", "gnd"], gate="g"),
                    element("switch", "S2", ["a", "gnd"], gate="g")])


def test_parallel_rc_matrices():
    n = rc_decay()
    m = stamp_and_reduce(n, n.initial_config())
    assert m.A.shape == (1, 1) and m.A[0, 0] == pytest.approx(-1.0, rel=1e-12)
    assert m.B.shape == (1, 0)
    assert m.C[0].tolist() == pytest.approx([1.0])
    assert m.D.shape == (1, 0)


def test_series_rl_matrices():
    n = series_rl()
    m = stamp_and_reduce(n, n.initial_config())
    assert m.A[0, 0] == pytest.approx(-4.0, rel=1e-9)
    assert m.B[0, 0] == pytest.approx(2.0, rel=1e-9)
    assert m.state_labels == ("L",) or len(m.state_labels) == 1
    assert m.input_labels and len(m.input_labels) == 1


def test_fig2a_all_blocked_is_stable():
    n = load_bundled("fig2a").net
    cfg = SwitchConfig((), (False,) * 4)
    m = stamp_and_reduce(n, cfg)
    eig = scipy.linalg.eigvals(m.A)
    assert np.all(eig.real < 0)


def test_diode_outputs_present():
    n = load_bundled("fig2a").net
    m = stamp_and_reduce(n, n.initial_config())
    assert m.q == len(n.probes) + 2 * len(n.diodes)
    for d in n.diode_ids:
        assert any(d in lab for lab in m.output_labels[len(n.probes):])


def test_cache_memoizes():
    n = load_bundled("fig2a").net
    cache = mode_cache(n)
    cfg = n.initial_config()
    a, b = cache.get(cfg), cache.get(SwitchConfig(cfg.gates, cfg.diodes))
    assert a is b
    assert cache.reductions == 1


def _bridge():
    els = [element("vsource", "V", ["p", "gnd"], waveform={"type": "dc", "value": 10.0})]
    for name, a, b in (("S1", "p", "x"), ("S2", "x", "gnd"), ("S3", "p", "y"), ("S4", "y", "gnd")):
        els.append(element("switch", name, [a, b], gate=name.lower()))
    els += [element("inductor", "L", ["x", "z"], value=1e-3), element("resistor", "R", ["z", "y"], value=1.0)]
    return net(["p", "x", "y", "z"], els, [probe_i("i", "L")])


def test_bridge_three_configs_three_entries():
    n = _bridge()
    cache = mode_cache(n)
    cfgs = [SwitchConfig((True, False, False, True), ()), SwitchConfig((False, True, True, False), ()),
            SwitchConfig((False, False, False, False), ())]
    for cfg in cfgs + cfgs:
        cache.get(cfg)
    assert len(cache) == 3 and cache.reductions == 3


def test_one_diode_bit_changes_a():
    n = load_bundled("fig2a").net
    c0 = SwitchConfig((), (False,) * 4)
    c1 = c0.with_diode(0, True)
    assert c0 != c1
    assert not np.allclose(stamp_and_reduce(n, c0).A, stamp_and_reduce(n, c1).A)


def test_config_width_mismatch():
    n = load_bundled("fig2a").net
    with pytest.raises(CircuitError):
        stamp_and_reduce(n, SwitchConfig((), (False,) * 3))


def test_stamping_is_deterministic():
    n = load_bundled("wpt_submodule").net
    cfg = n.initial_config()
    a, b = stamp_and_reduce(n, cfg), stamp_and_reduce(n, cfg)
    for x, y in ((a.A, b.A), (a.B, b.B), (a.C, b.C), (a.D, b.D)):
        assert x.tobytes() == y.tobytes()


def test_mutual_pair_states_and_symmetry():
    n = net(["a", "b"], [
        element("vsource", "V", ["a", "gnd"], waveform={"type": "dc", "value": 1.0}),
        element("mutual_pair", "T", ["a", "gnd", "b", "gnd"], l1=2e-3, l2=1e-3, m=1e-3),
        element("resistor", "R", ["b", "gnd"], value=1.0)], [probe_v("vb", "b")])
    m = stamp_and_reduce(n, n.initial_config())
    assert m.n == 2
    # di/dt = L^-1 v: the secondary current grows opposite to the dot convention sign of M
    L = np.array([[2e-3, 1e-3], [1e-3, 1e-3]])
    v = np.array([1.0, 0.0])
    np.testing.assert_allclose(m.A @ np.zeros(2) + m.B @ [1.0], np.linalg.solve(L, v), rtol=1e-9)


def test_stiffness_insensitivity_fig2a():
    """10x R_off: leakage shrinks by at most 10x, probe voltages move < 0.1 %."""
    from eschil.scenario import run_es, scenario_from_dict

    scn = load_bundled("fig2a")
    doc = json.loads(json.dumps(scn.doc))
    doc["netlist"]["switch_model"]["r_off"] *= 10
    stiff = scenario_from_dict(doc)
    cfg = SwitchConfig((), (False,) * 4)
    x = np.array([0.0, 90.0])
    u = scn.net.sources().values(0.3 / 450)
    m1, m10 = stamp_and_reduce(scn.net, cfg), stamp_and_reduce(stiff.net, cfg)
    y1, y10 = m1.C @ x + m1.D @ u, m10.C @ x + m10.D @ u
    for i, lab in enumerate(m1.output_labels):
        if lab.startswith("i("):
            assert 0 < abs(y1[i] / y10[i]) <= 10.0 * (1 + 1e-9)
        elif lab.startswith("v"):
            assert abs(y10[i] - y1[i]) <= 1e-3 * max(abs(y1[i]), 1.0)
    n = 40  # 1 ms: the first conduction pulse
    w1, w10 = run_es(scn, n_cycles=n).waveform, run_es(stiff, n_cycles=n).waveform
    t = np.linspace(0, n * scn.control_period, 2001)
    v1, v10 = np.interp(t, w1.t, w1.signal("v_dc")), np.interp(t, w10.t, w10.signal("v_dc"))
    assert np.max(np.abs(v10 - v1) / np.abs(v1)) < 1e-3


# --- properties ---------------------------------------------------------------

@st.composite
def resistive_ladders(draw):
    k = draw(st.integers(1, 5))
    v = draw(st.floats(0.5, 100.0))
    nodes = [f"n{i}" for i in range(k)]
    els = [element("vsource", "V", ["n0", "gnd"], waveform={"type": "dc", "value": v})]
    for i in range(1, k):
        els.append(element("resistor", f"Rs{i}", [nodes[i - 1], nodes[i]], value=draw(st.floats(0.1, 1e4))))
    for i in range(k):
        els.append(element("resistor", f"Rp{i}", [nodes[i], "gnd"], value=draw(st.floats(0.1, 1e4))))
    # the capacitor sits behind its own resistor so it never parallels the source
    els.append(element("resistor", "Rc", [nodes[-1], "cn"], value=draw(st.floats(0.1, 1e4))))
    els.append(element("capacitor", "C", ["cn", "gnd"], value=draw(st.floats(1e-9, 1e-3))))
    return v, net(nodes + ["cn"], els, [probe_v(f"v{i}", n) for i, n in enumerate(nodes)])


@settings(max_examples=40, deadline=None)
@given(resistive_ladders())
def test_dc_gain_within_source_bounds(case):
    v, n = case
    m = stamp_and_reduce(n, n.initial_config())
    u = np.array([v])
    x_ss = np.linalg.solve(m.A, -m.B @ u)
    y = m.C @ x_ss + m.D @ u
    ny = len(n.probes)
    assert np.all(y[:ny] >= -1e-9 * v) and np.all(y[:ny] <= v * (1 + 1e-9))
    # independent nodal solve of the resistive ladder at DC (capacitor open)
    nodes = [f"n{i}" for i in range(ny)]
    G = np.zeros((ny, ny))
    for e in n.elements:
        if type(e).__name__ == "Resistor" and e.name != "Rc":
            a, b = e.nodes
            g = 1.0 / e.value
            ia = nodes.index(a) if a != "gnd" else None
            ib = nodes.index(b) if b != "gnd" else None
            for i, j, s in ((ia, ia, 1), (ib, ib, 1), (ia, ib, -1), (ib, ia, -1)):
                if i is not None and j is not None:
                    G[i, j] += s * g
    # node 0 is pinned by the source: solve the rest
    rhs = -G[1:, 0] * v
    ref = np.concatenate([[v], np.linalg.solve(G[1:, 1:], rhs)]) if ny > 1 else np.array([v])
    np.testing.assert_allclose(y[:ny], ref, rtol=1e-6, atol=1e-9 * v)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=4, max_size=4))
def test_every_fig2a_config_reduces(bits):
    n = load_bundled("fig2a").net
    m = stamp_and_reduce(n, SwitchConfig((), tuple(bits)))
    assert m.A.shape == (2, 2) and np.all(np.isfinite(m.A))
    assert m.B.shape == (2, 1) and m.C.shape == (m.q, 2) and m.D.shape == (m.q, 1)
