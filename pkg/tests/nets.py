"""Small netlists and hand-built models shared by the tests."""

import numpy as np

from eschil.circuit import LtiModel, netlist_from_dict


def element(kind, name, nodes, **kw):
    return {"kind": kind, "name": name, "nodes": list(nodes), **kw}


def net(nodes, elements, probes=(), **extra):
    return netlist_from_dict({"nodes": ["gnd", *nodes], "elements": list(elements), "probes": list(probes), **extra})


def probe_v(name, node):
    return {"name": name, "kind": "node_voltage", "target": node}


def probe_i(name, branch):
    return {"name": name, "kind": "branch_current", "target": branch}


def rc_decay(r=1.0, c=1.0, v0=1.0):
    return net(["a"], [element("resistor", "R", ["a", "gnd"], value=r),
                       element("capacitor", "C", ["a", "gnd"], value=c, v0=v0)],
               [probe_v("v_c", "a")])


def series_rl(r=2.0, l=0.5, v=1.0):
    return net(["a", "b"], [element("vsource", "Vs", ["a", "gnd"], waveform={"type": "dc", "value": v}),
                            element("resistor", "R", ["a", "b"], value=r),
                            element("inductor", "L", ["b", "gnd"], value=l)],
               [probe_i("i_l", "L")])


def rc_charge(v=10.0, r=1e3, c=1e-6):
    return net(["in", "c"], [element("vsource", "V1", ["in", "gnd"], waveform={"type": "dc", "value": v}),
                             element("resistor", "R1", ["in", "c"], value=r),
                             element("capacitor", "C1", ["c", "gnd"], value=c, v0=0.0)],
               [probe_v("v_c", "c")])


def buck(v=20.0, r=5.0, l=1e-3, c=1e-5):
    """Switch-driven buck with a freewheeling diode."""
    return net(["in", "sw", "o"], [
        element("vsource", "V1", ["in", "gnd"], waveform={"type": "dc", "value": v}),
        element("switch", "S1", ["in", "sw"], gate="g1"),
        element("diode", "D1", ["gnd", "sw"]),
        element("inductor", "L1", ["sw", "o"], value=l),
        element("capacitor", "C1", ["o", "gnd"], value=c),
        element("resistor", "R1", ["o", "gnd"], value=r),
    ], [probe_i("i_l", "L1"), probe_v("v_o", "o")], switch_model={"r_on": 1e-3, "r_off": 1e5})


def model(A, B=None, C=None, D=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.zeros((n, 0)) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    D = np.zeros((C.shape[0], B.shape[1])) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
    return LtiModel(A, B, C, D, tuple(f"x{i}" for i in range(n)), tuple(f"u{i}" for i in range(B.shape[1])),
                    tuple(f"y{i}" for i in range(C.shape[0])), None, C.shape[0])


def oscillator(omega=1.0):
    return model([[0.0, 1.0], [-omega * omega, 0.0]])
