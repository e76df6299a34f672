"""Small modified-nodal-analysis engine with implicit-Euler companions.

Elements
--------
resistor, capacitor, current source (value set per step), piecewise-linear
diode, series branch (R + L + optional source, PV section and series diode,
with its current as an unknown), and an averaged converter leg (a voltage
source referenced to the DC-link midpoint that draws its current from the
rails in proportion to the modulation).

Diodes and module bypass diodes are resolved by an active-set loop around a
damped Newton solve. Node 0 is ground.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NoConvergence
from .pv_model import cell_source

ROW_KCL, ROW_VOLT, ROW_CELL = 0, 1, 2

# status codes returned by the kernel
OK, NEWTON_FAILED, MODE_CYCLING, NON_FINITE = 0, 1, 2, 3


@dataclass
class Section:
    """``nmod`` identical modules of ``nc`` cells, constants already at env."""

    iph: float
    i0: float
    nvth: float
    rs: float
    rsh: float
    tau: float
    nc: int
    nmod: int
    vbp: float = 0.4
    rbp: float = 1e-3
    vc0: float = 0.0


@dataclass
class Netlist:
    nodes: dict = field(default_factory=lambda: {"0": 0})
    resistors: list = field(default_factory=list)
    capacitors: list = field(default_factory=list)
    isources: list = field(default_factory=list)
    diodes: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    legs: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    def node(self, name):
        if name not in self.nodes:
            self.nodes[name] = len(self.nodes)
        return self.nodes[name]

    def add_resistor(self, name, a, b, R):
        self.resistors.append((name, self.node(a), self.node(b), 1.0 / R))

    def add_capacitor(self, name, a, b, C, v0=0.0):
        self.capacitors.append((name, self.node(a), self.node(b), C, v0))

    def add_current_source(self, name, a, b, value=0.0):
        """Current ``value`` flows from ``a`` to ``b`` through the source."""
        self.isources.append((name, self.node(a), self.node(b), value))

    def add_diode(self, name, anode, cathode, vf=0.7, r_on=1e-3, g_off=1e-7, on=False):
        self.diodes.append((name, self.node(anode), self.node(cathode), vf, r_on, g_off, on))

    def add_source(self, name, value=0.0):
        self.sources.append((name, value))
        return len(self.sources) - 1

    def add_branch(self, name, a, b, R=0.0, L=0.0, source=None, section=None, diode=None,
                   i0=0.0):
        """Series branch a -> b: V_a - V_b = E + R i + L di/dt - V_section [+ diode drop].

        The PV section is a generator driving current from ``a`` (its negative
        terminal) to ``b``.

        ``diode`` is ``(vf, r_on)`` for a series diode conducting a -> b.
        """
        src = -1 if source is None else [s[0] for s in self.sources].index(source)
        self.branches.append((name, self.node(a), self.node(b), R, L, src, section, diode, i0))

    def add_leg(self, name, out, p, n):
        self.legs.append((name, self.node(out), self.node(p), self.node(n)))


class Circuit:
    """Compiled netlist plus dynamic state; ``step`` advances one implicit-Euler step."""

    def __init__(self, net: Netlist, *, tol_kcl=1e-6, tol_volt=1e-6, tol_cell=1e-9,
                 max_newton=50, max_modes=40):
        self.net = net
        self.n_nodes = len(net.nodes)
        nv = self.n_nodes - 1
        idx = nv
        kinds = [ROW_KCL] * nv

        def ints(rows, width):
            return np.array(rows, dtype=np.int64).reshape(-1, width)

        def floats(rows, width=None):
            a = np.array(rows, dtype=np.float64)
            return a.reshape(-1, width) if width else a.reshape(-1)

        self.res_n = ints([(a, b) for _, a, b, _ in net.resistors], 2)
        self.res_g = floats([g for *_, g in net.resistors])
        self.cap_n = ints([(a, b) for _, a, b, _, _ in net.capacitors], 2)
        self.cap_c = floats([c for *_, c, _ in net.capacitors])
        self.cap_v = floats([v for *_, v in net.capacitors])
        self.isrc_n = ints([(a, b) for _, a, b, _ in net.isources], 2)
        self.isrc_v = floats([v for *_, v in net.isources])
        self.dio_n = ints([(d[1], d[2]) for d in net.diodes], 2)
        self.dio_p = floats([(d[3], d[4], d[5]) for d in net.diodes], 3)
        self.dio_on = np.array([d[6] for d in net.diodes], dtype=np.int8)
        self.src_v = floats([v for _, v in net.sources])

        sections = []
        br_meta, br_p, br_i, br_on, br_n = [], [], [], [], []
        self.branch_index = {}
        for k, (name, a, b, R, L, src, sec, diode, i0) in enumerate(net.branches):
            self.branch_index[name] = k
            xi = idx
            idx += 1
            kinds.append(ROW_VOLT)
            si = -1
            if sec is not None and sec.nmod > 0:
                si = len(sections)
                sections.append((sec, idx))
                idx += 2
                kinds += [ROW_CELL, ROW_VOLT]
            br_n.append((a, b))
            br_meta.append((xi, src, si, 0 if diode is None else 1))
            vf, ron = (0.0, 0.0) if diode is None else diode
            br_p.append((R, L, vf, ron))
            br_i.append(i0)
            br_on.append(1 if (diode is not None and i0 > 0) else 0)
        self.br_n = ints(br_n, 2)
        self.br_meta = ints(br_meta, 4)
        self.br_p = floats(br_p, 4)
        self.br_i = floats(br_i)
        self.br_on = np.array(br_on, dtype=np.int8)

        self.sec_x = ints([(x, x + 1) for _, x in sections], 2)
        self.sec_p = floats([(s.iph, s.i0, s.nvth, s.rs, s.rsh, s.tau, s.nc, s.nmod, s.vbp, s.rbp)
                             for s, _ in sections], 10)
        self.sec_vc = floats([s.vc0 for s, _ in sections])
        self.sec_bp = np.zeros(len(sections), dtype=np.int8)
        self.section_of_branch = {net.branches[k][0]: m for k, m in
                                  ((k, self.br_meta[k, 2]) for k in range(len(net.branches)))
                                  if m >= 0}

        self.leg_index = {}
        legs = []
        for k, (name, o, p, n) in enumerate(net.legs):
            self.leg_index[name] = k
            legs.append((o, p, n, idx))
            idx += 1
            kinds.append(ROW_VOLT)
        self.leg_n = ints(legs, 4)
        self.leg_m = np.zeros(len(legs))
        self.leg_u = np.ones(len(legs))

        self.n_unknowns = idx
        self.row_kind = np.array(kinds, dtype=np.int64)
        tol = {ROW_KCL: tol_kcl, ROW_VOLT: tol_volt, ROW_CELL: tol_cell}
        self.row_tol = np.array([tol[k] for k in kinds])
        self.max_newton = max_newton
        self.max_modes = max_modes
        self.x = np.zeros(idx)
        for k, m in enumerate(self.br_meta):
            self.x[m[0]] = self.br_i[k]
        for m, (s, xi) in enumerate(sections):
            self.x[xi] = s.vc0
        self.isrc_index = {name: k for k, (name, *_) in enumerate(net.isources)}
        self.source_index = {name: k for k, (name, _) in enumerate(net.sources)}
        self.cap_index = {name: k for k, (name, *_) in enumerate(net.capacitors)}
        self.diode_index = {d[0]: k for k, d in enumerate(net.diodes)}

    # ----------------------------------------------------------------- access

    def node_x(self, name):
        """Unknown index of a node voltage (``-1`` for ground)."""
        return self.net.nodes[name] - 1

    def branch_x(self, name):
        return int(self.br_meta[self.branch_index[name], 0])

    def leg_x(self, name):
        return int(self.leg_n[self.leg_index[name], 3])

    def voltage(self, name):
        i = self.node_x(name)
        return 0.0 if i < 0 else float(self.x[i])

    def current(self, name):
        return float(self.x[self.branch_x(name)])

    def initialize(self, voltages=None, currents=None):
        """Seed node voltages / branch currents for the first Newton guess and history."""
        for name, v in (voltages or {}).items():
            i = self.node_x(name)
            if i >= 0:
                self.x[i] = v
        for name, i0 in (currents or {}).items():
            k = self.branch_index[name]
            self.br_i[k] = i0
            self.x[self.br_meta[k, 0]] = i0
            if self.br_meta[k, 3]:
                self.br_on[k] = 1 if i0 > 0 else 0
        for k, (_, a, b, _, _) in enumerate(self.net.capacitors):
            va = 0.0 if a == 0 else self.x[a - 1]
            vb = 0.0 if b == 0 else self.x[b - 1]
            self.cap_v[k] = va - vb

    def args(self):
        """Kernel argument tuple (arrays are shared, so updates are in place)."""
        return (self.res_n, self.res_g, self.cap_n, self.cap_c, self.cap_v, self.isrc_n,
                self.isrc_v, self.dio_n, self.dio_p, self.dio_on, self.br_n, self.br_meta,
                self.br_p, self.br_i, self.br_on, self.src_v, self.sec_x, self.sec_p,
                self.sec_vc, self.sec_bp, self.leg_n, self.leg_m, self.leg_u, self.row_kind,
                self.row_tol, self.max_newton, self.max_modes)

    def step(self, dt, step_index=None):
        self._history = (self.cap_v.copy(), self.br_i.copy(), self.sec_vc.copy())
        status = newton_step(self.x, dt, *self.args())
        if status != OK:
            raise NoConvergence(_STATUS_TEXT[status], step=step_index)

    def residual(self, dt):
        """Residual vector of the last step: current solution against the pre-step history."""
        r = np.zeros(self.n_unknowns)
        J = np.zeros((self.n_unknowns, self.n_unknowns))
        saved = (self.cap_v.copy(), self.br_i.copy(), self.sec_vc.copy())
        hist = getattr(self, "_history", saved)
        self.cap_v[:], self.br_i[:], self.sec_vc[:] = hist
        try:
            _assemble(self.x, dt, *self.args()[:-2], J, r)
        finally:
            self.cap_v[:], self.br_i[:], self.sec_vc[:] = saved
        return r


_STATUS_TEXT = {
    NEWTON_FAILED: "Newton iteration cap reached",
    MODE_CYCLING: "diode active-set iteration did not settle",
    NON_FINITE: "non-finite solution",
}


def solve_timestep(circuit: Circuit, inputs: dict, dt: float) -> Circuit:
    """Apply ``inputs`` (source / current-source / leg values by name) and take one step."""
    for name, value in inputs.items():
        if name in circuit.source_index:
            circuit.src_v[circuit.source_index[name]] = value
        elif name in circuit.isrc_index:
            circuit.isrc_v[circuit.isrc_index[name]] = value
        elif name in circuit.leg_index:
            m, u = value
            circuit.leg_m[circuit.leg_index[name]] = m
            circuit.leg_u[circuit.leg_index[name]] = u
        else:
            raise KeyError(name)
    circuit.step(dt)
    return circuit


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------


@njit(cache=True)
def _v(x, node):
    return 0.0 if node == 0 else x[node - 1]


@njit(cache=True)
def _stamp_g(J, a, b, g):
    if a > 0:
        J[a - 1, a - 1] += g
        if b > 0:
            J[a - 1, b - 1] -= g
    if b > 0:
        J[b - 1, b - 1] += g
        if a > 0:
            J[b - 1, a - 1] -= g


@njit(cache=True)
def _section_voltage(x, k, sec_x, sec_p, sec_bp, i_br):
    """Section terminal voltage and its partials w.r.t. (i_branch, vc, icell)."""
    rs = sec_p[k, 3]
    nc = sec_p[k, 6]
    nmod = sec_p[k, 7]
    vc = x[sec_x[k, 0]]
    ic = x[sec_x[k, 1]]
    if sec_bp[k] == 0:
        return nmod * nc * (vc - ic * rs), 0.0, nmod * nc, -nmod * nc * rs
    vbp = sec_p[k, 8]
    rbp = sec_p[k, 9]
    return nmod * (-vbp - rbp * (i_br - ic)), -nmod * rbp, 0.0, nmod * rbp


@njit(cache=True)
def _assemble(x, dt, res_n, res_g, cap_n, cap_c, cap_v, isrc_n, isrc_v, dio_n, dio_p, dio_on,
              br_n, br_meta, br_p, br_i, br_on, src_v, sec_x, sec_p, sec_vc, sec_bp, leg_n,
              leg_m, leg_u, row_kind, row_tol, J, r):
    J[:, :] = 0.0
    r[:] = 0.0
    finite = True
    for k in range(res_n.shape[0]):
        a = res_n[k, 0]
        b = res_n[k, 1]
        i = res_g[k] * (_v(x, a) - _v(x, b))
        if a > 0:
            r[a - 1] += i
        if b > 0:
            r[b - 1] -= i
        _stamp_g(J, a, b, res_g[k])
    for k in range(cap_n.shape[0]):
        a = cap_n[k, 0]
        b = cap_n[k, 1]
        g = cap_c[k] / dt
        i = g * (_v(x, a) - _v(x, b) - cap_v[k])
        if a > 0:
            r[a - 1] += i
        if b > 0:
            r[b - 1] -= i
        _stamp_g(J, a, b, g)
    for k in range(isrc_n.shape[0]):
        a = isrc_n[k, 0]
        b = isrc_n[k, 1]
        if a > 0:
            r[a - 1] += isrc_v[k]
        if b > 0:
            r[b - 1] -= isrc_v[k]
    for k in range(dio_n.shape[0]):
        a = dio_n[k, 0]
        b = dio_n[k, 1]
        v = _v(x, a) - _v(x, b)
        if dio_on[k]:
            g = 1.0 / dio_p[k, 1]
            i = (v - dio_p[k, 0]) * g
        else:
            g = dio_p[k, 2]
            i = v * g
        if a > 0:
            r[a - 1] += i
        if b > 0:
            r[b - 1] -= i
        _stamp_g(J, a, b, g)
    for k in range(br_n.shape[0]):
        a = br_n[k, 0]
        b = br_n[k, 1]
        xi = br_meta[k, 0]
        i = x[xi]
        if a > 0:
            r[a - 1] += i
            J[a - 1, xi] += 1.0
        if b > 0:
            r[b - 1] -= i
            J[b - 1, xi] -= 1.0
        s = br_meta[k, 2]
        if s >= 0:
            # cell rows
            iph, i0, nvth, rs, rsh, tau = (sec_p[s, 0], sec_p[s, 1], sec_p[s, 2], sec_p[s, 3],
                                           sec_p[s, 4], sec_p[s, 5])
            vx = sec_x[s, 0]
            cx = sec_x[s, 1]
            f, df, ok = cell_source(x[vx], sec_vc[s], dt, iph, i0, nvth, rsh, tau)
            if not ok:
                finite = False
            r[vx] = f - x[cx]
            J[vx, vx] = df
            J[vx, cx] = -1.0
            if sec_bp[s] == 0:
                r[cx] = x[cx] - i
                J[cx, cx] = 1.0
                J[cx, xi] = -1.0
            else:
                nc = sec_p[s, 6]
                vbp = sec_p[s, 8]
                rbp = sec_p[s, 9]
                r[cx] = nc * (x[vx] - x[cx] * rs) + vbp + rbp * (i - x[cx])
                J[cx, vx] = nc
                J[cx, cx] = -nc * rs - rbp
                J[cx, xi] = rbp
        if br_meta[k, 3] == 1 and br_on[k] == 0:
            r[xi] = i
            J[xi, xi] = 1.0
            continue
        R = br_p[k, 0]
        L = br_p[k, 1]
        e = 0.0 if br_meta[k, 1] < 0 else src_v[br_meta[k, 1]]
        res = _v(x, a) - _v(x, b) - e - (R + L / dt) * i + (L / dt) * br_i[k]
        dres_di = -(R + L / dt)
        if br_meta[k, 3] == 1:
            res -= br_p[k, 2] + br_p[k, 3] * i
            dres_di -= br_p[k, 3]
        if s >= 0:
            vs, dvi, dvc, dic = _section_voltage(x, s, sec_x, sec_p, sec_bp, i)
            res += vs
            dres_di += dvi
            J[xi, sec_x[s, 0]] = dvc
            J[xi, sec_x[s, 1]] = dic
        r[xi] = res
        if a > 0:
            J[xi, a - 1] += 1.0
        if b > 0:
            J[xi, b - 1] -= 1.0
        J[xi, xi] += dres_di
    for k in range(leg_n.shape[0]):
        o = leg_n[k, 0]
        p = leg_n[k, 1]
        n = leg_n[k, 2]
        xi = leg_n[k, 3]
        j = x[xi]
        cp = 0.5 + leg_m[k] / leg_u[k]
        cn = 0.5 - leg_m[k] / leg_u[k]
        if o > 0:
            r[o - 1] -= j
            J[o - 1, xi] -= 1.0
        if p > 0:
            r[p - 1] += cp * j
            J[p - 1, xi] += cp
        if n > 0:
            r[n - 1] += cn * j
            J[n - 1, xi] += cn
        r[xi] = _v(x, o) - 0.5 * (_v(x, p) + _v(x, n)) - leg_m[k]
        if o > 0:
            J[xi, o - 1] += 1.0
        if p > 0:
            J[xi, p - 1] -= 0.5
        if n > 0:
            J[xi, n - 1] -= 0.5
    return finite


@njit(cache=True)
def _update_modes(x, dt, dio_n, dio_p, dio_on, br_n, br_meta, br_p, br_i, br_on, src_v, sec_x,
                  sec_p, sec_bp):
    """Flip every diode whose state is inconsistent with the solution; return flip count."""
    flips = 0
    for k in range(dio_n.shape[0]):
        v = _v(x, dio_n[k, 0]) - _v(x, dio_n[k, 1])
        vf = dio_p[k, 0]
        if dio_on[k]:
            if (v - vf) / dio_p[k, 1] < -1e-9:
                dio_on[k] = 0
                flips += 1
        elif v > vf + 1e-9:
            dio_on[k] = 1
            flips += 1
    for k in range(br_n.shape[0]):
        if br_meta[k, 3] == 0:
            continue
        xi = br_meta[k, 0]
        i = x[xi]
        if br_on[k]:
            if i < -1e-9:
                br_on[k] = 0
                flips += 1
        else:
            s = br_meta[k, 2]
            e = 0.0 if br_meta[k, 1] < 0 else src_v[br_meta[k, 1]]
            vd = (_v(x, br_n[k, 0]) - _v(x, br_n[k, 1]) - e + br_p[k, 1] / dt * br_i[k])
            if s >= 0:
                vs, _, _, _ = _section_voltage(x, s, sec_x, sec_p, sec_bp, 0.0)
                vd += vs
            if vd > br_p[k, 2] + 1e-9:
                br_on[k] = 1
                flips += 1
    for s in range(sec_x.shape[0]):
        vc = x[sec_x[s, 0]]
        ic = x[sec_x[s, 1]]
        nc = sec_p[s, 6]
        vbp = sec_p[s, 8]
        if sec_bp[s] == 0:
            if nc * (vc - ic * sec_p[s, 3]) < -vbp - 1e-9:
                sec_bp[s] = 1
                flips += 1
        else:
            # branch current of this section
            i_br = 0.0
            for k in range(br_n.shape[0]):
                if br_meta[k, 2] == s:
                    i_br = x[br_meta[k, 0]]
            if i_br - ic < -1e-9:
                sec_bp[s] = 0
                flips += 1
    return flips


@njit(cache=True)
def newton_step(x, dt, res_n, res_g, cap_n, cap_c, cap_v, isrc_n, isrc_v, dio_n, dio_p, dio_on,
                br_n, br_meta, br_p, br_i, br_on, src_v, sec_x, sec_p, sec_vc, sec_bp, leg_n,
                leg_m, leg_u, row_kind, row_tol, max_newton, max_modes):
    n = x.shape[0]
    J = np.zeros((n, n))
    r = np.zeros(n)
    x_start = x.copy()
    for _mode_pass in range(max_modes):
        converged = False
        for _it in range(max_newton):
            finite = _assemble(x, dt, res_n, res_g, cap_n, cap_c, cap_v, isrc_n, isrc_v, dio_n,
                               dio_p, dio_on, br_n, br_meta, br_p, br_i, br_on, src_v, sec_x,
                               sec_p, sec_vc, sec_bp, leg_n, leg_m, leg_u, row_kind, row_tol,
                               J, r)
            if finite:
                done = True
                for q in range(n):
                    if not abs(r[q]) <= row_tol[q]:
                        done = False
                        break
                if done:
                    converged = True
                    break
            else:
                # back off toward the step start; overflowed exponentials
                for q in range(n):
                    x[q] = 0.5 * (x[q] + x_start[q])
                continue
            dx = np.linalg.solve(J, -r)
            alpha = 1.0
            # junction limiting: only forward moves past the critical voltage are clipped
            for s in range(sec_x.shape[0]):
                dv = dx[sec_x[s, 0]]
                if dv <= 0.0:
                    continue
                nvth = sec_p[s, 2]
                vcrit = nvth * np.log(nvth / (1.4142135623730951 * sec_p[s, 1]))
                room = max(4.0 * nvth, vcrit - x[sec_x[s, 0]])
                if dv * alpha > room:
                    alpha = room / dv
            for q in range(n):
                x[q] += alpha * dx[q]
            ok = True
            for q in range(n):
                if not np.isfinite(x[q]):
                    ok = False
            if not ok:
                return NON_FINITE
        if not converged:
            return NEWTON_FAILED
        flips = _update_modes(x, dt, dio_n, dio_p, dio_on, br_n, br_meta, br_p, br_i, br_on,
                              src_v, sec_x, sec_p, sec_bp)
        if flips == 0:
            for k in range(cap_n.shape[0]):
                cap_v[k] = _v(x, cap_n[k, 0]) - _v(x, cap_n[k, 1])
            for k in range(br_n.shape[0]):
                br_i[k] = x[br_meta[k, 0]]
            for s in range(sec_x.shape[0]):
                sec_vc[s] = x[sec_x[s, 0]]
            return OK
    return MODE_CYCLING
