"""Dynamic single-diode PV model with diffusion capacitance.

A string is ``Npv`` identical modules of ``Nc`` identical cells. All cells of a
string share the same junction state ``Vc`` (per-cell capacitor voltage), so
every string-level quantity is the cell quantity multiplied by ``Nc * Npv``.

The cell kernels are numba-compiled so that the network solver in
:mod:`pvgf.circuit` evaluates exactly the same arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.optimize import brentq, minimize_scalar

from .errors import ConfigError, NoConvergence, NonFiniteError

# Constants as used for the thermal voltage kT/q.
K_BOLTZMANN = 1.38e-23
Q_ELECTRON = 1.602e-19

_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class CellParams:
    n: float = 1.2
    I0_ref: float = 3e-8
    Iph_ref: float = 10.0
    Rs: float = 0.004
    Rsh: float = 5.0
    tau: float = 20e-6
    alpha_isc: float = 0.005
    Eg_ref: float = 1.121
    G_ref: float = 1000.0
    T_ref: float = 298.15

    def __post_init__(self):
        if not self.n > 0:
            raise ConfigError(f"cell.n must be > 0, got {self.n}")
        if not self.I0_ref > 0:
            raise ConfigError(f"cell.I0_ref must be > 0, got {self.I0_ref}")
        if self.Rs < 0:
            raise ConfigError(f"cell.Rs must be >= 0, got {self.Rs}")
        if not self.Rsh > 0:
            raise ConfigError(f"cell.Rsh must be > 0, got {self.Rsh}")
        if self.tau < 0:
            raise ConfigError(f"cell.tau must be >= 0, got {self.tau}")
        if not self.G_ref > 0:
            raise ConfigError(f"cell.G_ref must be > 0, got {self.G_ref}")


@dataclass(frozen=True)
class EnvConditions:
    G: float = 1000.0
    T: float = 298.15

    def __post_init__(self):
        if self.G < 0 or not math.isfinite(self.G):
            raise ConfigError(f"env.G must be >= 0, got {self.G}")
        if not self.T > 0:
            raise ConfigError(f"env.T must be > 0, got {self.T}")


def thermal_voltage(T):
    return K_BOLTZMANN * T / Q_ELECTRON


def cec_update(cell: CellParams, env: EnvConditions) -> tuple[float, float]:
    """Photocurrent and saturation current at ``env`` (De Soto form, constant Eg)."""
    iph = (env.G / cell.G_ref) * (cell.Iph_ref + cell.alpha_isc * (env.T - cell.T_ref))
    iph = max(iph, 0.0)
    eg_over_k = cell.Eg_ref * Q_ELECTRON / K_BOLTZMANN
    i0 = cell.I0_ref * (env.T / cell.T_ref) ** 3 * math.exp(
        eg_over_k * (1.0 / cell.T_ref - 1.0 / env.T)
    )
    return iph, i0


# --------------------------------------------------------------------------
# numba cell kernels (shared with the network solver)
# --------------------------------------------------------------------------


@njit(cache=True)
def cell_ceq(vc, i0, nvth, tau):
    """Per-cell equivalent capacitance; the (1 + Vc/nVth) factor is floored at 0."""
    u = vc / nvth
    fac = 1.0 + u
    if fac <= 0.0 or tau == 0.0:
        return 0.0
    return tau / nvth * i0 * math.exp(u) * fac


@njit(cache=True)
def cell_charge(vc, i0, nvth, tau):
    """Diffusion charge whose derivative is ``cell_ceq``: tau*I0*u*exp(u), u = Vc/nVth."""
    u = vc / nvth
    if u <= -1.0:
        u = -1.0
    return tau * i0 * u * math.exp(u)


@njit(cache=True)
def cell_source(vc, vc_old, dt, iph, i0, nvth, rsh, tau):
    """Current delivered by the cell core ahead of Rs, and its derivative in vc.

    The capacitive current is the charge difference over the step, so the
    source stays monotone in vc however far the step moves.
    Returns ``(f, df, ok)``; ``ok`` is False when the exponential overflows.
    """
    u = vc / nvth
    if u > _EXP_LIMIT:
        return 0.0, 0.0, False
    e = math.exp(u)
    f = iph - i0 * (e - 1.0) - vc / rsh
    df = -i0 * e / nvth - 1.0 / rsh
    if tau > 0.0:
        f -= (cell_charge(vc, i0, nvth, tau) - cell_charge(vc_old, i0, nvth, tau)) / dt
        df -= cell_ceq(vc, i0, nvth, tau) / dt
    return f, df, True


@njit(cache=True)
def _voc_bound(iph, i0, nvth):
    if iph <= 0.0:
        return 0.0
    return nvth * math.log(iph / i0 + 1.0)


@njit(cache=True)
def solve_cell_voltage_driven(v_cell, vc_old, dt, iph, i0, nvth, rs, rsh, tau):
    """Cell current for an imposed cell terminal voltage. Returns ``(i, vc, ok)``."""
    if rs == 0.0:
        f, df, ok = cell_source(v_cell, vc_old, dt, iph, i0, nvth, rsh, tau)
        return f, v_cell, ok
    lo = min(v_cell, vc_old, 0.0) - 1e-3
    hi = max(v_cell, vc_old, _voc_bound(iph, i0, nvth)) + 1e-3
    x = min(max(vc_old, lo), hi)
    for _ in range(200):
        f, df, ok = cell_source(x, vc_old, dt, iph, i0, nvth, rsh, tau)
        if not ok:
            hi = x
            x = 0.5 * (lo + hi)
            continue
        g = f - (x - v_cell) / rs
        dg = df - 1.0 / rs
        if abs(g) < 1e-13 * (1.0 + abs(iph)):
            return (x - v_cell) / rs, x, True
        if g > 0.0:
            lo = x
        else:
            hi = x
        step = -g / dg if dg != 0.0 else 0.0
        xn = x + step
        if not (lo < xn < hi) or dg >= 0.0:
            xn = 0.5 * (lo + hi)
        if hi - lo < 1e-15 * (1.0 + abs(x)):
            return (xn - v_cell) / rs, xn, True
        x = xn
    return (x - v_cell) / rs, x, False


@njit(cache=True)
def solve_cell_current_driven(i_cell, vc_old, dt, iph, i0, nvth, rs, rsh, tau):
    """Cell terminal voltage for an imposed cell current. Returns ``(v, vc, ok)``."""
    lo = min(vc_old, 0.0, rsh * (iph - i_cell)) - 1e-3
    surplus = iph - i_cell
    hi0 = nvth * math.log(surplus / i0 + 1.0) if surplus > 0.0 else 0.0
    hi = max(vc_old, hi0) + 1e-3
    x = min(max(vc_old, lo), hi)
    for _ in range(200):
        f, df, ok = cell_source(x, vc_old, dt, iph, i0, nvth, rsh, tau)
        if not ok:
            hi = x
            x = 0.5 * (lo + hi)
            continue
        g = f - i_cell
        if abs(g) < 1e-13 * (1.0 + abs(iph) + abs(i_cell)):
            return x - i_cell * rs, x, True
        if g > 0.0:
            lo = x
        else:
            hi = x
        xn = x - g / df if df != 0.0 else x
        if not (lo < xn < hi) or df >= 0.0:
            xn = 0.5 * (lo + hi)
        if hi - lo < 1e-15 * (1.0 + abs(x)):
            return xn - i_cell * rs, xn, True
        x = xn
    return x - i_cell * rs, x, False


@njit(cache=True)
def _scan_kernel(volts, vc0, dt, iph, i0, nvth, rs, rsh, tau, cells, vbp, rbp, nc, bypass):
    n = volts.shape[0]
    cur = np.empty(n)
    vcs = np.empty(n)
    vc = vc0
    for k in range(n):
        v_cell = volts[k] / cells
        i_cell, vc, ok = solve_cell_voltage_driven(v_cell, vc, dt, iph, i0, nvth, rs, rsh, tau)
        if not ok:
            return cur, vcs, k
        i_bp = 0.0
        v_mod = v_cell * nc
        if bypass and v_mod < -vbp:
            i_bp = (-v_mod - vbp) / rbp
        cur[k] = i_cell + i_bp
        vcs[k] = vc
    return cur, vcs, -1


# --------------------------------------------------------------------------
# string model
# --------------------------------------------------------------------------


@dataclass
class PvStringModel:
    """Series string of ``Npv`` modules, ``Nc`` cells each, one bypass diode per module."""

    cell: CellParams = field(default_factory=CellParams)
    Nc: int = 66
    Npv: int = 18
    bypass_per_module: bool = True
    bypass_drop: float = 0.4
    bypass_r: float = 1e-3
    Vc: float | None = None

    def __post_init__(self):
        if self.Nc < 1:
            raise ConfigError(f"Nc must be >= 1, got {self.Nc}")
        if self.Npv < 1:
            raise ConfigError(f"Npv must be >= 1, got {self.Npv}")
        if self.bypass_drop < 0 or self.bypass_r <= 0:
            raise ConfigError("bypass diode needs drop >= 0 and on-resistance > 0")

    @property
    def cells(self) -> int:
        return self.Nc * self.Npv

    def with_modules(self, npv: int) -> "PvStringModel":
        return replace(self, Npv=npv, Vc=None)

    def constants(self, env: EnvConditions):
        """``(iph, i0, nvth, rs, rsh, tau)`` per cell at ``env``."""
        iph, i0 = cec_update(self.cell, env)
        nvth = self.cell.n * thermal_voltage(env.T)
        return iph, i0, nvth, self.cell.Rs, self.cell.Rsh, self.cell.tau

    # static characteristics -------------------------------------------------

    def static_current(self, V, env: EnvConditions):
        """String current at terminal voltage ``V`` with tau = 0 (bypass included)."""
        iph, i0, nvth, rs, rsh, _ = self.constants(env)
        V = np.atleast_1d(np.asarray(V, dtype=float))
        cur, _, bad = _scan_kernel(V, 0.0, 1.0, iph, i0, nvth, rs, rsh, 0.0, float(self.cells),
                                   self.bypass_drop, self.bypass_r, float(self.Nc),
                                   self.bypass_per_module)
        if bad >= 0:
            raise NoConvergence("static current solve failed", step=int(bad))
        return cur if cur.size > 1 else float(cur[0])

    def static_voltage(self, I: float, env: EnvConditions) -> float:
        """String terminal voltage carrying current ``I`` with tau = 0."""
        iph, i0, nvth, rs, rsh, _ = self.constants(env)
        v_cell, _, ok = solve_cell_current_driven(I, 0.0, 1.0, iph, i0, nvth, rs, rsh, 0.0)
        if not ok:
            raise NoConvergence("static voltage solve failed")
        v_mod = v_cell * self.Nc
        if self.bypass_per_module and v_mod < -self.bypass_drop:
            def excess(vm):
                ic, _, _ = solve_cell_voltage_driven(vm / self.Nc, 0.0, 1.0, iph, i0, nvth,
                                                     rs, rsh, 0.0)
                return ic + (-vm - self.bypass_drop) / self.bypass_r - I
            lo = -self.bypass_drop - self.bypass_r * (abs(I) + iph + 1.0) - 1.0
            v_mod = brentq(excess, lo, -self.bypass_drop, xtol=1e-14)
        return v_mod * self.Npv

    def open_circuit_voltage(self, env: EnvConditions) -> float:
        return self.static_voltage(0.0, env)

    def short_circuit_current(self, env: EnvConditions) -> float:
        return self.static_current(0.0, env)

    def max_power_point(self, env: EnvConditions) -> tuple[float, float]:
        voc = self.open_circuit_voltage(env)
        if voc <= 0:
            return 0.0, 0.0
        res = minimize_scalar(lambda v: -v * self.static_current(v, env), bounds=(0.0, voc),
                              method="bounded", options={"xatol": 1e-9 * voc})
        vmp = float(res.x)
        return vmp, float(self.static_current(vmp, env))

    def initialize_state(self, env: EnvConditions, *, V=None, I=None) -> float:
        """Set ``Vc`` to the static operating point at terminal ``V`` or current ``I``."""
        iph, i0, nvth, rs, rsh, _ = self.constants(env)
        if (V is None) == (I is None):
            raise ValueError("give exactly one of V or I")
        if V is None:
            V = self.static_voltage(I, env)
        _, vc, ok = solve_cell_voltage_driven(V / self.cells, 0.0, 1.0, iph, i0, nvth, rs, rsh, 0.0)
        if not ok:
            raise NoConvergence("state initialization failed")
        self.Vc = float(vc)
        return self.Vc


def string_current_residual(model: PvStringModel, V, I, env: EnvConditions, ic=0.0):
    """Residual of the cell I-V relation at string terminal (V, I).

    ``ic`` is the per-cell capacitor current; the default gives the static curve.
    """
    iph, i0, nvth, rs, rsh, _ = model.constants(env)
    vc = np.asarray(V, dtype=float) / model.cells + np.asarray(I, dtype=float) * rs
    u = vc / nvth
    if np.any(u > _EXP_LIMIT):
        raise NonFiniteError("diode exponential overflow; damp the Newton step")
    return I - (iph - i0 * np.expm1(u) - ic - vc / rsh)


def equivalent_capacitance(model: PvStringModel, Vc_cell, env: EnvConditions):
    """String-level equivalent capacitance (per-cell value divided by the cell count)."""
    _, i0, nvth, _, _, tau = model.constants(env)
    vc = np.asarray(Vc_cell, dtype=float)
    u = vc / nvth
    cell = tau / nvth * i0 * np.exp(u) * np.maximum(1.0 + u, 0.0)
    return cell / model.cells


def step_dynamic_state(model: PvStringModel, V_next: float, dt: float, env: EnvConditions):
    """Advance ``model.Vc`` one implicit-Euler step at imposed terminal voltage.

    Returns the string current at the end of the step.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if model.Vc is None:
        model.initialize_state(env, V=V_next)
    iph, i0, nvth, rs, rsh, tau = model.constants(env)
    cur, vcs, bad = _scan_kernel(np.array([float(V_next)]), model.Vc, dt, iph, i0, nvth, rs, rsh,
                                 tau, float(model.cells), model.bypass_drop, model.bypass_r,
                                 float(model.Nc), model.bypass_per_module)
    if bad >= 0:
        raise NoConvergence("dynamic step failed to converge")
    model.Vc = float(vcs[0])
    return float(cur[0])


def iv_scan(model: PvStringModel, env: EnvConditions, duration: float, direction: str,
            n_steps: int = 2000):
    """Linear voltage ramp across [0, Voc] in ``duration`` seconds.

    ``direction`` is ``"forward"`` (0 -> Voc) or ``"reverse"`` (Voc -> 0). The
    junction state starts at the static point of the first voltage.
    Returns ``(V, I)`` arrays of length ``n_steps + 1``.
    """
    if not duration > 0:
        raise ValueError("duration must be > 0")
    voc = model.open_circuit_voltage(env)
    volts = np.linspace(0.0, voc, n_steps + 1)
    if direction == "reverse":
        volts = volts[::-1].copy()
    elif direction != "forward":
        raise ValueError(f"unknown scan direction {direction!r}")
    iph, i0, nvth, rs, rsh, tau = model.constants(env)
    vc0 = model.initialize_state(env, V=volts[0])
    dt = duration / n_steps
    cur, vcs, bad = _scan_kernel(volts, vc0, dt, iph, i0, nvth, rs, rsh, tau, float(model.cells),
                                 model.bypass_drop, model.bypass_r, float(model.Nc),
                                 model.bypass_per_module)
    if bad >= 0:
        raise NoConvergence("I-V scan failed", step=int(bad))
    model.Vc = float(vcs[-1])
    return volts, cur


def hysteresis_area(model: PvStringModel, env: EnvConditions, duration: float,
                    n_steps: int = 2000) -> float:
    """Area enclosed between the reverse and forward scans (V * A)."""
    v_f, i_f = iv_scan(model, env, duration, "forward", n_steps)
    _, i_r = iv_scan(model, env, duration, "reverse", n_steps)
    return float(np.trapezoid(i_r[::-1] - i_f, v_f))
