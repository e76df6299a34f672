"""Reduced three-phase TN-earthed PV plant through the four-stage shutdown.

Topology: ``n_boost`` boost inputs with ``strings_per_boost`` strings each share
the negative DC rail ``n``. Each boost input node ``b<k>`` has an input
capacitor to ``n``. The DC link is a capacitor between ``p`` and ``n``. The
grid is three EMF sources behind R-L, star point on PE (ground).

Stages
------
N   averaged regulation: boosts hold their input at the MPP voltage, the
    three-level inverter is an averaged leg per phase with a proportional
    current controller and a DC-voltage power loop.
F   as N with the fault resistor connected from the split point of the
    faulty string to PE.
PS  all switching disabled: each boost is an inductor plus diode into ``p``,
    each phase sees only the freewheeling diode pairs to ``n`` and ``p``.
C   grid relay open: phase branches removed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numba import njit

from .circuit import Circuit, Netlist, Section, newton_step
from .errors import ConfigError, NoConvergence
from .pv_model import CellParams, EnvConditions, PvStringModel

STAGES = ("N", "F", "PS", "C")
_STATUS = {1: "Newton iteration cap reached", 2: "diode active-set iteration did not settle",
           3: "non-finite solution"}


@dataclass(frozen=True)
class PlantConfig:
    n_boost: int = 2
    strings_per_boost: int = 2
    string: PvStringModel = field(default_factory=PvStringModel)
    cable_R: float = 0.02
    cable_L: float = 2e-6
    Cdc: float = 2e-3
    grid_Vll: float = 480.0
    grid_f: float = 60.0
    grid_R: float = 0.05
    grid_L: float = 50e-6
    dt_sim: float = 2e-6
    f_record: float = 100e3
    udc_ref: float = 720.0
    c_boost_in: float = 100e-6
    l_boost: float = 1e-3
    diode_vf: float = 0.7
    diode_r_on: float = 1e-3
    diode_g_off: float = 1e-7
    r_iso: float = 1e6
    k_boost: float = 0.5
    k_current: float = 2.0
    k_dc: float = 150.0

    def __post_init__(self):
        if self.n_boost < 1:
            raise ConfigError("n_boost must be >= 1")
        if self.strings_per_boost < 2:
            raise ConfigError("strings_per_boost must be >= 2")
        if self.dt_sim > 1.0 / self.f_record:
            raise ConfigError("dt_sim must not exceed the recording period")
        ratio = 1.0 / (self.f_record * self.dt_sim)
        if abs(ratio - round(ratio)) > 1e-6:
            raise ConfigError("recording period must be an integer multiple of dt_sim")
        for name in ("Cdc", "c_boost_in", "l_boost", "grid_Vll", "grid_f", "r_iso"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.udc_ref <= math.sqrt(2.0) * self.grid_Vll:
            raise ConfigError("udc_ref must exceed the grid line-to-line peak")

    @property
    def decimation(self) -> int:
        return int(round(1.0 / (self.f_record * self.dt_sim)))

    @property
    def phase_peak(self) -> float:
        return math.sqrt(2.0 / 3.0) * self.grid_Vll

    def to_dict(self) -> dict:
        d = asdict(self)
        d["string"].pop("Vc", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        d = dict(d)
        if "string" in d:
            s = dict(d["string"])
            s.pop("Vc", None)
            cell = CellParams(**s.pop("cell", {}))
            d["string"] = PvStringModel(cell=cell, **s)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown plant config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FaultConfig:
    boost_idx: int = 0
    string_idx: int = 0
    Nsc: int = 0
    Rg: float = 1.0
    t_fault: float = 0.02

    def validate(self, plant: PlantConfig):
        if not 0 <= self.Nsc <= plant.string.Npv:
            raise ConfigError(f"Nsc must lie in [0, {plant.string.Npv}], got {self.Nsc}")
        if not self.Rg > 0:
            raise ConfigError("Rg must be > 0")
        if not 0 <= self.boost_idx < plant.n_boost:
            raise ConfigError("boost_idx out of range")
        if not 0 <= self.string_idx < plant.strings_per_boost:
            raise ConfigError("string_idx out of range")


@dataclass(frozen=True)
class StageTimeline:
    T_N: float = 0.02
    T_F: float = 1e-3
    T_PS: float = 0.01
    T_C: float = 0.01

    def __post_init__(self):
        if min(self.T_N, self.T_F, self.T_PS, self.T_C) <= 0:
            raise ConfigError("all stage durations must be > 0")

    @property
    def durations(self) -> tuple:
        return (self.T_N, self.T_F, self.T_PS, self.T_C)

    @property
    def boundaries(self) -> tuple:
        """Absolute times t0..t4."""
        out = [0.0]
        for d in self.durations:
            out.append(out[-1] + d)
        return tuple(out)

    @property
    def total(self) -> float:
        return sum(self.durations)


class PhaseRegime(Enum):
    LowerLeg = "LowerLeg"
    Zero = "Zero"
    UpperLeg = "UpperLeg"


def classify_phase_regime(Ug, Usc, Udc) -> PhaseRegime:
    s = Ug + Usc
    if s < 0:
        return PhaseRegime.LowerLeg
    if s > Udc:
        return PhaseRegime.UpperLeg
    return PhaseRegime.Zero


def estimate_fault_current(Ia, Ib, Ic):
    Ia, Ib, Ic = (np.asarray(v, dtype=float) for v in (Ia, Ib, Ic))
    if not Ia.shape == Ib.shape == Ic.shape:
        raise ValueError("phase current series differ in length")
    return Ia + Ib + Ic


def channel_names(plant: PlantConfig) -> list[str]:
    names = [f"Ipv_{k + 1}_{s + 1}" for k in range(plant.n_boost)
             for s in range(plant.strings_per_boost)]
    names += [f"Ibst_{k + 1}" for k in range(plant.n_boost)]
    names += [f"Ubst_{k + 1}" for k in range(plant.n_boost)]
    names += ["Udc", "Uiso", "Ia", "Ib", "Ic", "Uab", "Ubc", "Uca"]
    return names


@dataclass
class WaveformRecord:
    channels: dict
    f_record: float
    stage_index: tuple
    fault: FaultConfig
    env: EnvConditions
    timeline: StageTimeline
    seed: int
    plant_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) != 1:
            raise ValueError("channels differ in length")
        n = lengths.pop()
        if not all(0 <= i <= n for i in self.stage_index):
            raise ValueError("stage index out of bounds")

    def __len__(self):
        return len(next(iter(self.channels.values())))

    @property
    def time(self):
        return np.arange(len(self)) / self.f_record

    def stage_slice(self, stage: str) -> slice:
        k = STAGES.index(stage)
        return slice(self.stage_index[k], self.stage_index[k + 1])

    def fault_current(self):
        c = self.channels
        return estimate_fault_current(c["Ia"], c["Ib"], c["Ic"])

    def string_channel(self, boost_idx: int, string_idx: int) -> str:
        return f"Ipv_{boost_idx + 1}_{string_idx + 1}"

    # ------------------------------------------------------------------ io

    def meta(self) -> dict:
        return {"fault": asdict(self.fault), "env": asdict(self.env),
                "timeline": asdict(self.timeline), "seed": self.seed,
                "plant_hash": self.plant_hash, "f_record": self.f_record,
                "stage_index": list(self.stage_index), "extra": self.extra}

    def save(self, case_dir) -> None:
        case_dir = Path(case_dir)
        case_dir.mkdir(parents=True, exist_ok=True)
        names = list(self.channels)
        data = np.column_stack([self.channels[k] for k in names])
        np.savetxt(case_dir / "waveforms.csv", data, fmt="%.8e", delimiter=",",
                   header=",".join(names), comments="")
        (case_dir / "case.json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, case_dir) -> "WaveformRecord":
        case_dir = Path(case_dir)
        meta = json.loads((case_dir / "case.json").read_text())
        with open(case_dir / "waveforms.csv") as fh:
            names = fh.readline().strip().split(",")
        data = np.loadtxt(case_dir / "waveforms.csv", delimiter=",", skiprows=1, ndmin=2)
        return cls(channels={k: data[:, i] for i, k in enumerate(names)},
                   f_record=meta["f_record"], stage_index=tuple(meta["stage_index"]),
                   fault=FaultConfig(**meta["fault"]), env=EnvConditions(**meta["env"]),
                   timeline=StageTimeline(**meta["timeline"]), seed=meta["seed"],
                   plant_hash=meta["plant_hash"], extra=meta.get("extra", {}))


# --------------------------------------------------------------------------
# netlist construction
# --------------------------------------------------------------------------


def _string_name(k, s):
    return f"S{k}_{s}"


def _build(stage, plant, fault, consts, state):
    """Netlist for one stage; ``state`` maps element names to carried-over values."""
    iph, i0, nvth, rs, rsh, tau = consts
    sm = plant.string
    vcs = state["vc"]

    def section(name, nmod):
        return Section(iph, i0, nvth, rs, rsh, tau, sm.Nc, nmod, sm.bypass_drop, sm.bypass_r,
                       vcs.get(name, 0.0))

    net = Netlist()
    for name in ("n", "p"):
        net.node(name)
    net.add_capacitor("Cdc", "p", "n", plant.Cdc / 2.0)
    net.add_resistor("Riso", "n", "0", plant.r_iso)
    currents = state["i"]
    for k in range(plant.n_boost):
        net.add_capacitor(f"Cin{k}", f"b{k}", "n", plant.c_boost_in)
        for s in range(plant.strings_per_boost):
            name = _string_name(k, s)
            if (k, s) == (fault.boost_idx, fault.string_idx):
                lo, up = name + "_lo", name + "_up"
                net.add_branch(lo, "n", "F", R=plant.cable_R, L=plant.cable_L,
                               section=section(lo, fault.Nsc), i0=currents.get(lo, 0.0))
                net.add_branch(up, "F", f"b{k}", R=plant.cable_R, L=plant.cable_L,
                               section=section(up, sm.Npv - fault.Nsc), i0=currents.get(up, 0.0))
            else:
                net.add_branch(name, "n", f"b{k}", R=2 * plant.cable_R, L=2 * plant.cable_L,
                               section=section(name, sm.Npv), i0=currents.get(name, 0.0))
    if stage != "N":
        net.add_resistor("Rg", "F", "0", fault.Rg)
    phases = "abc"
    if stage in ("N", "F", "PS"):
        for x in phases:
            net.add_source(f"E{x}")
            net.add_branch(f"G{x}", f"o{x}", "0", R=plant.grid_R, L=plant.grid_L, source=f"E{x}",
                           i0=currents.get(f"G{x}", 0.0))
    if stage in ("N", "F"):
        for x in phases:
            net.add_leg(f"L{x}", f"o{x}", "p", "n")
        for k in range(plant.n_boost):
            net.add_current_source(f"Ibst{k}", f"b{k}", "n")
            net.add_current_source(f"Iout{k}", "n", "p")
    else:
        vf2 = 2.0 * plant.diode_vf
        if stage == "PS":
            for x in phases:
                net.add_diode(f"Dlo{x}", "n", f"o{x}", vf2, plant.diode_r_on, plant.diode_g_off)
                net.add_diode(f"Dup{x}", f"o{x}", "p", vf2, plant.diode_r_on, plant.diode_g_off)
        for k in range(plant.n_boost):
            net.add_branch(f"B{k}", f"b{k}", "p", L=plant.l_boost,
                           diode=(plant.diode_vf, plant.diode_r_on),
                           i0=currents.get(f"B{k}", 0.0))
    return net


@njit(cache=True)
def _run_stage(n_rec, decim, t_start, dt, x, ctrl, src_v, isrc_v, leg_m, leg_u, bx, nx, px, gx,
               isrc_bst, isrc_out, i_ff, u_ref, k_boost, k_cur, k_dc, udc_ref, vpk, omega, theta0,
               rec_x, rec_aux, cargs):
    nsrc = src_v.shape[0]
    nb = bx.shape[0]
    aux = np.zeros(nb)
    two_pi_3 = 2.0 * math.pi / 3.0
    step = 0
    for r in range(n_rec):
        for _ in range(decim):
            step += 1
            t = t_start + step * dt
            for ph in range(nsrc):
                src_v[ph] = vpk * math.sin(omega * t + theta0 - two_pi_3 * ph)
            if ctrl:
                vn = x[nx]
                udc = x[px] - vn
                pin = 0.0
                for k in range(nb):
                    ub = x[bx[k]] - vn
                    ib = i_ff[k] + k_boost * (ub - u_ref[k])
                    if ib < 0.0:
                        ib = 0.0
                    isrc_v[isrc_bst[k]] = ib
                    isrc_v[isrc_out[k]] = ub * ib / udc
                    pin += ub * ib
                    aux[k] = ib
                iamp = 2.0 * (pin + k_dc * (udc - udc_ref)) / (3.0 * vpk)
                half = 0.5 * udc
                for ph in range(3):
                    ang = omega * t + theta0 - two_pi_3 * ph
                    m = src_v[ph] + k_cur * (iamp * math.sin(ang) - x[gx[ph]])
                    if m > half:
                        m = half
                    elif m < -half:
                        m = -half
                    leg_m[ph] = m
                    leg_u[ph] = udc
            status = newton_step(x, dt, *cargs)
            if status != 0:
                return status, step
        rec_x[r, :] = x
        for k in range(nb):
            rec_aux[r, k] = aux[k]
    return 0, step


def _stage_samples(timeline: StageTimeline, f_record: float) -> list[int]:
    return [max(1, int(round(d * f_record))) for d in timeline.durations]


def simulate_case(plant: PlantConfig, fault: FaultConfig, env: EnvConditions,
                  timeline: StageTimeline, seed: int) -> WaveformRecord:
    """Run the four stages and return the recorded channels at ``plant.f_record``."""
    fault.validate(plant)
    if abs(fault.t_fault - timeline.T_N) > 0.5 / plant.f_record:
        raise ConfigError("fault.t_fault must coincide with the end of the N-stage")
    rng = np.random.default_rng(seed)
    theta0 = float(rng.uniform(0.0, 2.0 * math.pi))

    sm = PvStringModel(cell=plant.string.cell, Nc=plant.string.Nc, Npv=plant.string.Npv,
                       bypass_per_module=plant.string.bypass_per_module,
                       bypass_drop=plant.string.bypass_drop, bypass_r=plant.string.bypass_r)
    consts = sm.constants(env)
    vmp, imp = sm.max_power_point(env)
    if imp <= 0:
        raise ConfigError("no power available at these conditions (G too low)")
    sm.initialize_state(env, V=vmp)
    vc_mpp = sm.Vc
    module_v = vmp / sm.Npv
    u_ref = vmp - 2.0 * plant.cable_R * imp
    nb, ns = plant.n_boost, plant.strings_per_boost
    i_ff = np.full(nb, ns * imp)
    udc = plant.udc_ref
    vpk = plant.phase_peak
    omega = 2.0 * math.pi * plant.grid_f
    p_in = nb * u_ref * ns * imp
    iamp = 2.0 * p_in / (3.0 * vpk)

    vn = -udc / 2.0
    volts = {"n": vn, "p": udc / 2.0}
    currents, vcs = {}, {}
    for k in range(nb):
        volts[f"b{k}"] = vn + u_ref
        for s in range(ns):
            name = _string_name(k, s)
            if (k, s) == (fault.boost_idx, fault.string_idx):
                currents[name + "_lo"] = currents[name + "_up"] = imp
                vcs[name + "_lo"] = vcs[name + "_up"] = vc_mpp
                volts["F"] = vn + fault.Nsc * module_v - plant.cable_R * imp
            else:
                currents[name] = imp
                vcs[name] = vc_mpp
    for ph, x in enumerate("abc"):
        ang = theta0 - 2.0 * math.pi * ph / 3.0
        currents[f"G{x}"] = iamp * math.sin(ang)
        volts[f"o{x}"] = vpk * math.sin(ang)
    state = {"v": volts, "i": currents, "vc": vcs, "ibst": i_ff.copy()}

    names = channel_names(plant)
    n_samples = _stage_samples(timeline, plant.f_record)
    total = 1 + sum(n_samples)
    out = {name: np.zeros(total) for name in names}
    decim = plant.decimation
    dt = plant.dt_sim

    t_start = 0.0
    pos = 1
    stage_index = [0]
    first = True
    for stage, n_rec in zip(STAGES, n_samples):
        if stage == "PS":
            for k in range(nb):
                state["i"][f"B{k}"] = state["ibst"][k]
        net = _build(stage, plant, fault, consts, state)
        circ = Circuit(net)
        circ.initialize({k: v for k, v in state["v"].items() if k in circ.net.nodes},
                        {k: v for k, v in state["i"].items() if k in circ.branch_index})
        for sname, s_idx in circ.section_of_branch.items():
            circ.x[circ.sec_x[s_idx, 0]] = circ.sec_vc[s_idx]
            circ.x[circ.sec_x[s_idx, 1]] = state["i"].get(sname, 0.0)
        if first:
            _record_sample(out, 0, circ, circ.x, state["ibst"], plant, fault, stage, 0.0, vpk,
                           omega, theta0)
            first = False
        ctrl = stage in ("N", "F")
        idx = _indices(circ, plant, ctrl)
        rec_x = np.zeros((n_rec, circ.n_unknowns))
        rec_aux = np.zeros((n_rec, nb))
        status, step = _run_stage(
            n_rec, decim, t_start, dt, circ.x, ctrl, circ.src_v, circ.isrc_v, circ.leg_m,
            circ.leg_u, idx["b"], idx["n"], idx["p"], idx["g"], idx["ibst"], idx["iout"], i_ff,
            np.full(nb, u_ref), plant.k_boost, plant.k_current, plant.k_dc, plant.udc_ref, vpk,
            omega, theta0, rec_x, rec_aux, circ.args())
        if status != 0:
            global_step = int(round(t_start / dt)) + step
            raise NoConvergence(f"{_STATUS[status]} in {stage}-stage", step=global_step)
        for r in range(n_rec):
            t = t_start + (r + 1) * decim * dt
            _record_sample(out, pos + r, circ, rec_x[r], rec_aux[r], plant, fault, stage, t,
                           vpk, omega, theta0)
        pos += n_rec
        stage_index.append(pos)
        t_start += n_rec * decim * dt
        state = _carry(circ, state, rec_aux[-1] if ctrl else None, nb)

    return WaveformRecord(channels=out, f_record=plant.f_record,
                          stage_index=tuple(stage_index[:4]) + (total,), fault=fault, env=env,
                          timeline=timeline, seed=seed, plant_hash=plant.digest())


def _indices(circ: Circuit, plant: PlantConfig, ctrl: bool) -> dict:
    nb = plant.n_boost
    idx = {"b": np.array([circ.node_x(f"b{k}") for k in range(nb)], dtype=np.int64),
           "n": circ.node_x("n"), "p": circ.node_x("p"),
           "g": np.zeros(3, dtype=np.int64), "ibst": np.zeros(nb, dtype=np.int64),
           "iout": np.zeros(nb, dtype=np.int64)}
    if ctrl:
        idx["g"] = np.array([circ.branch_x(f"G{x}") for x in "abc"], dtype=np.int64)
        idx["ibst"] = np.array([circ.isrc_index[f"Ibst{k}"] for k in range(nb)], dtype=np.int64)
        idx["iout"] = np.array([circ.isrc_index[f"Iout{k}"] for k in range(nb)], dtype=np.int64)
    return idx


def _carry(circ: Circuit, state: dict, ibst, nb) -> dict:
    volts = {name: (float(circ.x[i - 1]) if i > 0 else 0.0) for name, i in circ.net.nodes.items()}
    currents = {name: float(circ.br_i[k]) for name, k in circ.branch_index.items()}
    vcs = {name: float(circ.sec_vc[s]) for name, s in circ.section_of_branch.items()}
    new = {"v": {**state["v"], **volts}, "i": {**state["i"], **currents},
           "vc": {**state["vc"], **vcs}, "ibst": state["ibst"]}
    if ibst is not None:
        new["ibst"] = np.array(ibst, dtype=float)
    return new


def _record_sample(out, r, circ, x, aux, plant, fault, stage, t, vpk, omega, theta0):
    def v(node):
        i = circ.node_x(node)
        return 0.0 if i < 0 else x[i]

    vn = v("n")
    for k in range(plant.n_boost):
        for s in range(plant.strings_per_boost):
            name = _string_name(k, s)
            if (k, s) == (fault.boost_idx, fault.string_idx):
                name += "_up"
            out[f"Ipv_{k + 1}_{s + 1}"][r] = x[circ.branch_x(name)]
        if stage in ("N", "F"):
            out[f"Ibst_{k + 1}"][r] = aux[k]
        else:
            out[f"Ibst_{k + 1}"][r] = x[circ.branch_x(f"B{k}")]
        out[f"Ubst_{k + 1}"][r] = v(f"b{k}") - vn
    out["Udc"][r] = v("p") - vn
    out["Uiso"][r] = vn
    emf = [vpk * math.sin(omega * t + theta0 - 2.0 * math.pi * ph / 3.0) for ph in range(3)]
    if stage == "C":
        term = emf
        cur = [0.0, 0.0, 0.0]
    else:
        term = [v(f"o{x}") for x in "abc"]
        cur = [x[circ.branch_x(f"G{p}")] for p in "abc"]
    out["Ia"][r], out["Ib"][r], out["Ic"][r] = cur
    out["Uab"][r] = term[0] - term[1]
    out["Ubc"][r] = term[1] - term[2]
    out["Uca"][r] = term[2] - term[0]
