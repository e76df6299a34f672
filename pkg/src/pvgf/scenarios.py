"""Fault-scenario sampling and batch corpus generation."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .plant import FaultConfig, PlantConfig, StageTimeline, WaveformRecord, simulate_case
from .pv_model import EnvConditions

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STAMP = "manifest.stamp.json"
SCHEMA_VERSION = 1


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ScenarioSpace:
    G: tuple = (100.0, 1200.0)
    T: tuple = (320.0, 350.0)
    tau: tuple = (10e-6, 50e-6)
    Nsc: tuple = (0, 18)
    Rg: tuple = (0.8, 2.0)
    T_F: tuple = (0.6e-3, 1.0e-3)
    T_PS: tuple = (4e-3, 10e-3)
    T_N: float = 0.02
    T_C: float = 0.01
    p_nsc0: float = 0.5

    def __post_init__(self):
        for name in ("G", "T", "tau", "Nsc", "Rg", "T_F", "T_PS"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"range {name} is empty: [{lo}, {hi}]")
            object.__setattr__(self, name, (lo, hi))
        if not 0.0 <= self.p_nsc0 <= 1.0:
            raise ConfigError("p_nsc0 must lie in [0, 1]")
        lo, hi = self.Nsc
        if int(lo) != lo or int(hi) != hi or lo < 0:
            raise ConfigError("Nsc range must be non-negative integers")
        if self.p_nsc0 < 1.0 and hi < max(lo, 1):
            raise ConfigError("Nsc range has no faulted-inside value to draw")
        if min(self.G[0], self.T[0], self.Rg[0], self.T_F[0], self.T_PS[0], self.T_N, self.T_C) <= 0:
            raise ConfigError("G, T, Rg and stage durations must be positive")
        if self.tau[0] < 0:
            raise ConfigError("tau must be >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpace":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario-space fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def digest(self) -> str:
        return _digest(self.to_dict())


def sample_case(space: ScenarioSpace, rng: np.random.Generator):
    """Draw one (FaultConfig, EnvConditions, StageTimeline) plus the cell lifetime tau."""
    G = rng.uniform(*space.G)
    T = rng.uniform(*space.T)
    tau = rng.uniform(*space.tau)
    Rg = rng.uniform(*space.Rg)
    T_F = rng.uniform(*space.T_F)
    T_PS = rng.uniform(*space.T_PS)
    lo, hi = int(space.Nsc[0]), int(space.Nsc[1])
    if rng.random() < space.p_nsc0:
        nsc = 0
    else:
        nsc = int(rng.integers(max(lo, 1), hi + 1))
    timeline = StageTimeline(T_N=space.T_N, T_F=T_F, T_PS=T_PS, T_C=space.T_C)
    fault = FaultConfig(boost_idx=0, string_idx=0, Nsc=nsc, Rg=Rg, t_fault=space.T_N)
    return fault, EnvConditions(G=G, T=T), timeline, tau


def case_seed(master_seed: int, index: int) -> int:
    """Per-case seed from a (master, index) counter; independent of execution order."""
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1)[0])


def case_config(fault, env, timeline, tau, seed) -> dict:
    return {"fault": asdict(fault), "env": asdict(env), "timeline": asdict(timeline),
            "tau": tau, "seed": seed}


@dataclass
class CorpusManifest:
    root: Path
    cases: list
    space: dict
    space_digest: str
    seed: int
    plant: dict
    generated: str = ""

    @property
    def case_ids(self) -> list:
        return [c["id"] for c in self.cases]

    def ok_cases(self) -> list:
        return [c for c in self.cases if c["status"] == "ok"]

    def case_dir(self, case_id: str) -> Path:
        return self.root / case_id

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "space": self.space,
                "space_digest": self.space_digest, "plant": self.plant, "cases": self.cases}

    def write(self) -> None:
        (self.root / MANIFEST).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (self.root / STAMP).write_text(json.dumps({"generated": self.generated}))

    @classmethod
    def load(cls, root) -> "CorpusManifest":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        d = json.loads(path.read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported manifest schema_version {d.get('schema_version')}")
        stamp = root / STAMP
        generated = json.loads(stamp.read_text())["generated"] if stamp.exists() else ""
        return cls(root=root, cases=d["cases"], space=d["space"], space_digest=d["space_digest"],
                   seed=d["seed"], plant=d["plant"], generated=generated)

    def verify(self) -> list:
        """Case ids whose directory is missing or whose stored config no longer hashes."""
        bad = []
        ids = self.case_ids
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")
        for c in self.ok_cases():
            meta_path = self.case_dir(c["id"]) / "case.json"
            if not meta_path.exists():
                bad.append(c["id"])
                continue
            m = json.loads(meta_path.read_text())
            cfg = case_config(FaultConfig(**m["fault"]), EnvConditions(**m["env"]),
                              StageTimeline(**m["timeline"]), m["extra"]["tau"], m["seed"])
            if _digest(cfg) != c["digest"]:
                bad.append(c["id"])
        return bad


def _run_one(job):
    index, master_seed, space, plant, out_dir = job
    seed = case_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    fault, env, timeline, tau = sample_case(space, rng)
    cfg = case_config(fault, env, timeline, tau, seed)
    case_id = f"case_{index:05d}"
    entry = {"id": case_id, "seed": seed, "digest": _digest(cfg), "config": cfg}
    try:
        string = replace(plant.string, cell=replace(plant.string.cell, tau=tau))
        rec = simulate_case(replace(plant, string=string), fault, env, timeline, seed)
        rec.extra = {"tau": tau, "case_id": case_id}
        rec.save(Path(out_dir) / case_id)
        entry["status"] = "ok"
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        entry["status"] = "failed"
        entry["error"] = f"{type(exc).__name__}: {exc}"
    return entry


def generate_corpus(space: ScenarioSpace, n_cases: int, seed: int, out_dir,
                    plant: PlantConfig | None = None, workers: int = 1) -> CorpusManifest:
    """Simulate ``n_cases`` sampled cases into ``out_dir`` and write the manifest."""
    if n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    plant = plant or PlantConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, seed, space, plant, str(out)) for i in range(n_cases)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_one, jobs))
    else:
        entries = []
        for job in jobs:
            entries.append(_run_one(job))
            if (job[0] + 1) % 25 == 0:
                log.info("simulated %d/%d cases", job[0] + 1, n_cases)
    entries.sort(key=lambda e: e["id"])
    for e in entries:
        if e["status"] != "ok":
            log.warning("case %s failed: %s", e["id"], e["error"])
    manifest = CorpusManifest(root=out, cases=entries, space=space.to_dict(),
                              space_digest=space.digest(), seed=seed, plant=plant.to_dict(),
                              generated=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    manifest.write()
    return manifest


def load_record(manifest: CorpusManifest, case_id: str) -> WaveformRecord:
    return WaveformRecord.load(manifest.case_dir(case_id))
