"""Waveform-to-feature pipeline: noise, resampling, LOESS split, correlation features."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.stats import rankdata

from .errors import InsufficientClassMass, WindowTooSmall
from .plant import WaveformRecord
from .scenarios import CorpusManifest, load_record

log = logging.getLogger(__name__)

MIN_WINDOW = 8
NOISE_FLOOR_VAR = 1e-12
SENSOR_FLOOR_DB = 100.0
FEATURE_STAGES = ("F", "PS")
PARTNERS = ("Ubst", "Udc", "Uiso", "Ig")
COMPONENTS = ("orig", "detail", "trend")
COEFFICIENTS = ("pearson", "spearman")
N_FEATURES = 50
PS_COLUMNS = tuple(range(25, 50))
DEFAULT_RATES = (100_000, 10_000, 7_500, 5_000)
DEFAULT_SNR = (40.0, 30.0, 20.0)
# (boost, string) picked from every case: faulty, healthy under the faulty boost, healthy elsewhere
STRING_SLOTS = ((0, 0), (0, 1), (1, 0))


def feature_names() -> list[str]:
    names = []
    for stage in FEATURE_STAGES:
        for partner in PARTNERS:
            for comp in COMPONENTS:
                for coef in COEFFICIENTS:
                    names.append(f"{stage}.ipv_{partner.lower()}.{comp}.{coef}")
        names.append(f"{stage}.ipv_mean")
    return names


def layout_digest(names=None) -> str:
    names = feature_names() if names is None else list(names)
    return hashlib.sha256(",".join(names).encode()).hexdigest()[:16]


@dataclass
class SignalFrame:
    channel: str
    values: np.ndarray
    rate: float
    stage: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.rate > 0:
            raise ValueError("rate must be > 0")


@dataclass
class DecomposedSignal:
    trend: np.ndarray
    detail: np.ndarray

    @property
    def original(self):
        return self.trend + self.detail


@dataclass
class LabeledSample:
    features: np.ndarray
    label: int
    case_id: str
    string_id: str
    rate: float
    snr: float
    sentinel: list = field(default_factory=list)


# ---------------------------------------------------------------- noise / rate


def inject_noise(frame: SignalFrame, snr_db: float, rng: np.random.Generator,
                 reference: str = "ac", floor_db: float = SENSOR_FLOOR_DB) -> SignalFrame:
    """Add white Gaussian noise at ``snr_db`` below the frame's signal power.

    ``reference="ac"`` measures power as the variance about the frame mean, so
    the noise scales with the fluctuations rather than with a DC operating
    point; ``"total"`` uses the mean square. A sensor floor ``floor_db`` below
    the mean square is added so a perfectly steady channel still reads noisy.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return SignalFrame(frame.channel, frame.values.copy(), frame.rate, frame.stage)
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    ms = float(np.mean(frame.values ** 2))
    if reference == "ac":
        power = float(np.var(frame.values))
    elif reference == "total":
        power = ms
    else:
        raise ValueError(f"unknown noise reference {reference!r}")
    var = power / 10.0 ** (snr_db / 10.0) + ms / 10.0 ** (floor_db / 10.0)
    if var <= 0:
        var = NOISE_FLOOR_VAR
    noisy = frame.values + rng.normal(0.0, math.sqrt(var), frame.values.shape)
    return SignalFrame(frame.channel, noisy, frame.rate, frame.stage)


def _block_mean(values, k):
    n = (len(values) // k) * k
    return values[:n].reshape(-1, k).mean(axis=1)


def downsample(frame: SignalFrame, target_rate: float) -> SignalFrame:
    """Anti-aliased rate reduction by block means, with interpolation for fractional ratios.

    Output samples sit at block centres. For a fractional ratio the block length
    is the largest integer not exceeding ratio/2, and the block-mean series is
    linearly interpolated onto the target grid.
    """
    if target_rate > frame.rate * (1 + 1e-12):
        raise ValueError(f"target rate {target_rate} exceeds source rate {frame.rate}")
    ratio = frame.rate / target_rate
    k = int(round(ratio))
    if abs(ratio - k) < 1e-9:
        if k == 1:
            return SignalFrame(frame.channel, frame.values.copy(), frame.rate, frame.stage)
        return SignalFrame(frame.channel, _block_mean(frame.values, k), target_rate, frame.stage)
    k = max(1, int(ratio // 2))
    coarse = _block_mean(frame.values, k)
    src_step = k / frame.rate
    t_src = np.arange(len(coarse)) * src_step
    n_out = int(math.floor(t_src[-1] * target_rate + 1e-9)) + 1
    t_out = np.arange(n_out) / target_rate
    # align output block centres with the source block centres
    shift = (ratio - k) / (2.0 * frame.rate)
    t_out = np.clip(t_out + shift, 0.0, t_src[-1])
    return SignalFrame(frame.channel, np.interp(t_out, t_src, coarse), target_rate, frame.stage)


# ------------------------------------------------------------------ LOESS


@njit(cache=True)
def _loess_trend(y, q, degree):
    n = y.shape[0]
    out = np.empty(n)
    p = degree + 1
    A = np.empty((p, p))
    b = np.empty(p)
    for i in range(n):
        lo = i - q // 2
        if lo < 0:
            lo = 0
        if lo > n - q:
            lo = n - q
        hi = lo + q
        h = max(i - lo, hi - 1 - i)
        if h == 0:
            out[i] = y[i]
            continue
        A[:, :] = 0.0
        b[:] = 0.0
        for j in range(lo, hi):
            d = abs(j - i) / h
            w = 1.0 - d * d * d
            w = w * w * w
            if w <= 0.0:
                continue
            t = float(j - i)
            pw = 1.0
            for r in range(p):
                b[r] += w * pw * y[j]
                pc = pw * pw
                for c in range(r, p):
                    A[r, c] += w * pc
                    pc *= t
                pw *= t
        for r in range(p):
            for c in range(r):
                A[r, c] = A[c, r]
        coef = np.linalg.solve(A, b)
        out[i] = coef[0]
    return out


def default_span(n: int) -> float:
    return min(1.0, max(0.3, 25.0 / n))


def loess_decompose(frame: SignalFrame, span: float | None = None, degree: int = 1) -> DecomposedSignal:
    """Trend by local weighted polynomial (tricube weights, no robustness passes); detail is the rest."""
    y = np.ascontiguousarray(frame.values, dtype=float)
    n = len(y)
    if span is None:
        span = default_span(n)
    if not 0 < span <= 1:
        raise ValueError("span must lie in (0, 1]")
    if degree not in (0, 1, 2):
        raise ValueError("degree must be 0, 1 or 2")
    q = min(n, max(int(math.floor(span * n)), 1))
    # both ends of a centred window carry zero tricube weight
    if q < degree + 3:
        raise WindowTooSmall(f"window of {q} points cannot support degree {degree}")
    trend = _loess_trend(y, q, degree)
    return DecomposedSignal(trend=trend, detail=y - trend)


# ------------------------------------------------------------ correlations


def _check_pair(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"series shapes differ: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least two samples")
    return x, y


def _degenerate(centered, scale):
    eps = np.finfo(float).eps
    return float(np.dot(centered, centered)) <= len(centered) * (16 * eps * scale) ** 2


def pearson(x, y) -> float:
    """Linear correlation; NaN when either series has no variance."""
    x, y = _check_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    if _degenerate(dx, np.abs(x).max()) or _degenerate(dy, np.abs(y).max()):
        return math.nan
    r = float(np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))
    return min(1.0, max(-1.0, r))


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x, y = _check_pair(x, y)
    return pearson(rankdata(x), rankdata(y))


# --------------------------------------------------------------- extraction


def _stage_window(record: WaveformRecord, stage: str, min_raw: int) -> slice:
    s = record.stage_slice(stage)
    start, stop = s.start, s.stop
    short = min_raw - (stop - start)
    if short > 0:
        start -= short // 2
        stop += short - short // 2
        if start < 0:
            stop -= start
            start = 0
        if stop > len(record):
            start = max(0, start - (stop - len(record)))
            stop = len(record)
    return slice(start, stop)


def label_for(record: WaveformRecord, boost_idx: int, string_idx: int) -> int:
    f = record.fault
    if (boost_idx, string_idx) != (f.boost_idx, f.string_idx):
        return 0
    return 1 if f.Nsc == 0 else 2


def extract_features(record: WaveformRecord, string_idx, rate: float, snr_db: float,
                     rng: np.random.Generator) -> LabeledSample:
    """50-feature vector for one string: per stage 24 correlations of Ipv plus its mean.

    ``string_idx`` is a ``(boost, string)`` pair.
    """
    boost, string = string_idx
    ipv_name = record.string_channel(boost, string)
    if ipv_name not in record.channels:
        raise KeyError(f"record has no channel {ipv_name}")
    ratio = record.f_record / rate
    min_raw = int(math.ceil(MIN_WINDOW * ratio)) + int(math.ceil(ratio))
    feats = []
    sentinel = []
    for stage in FEATURE_STAGES:
        win = _stage_window(record, stage, min_raw)

        def prep(name):
            frame = SignalFrame(name, record.channels[name][win], record.f_record, stage)
            return downsample(inject_noise(frame, snr_db, rng), rate).values

        sig = {"Ipv": prep(ipv_name), "Ubst": prep(f"Ubst_{boost + 1}"), "Udc": prep("Udc"),
               "Uiso": prep("Uiso")}
        sig["Ig"] = prep("Ia") + prep("Ib") + prep("Ic")
        n = min(len(v) for v in sig.values())
        parts = {}
        for name, v in sig.items():
            d = loess_decompose(SignalFrame(name, v[:n], rate, stage))
            parts[name] = {"orig": v[:n], "detail": d.detail, "trend": d.trend}
        for partner in PARTNERS:
            for comp in COMPONENTS:
                a, b = parts["Ipv"][comp], parts[partner][comp]
                for fn in (pearson, spearman):
                    r = fn(a, b)
                    if math.isnan(r):
                        sentinel.append(len(feats))
                        r = 0.0
                    feats.append(r)
        feats.append(float(np.mean(parts["Ipv"]["orig"])))
    return LabeledSample(features=np.array(feats), label=label_for(record, boost, string),
                         case_id=str(record.extra.get("case_id", "")),
                         string_id=f"{boost + 1}_{string + 1}", rate=rate, snr=snr_db,
                         sentinel=sentinel)


# ------------------------------------------------------------------ dataset


def _sample_seed(seed, case_no, slot, rate_no, snr_no):
    ss = np.random.SeedSequence(seed, spawn_key=(case_no, slot, rate_no, snr_no))
    return np.random.default_rng(ss)


@dataclass
class Dataset:
    rate: float
    X: np.ndarray
    y: np.ndarray
    case_id: list
    string_id: list
    snr: np.ndarray
    split: np.ndarray  # True for test rows
    sentinel_rate: float = 0.0
    names: list = field(default_factory=feature_names)

    def train(self):
        return self.X[~self.split], self.y[~self.split]

    def test(self):
        return self.X[self.split], self.y[self.split]

    def with_columns(self, columns):
        cols = list(columns)
        return Dataset(self.rate, self.X[:, cols], self.y, self.case_id, self.string_id, self.snr,
                       self.split, self.sentinel_rate, [self.names[c] for c in cols])

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = int(self.rate)
        path = out / f"dataset_{tag}.csv"
        header = [f"f{i:02d}" for i in range(self.X.shape[1])] + \
                 ["label", "case_id", "string_id", "rate", "snr"]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row, lab, cid, sid, snr in zip(self.X, self.y, self.case_id, self.string_id, self.snr):
                vals = ",".join(repr(float(v)) for v in row)
                fh.write(f"{vals},{int(lab)},{cid},{sid},{tag},{snr:g}\n")
        test_ids = sorted({c for c, s in zip(self.case_id, self.split) if s})
        train_ids = sorted({c for c, s in zip(self.case_id, self.split) if not s})
        meta = {"rate": self.rate, "feature_names": self.names,
                "layout_digest": layout_digest(self.names), "sentinel_rate": self.sentinel_rate,
                "split": {"train": train_ids, "test": test_ids}}
        (out / f"dataset_{tag}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        meta_path = path.with_name(path.stem + ".meta.json")
        if not meta_path.exists():
            raise FileNotFoundError(f"missing companion metadata {meta_path}")
        meta = json.loads(meta_path.read_text())
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
        nf = header.index("label")
        X = np.array([[float(v) for v in r[:nf]] for r in rows]).reshape(len(rows), nf)
        y = np.array([int(r[nf]) for r in rows], dtype=int)
        case_id = [r[nf + 1] for r in rows]
        test = set(meta["split"]["test"])
        return cls(rate=float(meta["rate"]), X=X, y=y, case_id=case_id,
                   string_id=[r[nf + 2] for r in rows],
                   snr=np.array([float(r[nf + 4]) for r in rows]),
                   split=np.array([c in test for c in case_id], dtype=bool),
                   sentinel_rate=meta.get("sentinel_rate", 0.0), names=meta["feature_names"])


def _balance_and_split(keys, labels, case_kind, seed, test_frac=0.2, balance=True):
    """Pick rows so labels come out 2m : m : m and assign whole cases to the test split.

    ``keys`` are (case_no, slot, snr_no) tuples, ``case_kind`` maps case_no to 1 or 2.
    With ``balance=False`` every row is kept.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xBA1,)))
    groups = {"0a": [], "0b": [], 1: [], 2: []}
    for key, lab in zip(keys, labels):
        if lab == 0:
            groups["0a" if key[1] == 1 else "0b"].append(key)
        else:
            groups[lab].append(key)
    if balance:
        m = min(len(groups[1]), len(groups[2]), len(groups["0a"]), len(groups["0b"]))
        if m == 0:
            sizes = {k: len(v) for k, v in groups.items()}
            raise InsufficientClassMass(f"cannot balance classes, group sizes {sizes}")
        keep = set()
        for g in ("0a", "0b", 1, 2):
            items = sorted(groups[g])
            idx = rng.choice(len(items), size=m, replace=False)
            keep.update(items[i] for i in sorted(idx))
    else:
        keep = set(keys)
    label_of = dict(zip(keys, labels))
    test_cases = set()
    for kind in (1, 2):
        # only cases whose faulty-string rows survived balancing, so every label reaches the test split
        cases = sorted({k[0] for k in keep if case_kind[k[0]] == kind and label_of[k] == kind})
        n_test = int(round(test_frac * len(cases)))
        if len(cases) >= 2:
            n_test = max(n_test, 1)
        if cases and n_test:
            test_cases.update(cases[i] for i in rng.choice(len(cases), n_test, replace=False))
    return keep, test_cases


def build_dataset(manifest: CorpusManifest, rates=DEFAULT_RATES, snr_levels=DEFAULT_SNR,
                  seed: int = 0, out_dir=None, balance: bool = True) -> dict:
    """Per-rate balanced datasets over the three selected strings of every case."""
    cases = sorted(manifest.ok_cases(), key=lambda c: c["id"])
    if not cases:
        raise InsufficientClassMass("corpus has no successfully simulated cases")
    samples = {}
    labels = {}
    case_kind = {}
    for case_no, entry in enumerate(cases):
        rec = load_record(manifest, entry["id"])
        rec.extra.setdefault("case_id", entry["id"])
        case_kind[case_no] = 1 if rec.fault.Nsc == 0 else 2
        for slot, sidx in enumerate(STRING_SLOTS):
            for snr_no, snr in enumerate(snr_levels):
                key = (case_no, slot, snr_no)
                for rate_no, rate in enumerate(rates):
                    rng = _sample_seed(seed, case_no, slot, rate_no, snr_no)
                    s = extract_features(rec, sidx, rate, snr, rng)
                    samples[(rate_no,) + key] = s
                    labels[key] = s.label
        if (case_no + 1) % 50 == 0:
            log.info("featurized %d/%d cases", case_no + 1, len(cases))
    keys = sorted(labels)
    keep, test_cases = _balance_and_split(keys, [labels[k] for k in keys], case_kind, seed,
                                          balance=balance)
    kept = sorted(keep)
    out = {}
    for rate_no, rate in enumerate(rates):
        rows = [samples[(rate_no,) + k] for k in kept]
        n_flag = sum(len(r.sentinel) for r in rows)
        ds = Dataset(rate=float(rate), X=np.array([r.features for r in rows]),
                     y=np.array([r.label for r in rows], dtype=int),
                     case_id=[r.case_id for r in rows], string_id=[r.string_id for r in rows],
                     snr=np.array([r.snr for r in rows]),
                     split=np.array([k[0] in test_cases for k in kept], dtype=bool),
                     sentinel_rate=n_flag / max(1, len(rows) * 48))
        if out_dir is not None:
            ds.save(out_dir)
        out[rate] = ds
    return out
