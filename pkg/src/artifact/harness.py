"""Experiment orchestration: typed configs, seeded runs, summaries,
parameter sweeps and tabular reports.

A run takes a choice set (one or more gates the client might pick), a
shot budget and a noise configuration, executes every shot with its own
counter-derived random stream, and collects per-choice statistics plus
the cross-choice eavesdropper view. Everything serialized is plain JSON
or CSV with a schema tag, and a run with the same config and seed writes
byte-identical files regardless of worker count.
"""

import csv
import dataclasses
import itertools
import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, noise, protocols
from .noise import NoiseConfig
from .protocols import ExposureLedger, GateChoice, ideal_gate
from .qcore import KET, ket, product_state, spin, fidelity_vec, von_neumann_entropy

__all__ = [
    "CONFIG_SCHEMA",
    "SUMMARY_SCHEMA",
    "SWEEP_SCHEMA",
    "ConfigError",
    "ExperimentConfig",
    "RunSummary",
    "run",
    "sweep",
    "report",
    "shot_rng",
    "derive_seed",
    "expected_herald_rate",
    "choice_label",
    "choice_from_label",
    "load_expectations",
    "load_records",
    "records_chi",
    "records_leakage",
]

CONFIG_SCHEMA = "artifact-config-v1"
SUMMARY_SCHEMA = "artifact-summary-v1"
SWEEP_SCHEMA = "artifact-sweep-v1"

_MODES = ("auto", "density-matrix", "trajectory")
_ANALYSES = ("tomography",)
_RECORD_FORMATS = ("csv", "none")
_CHECK_KEYS = (
    "min_fidelity",
    "fidelity_band",
    "max_holevo_bits",
    "herald_rate_band",
    "min_verdict_probability",
)

_RECORD_COLUMNS = (
    "shot", "choice", "input", "heralded", "weight", "fidelity",
    "clicks", "secret_bits", "public_bits", "verdict", "verdict_correct",
    "raw_bits", "outcome_dms", "server_dm", "client_dm",
)


class ConfigError(ValueError):
    """A config that cannot be run; the CLI maps this to exit code 2."""


# --------------------------------------------------------------- rng

def shot_rng(seed: int, shot: int, lane: int = 0) -> np.random.Generator:
    """Independent stream for one shot of one choice.

    Counter-based, so any shot's stream can be rebuilt without drawing
    through its predecessors. Regenerating the same (seed, shot, lane)
    replays the same noise draws; tomography leans on that to feed every
    input state the identical slow-noise realization.
    """
    key = np.array([seed, shot], dtype=np.uint64)
    counter = np.array([0, lane, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def derive_seed(seed: int, index: int) -> int:
    # tag 1 in the counter keeps sweep sub-seeds off the shot streams
    key = np.array([seed, index], dtype=np.uint64)
    counter = np.array([1, 0, 0, 0], dtype=np.uint64)
    g = np.random.Generator(np.random.Philox(key=key, counter=counter))
    return int(g.integers(0, 2 ** 63, dtype=np.uint64))


# ------------------------------------------------------------ choices

_DEFAULT_INPUT = {"rz": "+", "one-qubit": "+", "intra": "+,+",
                  "distributed": "+,+"}


def _choice_from_dict(d) -> GateChoice:
    """Build a GateChoice from either the compact form ({"kind": "rz",
    "phi": ...}) or the full echo a summary config carries."""
    if isinstance(d, GateChoice):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"protocol entry must be a mapping, got {type(d).__name__}")
    d = dict(d)
    kind = d.pop("kind", None)
    targets = tuple(d.pop("targets", None) or ())
    angles = d.pop("angles", None)
    phi = d.pop("phi", None)
    name = d.pop("name", None)
    entangle = d.pop("entangle", 0)
    oracle = d.pop("oracle", 0)
    if d:
        raise ConfigError(f"unknown choice fields {sorted(d)}")

    if phi is None and angles is not None and len(angles) == 1:
        phi = angles[0]
    try:
        if kind == "rz":
            if phi is None:
                raise ConfigError("rz choice needs 'phi'")
            return GateChoice("rz", (float(phi),), targets=targets or ("q",))
        if kind == "one-qubit":
            if name is not None:
                try:
                    angles = protocols.ONE_QUBIT_GATE_ANGLES[name]
                except KeyError:
                    raise ConfigError(
                        f"unknown one-qubit gate {name!r}; choose from "
                        f"{sorted(protocols.ONE_QUBIT_GATE_ANGLES)}") from None
            if angles is None or len(angles) != 3:
                raise ConfigError("one-qubit choices take a 'name' or three "
                                  "'angles'")
            return GateChoice("one-qubit", tuple(float(a) for a in angles),
                              targets=targets or ("q",))
        if kind == "intra":
            if phi is None:
                raise ConfigError("intra choice needs 'phi'")
            return GateChoice("intra", (float(phi),),
                              targets=targets or ("e", "n"))
        if kind == "distributed":
            return GateChoice("distributed", (), entangle=int(entangle),
                              targets=targets or ("e2", "n1"))
        if kind == "oracle":
            return GateChoice("oracle", (), oracle=int(oracle))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {kind} choice: {e}") from None
    raise ConfigError(f"unknown gate kind {kind!r}")


def _choice_to_dict(c: GateChoice) -> dict:
    return {"kind": c.kind, "angles": [float(a) for a in c.angles],
            "entangle": c.entangle, "oracle": c.oracle,
            "targets": list(c.targets)}


def choice_label(c: GateChoice) -> str:
    """Short stable name for summaries and CSV columns."""
    if c.kind == "rz":
        return f"rz[{c.angles[0]:.6g}]"
    if c.kind == "one-qubit":
        for name, angles in protocols.ONE_QUBIT_GATE_ANGLES.items():
            if np.allclose(angles, c.angles):
                return f"one-qubit[{name}]"
        return "one-qubit[" + ",".join(f"{a:.4g}" for a in c.angles) + "]"
    if c.kind == "intra":
        return f"intra[{c.angles[0]:.6g}]"
    if c.kind == "distributed":
        return "distributed[cz]" if c.entangle else "distributed[id]"
    return f"oracle[{c.oracle}]"


def _client_dim(c: GateChoice) -> int:
    return 4 if c.kind == "oracle" else 2 ** len(c.targets)


def _ancilla_label(c: GateChoice) -> str:
    if "e1" in c.targets:
        raise ConfigError("distributed targets may not use the reserved "
                          "ancilla label 'e1'")
    return "e1"


# -------------------------------------------------------------- noise

def _resolve_noise(spec) -> NoiseConfig:
    if spec is None or spec == "ideal":
        return noise.preset("ideal")
    if isinstance(spec, NoiseConfig):
        return spec
    if isinstance(spec, str):
        try:
            return noise.preset(spec)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if isinstance(spec, dict):
        d = dict(spec)
        try:
            if "preset" in d:
                name = d.pop("preset")
                overrides = d.pop("overrides", {})
                if d:
                    raise ConfigError(f"unknown noise fields {sorted(d)}")
                return noise.preset(name, **overrides)
            if "fields" in d:
                fields = dict(d.pop("fields"))
                if d:
                    raise ConfigError(f"unknown noise fields {sorted(d)}")
                # JSON has no infinity; a null contrast means no leakage
                if fields.get("contrast") is None:
                    fields["contrast"] = math.inf
                return NoiseConfig(**fields)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad noise spec: {e}") from None
    raise ConfigError("noise must be a preset name, a NoiseConfig, or a "
                      "mapping with 'preset' or 'fields'")


def expected_herald_rate(choice: GateChoice, cfg: NoiseConfig) -> float:
    """Per-attempt herald rate from the configured efficiency budget.

    A product of independent factors: carving survival per reflection
    chain, link transmission for photons that cross the fiber, detection
    relative to the half of the pulse the delay filter can ever accept,
    and the accepted-window fraction itself. Exact for single-photon
    sources; weak-coherent trains add carve correlations between photons
    that the product ignores, worth a couple percent at the preset pulse
    energies and growing with mu.
    """
    rb, rd = noise.reflectivities(cfg)
    carve = (abs(rb) ** 2 + abs(rd) ** 2) / 2.0
    eta_t = 1.0 if cfg.detection_eta >= 0.5 else cfg.detection_eta / 0.5
    if choice.kind in ("rz", "one-qubit", "intra"):
        mu, carves, link, accept = cfg.mu, 1, 1.0, 0.5
    elif choice.kind == "distributed":
        mu, carves, link, accept = cfg.mu, 2, cfg.link_eta, 0.5
    elif choice.kind == "oracle":
        # one train, double pulse energy, both blocks carved twice but
        # only one block's windows count
        mu, carves, link, accept = 2.0 * cfg.mu, 2, cfg.link_eta, 0.25
    else:
        raise ValueError(f"no rate model for kind {choice.kind!r}")
    p_det = carve ** carves * link * eta_t
    if mu == 0.0:
        return p_det * accept
    nu = mu * p_det
    return nu * math.exp(-nu) * accept


def _rate_factors(choice: GateChoice, cfg: NoiseConfig) -> dict:
    rb, rd = noise.reflectivities(cfg)
    carve = (abs(rb) ** 2 + abs(rd) ** 2) / 2.0
    eta_t = 1.0 if cfg.detection_eta >= 0.5 else cfg.detection_eta / 0.5
    if choice.kind in ("rz", "one-qubit", "intra"):
        mu, carves, link, accept = cfg.mu, 1, 1.0, 0.5
    elif choice.kind == "distributed":
        mu, carves, link, accept = cfg.mu, 2, cfg.link_eta, 0.5
    else:
        mu, carves, link, accept = 2.0 * cfg.mu, 2, cfg.link_eta, 0.25
    p_det = carve ** carves * link * eta_t
    source = 1.0 if mu == 0.0 else mu * math.exp(-mu * p_det)
    return {
        "source_p1": source,
        "carve_per_node": carve ** carves,
        "link": link,
        "detection": eta_t,
        "window_acceptance": accept,
        "expected_total": expected_herald_rate(choice, cfg),
    }


# -------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    """Everything a run needs, validated up front.

    protocol        a GateChoice, a mapping, or a list of them; the whole
                    list is the client's choice set and every entry runs
                    with the same shot budget
    shots           per choice (and, under tomography, per input state)
    input_state     comma-separated ket labels matching the gate targets;
                    None picks "+" per qubit, oracle runs prepare their own
    noise           preset name, NoiseConfig, or {"preset"/"fields": ...}
    mode            "auto" resolves to density-matrix except for oracle
                    runs, whose eight-bin trains are cheaper to sample
    analyses        only "tomography" for now
    checks          bound name -> threshold, evaluated into the summary
    """

    protocol: object
    shots: int
    seed: int = 0
    input_state: str = None
    noise: object = "ideal"
    mode: str = "auto"
    analyses: tuple = ()
    out_dir: str = None
    records_format: str = "csv"
    workers: int = 1
    strict: bool = False
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.protocol, (GateChoice, dict)):
            self.protocol = (self.protocol,)
        if not isinstance(self.protocol, (list, tuple)) or not self.protocol:
            raise ConfigError("protocol must be a choice or a non-empty list")
        self.protocol = tuple(_choice_from_dict(c) for c in self.protocol)

        dims = {_client_dim(c) for c in self.protocol}
        if len(dims) > 1:
            raise ConfigError("choice set mixes client dimensions "
                              f"{sorted(dims)}; leakage across it is undefined")
        for c in self.protocol:
            if c.kind == "distributed":
                _ancilla_label(c)

        if not isinstance(self.shots, int) or isinstance(self.shots, bool) \
                or self.shots < 1:
            raise ConfigError(f"shots must be a positive integer, got {self.shots!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) \
                or not 0 <= self.seed < 2 ** 63:
            raise ConfigError("seed must be an integer in [0, 2**63)")

        self.noise = _resolve_noise(self.noise)

        if self.mode == "dm":
            self.mode = "density-matrix"
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}")

        kinds = {c.kind for c in self.protocol}
        if self.input_state is not None:
            if "oracle" in kinds:
                raise ConfigError("oracle runs prepare their own input state")
            for c in self.protocol:
                toks = self.input_state.split(",")
                if len(toks) != len(c.targets):
                    raise ConfigError(
                        f"input {self.input_state!r} has {len(toks)} factor(s) "
                        f"but {choice_label(c)} acts on {len(c.targets)}")
                for t in toks:
                    if t not in KET:
                        raise ConfigError(f"unknown ket label {t!r}; "
                                          f"choose from {sorted(KET)}")

        self.analyses = tuple(self.analyses)
        for a in self.analyses:
            if a not in _ANALYSES:
                raise ConfigError(f"unknown analysis {a!r}")
        if "tomography" in self.analyses and "oracle" in kinds:
            raise ConfigError("tomography needs a fixed input register; "
                              "oracle runs prepare their own")

        if self.records_format not in _RECORD_FORMATS:
            raise ConfigError(f"records_format must be one of {_RECORD_FORMATS}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be a positive integer")

        if not isinstance(self.checks, dict):
            raise ConfigError("checks must be a mapping")
        for k, v in self.checks.items():
            if k not in _CHECK_KEYS:
                raise ConfigError(f"unknown check {k!r}; allowed: {_CHECK_KEYS}")
            if k.endswith("_band"):
                try:
                    lo, hi = (float(x) for x in v)
                except (TypeError, ValueError):
                    raise ConfigError(f"{k} takes [low, high]") from None
                if lo > hi:
                    raise ConfigError(f"{k} bounds are inverted")
            else:
                try:
                    float(v)
                except (TypeError, ValueError):
                    raise ConfigError(f"{k} takes a number") from None
        if "max_holevo_bits" in self.checks and len(self.protocol) < 2:
            raise ConfigError("max_holevo_bits needs at least two choices")
        if "min_verdict_probability" in self.checks and "oracle" not in kinds:
            raise ConfigError("min_verdict_probability needs oracle choices")

        # the photon-number cap drops the three-and-up tail; past train
        # mean 0.5 that tail stops being small against a click
        mu_train = max((2.0 if c.kind == "oracle" else 1.0) * self.noise.mu
                       for c in self.protocol)
        if mu_train > 0.5:
            msg = (f"train mean {mu_train:.3g} photons: the truncated "
                   "multi-photon tail is no longer negligible")
            if self.strict:
                raise ConfigError(msg)
            warnings.warn(msg, stacklevel=2)

    # ---- (de)serialization

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"config schema must be {CONFIG_SCHEMA!r}, "
                              f"got {schema!r}")
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "analyses" in d:
            d["analyses"] = tuple(d["analyses"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        fields = dataclasses.asdict(self.noise)
        if math.isinf(fields["contrast"]):
            fields["contrast"] = None
        return {
            "schema": CONFIG_SCHEMA,
            "protocol": [_choice_to_dict(c) for c in self.protocol],
            "shots": self.shots,
            "seed": self.seed,
            "input_state": self.input_state,
            "noise": {"fields": fields},
            "mode": self.mode,
            "analyses": list(self.analyses),
            "out_dir": str(self.out_dir) if self.out_dir else None,
            "records_format": self.records_format,
            "workers": self.workers,
            "strict": self.strict,
            "checks": dict(self.checks),
        }


def _as_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    if isinstance(config, dict):
        return ExperimentConfig.from_dict(config)
    if isinstance(config, (str, Path)):
        return ExperimentConfig.from_file(config)
    raise ConfigError("config must be an ExperimentConfig, mapping, or path")


def _resolve_mode(cfg_mode: str, choice: GateChoice) -> str:
    if cfg_mode != "auto":
        return cfg_mode
    return "trajectory" if choice.kind == "oracle" else "density-matrix"


# ----------------------------------------------------------- execution

def _default_input(choice: GateChoice):
    return None if choice.kind == "oracle" else _DEFAULT_INPUT[choice.kind]


def _target_vector(choice: GateChoice, input_str):
    if choice.kind == "oracle":
        bits = protocols.ORACLE_TARGET_BITS[choice.oracle]
        vec = np.array([1.0])
        for b in bits:
            vec = np.kron(vec, KET["-"] if b else KET["+"])
        return vec
    return ideal_gate(choice) @ ket(input_str)


def _execute_shot(choice, input_str, noise_cfg, mode, rng):
    """One protocol call with a fresh ledger; returns everything the
    accumulator needs as plain arrays."""
    led = ExposureLedger()
    proto_mode = "dm" if mode == "density-matrix" else mode
    verdict = None
    if choice.kind == "oracle":
        verdict, out = protocols.dj_algorithm(
            choice.oracle, noise=noise_cfg, rng=rng, mode=proto_mode, ledger=led)
    else:
        pairs = [(spin(l), ket(t))
                 for l, t in zip(choice.targets, input_str.split(","))]
        if choice.kind == "distributed":
            pairs.append((spin(_ancilla_label(choice)), ket("+")))
        spins = product_state(pairs)
        if choice.kind == "rz":
            out = protocols.blind_rz(spins, choice.targets[0], choice.angles[0],
                                     noise=noise_cfg, rng=rng, mode=proto_mode,
                                     ledger=led)
        elif choice.kind == "one-qubit":
            out = protocols.one_qubit_blind_gate(spins, choice.targets[0],
                                                 choice.angles, noise=noise_cfg,
                                                 rng=rng, mode=proto_mode,
                                                 ledger=led)
        elif choice.kind == "intra":
            out = protocols.intra_2qbg(spins, choice.targets[0], choice.targets[1],
                                       choice.angles[0], noise=noise_cfg, rng=rng,
                                       mode=proto_mode, ledger=led)
        else:
            out = protocols.distributed_2qbg(spins, choice.targets[0],
                                             choice.targets[1],
                                             _ancilla_label(choice),
                                             choice.entangle, noise=noise_cfg,
                                             rng=rng, mode=proto_mode, ledger=led)
    return verdict, out, led


_LEDGER_FIELDS = ("attempts", "heralds", "herald_weight", "vacuum_weight",
                  "multi_weight", "off_window_weight", "rejected_weight")


def _flat_dm(m, sep=" "):
    return sep.join(repr(float(x)) for v in np.asarray(m).reshape(-1)
                    for x in (v.real, v.imag))


class _Accumulator:
    """Weighted running statistics for one (choice, input) row."""

    def __init__(self, choice, input_str, target, dim, keep_rows,
                 keep_client_dm=False):
        self.choice = choice
        self.input = input_str
        self.target = target
        self.dim = dim
        self.keep_rows = keep_rows
        self.keep_client_dm = keep_client_dm
        self.n = 0
        self.heralded = 0
        self.sw = self.sw2 = self.swf = self.swf2 = 0.0
        self.client = np.zeros((dim, dim), dtype=complex)
        self.server = np.zeros((dim, dim), dtype=complex)
        self.by_outcome = {}
        self.verdict_weights = {}
        self.raw_bits = {}
        self.truth = (protocols.ORACLE_VERDICTS[choice.oracle]
                      if choice.kind == "oracle" else None)
        self.verdict_hits = 0.0
        self.ledger = dict.fromkeys(_LEDGER_FIELDS, 0)
        self.rows = []

    def add(self, shot, verdict, out, led):
        self.n += 1
        for f in _LEDGER_FIELDS:
            self.ledger[f] += getattr(led, f)
        if not out.heralded:
            if self.keep_rows:
                self.rows.append(self._row(shot, False, 0.0, 0.0, None,
                                           verdict, None, None, None))
            return
        self.heralded += 1
        w = sum(r.weight for r in out.records)
        rho_c = out.client_state.normalized().density()
        rho_s = out.server_state.normalized().density()
        fid = fidelity_vec(self.target, rho_c)
        self.sw += w
        self.sw2 += w * w
        self.swf += w * fid
        self.swf2 += w * fid * fid
        self.client += w * rho_c
        self.server += w * rho_s
        groups = out.details.get("server_by_outcome")
        if groups:
            for p, st in groups.items():
                prev = self.by_outcome.get(p)
                self.by_outcome[p] = st.density() if prev is None \
                    else prev + st.density()
        if self.choice.kind == "oracle":
            vw = out.details["verdict_weights"]
            for k, v in vw.items():
                self.verdict_weights[k] = self.verdict_weights.get(k, 0.0) + v
            self.verdict_hits += vw.get(self.truth, 0.0)
            for bits, v in out.details["raw_bit_weights"].items():
                self.raw_bits[bits] = self.raw_bits.get(bits, 0.0) + v
        if self.keep_rows:
            self.rows.append(self._row(shot, True, w, fid, out, verdict,
                                       rho_s, groups, rho_c))

    def _row(self, shot, heralded, w, fid, out, verdict, rho_s, groups, rho_c):
        rec = out.records[0] if out is not None and out.records else None
        sampled = out is not None and out.details.get("mode") == "trajectory"
        clicks = secret = public = ""
        if sampled and rec is not None:
            clicks = "|".join(f"{c.window}:{c.detector}" for c in rec.clicks)
            secret = "".join(str(b) for b in rec.secret_bits)
            public = "".join(str(b) for b in rec.public_bits)
        correct = "" if verdict is None else str(int(verdict == self.truth))
        raw = ""
        if out is not None and "raw_bit_weights" in out.details:
            raw = "|".join(f"{a}{c}:{v!r}" for (a, c), v in
                           sorted(out.details["raw_bit_weights"].items()))
        odm = ""
        if groups:
            odm = "|".join(
                f"{p}:{st.weight!r}:" + _flat_dm(st.normalized().density(), ",")
                for p, st in sorted(groups.items()))
        sdm = "" if rho_s is None else _flat_dm(rho_s)
        cdm = _flat_dm(rho_c) if self.keep_client_dm and rho_c is not None else ""
        return (shot, choice_label(self.choice), self.input or "",
                int(heralded), repr(float(w)), repr(float(fid)),
                clicks, secret, public, verdict or "", correct, raw, odm,
                sdm, cdm)

    # ---- reductions

    def herald_rate(self):
        att = self.ledger["attempts"]
        return self.ledger["herald_weight"] / att if att else 0.0

    def herald_rate_err(self):
        att = self.ledger["attempts"]
        if not att or self.n < 2:
            return 0.0
        mean_w = self.sw / self.n
        var_w = max(self.sw2 / self.n - mean_w ** 2, 0.0)
        return math.sqrt(var_w / self.n) * self.n / att

    def fidelity(self):
        return self.swf / self.sw if self.sw > 0 else float("nan")

    def fidelity_err(self):
        if self.sw <= 0 or self.sw2 <= 0:
            return float("nan")
        f = self.fidelity()
        var = max(self.swf2 / self.sw - f * f, 0.0)
        n_eff = self.sw ** 2 / self.sw2
        return math.sqrt(var / n_eff) if n_eff >= 1 else math.sqrt(var)

    def client_mean(self):
        return self.client / self.sw if self.sw > 0 else None

    def server_mean(self):
        return self.server / self.sw if self.sw > 0 else None


def _dm_block(m) -> dict:
    m = np.asarray(m)
    flat = []
    for v in m.reshape(-1):
        flat.append(float(v.real))
        flat.append(float(v.imag))
    return {"dim": int(m.shape[0]), "re_im": flat}


def _run_row(acc, choice, input_str, noise_cfg, mode, seed, lane, shots,
             workers, shot0=0):
    """Fill one accumulator; the merge order is fixed by shot index, so
    the float sums do not depend on the worker count."""

    def task(i):
        rng = shot_rng(seed, shot0 + i, lane)
        return _execute_shot(choice, input_str, noise_cfg, mode, rng)

    if workers == 1:
        for i in range(shots):
            verdict, out, led = task(i)
            acc.add(shot0 + i, verdict, out, led)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, (verdict, out, led) in enumerate(pool.map(task, range(shots))):
                acc.add(shot0 + i, verdict, out, led)


def _tomography(choice, cfg, lane, rows_sink):
    """Chi matrix of the heralded map by linear inversion.

    Every input replays the same per-shot noise streams; averaging the
    unnormalized outputs keeps the map linear even though the herald
    weight depends on the input.
    """
    n = len(choice.targets)
    d = 2 ** n
    labels = [",".join(t) for t in
              itertools.product(analysis.TOMO_INPUT_LABELS, repeat=n)]
    mode = _resolve_mode(cfg.mode, choice)
    keep = bool(cfg.records_format == "csv" and cfg.out_dir)
    outs = []
    basis_fids = []
    for inp in labels:
        acc = _Accumulator(choice, inp, _target_vector(choice, inp), d,
                           keep, keep_client_dm=True)
        _run_row(acc, choice, inp, cfg.noise, mode, cfg.seed, lane,
                 cfg.shots, cfg.workers)
        outs.append((acc.client / acc.n).reshape(-1))
        if set(inp.split(",")) <= {"0", "1"}:
            basis_fids.append(acc.fidelity())
        rows_sink.extend(acc.rows)

    ins = [np.outer(k, k.conj()) for k in analysis.tomography_inputs(n)]
    design = np.column_stack([r.reshape(-1) for r in ins])
    lin = np.column_stack(outs) @ np.linalg.inv(design)

    def channel(rho):
        return (lin @ np.asarray(rho, dtype=complex).reshape(-1)).reshape(d, d)

    tol = 1e-3 if mode == "density-matrix" else 5e-2
    chi = analysis.gate_set_tomography(channel, d, tol=tol)
    chi_ideal = analysis.chi_of_unitary(ideal_gate(choice))
    fp, fave = analysis.process_and_average_fidelity(chi, chi_ideal, d)

    comp = [",".join(bits) for bits in itertools.product("01", repeat=n)]
    table = analysis.truth_table(channel, [ket(s) for s in comp])

    return {
        "chi": {**_dm_block(chi.matrix),
                "process_fidelity": fp,
                "average_fidelity": fave,
                "mean_basis_fidelity": float(np.mean(basis_fids))},
        "truth_table": [[float(x) for x in row] for row in table],
    }


# --------------------------------------------------------------- runs

@dataclass
class RunSummary:
    """A finished run: the summary dict plus wall-clock timing.

    The timing never enters the serialized form, so reruns with the same
    seed produce byte-identical files.
    """

    data: dict
    wall_clock_s: float = 0.0

    def __getitem__(self, key):
        return self.data[key]

    @property
    def choices(self):
        return self.data["choices"]

    @property
    def checks_passed(self) -> bool:
        checks = self.data.get("checks")
        return checks is None or all(c["passed"] for c in checks.values())

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2,
                          allow_nan=False) + "\n"

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "summary.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunSummary":
        with open(path) as f:
            data = json.load(f)
        if data.get("schema") != SUMMARY_SCHEMA:
            raise ConfigError(f"not a {SUMMARY_SCHEMA} file: {path}")
        return cls(data)


def _ensemble_leakage(server_means, outcome_sums, raw_dists, n_choices):
    """The eavesdropper's three views of a choice set, in bits.

    Uniform priors over the choices throughout. The outcome-averaged
    figure groups the server states by the announced bits first and
    weighs each group's Holevo information by its probability, since a
    listener who heard the announcement can condition on it.
    """
    leakage = {"holevo_bits": None, "outcome_averaged_holevo_bits": None,
               "classical_bits": None}
    if n_choices < 2 or any(m is None for m in server_means):
        return leakage
    leakage["holevo_bits"] = analysis.holevo(server_means)
    keys = set().union(*(s.keys() for s in outcome_sums)) if outcome_sums else set()
    if keys and all(keys == set(s.keys()) for s in outcome_sums):
        total = sum(float(np.trace(s[k]).real)
                    for s in outcome_sums for k in keys)
        avg = 0.0
        for k in keys:
            mats = [s[k] for s in outcome_sums]
            group = sum(float(np.trace(m).real) for m in mats)
            avg += (group / total) * analysis.holevo(mats)
        leakage["outcome_averaged_holevo_bits"] = avg
    if len(raw_dists) == n_choices:
        order = sorted(set().union(*(d.keys() for d in raw_dists)))
        leakage["classical_bits"] = analysis.classical_leakage(
            [[d.get(k, 0.0) for k in order] for d in raw_dists])
    return leakage


def _evaluate_checks(checks, blocks, leakage):
    if not checks:
        return None
    results = {}
    fids = [b["fidelity"] for b in blocks]
    rates = [b["herald_rate"] for b in blocks]
    for name, bound in checks.items():
        if name == "min_fidelity":
            value, ok = min(fids), min(fids) >= float(bound)
            bound_out = float(bound)
        elif name == "fidelity_band":
            lo, hi = (float(x) for x in bound)
            value = [min(fids), max(fids)]
            ok = lo <= value[0] and value[1] <= hi
            bound_out = [lo, hi]
        elif name == "max_holevo_bits":
            value = leakage["holevo_bits"]
            ok = value is not None and value <= float(bound)
            bound_out = float(bound)
        elif name == "herald_rate_band":
            lo, hi = (float(x) for x in bound)
            value = [min(rates), max(rates)]
            ok = lo <= value[0] and value[1] <= hi
            bound_out = [lo, hi]
        else:  # min_verdict_probability
            probs = [b["verdict"]["probability"] for b in blocks
                     if b.get("verdict")]
            value, ok = min(probs), min(probs) >= float(bound)
            bound_out = float(bound)
        results[name] = {"value": value, "bound": bound_out, "passed": bool(ok)}
    return results


def run(config, out_dir=None) -> RunSummary:
    """Execute a config and reduce it to a RunSummary.

    Writes summary.json (and records.csv unless disabled) when an output
    directory is configured or passed here.
    """
    cfg = _as_config(config)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    t0 = time.perf_counter()

    blocks = []
    rows = []
    server_means = []
    outcome_sums = []
    raw_dists = []
    keep_rows = bool(cfg.records_format == "csv" and cfg.out_dir)

    for lane, choice in enumerate(cfg.protocol):
        input_str = cfg.input_state or _default_input(choice)
        dim = _client_dim(choice)
        mode = _resolve_mode(cfg.mode, choice)
        acc = _Accumulator(choice, input_str,
                           _target_vector(choice, input_str), dim, keep_rows)
        _run_row(acc, choice, input_str, cfg.noise, mode, cfg.seed, lane,
                 cfg.shots, cfg.workers)
        rows.extend(acc.rows)

        client_mean = acc.client_mean()
        server_mean = acc.server_mean()
        server_means.append(server_mean)
        outcome_sums.append(acc.by_outcome)
        block = {
            "label": choice_label(choice),
            "kind": choice.kind,
            "angles": [float(a) for a in choice.angles],
            "entangle": choice.entangle,
            "oracle": choice.oracle,
            "targets": list(choice.targets),
            "input": input_str,
            "mode": mode,
            "shots": acc.n,
            "heralded_shots": acc.heralded,
            "herald_rate": acc.herald_rate(),
            "herald_rate_err": acc.herald_rate_err(),
            "expected_herald_rate": expected_herald_rate(choice, cfg.noise),
            "fidelity": acc.fidelity(),
            "fidelity_err": acc.fidelity_err(),
            "ledger": {k: (int(v) if k in ("attempts", "heralds") else float(v))
                       for k, v in acc.ledger.items()},
        }
        if client_mean is not None:
            block["client_entropy_bits"] = von_neumann_entropy(client_mean)
            block["server_entropy_bits"] = von_neumann_entropy(server_mean)
            block["client_dm"] = _dm_block(client_mean)
            block["server_dm"] = _dm_block(server_mean)
            block["client_expectations"] = analysis.pauli_expectations(client_mean)
            block["server_expectations"] = analysis.pauli_expectations(server_mean)
        if choice.kind == "oracle":
            total = sum(acc.verdict_weights.values())
            raw_dists.append(acc.raw_bits)
            block["verdict"] = {
                "truth": acc.truth,
                "probability": acc.verdict_hits / total if total else 0.0,
                "weights": {k: float(v)
                            for k, v in sorted(acc.verdict_weights.items())},
            }
        if "tomography" in cfg.analyses:
            block.update(_tomography(choice, cfg, lane, rows))
        blocks.append(block)

    leakage = _ensemble_leakage(server_means, outcome_sums, raw_dists,
                                len(blocks))

    data = {
        "schema": SUMMARY_SCHEMA,
        "config": cfg.to_dict(),
        "choices": blocks,
        "leakage": leakage,
        "checks": _evaluate_checks(cfg.checks, blocks, leakage),
    }
    summary = RunSummary(_to_jsonable(data), time.perf_counter() - t0)

    if cfg.out_dir:
        summary.save(cfg.out_dir)
        if keep_rows:
            _write_records(Path(cfg.out_dir) / "records.csv", rows)
    return summary


def _to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        # a fidelity with zero heralded weight is undefined, not a number
        return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _write_records(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_RECORD_COLUMNS)
        w.writerows(rows)
    return path


# -------------------------------------------------------------- sweeps

def sweep(config, parameter, values, out_dir=None):
    """Rerun a config across one swept parameter.

    ``parameter`` is either "phi" (rotation angle of rz and intra
    choices) or a noise field name. Each point runs under its own
    derived seed and lands in point-NNN/ when an output directory is
    given, next to a sweep.json index. Returns [(value, RunSummary)].
    """
    base = _as_config(config)
    noise_fields = {f.name for f in dataclasses.fields(NoiseConfig)}
    if parameter == "phi":
        for c in base.protocol:
            if c.kind not in ("rz", "intra"):
                raise ConfigError("phi sweeps need rz or intra choices, "
                                  f"got {choice_label(c)}")
    elif parameter not in noise_fields:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose "
                          f"'phi' or a noise field")

    points = []
    index = []
    for i, v in enumerate(values):
        d = base.to_dict()
        d["seed"] = derive_seed(base.seed, i)
        if parameter == "phi":
            for entry in d["protocol"]:
                entry["angles"] = [float(v)]
        else:
            d["noise"]["fields"][parameter] = float(v)
        sub = f"point-{i:03d}"
        d["out_dir"] = str(Path(out_dir) / sub) if out_dir else None
        summary = run(ExperimentConfig.from_dict(d))
        points.append((v, summary))
        index.append({
            "value": float(v),
            "dir": sub if out_dir else None,
            "herald_rate": {b["label"]: b["herald_rate"]
                            for b in summary.choices},
            "fidelity": {b["label"]: b["fidelity"] for b in summary.choices},
            "holevo_bits": summary["leakage"]["holevo_bits"],
        })

    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"schema": SWEEP_SCHEMA, "parameter": parameter, "points": index}
        (out / "sweep.json").write_text(
            json.dumps(_to_jsonable(doc), sort_keys=True, indent=2) + "\n")
    return points


# ------------------------------------------------------------- reports

def _as_summary_dict(s) -> dict:
    if isinstance(s, RunSummary):
        return s.data
    if isinstance(s, dict):
        return s
    p = Path(s)
    if p.is_dir():
        p = p / "summary.json"
    return RunSummary.load(p).data


def report(summaries, out_dir) -> dict:
    """Reduce one or more summaries to three CSV tables.

    expectations.csv   per choice and side, fidelity, entropy and every
                       measured Pauli expectation
    leakage.csv        every leakage figure the runs produced, in bits
    efficiency.csv     the herald-rate budget per choice: configured
                       factors, their product, and the simulated rate
    Returns {name: path}. Empty input still writes the headers.
    """
    docs = [_as_summary_dict(s) for s in summaries]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    words = sorted({w for doc in docs for b in doc["choices"]
                    for w in b.get("client_expectations", {})},
                   key=lambda w: (len(w), w))
    path = out / "expectations.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "choice", "side", "shots", "fidelity",
                    "entropy_bits"] + words)
        for i, doc in enumerate(docs):
            for b in doc["choices"]:
                for side in ("client", "server"):
                    exp = b.get(f"{side}_expectations")
                    if exp is None:
                        continue
                    w.writerow(
                        [i, b["label"], side, b["heralded_shots"],
                         repr(float(b["fidelity"])) if side == "client" else "",
                         repr(float(b[f"{side}_entropy_bits"]))]
                        + [repr(float(exp[word])) if word in exp else ""
                           for word in words])
    paths["expectations"] = path

    path = out / "leakage.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "scope", "quantity", "bits"])
        for i, doc in enumerate(docs):
            leak = doc["leakage"]
            for scope, quantity, key in (
                    ("choices", "holevo", "holevo_bits"),
                    ("announced-outcomes", "holevo",
                     "outcome_averaged_holevo_bits"),
                    ("announced-bits", "shannon", "classical_bits")):
                if leak.get(key) is not None:
                    w.writerow([i, scope, quantity, repr(float(leak[key]))])
    paths["leakage"] = path

    factor_rows = ("source_p1", "carve_per_node", "link", "detection",
                   "window_acceptance", "expected_total", "simulated_total",
                   "simulated_err", "ratio")
    cols = []
    for i, doc in enumerate(docs):
        cfg = _resolve_noise(doc["config"]["noise"])
        for b in doc["choices"]:
            choice = GateChoice(b["kind"], tuple(b["angles"]),
                                entangle=b["entangle"], oracle=b["oracle"],
                                targets=tuple(b["targets"]))
            fac = _rate_factors(choice, cfg)
            fac["simulated_total"] = b["herald_rate"]
            fac["simulated_err"] = b["herald_rate_err"]
            fac["ratio"] = (b["herald_rate"] / fac["expected_total"]
                            if fac["expected_total"] else float("nan"))
            cols.append((f"r{i}:{b['label']}", fac))
    path = out / "efficiency.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["factor"] + [name for name, _ in cols])
        for row in factor_rows:
            w.writerow([row] + [repr(float(fac[row])) for _, fac in cols])
    paths["efficiency"] = path
    return paths


def load_expectations(path) -> analysis.ExpectationTable:
    """Read expectations.csv back into an ExpectationTable, keyed by
    (choice label, side)."""
    table = analysis.ExpectationTable()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        words = header[6:]
        for row in reader:
            key = (row[1], row[2])
            shots = int(row[3])
            for word, cell in zip(words, row[6:]):
                if cell:
                    table.add(key, word, float(cell), shots)
    return table


# ------------------------------------------------------ records files

def choice_from_label(label: str) -> GateChoice:
    """Invert choice_label. Angles survive only to their printed
    precision, which is plenty for looking up the ideal gate."""
    kind, _, rest = label.partition("[")
    rest = rest.rstrip("]")
    try:
        if kind == "rz":
            return GateChoice.rz(float(rest))
        if kind == "intra":
            return GateChoice.intra(float(rest))
        if kind == "one-qubit":
            if rest in protocols.ONE_QUBIT_GATE_ANGLES:
                return GateChoice("one-qubit",
                                  protocols.ONE_QUBIT_GATE_ANGLES[rest])
            return GateChoice.one_qubit(*(float(a) for a in rest.split(",")))
        if kind == "distributed":
            return GateChoice.distributed(1 if rest == "cz" else 0)
        if kind == "oracle":
            return GateChoice.dj_oracle(int(rest))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"cannot parse choice label {label!r}: {e}") from None
    raise ConfigError(f"cannot parse choice label {label!r}")


def _parse_dm(cell: str, sep: str = " ") -> np.ndarray:
    vals = [float(x) for x in cell.split(sep)]
    d = int(round(math.sqrt(len(vals) / 2)))
    arr = np.array(vals[0::2]) + 1j * np.array(vals[1::2])
    return arr.reshape(d, d)


def load_records(path) -> list:
    """Rows of a records.csv as dicts with numbers and matrices parsed."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(_RECORD_COLUMNS):
            raise ConfigError(f"not a records file: {path}")
        for r in reader:
            row = dict(r)
            row["shot"] = int(r["shot"])
            row["heralded"] = bool(int(r["heralded"]))
            row["weight"] = float(r["weight"])
            row["fidelity"] = float(r["fidelity"])
            row["server_dm"] = _parse_dm(r["server_dm"]) if r["server_dm"] else None
            row["client_dm"] = _parse_dm(r["client_dm"]) if r["client_dm"] else None
            if r["raw_bits"]:
                raw = {}
                for part in r["raw_bits"].split("|"):
                    bits, v = part.split(":")
                    raw[(int(bits[0]), int(bits[1]))] = float(v)
                row["raw_bits"] = raw
            else:
                row["raw_bits"] = None
            if r["outcome_dms"]:
                groups = {}
                for part in r["outcome_dms"].split("|"):
                    p, v, cells = part.split(":")
                    groups[int(p)] = float(v) * _parse_dm(cells, ",")
                row["outcome_dms"] = groups
            else:
                row["outcome_dms"] = None
            rows.append(row)
    return rows


def records_chi(path) -> dict:
    """Rebuild each choice's chi matrix from a tomography records file.

    Needs the full input set per choice; rows average exactly as the
    live reconstruction does, so on the same records this matches the
    summary's chi block.
    """
    rows = load_records(path)
    by_choice = {}
    for r in rows:
        if r["client_dm"] is not None:
            by_choice.setdefault(r["choice"], {}).setdefault(
                r["input"], []).append(r)
    out = {}
    for label, by_input in by_choice.items():
        choice = choice_from_label(label)
        n = len(choice.targets)
        d = 2 ** n
        want = [",".join(t) for t in
                itertools.product(analysis.TOMO_INPUT_LABELS, repeat=n)]
        missing = [i for i in want if i not in by_input]
        if missing:
            raise ConfigError(f"{label}: records lack tomography inputs "
                              f"{missing[:4]}{'...' if len(missing) > 4 else ''}")
        outs = []
        for inp in want:
            grp = by_input[inp]
            mean = sum(r["weight"] * r["client_dm"] for r in grp) / len(grp)
            outs.append(np.asarray(mean).reshape(-1))
        ins = [np.outer(k, k.conj()) for k in analysis.tomography_inputs(n)]
        design = np.column_stack([r.reshape(-1) for r in ins])
        lin = np.column_stack(outs) @ np.linalg.inv(design)
        chi = analysis.gate_set_tomography(
            lambda rho: (lin @ np.asarray(rho, dtype=complex).reshape(-1)
                         ).reshape(d, d), d, tol=5e-2)
        fp, fave = analysis.process_and_average_fidelity(
            chi, analysis.chi_of_unitary(ideal_gate(choice)), d)
        out[label] = {"chi": chi, "process_fidelity": fp,
                      "average_fidelity": fave}
    return out


def records_leakage(path) -> dict:
    """Recompute the summary's leakage block from a records file."""
    rows = load_records(path)
    labels = []
    server, weight, outcome_sums, raw = {}, {}, {}, {}
    for r in rows:
        lbl = r["choice"]
        if lbl not in server:
            labels.append(lbl)
            server[lbl] = 0.0
            weight[lbl] = 0.0
            outcome_sums[lbl] = {}
            raw[lbl] = None
        if not r["heralded"] or r["server_dm"] is None:
            continue
        server[lbl] = server[lbl] + r["weight"] * r["server_dm"]
        weight[lbl] += r["weight"]
        if r["outcome_dms"]:
            for p, m in r["outcome_dms"].items():
                prev = outcome_sums[lbl].get(p)
                outcome_sums[lbl][p] = m if prev is None else prev + m
        if r["raw_bits"]:
            if raw[lbl] is None:
                raw[lbl] = {}
            for bits, v in r["raw_bits"].items():
                raw[lbl][bits] = raw[lbl].get(bits, 0.0) + v
    means = [server[l] / weight[l] if weight[l] > 0 else None for l in labels]
    dists = [raw[l] for l in labels if raw[l] is not None]
    return _ensemble_leakage(means, [outcome_sums[l] for l in labels],
                             dists, len(labels))
