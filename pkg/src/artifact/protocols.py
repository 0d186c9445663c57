"""Blind gate sequences over the two-server network.

Every protocol here has the same skeleton: servers apply local microwave
pulses and reflect a time-bin photon train off their spin-cavities, the
client dials per-bin phases into the train, and a single click behind the
client's delay interferometer heralds the gate. The click (window plus
detector port) and any announced spin readouts fix a Pauli byproduct that
only the client can resolve, which is what keeps the computation hidden.

Two execution modes share one code path per protocol:

* ``dm`` keeps the exact (generally mixed) state and enumerates every
  accepted click, so a single pass produces the full heralded ensemble
  for one draw of the slow noise parameters.
* ``trajectory`` follows one pure path. Loss and detection branches are
  sampled only among outcomes that can still herald, and the discarded
  probability is folded into the state weight, so the weight's
  expectation equals the physical herald probability. That keeps
  rare-herald estimation cheap without biasing it.

States are labeled; protocols take the spin labels they act on and leave
any other subsystems untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import noise as noisemod
from .photonics import (
    ClickRecord,
    RailRegister,
    apply_loss,
    detect,
    fock_outcome_branches,
    loss_kraus,
    qudit_phase_matrix,
    single_photon,
    spin_reflection_kraus,
    tdi,
    wcs_equal_bins,
)
from .qcore import (
    PAULI,
    QuantumState,
    apply_kraus,
    apply_unitary,
    ket,
    kraus_branches,
    partial_trace,
    product_state,
    project,
    rx,
    ry,
    rz,
    spin,
    tensor,
)

__all__ = [
    "PauliFrame",
    "GateChoice",
    "ideal_gate",
    "ShotRecord",
    "ProtocolOutcome",
    "ExposureLedger",
    "Executor",
    "ONE_QUBIT_GATE_ANGLES",
    "ORACLE_TARGET_BITS",
    "ORACLE_VERDICTS",
    "spg",
    "blind_rz",
    "one_qubit_blind_gate",
    "intra_2qbg",
    "qube",
    "distributed_2qbg",
    "dj_algorithm",
    "frame_propagate",
    "deterministic_rz",
    "deterministic_2qbg",
]

TWO_PI = 2.0 * math.pi

_I2 = np.eye(2, dtype=complex)
_P0 = np.diag([1.0, 0.0]).astype(complex)
_P1 = np.diag([0.0, 1.0]).astype(complex)

# Named choices for the three-rotation single-qubit gate, angles
# (phi1, phi2, phi3) of Rz(phi3) Rx(phi2) Rz(phi1).
ONE_QUBIT_GATE_ANGLES = {
    "identity": (0.0, 0.0, 0.0),
    "hadamard": (math.pi / 2, math.pi / 2, math.pi / 2),
    "t-sqrtx-t": (math.pi / 4, math.pi / 2, math.pi / 4),
}

# Decoded (first register, memory) target bits per oracle, 0 meaning the
# +1 outcome of the final X readout after the client's classical fix-up.
ORACLE_TARGET_BITS = {1: (1, 1), 2: (1, 0), 3: (0, 1), 4: (0, 0)}
ORACLE_VERDICTS = {1: "balanced", 2: "balanced", 3: "balanced", 4: "constant"}

# oracle id -> (interferometer delay, accepted window -> pulse variant)
_ORACLE_WINDOWS = {
    1: (1, {1: "b", 3: "a"}),
    2: (1, {5: "b", 7: "a"}),
    3: (2, {2: "b", 3: "a"}),
    4: (2, {6: "b", 7: "a"}),
}

# entangling flag -> (delay, accepted window -> window bit)
_DIST_WINDOWS = {1: (1, {1: 0, 3: 1}), 0: (2, {2: 0, 3: 1})}
_DIST_PLATE = {1: (0.0, 0.0, 0.0, 0.0), 0: (0.0, 0.0, math.pi / 2, math.pi / 2)}


def _wrap(angle: float) -> float:
    return float(angle) % TWO_PI


# ------------------------------------------------------------------ frames

@dataclass
class PauliFrame:
    """Classical record of the accumulated Pauli byproduct.

    The physical state relates to the intended one by
    ``actual = prod_q Z_q^{z_exp[q]} X_q^{x_exp[q]} . intended`` up to a
    global phase. Exponents live in {0, 1}; flipping twice is the
    identity, and merging two frames adds exponents mod 2, which is the
    Pauli group modulo phases.

    ``secret_bits`` holds detector outcomes only the client sees;
    ``public_bits`` holds announced outcomes (teleport measurements,
    helper-qubit readouts). Both are append-only histories.
    """

    x_exp: dict = field(default_factory=dict)
    z_exp: dict = field(default_factory=dict)
    secret_bits: list = field(default_factory=list)
    public_bits: list = field(default_factory=list)

    @classmethod
    def fresh(cls, labels) -> "PauliFrame":
        return cls({l: 0 for l in labels}, {l: 0 for l in labels})

    def copy(self) -> "PauliFrame":
        return PauliFrame(dict(self.x_exp), dict(self.z_exp),
                          list(self.secret_bits), list(self.public_bits))

    def x(self, label) -> int:
        return self.x_exp.get(label, 0)

    def z(self, label) -> int:
        return self.z_exp.get(label, 0)

    def flip_x(self, label, n: int = 1):
        self.x_exp[label] = (self.x_exp.get(label, 0) + n) % 2

    def flip_z(self, label, n: int = 1):
        self.z_exp[label] = (self.z_exp.get(label, 0) + n) % 2

    def merge(self, later: "PauliFrame") -> "PauliFrame":
        """Frame for ``later`` applied after ``self`` (phases dropped)."""
        out = self.copy()
        for l, v in later.x_exp.items():
            out.flip_x(l, v)
        for l, v in later.z_exp.items():
            out.flip_z(l, v)
        out.secret_bits += list(later.secret_bits)
        out.public_bits += list(later.public_bits)
        return out

    @property
    def trivial(self) -> bool:
        return not (any(self.x_exp.values()) or any(self.z_exp.values()))

    def byproduct(self, label) -> np.ndarray:
        return np.linalg.matrix_power(PAULI["Z"], self.z(label)) @ \
            np.linalg.matrix_power(PAULI["X"], self.x(label))

    def correction(self, label) -> np.ndarray:
        """Inverse byproduct (X^x Z^z), equal to it up to a phase."""
        return np.linalg.matrix_power(PAULI["X"], self.x(label)) @ \
            np.linalg.matrix_power(PAULI["Z"], self.z(label))

    def correct(self, state: QuantumState) -> QuantumState:
        for l in state.layout.labels:
            if self.x(l) or self.z(l):
                state = apply_unitary(state, self.correction(l), [l])
        return state


# ------------------------------------------------------------- gate choice

_GATE_KINDS = ("rz", "one-qubit", "intra", "distributed", "oracle")


@dataclass(frozen=True)
class GateChoice:
    """One element of a client's secret choice set.

    kind       one of rz / one-qubit / intra / distributed / oracle
    angles     rotation angles, wrapped into [0, 2*pi)
    entangle   0 or 1, distributed gates only
    oracle     1..4, oracle runs only
    targets    qubit labels the gate acts on (used for frame tracking;
               for distributed gates the first target is the remote
               electron, the photon's first stop)
    """

    kind: str
    angles: tuple = ()
    entangle: int = 0
    oracle: int = 0
    targets: tuple = ()

    def __post_init__(self):
        if self.kind not in _GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "angles", tuple(_wrap(a) for a in self.angles))
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.kind == "distributed" and self.entangle not in (0, 1):
            raise ValueError("entangle must be 0 or 1")
        if self.kind == "oracle" and self.oracle not in (1, 2, 3, 4):
            raise ValueError("oracle id must be 1..4")

    @classmethod
    def rz(cls, phi, target="q"):
        return cls("rz", (phi,), targets=(target,))

    @classmethod
    def one_qubit(cls, phi1, phi2, phi3, target="q"):
        return cls("one-qubit", (phi1, phi2, phi3), targets=(target,))

    @classmethod
    def intra(cls, phi, targets=("e", "n")):
        return cls("intra", (phi,), targets=tuple(targets))

    @classmethod
    def distributed(cls, entangle, targets=("e2", "n1")):
        return cls("distributed", (), entangle=int(entangle),
                   targets=tuple(targets))

    @classmethod
    def dj_oracle(cls, index):
        return cls("oracle", (), oracle=int(index))


def ideal_gate(choice: GateChoice):
    """Noise-free unitary the client ends up with after corrections.

    Oracle runs have no target unitary; they return None.
    """
    if choice.kind == "rz":
        return rz(choice.angles[0])
    if choice.kind == "one-qubit":
        a1, a2, a3 = choice.angles
        return rz(a3) @ rx(a2) @ rz(a1)
    if choice.kind == "intra":
        p = np.exp(1j * choice.angles[0])
        return np.diag([1.0, p, p, 1.0]).astype(complex)
    if choice.kind == "distributed":
        if choice.entangle:
            return np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)
        return np.eye(4, dtype=complex)
    return None


# ------------------------------------------------------------ run records

@dataclass
class ShotRecord:
    """One heralded path: its clicks, measurement bits and end frame."""

    clicks: tuple
    secret_bits: tuple
    public_bits: tuple
    frame: PauliFrame
    weight: float = 1.0


@dataclass
class ProtocolOutcome:
    """What a protocol hands back.

    ``client_state`` is corrected with the branch frames (plus any fixed
    non-Pauli epilogue the protocol defines), ``server_state`` is the
    uncorrected mixture over all heralded branches, which is exactly the
    view of someone who saw the clicks but not the client's bits. In
    trajectory mode both hold the single sampled branch. States are
    normalized; branch weights live in ``records``.

    ``shots_consumed`` counts heralded photon passes. ``heralded`` is
    False only when a trajectory path died (no accepted click), in which
    case the states are None.
    """

    client_state: QuantumState | None
    server_state: QuantumState | None
    heralded: bool
    frame: PauliFrame
    shots_consumed: int
    records: list = field(default_factory=list)
    details: dict = field(default_factory=dict)


@dataclass
class ExposureLedger:
    """Photon accounting across a run.

    ``attempts`` counts simulated train launches; ``herald_weight`` is
    the accumulated accepted-click probability, so
    ``herald_weight / attempts`` estimates the per-attempt herald rate
    identically in both execution modes. The remaining buckets are
    per-attempt fractions of where the rest of the probability went.
    Retries that are counted analytically rather than simulated (the
    deterministic wrappers) are reported in those protocols' details,
    not here.
    """

    attempts: int = 0
    heralds: int = 0
    herald_weight: float = 0.0
    vacuum_weight: float = 0.0
    multi_weight: float = 0.0
    off_window_weight: float = 0.0
    rejected_weight: float = 0.0

    @property
    def herald_rate(self) -> float:
        return self.herald_weight / self.attempts if self.attempts else 0.0


# ------------------------------------------------------------ pure helpers

def _collapse_pure(state: QuantumState, label, vec):
    """Project a pure state on |vec> of one qubit and drop that factor.

    Returns (branch weight, reduced pure state)."""
    ax = state.layout.axis(label)
    psi = np.moveaxis(state.data.reshape(state.layout.dims), ax, 0)
    rest = np.tensordot(np.asarray(vec, dtype=complex).conj(), psi, axes=(0, 0))
    rest = rest.reshape(-1)
    w = float(np.vdot(rest, rest).real)
    return w, QuantumState(state.layout.drop([label]), rest)


def _pure_photon_mass(state: QuantumState, reg: RailRegister) -> float:
    """Weight carried by components with at least one photon."""
    ax = state.layout.axis(reg.label)
    psi = np.moveaxis(state.data.reshape(state.layout.dims), ax, 0)
    vac = psi[reg.vacuum_index()].reshape(-1)
    return state.weight - float(np.vdot(vac, vac).real)


_MEAS_VECS = {
    "z": ((0, np.array([1.0, 0.0], dtype=complex)),
          (1, np.array([0.0, 1.0], dtype=complex))),
    "x": ((0, np.array([1.0, 1.0], dtype=complex) / math.sqrt(2)),
          (1, np.array([1.0, -1.0], dtype=complex) / math.sqrt(2))),
    "y": ((0, np.array([1.0, 1.0j], dtype=complex) / math.sqrt(2)),
          (1, np.array([1.0, -1.0j], dtype=complex) / math.sqrt(2))),
}


# --------------------------------------------------------------- executor

class Executor:
    """Per-run context: one draw of the slow noise parameters.

    Pulse jitter is drawn once per driven pulse (virtual Z rotations are
    free and exact), and the interferometer lock offset once per run, so
    outcome branches within a run share the same hardware imperfections.
    The matrix factories below each consume one pulse draw; apply the
    returned matrix to every live branch.
    """

    def __init__(self, cfg=None, rng=None, mode="dm", ledger=None):
        if isinstance(cfg, str):
            cfg = noisemod.preset(cfg)
        self.cfg = cfg if cfg is not None else noisemod.preset("ideal")
        self.rng = rng if rng is not None else np.random.default_rng()
        if mode == "density-matrix":
            mode = "dm"
        if mode not in ("dm", "trajectory"):
            raise ValueError(f"unknown execution mode {mode!r}")
        self.mode = mode
        self.ledger = ledger if ledger is not None else ExposureLedger()
        self.r_bright, self.r_dark = noisemod.reflectivities(self.cfg)
        self.tdi_offset, self.tdi_imbalance = noisemod.tdi_error(self.cfg, self.rng)
        self._cond = 1.0

    # -- pulse draws

    def pulse_angle(self, nominal: float) -> float:
        return noisemod.sample_mw_angle(nominal, self.cfg, self.rng)

    def rx_matrix(self, nominal: float) -> np.ndarray:
        return rx(self.pulse_angle(nominal))

    def hadamard_matrix(self) -> np.ndarray:
        # driven as a single -pi/2 Y pulse plus a virtual Z
        return PAULI["Z"] @ ry(self.pulse_angle(-math.pi / 2))

    def cnot_matrix(self) -> np.ndarray:
        # selective pi pulse on the target; the conditional phase is
        # already absorbed by free Z corrections, so only the residual
        # over-rotation is kept
        delta = self.pulse_angle(math.pi) - math.pi
        return np.kron(_P0, _I2) + np.kron(_P1, PAULI["X"] @ rx(delta))

    def cphase_matrix(self) -> np.ndarray:
        delta = self.pulse_angle(math.pi) - math.pi
        return np.diag([1.0, 1.0, 1.0, -np.exp(1j * delta)]).astype(complex)

    def advance_tdi(self):
        # lock drift between successive heralds of one run
        self.tdi_offset = noisemod.tdi_drift_advance(
            self.cfg, self.rng, self.tdi_offset)

    def hold_noise(self, state, label):
        """Idle dephasing of a spectator spin while one heralded photonic
        stage completes: the far electron waiting out fiber transit and
        herald decision, or a nuclear register idling through the local
        photon pass."""
        p = self.cfg.hold_dephasing
        if p == 0.0:
            return state
        ops = [math.sqrt(1.0 - p) * _I2, math.sqrt(p) * PAULI["Z"]]
        return self.channel(state, ops, [label])

    # -- photon machinery

    def fresh_photon(self, n_bins: int, mu=None):
        """New train register plus its source state. A zero mean photon
        number requests an exact single photon, which also shrinks the
        register cap."""
        mu = self.cfg.mu if mu is None else mu
        if mu == 0.0:
            reg = RailRegister("ph", n_bins, 1, 1)
            amps = np.full(n_bins, 1.0 / math.sqrt(n_bins))
            return reg, single_photon(reg, amps)
        reg = RailRegister("ph", n_bins)
        return reg, wcs_equal_bins(reg, mu)

    def detection_transmission(self) -> float:
        # the quoted end-to-end efficiency includes the unavoidable half
        # from the interferometer's window split, which the click
        # postselection below realizes on its own; only the remainder is
        # applied as loss
        eta = self.cfg.detection_eta
        return 1.0 if eta >= 0.5 else eta / 0.5

    def begin_attempt(self):
        self.ledger.attempts += 1
        self._cond = 1.0

    def pick(self, weighted, total):
        r = self.rng.random() * total
        acc = 0.0
        for w, item in weighted:
            acc += w
            if r <= acc:
                return item
        return weighted[-1][1]

    def channel(self, state, ops, labels, reg=None):
        """Apply a Kraus set. In trajectory mode one branch is sampled;
        when ``reg`` is given, branches whose register went dark are
        dropped first and their probability folded into the weight."""
        if self.mode == "dm":
            return apply_kraus(state, ops, labels)
        w0 = state.weight
        branches = kraus_branches(state.normalized(), ops, labels)
        if reg is not None:
            alive = [(w, s) for w, s in branches
                     if _pure_photon_mass(s, reg) > 1e-12]
        else:
            alive = branches
        total = sum(w for w, _ in alive)
        self.ledger.vacuum_weight += self._cond * max(0.0, 1.0 - total)
        if total <= 1e-300:
            return None
        self._cond *= total
        picked = self.pick(alive, total)
        return picked.normalized().scaled(w0 * total)

    def reflect(self, state, reg, rail, spin_label):
        ops = spin_reflection_kraus(reg, rail, self.r_bright, self.r_dark)
        return self.channel(state, ops, [spin_label, reg.label], reg)

    def loss(self, state, reg, eta):
        if eta >= 1.0:
            return state
        if self.mode == "dm":
            return apply_loss(state, reg, eta)
        for ops in loss_kraus(reg, eta):
            state = self.channel(state, ops, [reg.label], reg)
            if state is None:
                return None
        return state


# ----------------------------------------------------------- branch lists

@dataclass
class _Branch:
    state: QuantumState
    frame: PauliFrame
    clicks: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def with_state(self, st):
        return _Branch(st, self.frame, self.clicks, self.tags)

    def child(self, st, click, tags):
        nb = _Branch(st, self.frame.copy(), list(self.clicks), dict(tags))
        if click is not None:
            nb.clicks.append(click)
        return nb


def _apply_all(branches, matrix, labels):
    return [b.with_state(apply_unitary(b.state, matrix, labels))
            for b in branches]


def _carve(ex, branches, reg, spin_label, pattern):
    """Run a reflection/flip pattern of one spin against the train.

    pattern entries: ("reflect", rail) reflects one bin off the
    spin-cavity; ("flip",) is a driven pi pulse on the spin, one jitter
    draw shared by all branches."""
    for op in pattern:
        if op[0] == "reflect":
            nxt = []
            for b in branches:
                st = ex.reflect(b.state, reg, op[1], spin_label)
                if st is None:
                    return []
                nxt.append(b.with_state(st))
            branches = nxt
        else:
            branches = _apply_all(branches, ex.rx_matrix(math.pi), [spin_label])
    return branches


_SPG_PATTERN = (("reflect", 0), ("flip",), ("reflect", 1), ("flip",))


def _carve_even(offset):
    # keeps the (0, 1, 1, 0) spin pattern across four bins
    o = offset
    return (("reflect", o), ("flip",), ("reflect", o + 1),
            ("reflect", o + 2), ("flip",), ("reflect", o + 3))


def _carve_alternating(offset, trailing=False):
    # keeps (1, 0, 1, 0) with the leading flip, (0, 1, 0, 1) with the
    # trailing one; four flips either way, so the spin frame is restored
    o = offset
    if trailing:
        return (("reflect", o), ("flip",), ("reflect", o + 1), ("flip",),
                ("reflect", o + 2), ("flip",), ("reflect", o + 3), ("flip",))
    return (("flip",), ("reflect", o), ("flip",), ("reflect", o + 1),
            ("flip",), ("reflect", o + 2), ("flip",), ("reflect", o + 3))


def _client_readout(ex, branches, reg, delay, plate_fn, accept):
    """Shared client chain: path loss, phase plate, delay interferometer,
    click postselection.

    ``plate_fn(branch)`` gives the per-bin phases (branch-dependent for
    adaptive stages); ``accept(window, detector)`` returns a tag dict for
    heralding clicks and None for rejected ones. Returns the surviving
    branches; the ledger picks up one attempt plus where the probability
    went, normalized to the mass entering the stage."""
    led = ex.ledger
    eta = ex.detection_transmission()
    ex.advance_tdi()

    if ex.mode == "dm":
        entering = sum(b.state.weight for b in branches)
        out = []
        accepted_mass = 0.0
        for b in branches:
            st = b.state
            if eta < 1.0:
                st = apply_loss(st, reg, eta)
            st = apply_unitary(st, qudit_phase_matrix(reg, plate_fn(b)),
                               [reg.label])
            st, win, out_reg = tdi(st, reg, delay, ex.tdi_offset,
                                   ex.tdi_imbalance)
            res = detect(st, out_reg, win)
            led.vacuum_weight += res.vacuum_weight / entering
            led.multi_weight += res.multi_weight / entering
            for rec, reduced in res.clicks:
                tags = accept(rec.window, rec.detector)
                if tags is None:
                    led.off_window_weight += reduced.weight / entering
                    continue
                out.append(b.child(reduced, rec, {**b.tags, **tags}))
                accepted_mass += reduced.weight
        led.herald_weight += accepted_mass / entering
        if out:
            led.heralds += 1
        return out

    (b,) = branches
    w0 = b.state.weight
    st = b.state.normalized()
    if eta < 1.0:
        st = ex.loss(st, reg, eta)
        if st is None:
            return []
    st = apply_unitary(st, qudit_phase_matrix(reg, plate_fn(b)), [reg.label])
    st, win, out_reg = tdi(st, reg, delay, ex.tdi_offset, ex.tdi_imbalance)
    options = []
    accepted_mass = 0.0
    for idx, w, reduced in fock_outcome_branches(st.normalized(),
                                                 out_reg.label):
        w *= ex._cond
        tup = out_reg.basis[idx]
        fired = [j for j, n in enumerate(tup) if n > 0]
        if not fired:
            led.vacuum_weight += w
            continue
        if len(fired) > 1:
            led.multi_weight += w
            continue
        window, det = win.unpack_mode(fired[0])
        tags = accept(window, det)
        if tags is None:
            led.off_window_weight += w
            continue
        rec = ClickRecord(window, det, win.kind(window), win.rails_in(window))
        options.append((w, (rec, reduced, tags)))
        accepted_mass += w
    if accepted_mass <= 1e-300:
        return []
    rec, reduced, tags = ex.pick(options, accepted_mass)
    led.herald_weight += accepted_mass
    led.heralds += 1
    nb = b.child(reduced.normalized().scaled(w0 * accepted_mass / ex._cond),
                 rec, {**b.tags, **tags})
    ex._cond = accepted_mass
    return [nb]


def _measure_spin(ex, branches, label, axis, keep=None, secret=False):
    """Projective single-spin measurement; the spin is dropped from the
    state afterwards. DM mode keeps every allowed outcome as its own
    branch; trajectory mode samples one (restricted to ``keep`` with the
    discarded mass folded into the weight). Outcomes land in tags["m"]
    and on the branch frame's bit history."""
    led = ex.ledger
    vecs = _MEAS_VECS[axis]
    out = []
    if ex.mode == "dm":
        for b in branches:
            keep_labels = [l for l in b.state.layout.labels if l != label]
            for bit, v in vecs:
                st, _ = project(b.state, np.outer(v, v.conj()), [label])
                if st.weight <= 1e-300:
                    continue
                if keep is not None and bit not in keep:
                    led.rejected_weight += st.weight
                    continue
                nb = b.child(partial_trace(st, keep_labels), None,
                             {**b.tags, "m": bit})
                (nb.frame.secret_bits if secret else nb.frame.public_bits
                 ).append(bit)
                out.append(nb)
        return out

    (b,) = branches
    w0 = b.state.weight
    snorm = b.state.normalized()
    options = []
    total = 0.0
    for bit, v in vecs:
        w, reduced = _collapse_pure(snorm, label, v)
        if w <= 1e-300:
            continue
        if keep is not None and bit not in keep:
            led.rejected_weight += ex._cond * w
            continue
        options.append((w, (bit, reduced)))
        total += w
    if total <= 1e-300:
        return []
    bit, reduced = ex.pick(options, total)
    ex._cond *= total
    nb = b.child(reduced.normalized().scaled(w0 * total), None,
                 {**b.tags, "m": bit})
    (nb.frame.secret_bits if secret else nb.frame.public_bits).append(bit)
    return [nb]


def _mixture(states) -> QuantumState:
    total = sum(s.weight for s in states)
    rho = None
    for s in states:
        m = s.density()
        rho = m if rho is None else rho + m
    return QuantumState(states[0].layout, rho / total)


def _client_view(branches, extra=None) -> QuantumState:
    """Frame-corrected mixture; ``extra`` maps labels to a fixed,
    choice-independent correction applied after the Pauli frame."""
    fixed = []
    for b in branches:
        st = b.frame.correct(b.state)
        if extra:
            for l, m in extra.items():
                st = apply_unitary(st, m, [l])
        fixed.append(st)
    return _mixture(fixed)


def _server_view(branches) -> QuantumState:
    return _mixture([b.state for b in branches])


def _records(branches) -> list:
    return [ShotRecord(tuple(b.clicks), tuple(b.frame.secret_bits),
                       tuple(b.frame.public_bits), b.frame,
                       b.state.weight) for b in branches]


def _dead(frame) -> ProtocolOutcome:
    return ProtocolOutcome(None, None, False, frame, 0)


# ------------------------------------------------------------- spin gates

def _spg_stage(ex, branches, spin_label, plate_fn):
    """One heralded photon pass against one spin: fresh two-bin train,
    carve, client readout. Clicks in the interference window herald; the
    detector port is the stage's secret bit (tags["s"])."""
    reg, photon = ex.fresh_photon(2)
    ex.begin_attempt()
    staged = [b.with_state(tensor(b.state, photon)) for b in branches]
    staged = _carve(ex, staged, reg, spin_label, _SPG_PATTERN)
    if not staged:
        return []

    def accept(window, det):
        if window != 1:
            return None
        return {"s": 0 if det > 0 else 1}

    return _client_readout(ex, staged, reg, 1, plate_fn, accept)


def spg(spins: QuantumState, spin_label, params=None, noise=None, rng=None,
        mode="dm"):
    """Single pass of the carving gate, stopping before the client optics.

    Reflect bin 0, flip the spin, reflect bin 1, flip back. With a fresh
    equal superposition train this entangles bin index with the spin:
    keeping the one-photon part of the ideal output on input
    a|0>+b|1> gives a|bin0,0> + b|bin1,1>. Returns the joint state with
    the train still attached plus a metadata dict (register, executor).

    ``params`` overrides the cavity operating point; by default the
    reflection amplitudes come from the noise configuration.
    """
    ex = Executor(noise, rng, mode)
    if params is not None:
        from .photonics import operating_point
        op = operating_point(params)
        ex.r_bright, ex.r_dark = op.r_bright, op.r_dark
    reg, photon = ex.fresh_photon(2)
    b = _Branch(tensor(spins, photon), PauliFrame.fresh(spins.layout.labels))
    out = _carve(ex, [b], reg, spin_label, _SPG_PATTERN)
    if not out:
        return None, {"register": reg, "executor": ex}
    return out[0].state, {"register": reg, "executor": ex}


def blind_rz(spins: QuantumState, spin_label, phi, frame=None, noise=None,
             rng=None, mode="dm", ledger=None) -> ProtocolOutcome:
    """Heralded hidden Rz(phi) on one spin.

    The client programs the late-bin plate phase; a click in the
    interference window applies Rz(phi - lock offset) for the sum port
    and Z times that for the difference port. The port bit stays with the
    client, so the heralded ensemble seen outside is dephased in the
    equatorial plane regardless of phi.
    """
    ex = Executor(noise, rng, mode, ledger)
    frame = frame.copy() if frame is not None else \
        PauliFrame.fresh(spins.layout.labels)
    applied = _wrap((-1) ** frame.x(spin_label) * phi)
    start = _Branch(spins, frame)
    out = _spg_stage(ex, [start], spin_label, lambda b: (0.0, applied))
    if not out:
        return _dead(frame)
    for b in out:
        s = b.tags["s"]
        b.frame.flip_z(spin_label, s)
        b.frame.secret_bits.append(s)
    return ProtocolOutcome(
        _client_view(out), _server_view(out), True,
        out[0].frame if ex.mode == "trajectory" else frame,
        1, _records(out), {"ledger": ex.ledger, "mode": ex.mode})


def one_qubit_blind_gate(spins: QuantumState, spin_label, angles,
                         frame=None, noise=None, rng=None, mode="dm",
                         ledger=None) -> ProtocolOutcome:
    """Three chained photon passes realizing Rz(p3) Rx(p2) Rz(p1).

    Driven Hadamards sit between the passes; the client flips the second
    and third plate settings by the earlier detector bits, which
    compresses the byproduct to Z^(s1+s3) X^(s2). Consumes three heralds.
    """
    if isinstance(angles, GateChoice):
        angles = angles.angles
    p1, p2, p3 = angles
    ex = Executor(noise, rng, mode, ledger)
    frame = frame.copy() if frame is not None else \
        PauliFrame.fresh(spins.layout.labels)
    # conjugate the target through the entry frame once, up front
    b1 = (-1) ** frame.x(spin_label) * p1
    b2 = (-1) ** frame.z(spin_label) * p2
    b3 = (-1) ** frame.x(spin_label) * p3

    branches = [_Branch(spins, frame.copy())]
    branches = _spg_stage(ex, branches, spin_label, lambda b: (0.0, _wrap(b1)))
    if not branches:
        return _dead(frame)
    for b in branches:
        b.tags = {"s1": b.tags["s"]}
        b.frame.secret_bits.append(b.tags["s1"])

    h = ex.hadamard_matrix()
    branches = _apply_all(branches, h, [spin_label])

    branches = _spg_stage(
        ex, branches, spin_label,
        lambda b: (0.0, _wrap((-1) ** b.tags["s1"] * b2)))
    if not branches:
        return _dead(frame)
    for b in branches:
        b.tags = {"s1": b.tags["s1"], "s2": b.tags["s"]}
        b.frame.secret_bits.append(b.tags["s2"])

    h = ex.hadamard_matrix()
    branches = _apply_all(branches, h, [spin_label])

    branches = _spg_stage(
        ex, branches, spin_label,
        lambda b: (0.0, _wrap((-1) ** b.tags["s2"] * b3)))
    if not branches:
        return _dead(frame)
    for b in branches:
        s1, s2, s3 = b.tags["s1"], b.tags["s2"], b.tags["s"]
        b.frame.secret_bits.append(s3)
        b.frame.flip_z(spin_label, (s1 + s3) % 2)
        b.frame.flip_x(spin_label, s2)

    return ProtocolOutcome(
        _client_view(branches), _server_view(branches), True,
        branches[0].frame if ex.mode == "trajectory" else frame,
        3, _records(branches), {"ledger": ex.ledger, "mode": ex.mode})


def intra_2qbg(spins: QuantumState, e_label, n_label, phi, frame=None,
               noise=None, rng=None, mode="dm", ledger=None) -> ProtocolOutcome:
    """Heralded hidden controlled-phase between two spins of one node.

    The nuclear spin is folded onto the electron with a selective CX on
    either side of a single photon pass, so the plate angle phi lands on
    the odd-parity subspace: diag(1, e^{i phi}, e^{i phi}, 1). At
    phi = pi/2 this is CZ up to S on each qubit. Byproduct Z_e^s Z_n^s.
    """
    ex = Executor(noise, rng, mode, ledger)
    frame = frame.copy() if frame is not None else \
        PauliFrame.fresh(spins.layout.labels)
    flips = (frame.x(e_label) + frame.x(n_label)) % 2
    applied = _wrap((-1) ** flips * phi)

    branches = [_Branch(spins, frame.copy())]
    branches = _apply_all(branches, ex.cnot_matrix(), [n_label, e_label])
    branches = _spg_stage(ex, branches, e_label, lambda b: (0.0, applied))
    if not branches:
        return _dead(frame)
    for b in branches:
        # the nucleus idles through the photon pass on the electron
        b.state = ex.hold_noise(b.state, n_label)
    branches = _apply_all(branches, ex.cnot_matrix(), [n_label, e_label])
    for b in branches:
        s = b.tags["s"]
        b.frame.secret_bits.append(s)
        b.frame.flip_z(e_label, s)
        b.frame.flip_z(n_label, s)

    return ProtocolOutcome(
        _client_view(branches), _server_view(branches), True,
        branches[0].frame if ex.mode == "trajectory" else frame,
        1, _records(branches), {"ledger": ex.ledger, "mode": ex.mode})


# ------------------------------------------------------- internode gates

def qube(spins: QuantumState, e1_label, e2_label, noise=None, rng=None,
         mode="dm"):
    """Carve a four-bin train against both network electrons.

    The train meets the far electron first (even pattern, keeping
    0,1,1,0), crosses the lossy link, then the near one (alternating
    pattern, keeping 1,0,1,0). On |+>|+> input the single-photon part is
    the maximally entangled bin-qudit state: with bins ordered
    |bin>|e2 e1>, (|0>|01> + |1>|10> + |2>|11> + |3>|00>)/2. Returns the
    joint state with the train attached, plus metadata.
    """
    ex = Executor(noise, rng, mode)
    reg, photon = ex.fresh_photon(4)
    b = _Branch(tensor(spins, photon), PauliFrame.fresh(spins.layout.labels))
    out = _carve(ex, [b], reg, e2_label, _carve_even(0))
    if out:
        st = ex.loss(out[0].state, reg, ex.cfg.link_eta)
        out = [] if st is None else [out[0].with_state(st)]
    if out:
        out = _carve(ex, out, reg, e1_label, _carve_alternating(0))
    if not out:
        return None, {"register": reg, "executor": ex}
    return out[0].state, {"register": reg, "executor": ex}


def distributed_2qbg(spins: QuantumState, e2_label, n1_label, e1_label,
                     entangle, frame=None, noise=None, rng=None, mode="dm",
                     ledger=None) -> ProtocolOutcome:
    """Heralded hidden two-qubit gate between the two servers.

    One four-bin train is carved by the far electron and, after the
    link, by the near one; the near electron must enter in |+> and is
    consumed (measured along Y, outcome announced). The client's secret
    is the entangle flag: it selects the plate pattern and the
    interferometer delay, and the corrected result is CZ (entangle=1) or
    the identity (entangle=0) on (e2, n1), both up to the same fixed
    S^dagger on e2 applied with the corrections. Either way the servers
    see the same diagonal-projected mixture.

    Byproducts, with s1 the detector port, s2 the window bit and p the
    announced Y outcome: Z_e2^(s1+p+s2) Z_n1^(s2) when entangling,
    Z_e2^(s1+s2) Z_n1^(s2) when not.

    Because p is announced, eavesdropping is judged inside each p group;
    details["server_by_outcome"] maps p to its unnormalized server-side
    mixture (trajectory mode holds only the sampled p).
    """
    entangle = int(entangle)
    ex = Executor(noise, rng, mode, ledger)
    frame = frame.copy() if frame is not None else \
        PauliFrame.fresh(spins.layout.labels)

    branches = _dist_attempt(ex, [_Branch(spins, frame.copy())],
                             e2_label, n1_label, e1_label, entangle)
    if not branches:
        return _dead(frame)

    groups = {}
    for b in branches:
        groups.setdefault(b.frame.public_bits[-1], []).append(b.state)
    by_outcome = {p: _mixture(sts).scaled(sum(s.weight for s in sts))
                  for p, sts in groups.items()}

    for b in branches:
        b.frame.flip_z(e2_label, b.tags["alpha"])
        b.frame.flip_z(n1_label, b.tags["beta"])
        # entry frame conjugated through the corrected target
        if entangle:
            b.frame.flip_z(e2_label, (frame.x(e2_label) + frame.x(n1_label)) % 2)
            b.frame.flip_z(n1_label, frame.x(e2_label))
        else:
            b.frame.flip_z(e2_label, frame.x(e2_label))

    s_dag = np.diag([1.0, -1.0j]).astype(complex)
    return ProtocolOutcome(
        _client_view(branches, extra={e2_label: s_dag}),
        _server_view(branches), True,
        branches[0].frame if ex.mode == "trajectory" else frame,
        1, _records(branches),
        {"ledger": ex.ledger, "mode": ex.mode,
         "server_by_outcome": by_outcome})


def dj_algorithm(oracle, noise=None, rng=None, mode="dm", ledger=None):
    """Two-qubit hidden oracle evaluation across the link.

    One eight-bin train carries two four-bin blocks. The far electron
    carves both with the even pattern; at the near server the first
    block is carved with the alternating pattern, a selective CX from
    the memory follows, and the second block is carved with the
    trailing-flip variant. The oracle index is the client's secret: it
    picks the interferometer delay and which block's windows count, so
    outsiders can at most tell the delay pair {1,2} from {3,4} apart.

    The helper electron is read along X and only the minus outcome is
    kept (rejected mass is ledgered). Both servers then read their
    qubits along X and announce. The client corrects the far bit with
    the detector port, x_e2 xor s1, and calls the function constant
    exactly when both corrected bits are 0.

    Returns (verdict, ProtocolOutcome). In dm mode the verdict is the
    highest-weight one; details["verdict_weights"] has the split,
    details["bit_weights"] the decoded joint distribution, and
    details["raw_bit_weights"] the distribution as announced, before
    the client's fix-up, which is all an outsider ever sees.
    """
    if isinstance(oracle, GateChoice):
        oracle = oracle.oracle
    if oracle not in _ORACLE_WINDOWS:
        raise ValueError("oracle index must be 1..4")
    ex = Executor(noise, rng, mode, ledger)
    delay, windows = _ORACLE_WINDOWS[oracle]

    spins = product_state([(spin("e2"), ket("+")), (spin("e1"), ket("+")),
                           (spin("n1"), ket("+"))])
    frame = PauliFrame.fresh(["e2", "e1", "n1"])
    # two blocks of the per-qudit pulse energy ride on one train
    reg, photon = ex.fresh_photon(8, mu=2 * ex.cfg.mu)
    ex.begin_attempt()
    branches = [_Branch(tensor(spins, photon), frame.copy())]

    branches = _carve(ex, branches, reg, "e2", _carve_even(0) + _carve_even(4))
    if branches and ex.cfg.link_eta < 1.0:
        if ex.mode == "trajectory":
            st = ex.loss(branches[0].state, reg, ex.cfg.link_eta)
            branches = [] if st is None else [branches[0].with_state(st)]
        else:
            branches = [b.with_state(apply_loss(b.state, reg, ex.cfg.link_eta))
                        for b in branches]
    if branches:
        branches = _carve(ex, branches, reg, "e1", _carve_alternating(0))
    if branches:
        branches = _apply_all(branches, ex.cnot_matrix(), ["n1", "e1"])
        branches = _carve(ex, branches, reg, "e1",
                          _carve_alternating(4, trailing=True))
    if not branches:
        return None, _dead(frame)

    def accept(window, det):
        if window not in windows:
            return None
        return {"s1": 0 if det > 0 else 1, "variant": windows[window]}

    branches = _client_readout(ex, branches, reg, delay,
                               lambda b: (0.0,) * 8, accept)
    if not branches:
        return None, _dead(frame)
    for b in branches:
        b.state = ex.hold_noise(b.state, "e2")
        b.frame.secret_bits.append(b.tags["s1"])
        b.frame.flip_z("e2", b.tags["s1"])
        b.tags = {"s1": b.tags["s1"], "variant": b.tags["variant"]}

    branches = _measure_spin(ex, branches, "e1", "x", keep={1})
    if not branches:
        return None, _dead(frame)

    client_state = _client_view(branches)
    server_state = _server_view(branches)
    records = _records(branches)

    # X readout of both computational qubits, announced; enumerate the
    # four outcomes per branch instead of splitting the states further
    plus = np.outer(_MEAS_VECS["x"][0][1], _MEAS_VECS["x"][0][1].conj())
    minus = np.outer(_MEAS_VECS["x"][1][1], _MEAS_VECS["x"][1][1].conj())
    proj = {0: plus, 1: minus}
    bit_weights = {}
    raw_bit_weights = {}
    for b in branches:
        s1 = b.frame.secret_bits[-1]
        for a in (0, 1):
            for c in (0, 1):
                stp, _ = project(b.state, proj[a], ["e2"])
                stp, _ = project(stp, proj[c], ["n1"])
                decoded = (a ^ s1, c)
                bit_weights[decoded] = bit_weights.get(decoded, 0.0) + stp.weight
                raw_bit_weights[(a, c)] = \
                    raw_bit_weights.get((a, c), 0.0) + stp.weight
    total = sum(bit_weights.values())
    verdict_weights = {"constant": 0.0, "balanced": 0.0}
    for bits, w in bit_weights.items():
        verdict_weights["constant" if bits == (0, 0) else "balanced"] += w

    if ex.mode == "trajectory":
        picked = ex.pick([(w, bits) for bits, w in bit_weights.items()], total)
        verdict = "constant" if picked == (0, 0) else "balanced"
        details = {"ledger": ex.ledger, "mode": ex.mode, "oracle": oracle,
                   "decoded_bits": picked,
                   "verdict_weights": verdict_weights,
                   "bit_weights": bit_weights,
                   "raw_bit_weights": raw_bit_weights}
        out_frame = branches[0].frame
    else:
        verdict = max(verdict_weights, key=verdict_weights.get)
        details = {"ledger": ex.ledger, "mode": ex.mode, "oracle": oracle,
                   "verdict_weights": verdict_weights,
                   "bit_weights": bit_weights,
                   "raw_bit_weights": raw_bit_weights}
        out_frame = frame
    outcome = ProtocolOutcome(client_state, server_state, True, out_frame,
                              1, records, details)
    return verdict, outcome


# -------------------------------------------------------- frame algebra

def frame_propagate(frame: PauliFrame, gate, targets=None, angles=None):
    """Push a frame through a gate the client intends to apply next.

    Returns (frame afterwards, angles to actually use). Rotations keep
    the frame and flip angles; Clifford gates rewrite the frame and keep
    them. ``gate`` is a GateChoice or one of "rz", "rx", "h", "s", "cz",
    "s1s2cz" with explicit targets.
    """
    if isinstance(gate, GateChoice):
        kind = gate.kind
        targets = targets if targets is not None else gate.targets
        angles = angles if angles is not None else gate.angles
        extra = gate.entangle
    else:
        kind = gate
        extra = None
    if targets is None:
        raise ValueError("targets required")
    angles = tuple(angles or ())
    out = frame.copy()

    if kind == "rz":
        t = targets[0]
        return out, (_wrap((-1) ** out.x(t) * angles[0]),)
    if kind == "rx":
        t = targets[0]
        return out, (_wrap((-1) ** out.z(t) * angles[0]),)
    if kind == "one-qubit":
        t = targets[0]
        sx, sz = (-1) ** out.x(t), (-1) ** out.z(t)
        return out, (_wrap(sx * angles[0]), _wrap(sz * angles[1]),
                     _wrap(sx * angles[2]))
    if kind == "intra":
        a, b = targets
        s = (-1) ** ((out.x(a) + out.x(b)) % 2)
        return out, (_wrap(s * angles[0]),)
    if kind == "h":
        t = targets[0]
        out.x_exp[t], out.z_exp[t] = out.z(t), out.x(t)
        return out, angles
    if kind == "s":
        t = targets[0]
        out.flip_z(t, out.x(t))
        return out, angles
    if kind == "cz":
        a, b = targets
        out.flip_z(a, out.x(b))
        out.flip_z(b, out.x(a))
        return out, angles
    if kind == "s1s2cz":
        a, b = targets
        out.flip_z(a, (out.x(a) + out.x(b)) % 2)
        out.flip_z(b, (out.x(a) + out.x(b)) % 2)
        return out, angles
    if kind == "distributed":
        a, b = targets
        if extra:
            out.flip_z(a, (out.x(a) + out.x(b)) % 2)
            out.flip_z(b, out.x(a))
        else:
            out.flip_z(a, out.x(a))
        return out, angles
    raise ValueError(f"cannot propagate through {kind!r}")


# ------------------------------------------------- deterministic wrappers

def _geometric_attempts(ex, stage_mass) -> float:
    """Launches needed for one herald. Trajectory mode samples the count
    at the realized per-launch probability; dm mode reports the mean."""
    if stage_mass <= 0.0:
        return math.inf
    if ex.mode == "trajectory":
        if stage_mass >= 1.0:
            return 1.0
        return float(ex.rng.geometric(stage_mass))
    return 1.0 / stage_mass


def _condition_on_herald(branches, before):
    """Retry-until-click makes a heralded stage trace preserving: scale
    the survivors back up to the mass that entered the round."""
    after = sum(b.state.weight for b in branches)
    if after <= 0.0:
        return branches
    f = before / after
    return [b.with_state(b.state.scaled(f)) for b in branches]


def deterministic_rz(spins: QuantumState, memory, ancilla, phi, frame=None,
                     noise=None, rng=None, mode="dm", ledger=None,
                     max_rounds=8):
    """Repeat-until-success hidden Rz(phi) on a long-lived memory.

    Each round spends one herald on a fresh |+> ancilla, folds it onto
    the memory with a selective CX and measures it out. Outcome 0
    finishes; outcome 1 applied the inverse rotation, so the next round
    targets twice the angle. The failure weight after n rounds is
    exactly 2^-n when noise is off. ``ancilla`` is a label created here;
    it must not already be in the state.

    Returns (ProtocolOutcome, rounds used). details carries "attempts"
    (launches including unsimulated retries), "rounds" and the residual
    "failure_weight".
    """
    if ancilla in spins.layout.labels:
        raise ValueError("ancilla label already present; it is created here")
    ex = Executor(noise, rng, mode, ledger)
    frame = frame.copy() if frame is not None else \
        PauliFrame.fresh(spins.layout.labels)
    base = (-1) ** frame.x(memory) * phi

    live = [_Branch(spins, frame.copy())]
    done = []
    attempts = 0.0
    rounds = 0
    for k in range(max_rounds):
        rounds = k + 1
        angle = _wrap(base * 2 ** k)
        entering = sum(b.state.weight for b in live)
        staged = [b.with_state(tensor(b.state, product_state(
            [(spin(ancilla), ket("+"))]))) for b in live]
        before = ex.ledger.herald_weight
        staged = _spg_stage(ex, staged, ancilla, lambda b: (0.0, angle))
        attempts += _geometric_attempts(
            ex, ex.ledger.herald_weight - before)
        if not staged:
            return _dead(frame), rounds
        staged = _condition_on_herald(staged, entering)
        for b in staged:
            b.frame.secret_bits.append(b.tags["s"])
            b.frame.flip_z(memory, b.tags["s"])
        staged = _apply_all(staged, ex.cnot_matrix(), [memory, ancilla])
        staged = _measure_spin(ex, staged, ancilla, "z")
        live = []
        for b in staged:
            if b.tags["m"] == 0:
                done.append(b)
            else:
                live.append(b)
        if not live:
            break
    failure = sum(b.state.weight for b in live)
    if not done:
        out = _dead(frame)
        out.details = {"attempts": attempts, "rounds": rounds,
                       "failure_weight": failure, "ledger": ex.ledger}
        return out, rounds

    outcome = ProtocolOutcome(
        _client_view(done), _server_view(done), True,
        done[0].frame if ex.mode == "trajectory" else frame,
        rounds, _records(done),
        {"attempts": attempts, "rounds": rounds, "failure_weight": failure,
         "ledger": ex.ledger, "mode": ex.mode})
    return outcome, rounds


def deterministic_2qbg(spins: QuantumState, memories, ancillas, choice,
                       frame=None, noise=None, rng=None, mode="dm",
                       ledger=None, max_rounds=8):
    """Teleport a heralded two-qubit gate onto two memories.

    The heralded gate runs on freshly prepared |+>|+> ancillas (created
    here; the labels must be new); selective CX gates fold them onto the
    memories and both ancillas are measured out. For the distributed
    gate and for the local gate at phi = pi/2 every measurement result
    is fixed by Pauli frame updates, so one herald suffices; at other
    angles the odd parity result inverts the phase and the round is
    retried with a doubled angle. The frame stays of the matched-Z form
    for the local gate and splits into independent Z bits for the
    distributed one.

    Returns (ProtocolOutcome, rounds used).
    """
    m1, m2 = memories
    a1, a2 = ancillas
    for a in ancillas:
        if a in spins.layout.labels:
            raise ValueError("ancilla labels are created here")
    if isinstance(choice, (int, float)):
        raise TypeError("choice must be a GateChoice")
    ex = Executor(noise, rng, mode, ledger)
    frame = frame.copy() if frame is not None else \
        PauliFrame.fresh(spins.layout.labels)
    s_dag = np.diag([1.0, -1.0j]).astype(complex)

    if choice.kind == "intra":
        base = (-1) ** ((frame.x(m1) + frame.x(m2)) % 2) * choice.angles[0]
        # pi/2 odd-parity phases flip to their inverse under Z x Z, so the
        # wrong teleport parity is repairable instead of retried
        clifford = abs(math.remainder(2 * choice.angles[0], TWO_PI)) > \
            math.pi - 1e-9
    elif choice.kind == "distributed":
        base = None
        clifford = True
    else:
        raise ValueError("choice must be an intra or distributed gate")

    live = [_Branch(spins, frame.copy())]
    done = []
    attempts = 0.0
    rounds = 0
    helper = a1 + ".c"
    for k in range(max_rounds):
        rounds = k + 1
        entering = sum(b.state.weight for b in live)
        fresh = product_state([(spin(a1), ket("+")), (spin(a2), ket("+"))])
        staged = [b.with_state(tensor(b.state, fresh)) for b in live]
        before = ex.ledger.herald_weight

        if choice.kind == "intra":
            angle = _wrap(base * 2 ** k)
            staged = _apply_all(staged, ex.cnot_matrix(), [a2, a1])
            staged = _spg_stage(ex, staged, a1, lambda b: (0.0, angle))
            attempts += _geometric_attempts(
                ex, ex.ledger.herald_weight - before)
            if not staged:
                return _dead(frame), rounds
            staged = _condition_on_herald(staged, entering)
            staged = _apply_all(staged, ex.cnot_matrix(), [a2, a1])
            for b in staged:
                b.frame.secret_bits.append(b.tags["s"])
                b.tags = {"s": b.tags["s"]}
        else:
            with_helper = [b.with_state(tensor(b.state, product_state(
                [(spin(helper), ket("+"))]))) for b in staged]
            # run the heralded internode gate inline on the ancillas
            sub = _dist_attempt(ex, with_helper, a1, a2, helper,
                                choice.entangle)
            attempts += _geometric_attempts(
                ex, ex.ledger.herald_weight - before)
            if not sub:
                return _dead(frame), rounds
            staged = _condition_on_herald(sub, entering)

        staged = _apply_all(staged, ex.cnot_matrix(), [m1, a1])
        staged = _apply_all(staged, ex.cnot_matrix(), [m2, a2])
        staged = _measure_spin(ex, staged, a1, "z")
        staged = _measure_spin(ex, staged, a2, "z")

        live = []
        for b in staged:
            k1, k2 = b.frame.public_bits[-2:]
            if choice.kind == "intra":
                s = b.tags["s"]
                par = k1 ^ k2
                if par == 0 or clifford:
                    b.frame.flip_z(m1, (s + par) % 2)
                    b.frame.flip_z(m2, (s + par) % 2)
                    done.append(b)
                else:
                    b.frame.flip_z(m1, s)
                    b.frame.flip_z(m2, s)
                    live.append(b)
            else:
                alpha, beta = b.tags["alpha"], b.tags["beta"]
                if choice.entangle:
                    b.frame.flip_z(m1, (alpha + (k1 ^ k2)) % 2)
                    b.frame.flip_z(m2, (beta + k1) % 2)
                else:
                    # the second teleport outcome is uniform noise here:
                    # its ancilla never entangles, so only the first
                    # parity feeds back
                    b.frame.flip_z(m1, (alpha + k1) % 2)
                    b.frame.flip_z(m2, beta)
                done.append(b)
        if not live:
            break

    failure = sum(b.state.weight for b in live)
    if not done:
        out = _dead(frame)
        out.details = {"attempts": attempts, "rounds": rounds,
                       "failure_weight": failure, "ledger": ex.ledger}
        return out, rounds

    extra = None
    if choice.kind == "distributed":
        # entry frame through the corrected target on the memories
        for b in done:
            if choice.entangle:
                b.frame.flip_z(m1, (frame.x(m1) + frame.x(m2)) % 2)
                b.frame.flip_z(m2, frame.x(m1))
            else:
                b.frame.flip_z(m1, frame.x(m1))
        extra = {m1: s_dag}

    outcome = ProtocolOutcome(
        _client_view(done, extra=extra), _server_view(done), True,
        done[0].frame if ex.mode == "trajectory" else frame,
        rounds, _records(done),
        {"attempts": attempts, "rounds": rounds, "failure_weight": failure,
         "ledger": ex.ledger, "mode": ex.mode})
    return outcome, rounds


def _dist_attempt(ex, branches, e2_label, n1_label, e1_label, entangle):
    """Internode gate body shared by the heralded and teleported forms.

    Expects the helper already in |+>. Tags surviving branches with the
    accumulated Z exponents ("alpha" on the far qubit, "beta" on the
    near one) and folds the helper's Y outcome into them.
    """
    delay, windows = _DIST_WINDOWS[entangle]
    plate = _DIST_PLATE[entangle]
    reg, photon = ex.fresh_photon(4)
    ex.begin_attempt()
    staged = [b.with_state(tensor(b.state, photon)) for b in branches]
    staged = _carve(ex, staged, reg, e2_label, _carve_even(0))
    if staged and ex.cfg.link_eta < 1.0:
        if ex.mode == "trajectory":
            st = ex.loss(staged[0].state, reg, ex.cfg.link_eta)
            staged = [] if st is None else [staged[0].with_state(st)]
        else:
            staged = [b.with_state(apply_loss(b.state, reg, ex.cfg.link_eta))
                      for b in staged]
    if staged:
        staged = _carve(ex, staged, reg, e1_label, _carve_alternating(0))
    if not staged:
        return []

    def accept(window, det):
        if window not in windows:
            return None
        return {"s1": 0 if det > 0 else 1, "s2": windows[window]}

    staged = _client_readout(ex, staged, reg, delay, lambda b: plate, accept)
    if not staged:
        return []

    cz = ex.cphase_matrix()
    for b in staged:
        st = ex.hold_noise(b.state, e2_label)
        st = apply_unitary(st, cz, [e1_label, n1_label])
        b.state = apply_unitary(st, PAULI["Z"], [n1_label])
        b.frame.secret_bits += [b.tags["s1"], b.tags["s2"]]
    staged = _measure_spin(ex, staged, e1_label, "y")
    for b in staged:
        s1, s2 = b.frame.secret_bits[-2:]
        p = b.frame.public_bits[-1]
        alpha = (s1 + p + s2) % 2 if entangle else (s1 + s2) % 2
        b.tags = {"alpha": alpha, "beta": s2, "s1": s1, "s2": s2}
    return staged
