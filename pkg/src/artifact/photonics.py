"""Photonic rails, cavity reflection and interferometric readout.

Time-bin photons live in a register of rails (one rail per time bin) with a
hard cap on total photon number. Everything that happens to them is one of:

* linear optics (beam splitters, the readout interferometer) built by
  lifting a mode matrix into the truncated Fock space,
* per-rail phase shifts programmed by the client,
* attenuation, either unconditional (fibre and detector losses) or
  conditioned on a spin state (reflection off a single-spin cavity),
* photon detection with non-number-resolving click detectors.

The register enters a qcore layout as a single entry; its dimension is the
count of occupation tuples below the cap, so an eight-bin train at two
photons total stays at 45 photonic basis states instead of 3^8.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product as iproduct
import math

import numpy as np

from . import qcore
from .qcore import QuantumState, Subsystem


def fock_basis(n_rails: int, n_max: int, total_max: int):
    """Occupation tuples, lexicographic, total photon number capped.

    Built recursively with the cap pruned per prefix; the naive product
    scan is 3^n for two-photon truncation and chokes past a dozen rails.
    """
    out = []
    tup = [0] * n_rails

    def fill(pos, left):
        if pos == n_rails:
            out.append(tuple(tup))
            return
        for n in range(min(n_max, left) + 1):
            tup[pos] = n
            fill(pos + 1, left - n)
        tup[pos] = 0

    fill(0, total_max)
    return out


class RailRegister:
    """A block of time-bin rails sharing one truncated Fock space."""

    def __init__(self, label: str, n_rails: int, n_max: int = 2,
                 total_max: int = 2):
        if n_max != total_max:
            # unequal caps would leak probability through beam splitters
            raise ValueError("per-rail and total caps must agree")
        self.label = label
        self.n_rails = n_rails
        self.n_max = n_max
        self.total_max = total_max
        self.basis = fock_basis(n_rails, n_max, total_max)
        self.index = {tup: i for i, tup in enumerate(self.basis)}
        self.dim = len(self.basis)

    def subsystem(self) -> Subsystem:
        return Subsystem(self.label, "rails", self.dim,
                         (self.n_rails, self.n_max, self.total_max))

    def vacuum_index(self) -> int:
        return self.index[(0,) * self.n_rails]

    def number_diagonal(self) -> np.ndarray:
        return np.array([sum(t) for t in self.basis], dtype=float)

    def __repr__(self):
        return f"RailRegister({self.label}, rails={self.n_rails}, dim={self.dim})"


# ---------------------------------------------------------------- sources

def vacuum(reg: RailRegister) -> QuantumState:
    v = np.zeros(reg.dim, dtype=complex)
    v[reg.vacuum_index()] = 1.0
    return QuantumState(qcore.SubsystemLayout([reg.subsystem()]), v)


def single_photon(reg: RailRegister, amps) -> QuantumState:
    """One photon in a superposition over rails."""
    amps = np.asarray(amps, dtype=complex)
    if amps.shape != (reg.n_rails,):
        raise ValueError("need one amplitude per rail")
    amps = amps / np.linalg.norm(amps)
    v = np.zeros(reg.dim, dtype=complex)
    for j in range(reg.n_rails):
        tup = tuple(1 if i == j else 0 for i in range(reg.n_rails))
        v[reg.index[tup]] = amps[j]
    return QuantumState(qcore.SubsystemLayout([reg.subsystem()]), v)


def make_wcs(reg: RailRegister, alphas) -> QuantumState:
    """Weak coherent pulse train: product of coherent states, one per rail,
    truncated at the register cap.

    The kept weight is slightly below one; the dropped tail (three photons
    and up) is below 3e-3 of a click even at the largest pulse energies used
    here, and is accounted as loss.
    """
    alphas = np.asarray(alphas, dtype=complex)
    if alphas.shape != (reg.n_rails,):
        raise ValueError("need one amplitude per rail")
    mu = float(np.sum(np.abs(alphas) ** 2))
    v = np.zeros(reg.dim, dtype=complex)
    for tup in reg.basis:
        amp = np.exp(-mu / 2)
        for a, n in zip(alphas, tup):
            amp *= a ** n / math.sqrt(math.factorial(n))
        v[reg.index[tup]] = amp
    return QuantumState(qcore.SubsystemLayout([reg.subsystem()]), v)


def wcs_equal_bins(reg: RailRegister, mu: float) -> QuantumState:
    """The standard source: mean photon number mu split evenly over rails."""
    a = math.sqrt(mu / reg.n_rails)
    return make_wcs(reg, [a] * reg.n_rails)


def total_photons(state: QuantumState, label: str) -> float:
    """Expected photon number in a register (weight-normalized)."""
    reg_dim = state.layout.entry(label).dim
    meta = state.layout.entry(label).meta
    basis = fock_basis(*meta)
    diag = np.array([sum(t) for t in basis])
    full = np.zeros(reg_dim)
    full[: len(diag)] = diag
    op = np.diag(full.astype(complex))
    return qcore.expectation(state, qcore.Observable(op, (label,)))


# ------------------------------------------------------------------ cavity

@dataclass(frozen=True)
class CavityParams:
    """One-sided cavity with a single spin. Rates in angular GHz; the two
    spin states are modelled as coupled (g) and uncoupled (g = 0)."""

    g: float = 2.078460969082653          # sqrt(2 * kappa_tot * gamma_spin)
    kappa_in: float = 12.0798             # 0.55925 * kappa_tot
    kappa_tot: float = 21.6
    gamma: float = 0.1
    omega_c: float = 0.0
    omega_spin: float = 0.0

    @property
    def cooperativity(self) -> float:
        return 4 * self.g ** 2 / (self.kappa_tot * self.gamma)


def reflection_coeff(params: CavityParams, omega: float,
                     coupled: bool = True) -> complex:
    """Steady-state reflection amplitude at probe frequency omega."""
    chi = 0.0
    if coupled:
        chi = params.g ** 2 / (1j * (omega - params.omega_spin) + params.gamma)
    return 1.0 - 2.0 * params.kappa_in / (
        1j * (omega - params.omega_c) + params.kappa_tot + chi
    )


@dataclass(frozen=True)
class OperatingPoint:
    omega: float
    r_bright: complex
    r_dark: complex

    @property
    def contrast(self) -> float:
        return float(abs(self.r_bright / self.r_dark) ** 2)


def operating_point(params: CavityParams = CavityParams(),
                    min_bright: float = 0.35,
                    span: float = 8.0, points: int = 16001) -> OperatingPoint:
    """Scan probe frequency for the best bright/dark reflectivity contrast
    subject to the bright state keeping at least min_bright reflectivity."""
    grid = np.linspace(params.omega_c - span, params.omega_c + span, points)
    rb = np.array([reflection_coeff(params, w, True) for w in grid])
    rd = np.array([reflection_coeff(params, w, False) for w in grid])
    ok = np.abs(rb) ** 2 >= min_bright
    if not ok.any():
        raise ValueError("no frequency meets the bright reflectivity floor")
    contrast = np.where(ok, np.abs(rb / rd) ** 2, -np.inf)
    i = int(np.argmax(contrast))
    return OperatingPoint(float(grid[i]), complex(rb[i]), complex(rd[i]))


# ------------------------------------------------------------ attenuation

def attenuation_kraus(reg: RailRegister, rail: int, amplitude: complex):
    """Kraus set for a single rail seeing amplitude transmission r
    (|r| <= 1). Element k removes k photons; index 0 is lossless."""
    r = complex(amplitude)
    lost_frac = 1.0 - abs(r) ** 2
    if lost_frac < 0:
        raise ValueError("transmission amplitude above one")
    ops = []
    for k in range(reg.n_max + 1):
        mat = np.zeros((reg.dim, reg.dim), dtype=complex)
        for tup, col in reg.index.items():
            n = tup[rail]
            if n < k:
                continue
            kept = list(tup)
            kept[rail] = n - k
            row = reg.index[tuple(kept)]
            mat[row, col] = (
                math.sqrt(math.comb(n, k))
                * r ** (n - k)
                * lost_frac ** (k / 2.0)
            )
        ops.append(mat)
    return ops


def loss_kraus(reg: RailRegister, eta: float, rails=None):
    """Uniform power transmission eta over the given rails (all by default).
    Returns a list of Kraus sets, one per rail, to apply in sequence."""
    if rails is None:
        rails = range(reg.n_rails)
    amp = math.sqrt(eta)
    return [attenuation_kraus(reg, j, amp) for j in rails]


def apply_loss(state: QuantumState, reg: RailRegister, eta: float,
               rails=None) -> QuantumState:
    if eta >= 1.0:
        return state
    for ops in loss_kraus(reg, eta, rails):
        state = qcore.apply_kraus(state, ops, [reg.label])
    return state


def spin_reflection_kraus(reg: RailRegister, rail: int, r_up: complex,
                          r_down: complex):
    """Reflection of one rail off a spin-cavity: the spin's two states see
    different complex reflection amplitudes, unreflected light is lost.

    Operators act on (spin, register) in that label order.
    """
    up = np.diag([1.0, 0.0]).astype(complex)
    dn = np.diag([0.0, 1.0]).astype(complex)
    k_up = attenuation_kraus(reg, rail, r_up)
    k_dn = attenuation_kraus(reg, rail, r_down)
    return [np.kron(up, ku) + np.kron(dn, kd) for ku, kd in zip(k_up, k_dn)]


def qudit_phase_matrix(reg: RailRegister, phases) -> np.ndarray:
    """Client-side programmable phase: rail j picks up e^{i phases[j]} per
    photon. This is the knob that selects the measurement basis."""
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (reg.n_rails,):
        raise ValueError("need one phase per rail")
    diag = np.array(
        [np.exp(1j * float(np.dot(tup, phases))) for tup in reg.basis]
    )
    return np.diag(diag)


# -------------------------------------------------------------- mode maps

def mode_matrix_to_fock(v_modes: np.ndarray, reg_in: RailRegister,
                        reg_out: RailRegister) -> np.ndarray:
    """Lift a mode-space matrix (columns: input rails, rows: output rails)
    into the truncated Fock representation.

    Photon number is conserved, so equal total caps keep the map exact.
    """
    v_modes = np.asarray(v_modes, dtype=complex)
    m_out, m_in = v_modes.shape
    if m_in != reg_in.n_rails or m_out != reg_out.n_rails:
        raise ValueError("mode matrix does not match register sizes")
    if reg_out.total_max < reg_in.total_max:
        raise ValueError("output register cap too small")

    fock = np.zeros((reg_out.dim, reg_in.dim), dtype=complex)
    for tup, col in reg_in.index.items():
        photons = [j for j, n in enumerate(tup) for _ in range(n)]
        if not photons:
            fock[reg_out.vacuum_index(), col] = 1.0
            continue
        amps = {}
        for assign in iproduct(range(m_out), repeat=len(photons)):
            amp = 1.0 + 0j
            for out_mode, in_mode in zip(assign, photons):
                amp *= v_modes[out_mode, in_mode]
            if amp == 0:
                continue
            occ = [0] * m_out
            for out_mode in assign:
                occ[out_mode] += 1
            key = tuple(occ)
            amps[key] = amps.get(key, 0.0) + amp
        norm_in = math.sqrt(np.prod([math.factorial(n) for n in tup]))
        for occ, amp in amps.items():
            norm_out = math.sqrt(np.prod([math.factorial(n) for n in occ]))
            fock[reg_out.index[occ], col] = amp * norm_out / norm_in
    return fock


def beamsplitter_matrix(reg: RailRegister, rail_a: int, rail_b: int,
                        transmission: float = 1 / math.sqrt(2)) -> np.ndarray:
    """Symmetric beam splitter between two rails, reflection phase +i."""
    t = float(transmission)
    r = math.sqrt(max(0.0, 1.0 - t * t))
    v = np.eye(reg.n_rails, dtype=complex)
    v[rail_a, rail_a] = t
    v[rail_b, rail_b] = t
    v[rail_a, rail_b] = 1j * r
    v[rail_b, rail_a] = 1j * r
    return mode_matrix_to_fock(v, reg, reg)


# ------------------------------------------------------------------- TDI

@dataclass(frozen=True)
class TdiWindows:
    """Arrival-window bookkeeping for the delay interferometer readout.

    Input rail j splits over a short and a delayed arm; window t collects the
    short arm of rail t and the delayed arm of rail t - delay. Windows with
    both contributions interfere; the first and last windows carry a single
    rail and act as plain time-of-arrival (basis state) detections.
    """

    n_rails: int
    delay: int
    lock_phase: float = 0.0

    @property
    def n_windows(self) -> int:
        return self.n_rails + self.delay

    def rails_in(self, window: int):
        rails = []
        if 0 <= window < self.n_rails:
            rails.append(window)           # short arm
        if 0 <= window - self.delay < self.n_rails:
            rails.append(window - self.delay)  # delayed arm
        return tuple(rails)

    def kind(self, window: int) -> str:
        return "pair" if len(self.rails_in(window)) == 2 else "edge"

    def pair(self, window: int):
        """(early rail, late rail) for an interference window."""
        if self.kind(window) != "pair":
            raise ValueError("not an interference window")
        return (window - self.delay, window)

    def mode(self, window: int, detector: int) -> int:
        """Output mode index; detector +1 is the sum port, -1 the difference."""
        return 2 * window + (0 if detector > 0 else 1)

    def unpack_mode(self, mode: int):
        return mode // 2, (1 if mode % 2 == 0 else -1)


def tdi_mode_matrix(win: TdiWindows, imbalance: float = 0.0) -> np.ndarray:
    """Mode map of the readout interferometer.

    imbalance shifts the power splitting of both couplers away from 50:50
    (t^2 = 1/2 + imbalance). The lock phase rides on the delayed arm.
    """
    t = math.sqrt(0.5 + imbalance)
    r = math.sqrt(0.5 - imbalance)
    phase = np.exp(1j * win.lock_phase)
    v = np.zeros((2 * win.n_windows, win.n_rails), dtype=complex)
    for j in range(win.n_rails):
        # short arm: transmit both couplers to the difference port,
        # cross once for the sum port
        v[win.mode(j, +1), j] += r * t
        v[win.mode(j, -1), j] += t * t
        # delayed arm
        v[win.mode(j + win.delay, +1), j] += r * t * phase
        v[win.mode(j + win.delay, -1), j] += -r * r * phase
    return v


def tdi(state: QuantumState, reg: RailRegister, delay: int,
        lock_phase: float = 0.0, imbalance: float = 0.0):
    """Send a register through the delay interferometer.

    Returns (state over the window register, TdiWindows, window register).
    """
    win = TdiWindows(reg.n_rails, delay, lock_phase)
    out_reg = RailRegister(reg.label + ".win", 2 * win.n_windows,
                           reg.n_max, reg.total_max)
    v = tdi_mode_matrix(win, imbalance)
    fock = mode_matrix_to_fock(v, reg, out_reg)
    new = qcore.apply_isometry(state, fock, reg.label, out_reg.subsystem())
    return new, win, out_reg


# ------------------------------------------------------------- detection

@dataclass(frozen=True)
class DetectorModel:
    """Click detectors at the interferometer outputs. Efficiency is applied
    as uniform attenuation ahead of the click decision; detectors do not
    resolve photon number."""

    efficiency: float = 1.0
    exactly_one_click: bool = True


@dataclass(frozen=True)
class ClickRecord:
    """One accepted detection event."""

    window: int
    detector: int          # +1 sum port, -1 difference port
    kind: str              # "pair" or "edge"
    rails: tuple           # contributing input rails
    phase_applied: tuple = ()


@dataclass
class DetectionResult:
    """Exhaustive click enumeration. Weights are absolute (inherit the
    incoming state's weight), so they read directly as probabilities when
    the chain started from a normalized state."""

    clicks: list = field(default_factory=list)   # (ClickRecord, reduced state)
    vacuum_weight: float = 0.0
    multi_weight: float = 0.0

    @property
    def click_weight(self) -> float:
        return sum(st.weight for _, st in self.clicks)

    @property
    def total_weight(self) -> float:
        return self.click_weight + self.vacuum_weight + self.multi_weight


def detect(state: QuantumState, out_reg: RailRegister, win: TdiWindows,
           model: DetectorModel = DetectorModel(),
           phase_applied=()) -> DetectionResult:
    """Enumerate single-click outcomes on the window register.

    The register is traced out of each branch; vacuum and multi-click
    weights are reported for the exposure ledger.
    """
    if model.efficiency < 1.0:
        state = apply_loss(state, out_reg, model.efficiency)

    fired_groups = {}
    for tup, idx in out_reg.index.items():
        fired = tuple(j for j, n in enumerate(tup) if n > 0)
        fired_groups.setdefault(fired, []).append(idx)

    # the group projectors are diagonal index selections, so each branch
    # reduces by direct contraction; dense projector products scale far
    # worse on the window register's big space
    lay = state.layout
    ax = lay.axis(out_reg.label)
    n = len(lay.dims)
    rho = state.density().reshape(tuple(lay.dims) * 2)
    rho = np.moveaxis(rho, ax, n - 1)
    rho = np.moveaxis(rho, n + ax, 2 * n - 1)
    d_ph = lay.dims[ax]
    d_rest = rho.size // (d_ph * d_ph)
    d_rest = int(round(math.sqrt(d_rest)))
    rho = rho.reshape(d_rest, d_ph, d_rest, d_ph)
    rest_layout = lay.drop([out_reg.label])

    result = DetectionResult()
    for fired, indices in fired_groups.items():
        block = rho[:, indices][:, :, :, indices]
        w = float(np.einsum("aiai->", block).real)
        if w <= 1e-300:
            continue
        if len(fired) == 0:
            result.vacuum_weight += w
        elif len(fired) == 1:
            window, det = win.unpack_mode(fired[0])
            rec = ClickRecord(window, det, win.kind(window),
                              win.rails_in(window), tuple(phase_applied))
            reduced = QuantumState(rest_layout, np.einsum("aibi->ab", block))
            result.clicks.append((rec, reduced))
        else:
            result.multi_weight += w
    return result


def fock_outcome_branches(state: QuantumState, label: str):
    """Pure-state unraveling of a full occupation-basis measurement on a
    register: list of (basis index, weight, reduced pure state). Used by the
    trajectory sampler; its coarse-grained statistics match detect()."""
    if not state.is_pure:
        raise ValueError("trajectory detection needs a pure state")
    ax = state.layout.axis(label)
    dims = state.layout.dims
    psi = state.data.reshape(dims)
    psi = np.moveaxis(psi, ax, 0)
    rest_layout = state.layout.drop([label])
    out = []
    for idx in range(dims[ax]):
        vec = psi[idx].reshape(-1)
        w = float(np.vdot(vec, vec).real)
        if w > 1e-300:
            out.append((idx, w, QuantumState(rest_layout, vec)))
    return out
