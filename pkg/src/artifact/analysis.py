"""Tomography and leakage analysis over measured expectation tables.

Everything in this module is pure numerics: expectation values and
density matrices in, numbers out. Protocols enter only as channel
callables already bound to a client choice, so the same reconstruction
and tomography code runs on analytic maps and on simulator output.

States rebuilt from finite-shot tables can dip slightly below positive
semidefinite. Eigenvalues are clipped at zero and the spectrum
renormalized; anything below -0.05 is rejected as unphysical rather
than silently repaired.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .qcore import (
    QuantumState,
    SubsystemLayout,
    ket,
    partial_trace,
    pauli,
    spin,
    von_neumann_entropy,
)

__all__ = [
    "CLIP_TOL",
    "ExpectationTable",
    "ChiMatrix",
    "pauli_words",
    "pauli_expectations",
    "reconstruct_1q",
    "reconstruct_2q",
    "mix_over_outcomes",
    "holevo",
    "classical_leakage",
    "entanglement_entropy",
    "bootstrap_uncertainty",
    "fidelity_from_expectations",
    "chi_of_unitary",
    "tomography_inputs",
    "gate_set_tomography",
    "process_and_average_fidelity",
    "truth_table",
]

# reconstruction negativity beyond this is a hard error, below it noise
CLIP_TOL = 0.05

TOMO_INPUT_LABELS = ("0", "1", "+", "+i")


def pauli_words(n: int, trivial: bool = False) -> list:
    """Length-n Pauli words in lexicographic IXYZ order.

    The all-identity word is dropped unless ``trivial`` is set.
    """
    words = ["".join(t) for t in itertools.product("IXYZ", repeat=n)]
    return words if trivial else [w for w in words if set(w) != {"I"}]


def pauli_expectations(state, words=None) -> dict:
    """Measure <P> for each word on a state (normalized first)."""
    rho = state.density() if isinstance(state, QuantumState) else state
    rho = np.asarray(rho, dtype=complex)
    if words is None:
        words = pauli_words(int(round(math.log2(rho.shape[0]))))
    tr = np.trace(rho).real
    return {w: float(np.trace(pauli(w) @ rho).real / tr) for w in words}


@dataclass
class ExpectationTable:
    """Measured Pauli expectations grouped by (client choice, outcome).

    ``rows`` maps an arbitrary hashable key, conventionally a
    (choice label, outcome bits) pair, to {word: (value, shots)}.
    A shot count of ``math.inf`` marks an exact entry.
    """

    rows: dict = field(default_factory=dict)

    def add(self, key, word: str, value: float, shots=0):
        if abs(value) > 1 + 1e-9:
            raise ValueError(f"expectation value {value} outside [-1, 1]")
        if shots < 0:
            raise ValueError("negative shot count")
        self.rows.setdefault(key, {})[word] = (float(value), shots)

    def row(self, key) -> dict:
        """Plain word -> value view of one row."""
        return {w: v for w, (v, _) in self.rows[key].items()}

    def keys(self):
        return self.rows.keys()


def _value(row, word: str) -> float:
    try:
        v = row[word]
    except KeyError:
        raise KeyError(f"missing Pauli word {word!r}") from None
    return float(v[0]) if isinstance(v, tuple) else float(v)


def _clip_to_physical(rho: np.ndarray, tol: float = CLIP_TOL) -> np.ndarray:
    vals, vecs = np.linalg.eigh(rho)
    if vals.min() < -tol:
        raise ValueError(
            f"reconstructed eigenvalue {vals.min():.3f} is beyond repair"
        )
    vals = np.clip(vals, 0.0, None)
    vals /= vals.sum()
    return (vecs * vals) @ vecs.conj().T


def reconstruct_1q(row, label: str = "q") -> QuantumState:
    """Single-qubit state from its X, Y, Z expectations.

    The Bloch vector fixes the matrix completely; clipping only fires
    when sampling noise pushes its length past one.
    """
    rho = np.eye(2, dtype=complex)
    for w in ("X", "Y", "Z"):
        rho = rho + _value(row, w) * pauli(w)
    return QuantumState(SubsystemLayout([spin(label)]), _clip_to_physical(rho / 2))


def reconstruct_2q(row, labels=("a", "b")) -> QuantumState:
    """Two-qubit state from all fifteen nontrivial Pauli expectations."""
    rho = np.eye(4, dtype=complex)
    for w in pauli_words(2):
        rho = rho + _value(row, w) * pauli(w)
    layout = SubsystemLayout([spin(l) for l in labels])
    return QuantumState(layout, _clip_to_physical(rho / 4))


def mix_over_outcomes(branches) -> QuantumState:
    """Convex mixture over (probability, state) branches.

    This is what a party holding the qubits but not the measurement
    record is left with.
    """
    branches = list(branches)
    if not branches:
        raise ValueError("no branches to mix")
    layout = branches[0][1].layout
    acc = np.zeros((layout.dim, layout.dim), dtype=complex)
    total = 0.0
    for p, st in branches:
        if p < 0:
            raise ValueError(f"negative branch weight {p}")
        if st.layout != layout:
            raise ValueError("branch layouts differ")
        acc += p * st.normalized().density()
        total += p
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"branch weights sum to {total}, not 1")
    return QuantumState(layout, acc / total)


def _as_density(state) -> np.ndarray:
    if isinstance(state, QuantumState):
        return state.normalized().density()
    rho = np.asarray(state, dtype=complex)
    return rho / np.trace(rho).real


def _ensemble_weights(count: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(count, 1.0 / count)
    w = np.asarray(weights, dtype=float)
    if w.shape != (count,):
        raise ValueError("one weight per ensemble member required")
    if w.min() < 0 or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    return w / w.sum()


def holevo(states, weights=None, tol: float = CLIP_TOL) -> float:
    """Holevo information of an ensemble of states, in bits.

    Entropy of the mean minus the mean entropy. Zero exactly when every
    member is the same state, at most log2(dim); weights default to
    uniform.
    """
    mats = [_as_density(s) for s in states]
    if not mats:
        raise ValueError("empty ensemble")
    w = _ensemble_weights(len(mats), weights)
    mean = sum(wi * m for wi, m in zip(w, mats))
    chi = von_neumann_entropy(mean, tol=tol) - sum(
        wi * von_neumann_entropy(m, tol=tol) for wi, m in zip(w, mats)
    )
    # concave in the ensemble, so any negative is rounding
    return max(chi, 0.0)


def classical_leakage(distributions, weights=None) -> float:
    """Holevo information of classical outcome distributions, in bits.

    Same quantity as holevo() on diagonal matrices; the form used for
    algorithm outputs that only ever see one measurement basis.
    """
    dists = []
    for d in distributions:
        p = np.asarray(d, dtype=float)
        if p.min() < -1e-9:
            raise ValueError(f"negative probability {p.min()}")
        p = np.clip(p, 0.0, None)
        dists.append(p / p.sum())
    if not dists:
        raise ValueError("empty ensemble")
    w = _ensemble_weights(len(dists), weights)

    def h(p):
        nz = p[p > 0]
        return float(-(nz * np.log2(nz)).sum())

    mean = sum(wi * p for wi, p in zip(w, dists))
    return max(h(mean) - sum(wi * h(p) for wi, p in zip(w, dists)), 0.0)


def entanglement_entropy(state: QuantumState, keep) -> float:
    """Entropy of the reduced state over ``keep``, in bits."""
    return von_neumann_entropy(partial_trace(state, keep))


def bootstrap_uncertainty(table: ExpectationTable, statistic, resamples: int,
                          rng, percentiles=(2.5, 97.5)):
    """Percentile interval of a table statistic under binomial resampling.

    Every expectation value is redrawn from the binomial law implied by
    its shot count; entries with infinite counts pass through unchanged.
    ``statistic`` takes the resampled table and returns a number. The
    interval comes out asymmetric whenever the statistic is bounded.
    """
    for words in table.rows.values():
        for v, n in words.values():
            if n == 0:
                raise ValueError("zero-count entry cannot be resampled")
    samples = np.empty(resamples)
    for i in range(resamples):
        boot = ExpectationTable()
        for key, words in table.rows.items():
            for wd, (v, n) in words.items():
                if math.isinf(n):
                    boot.add(key, wd, v, n)
                else:
                    p = min(max((1.0 + v) / 2.0, 0.0), 1.0)
                    boot.add(key, wd, 2.0 * rng.binomial(int(n), p) / n - 1.0, n)
        samples[i] = statistic(boot)
    lo, hi = np.percentile(samples, percentiles)
    return float(lo), float(hi)


def fidelity_from_expectations(row, target) -> float:
    """State fidelity straight from two expectation sets.

    F = (1 + sum <w>_target <w>_measured) / d over nontrivial words,
    which is the overlap with the target when the target is pure.
    """
    words = [w for w in target if set(w) != {"I"}]
    if not words:
        raise ValueError("target table has no nontrivial words")
    d = 2 ** len(words[0])
    acc = 1.0
    for w in words:
        acc += _value(target, w) * _value(row, w)
    return acc / d


@dataclass(frozen=True)
class ChiMatrix:
    """Process matrix over the ordered Pauli product basis.

    The channel acts as rho -> sum_ij chi[i, j] P_i rho P_j with the
    words ordered as pauli_words(n, trivial=True). Hermiticity is
    required exactly; complete positivity only within ``tol``, since
    inversion from sampled outputs wanders slightly negative.
    """

    matrix: np.ndarray
    dim: int
    tol: float = 1e-7

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        d2 = self.dim ** 2
        if m.shape != (d2, d2):
            raise ValueError(f"chi shape {m.shape} does not fit dim {self.dim}")
        if np.abs(m - m.conj().T).max() > 1e-8:
            raise ValueError("chi matrix is not Hermitian")
        if np.linalg.eigvalsh(m).min() < -self.tol:
            raise ValueError("chi matrix is not completely positive")
        object.__setattr__(self, "matrix", m)

    @property
    def words(self) -> list:
        return pauli_words(int(round(math.log2(self.dim))), trivial=True)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)


def chi_of_unitary(u: np.ndarray, tol: float = 1e-7) -> ChiMatrix:
    """Rank-one chi matrix of a unitary gate."""
    u = np.asarray(u, dtype=complex)
    d = u.shape[0]
    n = int(round(math.log2(d)))
    c = np.array(
        [np.trace(pauli(w).conj().T @ u) for w in pauli_words(n, trivial=True)]
    ) / d
    return ChiMatrix(np.outer(c, c.conj()), d, tol)


def tomography_inputs(n: int) -> list:
    """The informationally complete product input kets for n qubits."""
    return [
        ket(",".join(combo))
        for combo in itertools.product(TOMO_INPUT_LABELS, repeat=n)
    ]


def gate_set_tomography(channel, d: int, tol: float = 1e-6) -> ChiMatrix:
    """Reconstruct a channel's chi matrix by linear inversion.

    ``channel`` maps a density matrix to its output, which may carry a
    herald weight. The inversion runs on the raw linear map and the chi
    trace is renormalized afterwards; normalizing per input would break
    linearity whenever the herald weight depends on the input state.

    Raises on a singular design matrix, meaning the input set failed to
    span the operator space for dimension ``d``.
    """
    n = int(round(math.log2(d)))
    if 2 ** n != d:
        raise ValueError("dimension must be a power of two")
    ins = [np.outer(k, k.conj()) for k in tomography_inputs(n)]
    design = np.column_stack([r.reshape(-1) for r in ins])
    if np.linalg.matrix_rank(design) < d * d:
        raise np.linalg.LinAlgError("singular tomography design matrix")
    outs = np.column_stack(
        [np.asarray(channel(r), dtype=complex).reshape(-1) for r in ins]
    )
    m = outs @ np.linalg.inv(design)

    # row-major vec: P_i rho P_j reads as (P_i kron P_j^T) vec(rho)
    basis = [pauli(w) for w in pauli_words(n, trivial=True)]
    chi = np.empty((d * d, d * d), dtype=complex)
    for i, pi in enumerate(basis):
        for j, pj in enumerate(basis):
            chi[i, j] = np.trace(np.kron(pi, pj.T).conj().T @ m) / d ** 2
    tr = np.trace(chi).real
    if tr <= 0:
        raise ValueError("channel output has no weight")
    return ChiMatrix(chi / tr, d, tol)


def process_and_average_fidelity(chi_sim, chi_ideal, d: int):
    """Process fidelity and the average gate fidelity it implies.

    F_p is the overlap of the two chi matrices; F_ave follows as
    (d F_p + 1) / (d + 1).
    """
    a = chi_sim.matrix if isinstance(chi_sim, ChiMatrix) else np.asarray(chi_sim)
    b = chi_ideal.matrix if isinstance(chi_ideal, ChiMatrix) else np.asarray(chi_ideal)
    fp = float(np.trace(b @ a).real)
    return fp, (d * fp + 1.0) / (d + 1.0)


def truth_table(channel, inputs) -> np.ndarray:
    """Output populations of a channel, one row per input.

    Inputs may be kets or density matrices. Rows are normalized to sum
    to one regardless of herald weight.
    """
    rows = []
    for x in inputs:
        x = np.asarray(x, dtype=complex)
        rho = np.outer(x, x.conj()) if x.ndim == 1 else x
        out = np.asarray(channel(rho), dtype=complex)
        pops = np.diag(out).real
        if pops.sum() <= 0:
            raise ValueError("channel returned a zero-weight output")
        rows.append(pops / pops.sum())
    return np.array(rows)
