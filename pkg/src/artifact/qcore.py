"""Dense-state backbone for the blind-gate simulator.

Everything downstream (photonic rails, carving gates, tomography) runs on the
small set of primitives here: an ordered subsystem layout, immutable pure or
mixed states carrying a herald weight, and plain numpy linear algebra for
unitaries, Kraus channels, partial traces and the usual scalar functionals.

Conventions
-----------
* The first layout entry is the most significant tensor factor, so for a
  two-qubit layout (a, b) the basis ordering is |a b> = |00>, |01>, |10>, |11>.
* Spin qubits use index 0 = up, index 1 = down.
* A state's weight (squared norm for vectors, trace for matrices) is the
  probability of the branch it represents; operations never renormalize
  behind the caller's back.
* Entropies are reported in bits unless asked otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

# single-qubit constant matrices
PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

KET = {
    "0": np.array([1, 0], dtype=complex),
    "1": np.array([0, 1], dtype=complex),
    "+": np.array([1, 1], dtype=complex) / np.sqrt(2),
    "-": np.array([1, -1], dtype=complex) / np.sqrt(2),
    "+i": np.array([1, 1j], dtype=complex) / np.sqrt(2),
    "-i": np.array([1, -1j], dtype=complex) / np.sqrt(2),
}

HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)


def rz(phi: float) -> np.ndarray:
    """Phase rotation about z, convention diag(1, e^{i phi})."""
    return np.diag([1.0, np.exp(1j * phi)]).astype(complex)


def rx(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def ry(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def pauli(word: str) -> np.ndarray:
    """Tensor product of single-qubit Paulis, e.g. pauli("XZ")."""
    out = np.array([[1.0 + 0j]])
    for ch in word:
        out = np.kron(out, PAULI[ch])
    return out


def ket(spec: str) -> np.ndarray:
    """Product state from labels separated by commas, e.g. ket("0,+i")."""
    out = np.array([1.0 + 0j])
    for part in spec.split(","):
        out = np.kron(out, KET[part.strip()])
    return out


@dataclass(frozen=True)
class Subsystem:
    """One layout entry. kind is "spin" (dim 2) or "rails" (capped Fock)."""

    label: str
    kind: str
    dim: int
    meta: tuple = ()


class SubsystemLayout:
    """Ordered collection of subsystems defining the tensor structure."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate subsystem labels")
        self._index = {e.label: i for i, e in enumerate(self.entries)}

    @property
    def labels(self):
        return tuple(e.label for e in self.entries)

    @property
    def dims(self):
        return tuple(e.dim for e in self.entries)

    @property
    def dim(self) -> int:
        d = 1
        for e in self.entries:
            d *= e.dim
        return d

    def axis(self, label: str) -> int:
        return self._index[label]

    def entry(self, label: str) -> Subsystem:
        return self.entries[self._index[label]]

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, SubsystemLayout) and self.entries == other.entries

    def __repr__(self):
        inner = ", ".join(f"{e.label}:{e.dim}" for e in self.entries)
        return f"SubsystemLayout({inner})"

    def drop(self, labels) -> "SubsystemLayout":
        gone = set(labels)
        return SubsystemLayout([e for e in self.entries if e.label not in gone])

    def keep(self, labels) -> "SubsystemLayout":
        want = set(labels)
        return SubsystemLayout([e for e in self.entries if e.label in want])


def spin(label: str) -> Subsystem:
    return Subsystem(label, "spin", 2)


@dataclass(frozen=True)
class QuantumState:
    """Immutable state over a layout.

    data is a vector of shape (dim,) for pure states or a matrix
    (dim, dim) for mixed ones. The overall scale is meaningful: it carries
    the probability weight of the branch this state represents.
    """

    layout: SubsystemLayout
    data: np.ndarray

    def __post_init__(self):
        d = self.layout.dim
        if self.data.shape not in ((d,), (d, d)):
            raise ValueError(
                f"data shape {self.data.shape} does not match layout dim {d}"
            )

    @property
    def is_pure(self) -> bool:
        return self.data.ndim == 1

    @property
    def weight(self) -> float:
        if self.is_pure:
            return float(np.vdot(self.data, self.data).real)
        return float(np.trace(self.data).real)

    def density(self) -> np.ndarray:
        if self.is_pure:
            return np.outer(self.data, self.data.conj())
        return self.data

    def as_mixed(self) -> "QuantumState":
        return self if not self.is_pure else QuantumState(self.layout, self.density())

    def normalized(self) -> "QuantumState":
        w = self.weight
        if w <= 0:
            raise ValueError("cannot normalize a zero-weight state")
        if self.is_pure:
            return QuantumState(self.layout, self.data / np.sqrt(w))
        return QuantumState(self.layout, self.data / w)

    def scaled(self, factor: float) -> "QuantumState":
        if self.is_pure:
            return QuantumState(self.layout, self.data * np.sqrt(factor))
        return QuantumState(self.layout, self.data * factor)


@dataclass(frozen=True)
class Observable:
    """Hermitian operator acting on a subset of layout labels."""

    matrix: np.ndarray
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))


def pure_state(layout: SubsystemLayout, amplitudes) -> QuantumState:
    return QuantumState(layout, np.asarray(amplitudes, dtype=complex))


def product_state(parts) -> QuantumState:
    """Tensor a list of (Subsystem, amplitude vector) pairs into one state."""
    entries = []
    vec = np.array([1.0 + 0j])
    for sub, amps in parts:
        entries.append(sub)
        vec = np.kron(vec, np.asarray(amps, dtype=complex))
    return QuantumState(SubsystemLayout(entries), vec)


def tensor(a: QuantumState, b: QuantumState) -> QuantumState:
    layout = SubsystemLayout(a.layout.entries + b.layout.entries)
    if a.is_pure and b.is_pure:
        return QuantumState(layout, np.kron(a.data, b.data))
    return QuantumState(layout, np.kron(a.density(), b.density()))


def _target_axes(layout: SubsystemLayout, labels) -> list:
    return [layout.axis(l) for l in labels]


def _op_tensor(op: np.ndarray, dims) -> np.ndarray:
    return op.reshape(tuple(dims) + tuple(dims))


def apply_unitary(state: QuantumState, op: np.ndarray, labels) -> QuantumState:
    """Apply an operator to the named subsystems (need not be unitary;
    weights transform accordingly, which heralded projections rely on)."""
    labels = list(labels)
    dims_all = state.layout.dims
    axes = _target_axes(state.layout, labels)
    tdims = [dims_all[a] for a in axes]
    k = len(axes)
    op_t = _op_tensor(np.asarray(op, dtype=complex), tdims)

    if state.is_pure:
        psi = state.data.reshape(dims_all)
        out = np.tensordot(op_t, psi, axes=(list(range(k, 2 * k)), axes))
        out = np.moveaxis(out, list(range(k)), axes)
        return QuantumState(state.layout, out.reshape(-1))

    n = len(dims_all)
    rho = state.data.reshape(dims_all + dims_all)
    out = np.tensordot(op_t, rho, axes=(list(range(k, 2 * k)), axes))
    out = np.moveaxis(out, list(range(k)), axes)
    col_axes = [n + a for a in axes]
    out = np.tensordot(op_t.conj(), out, axes=(list(range(k, 2 * k)), col_axes))
    out = np.moveaxis(out, list(range(k)), col_axes)
    d = state.layout.dim
    return QuantumState(state.layout, out.reshape(d, d))


def apply_isometry(state: QuantumState, iso: np.ndarray, label: str,
                   new_sub: Subsystem) -> QuantumState:
    """Map one subsystem through a (possibly dimension-changing) isometry,
    replacing its layout entry with new_sub."""
    ax = state.layout.axis(label)
    dims_all = state.layout.dims
    iso = np.asarray(iso, dtype=complex)
    if iso.shape != (new_sub.dim, dims_all[ax]):
        raise ValueError("isometry shape does not match old/new dims")
    entries = list(state.layout.entries)
    entries[ax] = new_sub
    new_layout = SubsystemLayout(entries)

    if state.is_pure:
        psi = state.data.reshape(dims_all)
        out = np.tensordot(iso, psi, axes=(1, ax))
        out = np.moveaxis(out, 0, ax)
        return QuantumState(new_layout, out.reshape(-1))

    n = len(dims_all)
    rho = state.data.reshape(dims_all + dims_all)
    out = np.tensordot(iso, rho, axes=(1, ax))
    out = np.moveaxis(out, 0, ax)
    out = np.tensordot(iso.conj(), out, axes=(1, n + ax))
    out = np.moveaxis(out, 0, n + ax)
    d = new_layout.dim
    return QuantumState(new_layout, out.reshape(d, d))


def apply_kraus(state: QuantumState, kraus_ops, labels) -> QuantumState:
    """Channel application; the result is mixed."""
    rho = state.as_mixed()
    total = None
    for k_op in kraus_ops:
        branch = apply_unitary(rho, k_op, labels)
        total = branch.data if total is None else total + branch.data
    return QuantumState(state.layout, total)


def kraus_branches(state: QuantumState, kraus_ops, labels):
    """Pure-state branch list [(weight, unnormalized pure state)].

    Used by the trajectory sampler; weights sum to the parent weight when
    the set is complete.
    """
    if not state.is_pure:
        raise ValueError("branch enumeration needs a pure state")
    out = []
    for k_op in kraus_ops:
        st = apply_unitary(state, k_op, labels)
        out.append((st.weight, st))
    return out


def partial_trace(state: QuantumState, keep) -> QuantumState:
    """Reduced density matrix over the kept labels (layout order preserved)."""
    keep = [l for l in state.layout.labels if l in set(keep)]
    dims_all = state.layout.dims
    n = len(dims_all)
    keep_axes = [state.layout.axis(l) for l in keep]
    drop_axes = [i for i in range(n) if i not in keep_axes]

    rho = state.density().reshape(dims_all + dims_all)
    for off, ax in enumerate(sorted(drop_axes)):
        a = ax - off
        rho = np.trace(rho, axis1=a, axis2=a + (n - off))
    kd = 1
    for a in keep_axes:
        kd *= dims_all[a]
    new_layout = state.layout.keep(keep)
    return QuantumState(new_layout, rho.reshape(kd, kd))


def expectation(state: QuantumState, obs: Observable) -> float:
    """<O> on the normalized state."""
    red = partial_trace(state, obs.labels)
    # align operator label order with layout order
    order = [list(obs.labels).index(l) for l in red.layout.labels]
    op = obs.matrix
    if order != list(range(len(order))):
        dims = [red.layout.entry(l).dim for l in obs.labels]
        op_t = _op_tensor(op, dims)
        n = len(dims)
        perm = order + [n + o for o in order]
        op_t = np.transpose(op_t, perm)
        d = red.layout.dim
        op = op_t.reshape(d, d)
    w = red.weight
    if w <= 0:
        raise ValueError("zero-weight state has no expectation values")
    return float(np.trace(red.data @ op).real / w)


def project(state: QuantumState, op: np.ndarray, labels):
    """Apply a projector (or any measurement operator); returns
    (unnormalized state, branch probability relative to the parent weight)."""
    w0 = state.weight
    st = apply_unitary(state, op, labels)
    return st, st.weight / w0 if w0 > 0 else 0.0


def purity(state: QuantumState) -> float:
    rho = state.normalized().density()
    return float(np.trace(rho @ rho).real)


def _clean_eigvals(vals: np.ndarray, tol: float) -> np.ndarray:
    if vals.min() < -tol:
        raise ValueError(f"eigenvalue {vals.min():.3g} below -{tol:.3g}")
    vals = np.clip(vals, 0.0, None)
    s = vals.sum()
    return vals / s if s > 0 else vals


def von_neumann_entropy(state, base: float = 2.0, tol: float = 1e-9) -> float:
    """Entropy of the normalized state, default in bits.

    Small negative eigenvalues (numerical noise) are clipped and the
    spectrum renormalized; anything below -tol raises.
    """
    if isinstance(state, QuantumState):
        rho = state.normalized().density()
    else:
        rho = np.asarray(state, dtype=complex)
        rho = rho / np.trace(rho).real
    vals = np.linalg.eigvalsh(rho)
    vals = _clean_eigvals(vals, tol)
    nz = vals[vals > 0]
    return float(-(nz * (np.log(nz) / np.log(base))).sum())


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def state_fidelity(a, b) -> float:
    """Fidelity between two states (normalized first).

    Pure/pure reduces to |<a|b>|^2, pure/mixed to <a|rho|a>, and the general
    case uses the Uhlmann formula.
    """
    sa = a.normalized() if isinstance(a, QuantumState) else None
    sb = b.normalized() if isinstance(b, QuantumState) else None
    if sa is not None and sb is not None and sa.is_pure and sb.is_pure:
        return float(abs(np.vdot(sa.data, sb.data)) ** 2)
    if sa is not None and sa.is_pure:
        rho = sb.density() if sb is not None else np.asarray(b)
        return float(np.vdot(sa.data, rho @ sa.data).real)
    if sb is not None and sb.is_pure:
        return state_fidelity(b, a)
    rho = sa.density() if sa is not None else np.asarray(a)
    sig = sb.density() if sb is not None else np.asarray(b)
    sq = _psd_sqrt(rho)
    inner = _psd_sqrt(sq @ sig @ sq)
    return float(np.trace(inner).real ** 2)


def fidelity_vec(psi: np.ndarray, rho: np.ndarray) -> float:
    """Raw-array convenience: <psi|rho|psi> / (<psi|psi> Tr rho)."""
    psi = np.asarray(psi, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    n = np.vdot(psi, psi).real * np.trace(rho).real
    return float(np.vdot(psi, rho @ psi).real / n)
