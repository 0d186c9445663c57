import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import qcore as qc


def random_pure(n_qubits, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=2**n_qubits) + 1j * rng.normal(size=2**n_qubits)
    return v / np.linalg.norm(v)


def random_unitary(dim, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(m)
    return q * (np.diag(r) / abs(np.diag(r)))


def two_qubit_layout():
    return qc.SubsystemLayout([qc.spin("a"), qc.spin("b")])


class TestLayout:
    def test_dims_and_axes(self):
        lay = qc.SubsystemLayout(
            [qc.spin("e1"), qc.Subsystem("rails", "rails", 6, (2, 2, 2)), qc.spin("n1")]
        )
        assert lay.dim == 2 * 6 * 2
        assert lay.axis("rails") == 1
        assert lay.labels == ("e1", "rails", "n1")
        assert lay.drop(["rails"]).labels == ("e1", "n1")

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError):
            qc.SubsystemLayout([qc.spin("a"), qc.spin("a")])

    def test_first_label_most_significant(self):
        st_ = qc.product_state([(qc.spin("a"), qc.KET["1"]), (qc.spin("b"), qc.KET["0"])])
        # |10> must sit at index 2
        assert np.allclose(st_.data, [0, 0, 1, 0])


class TestStates:
    def test_weight_tracks_norm(self):
        st_ = qc.pure_state(two_qubit_layout(), np.array([1, 0, 0, 1]) / np.sqrt(2))
        assert st_.weight == pytest.approx(1.0)
        assert st_.scaled(0.25).weight == pytest.approx(0.25)

    def test_mixed_weight_is_trace(self):
        st_ = qc.QuantumState(
            qc.SubsystemLayout([qc.spin("a")]), np.diag([0.3, 0.1]).astype(complex)
        )
        assert st_.weight == pytest.approx(0.4)
        assert st_.normalized().weight == pytest.approx(1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            qc.pure_state(two_qubit_layout(), np.ones(3))


class TestOperations:
    def test_apply_unitary_single_target(self):
        lay = two_qubit_layout()
        st_ = qc.pure_state(lay, qc.ket("0,0"))
        out = qc.apply_unitary(st_, qc.PAULI["X"], ["b"])
        assert np.allclose(out.data, qc.ket("0,1"))
        out = qc.apply_unitary(st_, qc.PAULI["X"], ["a"])
        assert np.allclose(out.data, qc.ket("1,0"))

    def test_apply_unitary_label_order_matters(self):
        lay = two_qubit_layout()
        cx = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], complex)
        st_ = qc.pure_state(lay, qc.ket("0,1"))
        # control b, target a
        out = qc.apply_unitary(st_, cx, ["b", "a"])
        assert np.allclose(out.data, qc.ket("1,1"))

    def test_apply_unitary_mixed(self):
        lay = two_qubit_layout()
        bell = qc.pure_state(lay, np.array([1, 0, 0, 1]) / np.sqrt(2)).as_mixed()
        out = qc.apply_unitary(bell, qc.PAULI["X"], ["b"])
        expect = np.outer([0, 1, 1, 0], [0, 1, 1, 0]) / 2
        assert np.allclose(out.data, expect)

    def test_partial_trace_bell(self):
        lay = two_qubit_layout()
        bell = qc.pure_state(lay, np.array([1, 0, 0, 1]) / np.sqrt(2))
        red = qc.partial_trace(bell, ["a"])
        assert np.allclose(red.data, np.eye(2) / 2)

    def test_partial_trace_keeps_layout_order(self):
        lay = qc.SubsystemLayout([qc.spin("a"), qc.spin("b"), qc.spin("c")])
        st_ = qc.pure_state(lay, qc.ket("0,1,0"))
        red = qc.partial_trace(st_, ["c", "a"])  # order given backwards
        assert red.layout.labels == ("a", "c")
        assert np.allclose(red.data, np.outer(qc.ket("0,0"), qc.ket("0,0")))

    def test_expectation_with_permuted_labels(self):
        lay = two_qubit_layout()
        st_ = qc.pure_state(lay, qc.ket("0,1"))
        zz = qc.Observable(qc.pauli("ZZ"), ("b", "a"))
        assert qc.expectation(st_, zz) == pytest.approx(-1.0)
        za = qc.Observable(qc.pauli("Z"), ("a",))
        assert qc.expectation(st_, za) == pytest.approx(1.0)

    def test_project_weight(self):
        lay = qc.SubsystemLayout([qc.spin("a")])
        st_ = qc.pure_state(lay, qc.KET["+"])
        proj = np.outer(qc.KET["0"], qc.KET["0"].conj())
        _, p = qc.project(st_, proj, ["a"])
        assert p == pytest.approx(0.5)

    def test_kraus_channel_full_dephasing(self):
        lay = qc.SubsystemLayout([qc.spin("a")])
        st_ = qc.pure_state(lay, qc.KET["+"])
        ks = [qc.PAULI["I"] / np.sqrt(2), qc.PAULI["Z"] / np.sqrt(2)]
        out = qc.apply_kraus(st_, ks, ["a"])
        assert np.allclose(out.data, np.eye(2) / 2)

    def test_kraus_branches_weights(self):
        lay = qc.SubsystemLayout([qc.spin("a")])
        st_ = qc.pure_state(lay, qc.KET["+"])
        p0 = np.diag([1.0, 0.0]).astype(complex)
        p1 = np.diag([0.0, 1.0]).astype(complex)
        branches = qc.kraus_branches(st_, [p0, p1], ["a"])
        assert [w for w, _ in branches] == pytest.approx([0.5, 0.5])


class TestScalars:
    def test_entropy_frozen_value(self):
        # h(1/4) computed from the binary entropy formula
        rho = np.diag([0.75, 0.25]).astype(complex)
        assert qc.von_neumann_entropy(rho) == pytest.approx(0.8112781244591328, abs=1e-12)

    def test_entropy_units(self):
        rho = np.eye(2) / 2
        assert qc.von_neumann_entropy(rho) == pytest.approx(1.0)
        assert qc.von_neumann_entropy(rho, base=np.e) == pytest.approx(np.log(2))

    def test_entropy_negative_eigenvalue_guard(self):
        bad = np.diag([1.2, -0.2]).astype(complex)
        with pytest.raises(ValueError):
            qc.von_neumann_entropy(bad, tol=1e-9)
        # large tol clips instead
        assert qc.von_neumann_entropy(bad, tol=0.5) == pytest.approx(0.0)

    def test_purity(self):
        lay = qc.SubsystemLayout([qc.spin("a")])
        assert qc.purity(qc.pure_state(lay, qc.KET["+i"])) == pytest.approx(1.0)
        mixed = qc.QuantumState(lay, np.eye(2, dtype=complex) / 2)
        assert qc.purity(mixed) == pytest.approx(0.5)

    def test_fidelity_pure_pure(self):
        lay = qc.SubsystemLayout([qc.spin("a")])
        a = qc.pure_state(lay, qc.KET["+"])
        b = qc.pure_state(lay, qc.KET["+i"])
        assert qc.state_fidelity(a, b) == pytest.approx(0.5)

    def test_fidelity_pure_mixed(self):
        lay = qc.SubsystemLayout([qc.spin("a")])
        a = qc.pure_state(lay, qc.KET["+"])
        mixed = qc.QuantumState(lay, np.eye(2, dtype=complex) / 2)
        assert qc.state_fidelity(a, mixed) == pytest.approx(0.5)

    def test_fidelity_mixed_mixed_frozen(self):
        # closed-form qubit value Tr[rho sig] + 2 sqrt(det rho det sig)
        def bloch(x, y, z):
            return 0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]])

        lay = qc.SubsystemLayout([qc.spin("a")])
        rho = qc.QuantumState(lay, bloch(0.3, 0.0, 0.4).astype(complex))
        sig = qc.QuantumState(lay, bloch(-0.1, 0.2, 0.0).astype(complex))
        assert qc.state_fidelity(rho, sig) == pytest.approx(0.9070485754033533, abs=1e-10)

    def test_pauli_words(self):
        xz = qc.pauli("XZ")
        assert np.allclose(xz, np.kron(qc.PAULI["X"], qc.PAULI["Z"]))
        assert xz.shape == (4, 4)
        assert np.allclose(qc.pauli("Y") @ qc.pauli("Y"), np.eye(2))

    def test_rotation_conventions(self):
        assert np.allclose(qc.rz(np.pi), qc.PAULI["Z"], atol=1e-12)
        # rx(pi) = -iX
        assert np.allclose(qc.rx(np.pi), -1j * qc.PAULI["X"], atol=1e-12)
        assert np.allclose(qc.HADAMARD @ qc.HADAMARD, np.eye(2), atol=1e-12)


@st.composite
def pure_two_qubit(draw):
    seed = draw(st.integers(min_value=0, max_value=2**31 - 1))
    return random_pure(2, seed)


class TestProperties:
    @given(pure_two_qubit(), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=40, deadline=None)
    def test_unitary_preserves_weight_and_entropy(self, vec, useed):
        lay = two_qubit_layout()
        st_ = qc.pure_state(lay, vec)
        u = random_unitary(4, useed)
        out = qc.apply_unitary(st_, u, ["a", "b"])
        assert out.weight == pytest.approx(st_.weight)
        red_before = qc.partial_trace(st_, ["a"])
        # local unitary on b cannot change a's reduced entropy
        ub = random_unitary(2, useed + 1)
        out2 = qc.apply_unitary(st_, ub, ["b"])
        red_after = qc.partial_trace(out2, ["a"])
        assert qc.von_neumann_entropy(red_before) == pytest.approx(
            qc.von_neumann_entropy(red_after), abs=1e-9
        )

    @given(pure_two_qubit())
    @settings(max_examples=40, deadline=None)
    def test_partial_trace_consistent_with_expectation(self, vec):
        lay = two_qubit_layout()
        st_ = qc.pure_state(lay, vec)
        za = qc.Observable(qc.PAULI["Z"], ("a",))
        direct = qc.expectation(st_, za)
        red = qc.partial_trace(st_, ["a"])
        via_trace = float(np.trace(red.data @ qc.PAULI["Z"]).real)
        assert direct == pytest.approx(via_trace, abs=1e-10)

    @given(pure_two_qubit(), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=40, deadline=None)
    def test_kraus_completeness_preserves_weight(self, vec, seed):
        rng = np.random.default_rng(seed)
        # random complete 2-outcome channel on one qubit via a random isometry
        m = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
        q, _ = np.linalg.qr(m)
        ks = [q[:2, :], q[2:, :]]
        lay = two_qubit_layout()
        st_ = qc.pure_state(lay, vec)
        out = qc.apply_kraus(st_, ks, ["b"])
        assert out.weight == pytest.approx(st_.weight, abs=1e-10)

    @given(pure_two_qubit())
    @settings(max_examples=40, deadline=None)
    def test_fidelity_bounds_and_self(self, vec):
        lay = two_qubit_layout()
        st_ = qc.pure_state(lay, vec)
        assert qc.state_fidelity(st_, st_) == pytest.approx(1.0)
        other = qc.pure_state(lay, random_pure(2, 7))
        f = qc.state_fidelity(st_, other)
        assert -1e-12 <= f <= 1 + 1e-12
