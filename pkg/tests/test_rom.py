import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crom.errors import DimensionMismatch, MissingArtifact
from crom.fem import eval_advection
from crom.geometry import FACES
from crom.pod import ReducedBasis, collect_snapshots, component_pods, generate_training_configs, identity_basis
from crom.rom import (EqpRule, RomLibrary, build_advection_tensor, check_orthonormal, eqp_jacobian,
                      eqp_system, eval_advection_eqp, eval_advection_tensor, project_interface,
                      project_operators, tensor_jacobian, train_eqp)


def random_basis(space, R, rng, comp="x", R_p=None):
    Phi_u = np.linalg.qr(rng.standard_normal((space.n_u, R)))[0]
    R_p = R if R_p is None else R_p
    Phi_p = np.linalg.qr(rng.standard_normal((space.n_p, R_p)))[0]
    return ReducedBasis(comp, Phi_u, Phi_p, R, R_p, 0, np.ones(R), np.ones(R_p))


@pytest.fixture(scope="module")
def pods4(lib4):
    snaps = collect_snapshots(generate_training_configs(5, 8), lib4)
    return component_pods(snaps, 8), snaps


@pytest.fixture(scope="module")
def bases4(lib4, pods4):
    pods, _ = pods4
    return {c: pods[c].basis(lib4.ops[c], 5, 4, 4) for c in lib4.names}


def test_tensor_matches_projected_advection(lib4):
    rng = np.random.default_rng(3)
    space = lib4.spaces["circle"]
    b = random_basis(space, 8, rng)
    C = build_advection_tensor(space, b.Phi_u)
    for _ in range(10):
        u = rng.standard_normal(8)
        ref = b.Phi_u.T @ eval_advection(space, b.Phi_u @ u)
        assert np.linalg.norm(eval_advection_tensor(C, u) - ref) <= 1e-10 * max(1.0, np.linalg.norm(ref))


def test_tensor_elementary_probe(lib4):
    rng = np.random.default_rng(4)
    space = lib4.spaces["empty"]
    b = random_basis(space, 5, rng)
    C = build_advection_tensor(space, b.Phi_u)
    e = np.zeros(5)
    e[0] = 1.0
    assert np.allclose(eval_advection_tensor(C, e), C[:, 0, 0], atol=1e-15)
    assert np.all(eval_advection_tensor(C, np.zeros(5)) == 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(-3, 3))
def test_tensor_homogeneity_and_bilinearity(lib4, seed, alpha):
    rng = np.random.default_rng(seed)
    space = lib4.spaces["square"]
    b = random_basis(space, 4, rng)
    C = build_advection_tensor(space, b.Phi_u)
    u, v = rng.standard_normal(4), rng.standard_normal(4)
    N = lambda x: eval_advection_tensor(C, x)
    assert np.allclose(N(alpha * u), alpha ** 2 * N(u), atol=1e-12)
    # polarization: N(u+v) - N(u-v) = 2 (B(u,v) + B(v,u))
    bil = np.einsum("ijk,j,k->i", C, u, v) + np.einsum("ijk,j,k->i", C, v, u)
    assert np.allclose(N(u + v) - N(u - v), 2 * bil, atol=1e-11)


def test_tensor_jacobian_fd(lib4):
    rng = np.random.default_rng(5)
    space = lib4.spaces["star"]
    b = random_basis(space, 6, rng)
    C = build_advection_tensor(space, b.Phi_u)
    u, d = rng.standard_normal(6), rng.standard_normal(6)
    h = 1e-6
    fd = (eval_advection_tensor(C, u + h * d) - eval_advection_tensor(C, u - h * d)) / (2 * h)
    assert np.linalg.norm(tensor_jacobian(C, u) @ d - fd) <= 1e-8 * max(1.0, np.linalg.norm(fd))
    stacked = tensor_jacobian(C, np.stack([u, 2 * u]))
    assert np.allclose(stacked[1], 2 * stacked[0])


def test_tensor_dimension_check(lib4):
    C = np.zeros((3, 3, 3))
    with pytest.raises(DimensionMismatch):
        eval_advection_tensor(C, np.zeros(4))


def test_project_operators_factor_oracle(lib4):
    rng = np.random.default_rng(6)
    ops = lib4.ops["triangle"]
    b = random_basis(ops.space, 4, rng, R_p=3)
    rc = project_operators(ops, b)
    K = ops.K.toarray()
    np.testing.assert_allclose(rc.K, b.Phi_u.T @ K @ b.Phi_u, atol=1e-12)
    np.testing.assert_allclose(rc.B, b.Phi_p.T @ ops.B.toarray() @ b.Phi_u, atol=1e-12)
    assert rc.K.shape == (4, 4) and rc.B.shape == (3, 4)


def test_project_operators_requires_orthonormal(lib4):
    rng = np.random.default_rng(7)
    ops = lib4.ops["circle"]
    b = random_basis(ops.space, 3, rng)
    b.Phi_u = b.Phi_u * 1.01
    with pytest.raises(DimensionMismatch):
        project_operators(ops, b)
    with pytest.raises(DimensionMismatch):
        check_orthonormal(2 * np.eye(3))


def test_identity_projection(lib4):
    ops = lib4.ops["empty"]
    n_u, n_p = ops.space.n_u, ops.space.n_p
    b = ReducedBasis("empty", np.eye(n_u), np.eye(n_p), n_u, n_p, 0, np.ones(n_u), np.ones(n_p))
    rc = project_operators(ops, b)
    np.testing.assert_array_equal(rc.K, ops.K.toarray())
    np.testing.assert_array_equal(rc.B, ops.B.toarray())


def test_interface_projection_symmetry(lib4):
    rng = np.random.default_rng(8)
    bm = random_basis(lib4.spaces["circle"], 4, rng)
    bn = random_basis(lib4.spaces["star"], 3, rng)
    blk = project_interface(lib4.interface("circle", "star", "east"), bm, bn)
    np.testing.assert_allclose(blk.K_mm, blk.K_mm.T, atol=1e-12)
    np.testing.assert_allclose(blk.K_nn, blk.K_nn.T, atol=1e-12)
    np.testing.assert_allclose(blk.K_mn, blk.K_nm.T, atol=1e-12)


def test_full_rule_reproduces_projection(lib4):
    rng = np.random.default_rng(9)
    space = lib4.spaces["circle"]
    b = random_basis(space, 5, rng)
    rule = EqpRule.full(space, b.Phi_u)
    u = rng.standard_normal(5)
    ref = b.Phi_u.T @ eval_advection(space, b.Phi_u @ u)
    assert np.linalg.norm(eval_advection_eqp(rule, u) - ref) <= 1e-10 * np.linalg.norm(ref)
    G, rhs, _, _ = eqp_system(space, b.Phi_u, u[None])
    assert np.linalg.norm(G @ space.qw.ravel() - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_eqp_single_state_sparsity(lib4):
    rng = np.random.default_rng(10)
    space = lib4.spaces["empty"]
    b = random_basis(space, 1, rng)
    rule = train_eqp(space, b.Phi_u, rng.standard_normal((1, 1)), delta=1e-8)
    assert rule.n_points <= 2
    assert rule.residual <= 1e-8


@pytest.mark.parametrize("delta", [0.1, 0.01, 1e-3])
def test_eqp_training_guarantee(lib4, bases4, pods4, delta):
    _, snaps = pods4
    c = "star"
    Phi = bases4[c].Phi_u
    states = (Phi.T @ snaps.velocity[c]).T
    rule = train_eqp(lib4.spaces[c], Phi, states, delta=delta)
    assert rule.residual <= delta
    assert np.all(rule.weights > 0)
    assert rule.n_points < rule.n_candidates
    assert abs(rule.weights.sum() - lib4.spaces[c].qw.sum()) <= delta * lib4.spaces[c].qw.sum() * 10
    C = build_advection_tensor(lib4.spaces[c], Phi)
    ref = eval_advection_tensor(C, states)
    got = eval_advection_eqp(rule, states)
    assert np.linalg.norm(got - ref) <= delta * np.linalg.norm(ref) * (1 + 1e-9)
    assert np.all(eval_advection_eqp(rule, np.zeros(Phi.shape[1])) == 0.0)


def test_eqp_rule_shrinks_with_delta(lib4, bases4, pods4):
    _, snaps = pods4
    c = "circle"
    Phi = bases4[c].Phi_u
    states = (Phi.T @ snaps.velocity[c]).T
    n = [train_eqp(lib4.spaces[c], Phi, states, delta=d).n_points for d in (0.1, 0.01, 1e-3)]
    assert n[0] <= n[1] <= n[2]


def test_eqp_jacobian_fd(lib4, bases4, pods4):
    _, snaps = pods4
    c = "square"
    Phi = bases4[c].Phi_u
    states = (Phi.T @ snaps.velocity[c]).T
    rule = train_eqp(lib4.spaces[c], Phi, states, delta=0.01)
    rng = np.random.default_rng(11)
    u, d = states[0], rng.standard_normal(Phi.shape[1])
    h = 1e-6
    fd = (eval_advection_eqp(rule, u + h * d) - eval_advection_eqp(rule, u - h * d)) / (2 * h)
    assert np.linalg.norm(eqp_jacobian(rule, u) @ d - fd) <= 1e-8 * max(1.0, np.linalg.norm(fd))


def test_eqp_rejects_bad_delta(lib4):
    space = lib4.spaces["empty"]
    b = random_basis(space, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_eqp(space, b.Phi_u, np.ones((1, 2)), delta=1.5)


def test_library_covers_all_pairs(lib4, bases4):
    rom = RomLibrary.build(lib4, bases4, tensor=True)
    n = len(lib4.names)
    assert len(rom.interfaces) == n * n * len(FACES)
    assert set(rom.names) == set(lib4.names)


def test_bundle_roundtrip(tmp_path, lib4, bases4, pods4):
    _, snaps = pods4
    states = {c: (bases4[c].Phi_u.T @ snaps.velocity[c]).T for c in lib4.names}
    rom = RomLibrary.build(lib4, bases4, tensor=True, eqp_states=states, delta=0.05)
    rom.save(tmp_path / "rom", extra={"note": "x"})
    back = RomLibrary.load(tmp_path / "rom")
    assert back.manifest["note"] == "x"
    for c in lib4.names:
        a, b = rom.components[c], back.components[c]
        assert np.array_equal(a.K, b.K) and np.array_equal(a.B, b.B)
        assert np.array_equal(a.tensor, b.tensor)
        assert np.array_equal(a.eqp.weights, b.eqp.weights)
        assert np.array_equal(a.eqp.points, b.eqp.points)
        u = states[c][0]
        assert np.array_equal(eval_advection_eqp(a.eqp, u), eval_advection_eqp(b.eqp, u))
    key = ("circle", "star", "north")
    assert np.array_equal(rom.interfaces[key].G_mn, back.interfaces[key].G_mn)


def test_bundle_missing_artifact(tmp_path, lib4, bases4):
    with pytest.raises(MissingArtifact):
        RomLibrary.load(tmp_path / "nothing")
    rom = RomLibrary.build(lib4, bases4, tensor=False)
    rom.save(tmp_path / "rom")
    (tmp_path / "rom" / "circle" / "K.mat").unlink()
    with pytest.raises(MissingArtifact):
        RomLibrary.load(tmp_path / "rom")


def test_identity_basis_library(lib4):
    bases = {c: identity_basis(lib4.ops[c]) for c in lib4.names}
    rom = RomLibrary.build(lib4, bases, tensor=False)
    for c in lib4.names:
        assert rom.components[c].dim_u == bases[c].Phi_u.shape[1]
