import numpy as np
import pytest
from scipy.optimize import linprog

from fcgrasp.energy import (NONSMOOTH_FLAGS, VARIANTS, EnergyWeights, e_dis, e_fc_constrained_ii,
                            e_fc_dexgraspnet, e_fc_graspqp, e_joints, e_pen_spheres, energy_gradient,
                            evaluate_grasps, fc_from_wrench, force_closure_energy, normal_weight, total_energy)
from fcgrasp.gripper import Grasp, fk_jacobian, forward_kinematics, retract_quat
from fcgrasp.geometry import sdf_eval
from fcgrasp.qp import BoxQp, solve_box_qp
from fcgrasp.wrench import build_wrench_matrix, positively_spans

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
ANTIPODAL = (np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.array([[1.0, 0, 0], [-1.0, 0, 0]]))


def equatorial(k=3):
    a = 2 * np.pi * np.arange(k) / k
    p = np.stack([np.cos(a), np.sin(a), np.zeros(k)], axis=1)
    return p, p.copy()


def random_sphere_contacts(rng, k):
    n = rng.normal(size=(k, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return n.copy(), n


def test_weights_validation():
    with pytest.raises(ValueError):
        EnergyWeights(variant="nope")
    with pytest.raises(ValueError):
        EnergyWeights(w_dis=-1.0)
    with pytest.raises(ValueError):
        EnergyWeights(upper=1.0)
    assert EnergyWeights(variant="graspqp-no-exp").variant == "graspqp_no_exp"
    assert EnergyWeights(variant="gendexgrasp_dis").variant == "gendexgrasp"
    assert not EnergyWeights(variant="dexgraspnet").weighted_dis
    assert EnergyWeights(variant="graspqp").weighted_dis


def test_graspqp_balanced_frictionless_pair():
    value, gamma, _ = e_fc_graspqp(ANTIPODAL, EnergyWeights(mu=0.0))
    assert value < 1e-12
    np.testing.assert_allclose(gamma, [1.0, 1.0])


def test_graspqp_single_contact():
    value, gamma, prod = e_fc_graspqp(([[0.0, 0, 0]], [[0.0, 0, 1]]), EnergyWeights(mu=0.0))
    assert prod == 0.0
    assert value == pytest.approx(1.0, abs=1e-12)


def test_graspqp_sphere_grasps():
    p, n = equatorial(3)
    value, _, _ = e_fc_graspqp((p, n), EnergyWeights(mu=0.5))
    assert value < 0.05
    assert positively_spans(build_wrench_matrix((p, n), 0.5))
    assert not positively_spans(build_wrench_matrix(ANTIPODAL, 0.5))


def test_dexgraspnet_examples(rng):
    assert e_fc_dexgraspnet(ANTIPODAL) < 1e-12
    assert e_fc_dexgraspnet(([[0.0, 0, 0]], [[0.0, 1, 0]])) == pytest.approx(1.0)
    # whenever the QP puts every coordinate on the lower bound the two agree
    hits = 0
    for _ in range(200):
        p, n = random_sphere_contacts(rng, 3)
        p = p * rng.uniform(0.2, 1.0, size=(3, 1))
        W = build_wrench_matrix((p, n), 0.0).columns
        sol = solve_box_qp(BoxQp(W.T @ W))
        if np.all(sol.z == 1.0):
            r = force_closure_energy((p, n), EnergyWeights(variant="graspqp_no_exp", mu=0.0))
            assert e_fc_dexgraspnet((p, n)) == pytest.approx(r.value, rel=1e-12)
            hits += 1
    assert hits > 10


def test_constrained_ii_examples(rng):
    w = EnergyWeights(mu=0.0)
    assert e_fc_constrained_ii(ANTIPODAL, w) < 1e-12
    assert e_fc_constrained_ii(([[0.0, 0, 0]], [[1.0, 0, 0]]), w) == pytest.approx(1.0)
    for _ in range(40):
        k = int(rng.integers(2, 7))
        contacts = random_sphere_contacts(rng, k)
        W = build_wrench_matrix(contacts, 0.2).columns
        n = W.shape[1]
        feas = linprog(np.zeros(n), A_eq=np.vstack([W, np.ones((1, n))]), b_eq=np.r_[np.zeros(6), n],
                       bounds=[(0, None)] * n, method="highs").status == 0
        r = force_closure_energy(contacts, EnergyWeights(variant="constrained_ii", mu=0.2))
        assert r.value >= 0
        # the exp factor can shrink the value without closing the residual, so
        # zero is decided on the residual factor
        assert (r.residual < 1e-6) == feas


def test_e_dis_examples():
    assert e_dis(np.zeros(4)) == 0.0
    n = np.array([[0.0, 0, 1]])
    assert e_dis([0.01]) == pytest.approx(0.01)
    assert e_dis([0.01], n, n, weighted=True) == pytest.approx(0.01)
    assert e_dis([0.01], -n, n, weighted=True) == pytest.approx(np.exp(2) * 0.01)


def test_weighted_distance_dominates(rng):
    a = rng.normal(size=(100, 3))
    b = rng.normal(size=(100, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    assert np.all(normal_weight(a, b) >= 1.0 - 1e-15)


def test_regularizer_examples():
    assert e_pen_spheres([-0.005], [0.01]) == pytest.approx(0.015)
    assert e_pen_spheres([0.5], [0.01]) == 0.0
    assert e_joints([1.1], [0.0], [1.0]) == pytest.approx(0.01)
    assert e_joints([0.5], [0.0], [1.0]) == 0.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_fc_energy_nonnegative(variant, rng):
    for _ in range(10):
        contacts = random_sphere_contacts(rng, int(rng.integers(1, 6)))
        assert force_closure_energy(contacts, EnergyWeights(variant=variant)).value >= 0


def test_zero_energy_resubstitution(rng):
    zeros = 0
    for _ in range(100):
        contacts = random_sphere_contacts(rng, int(rng.integers(3, 7)))
        r = force_closure_energy(contacts, EnergyWeights(mu=0.5))
        # the exp factor is positive, so a zero value means a zero residual
        if r.residual < 1e-10:
            assert np.all(r.gamma >= 1.0) and np.all(r.gamma <= 50.0)
            assert np.linalg.norm(r.W @ r.gamma) < 1e-6
            zeros += 1
    assert zeros > 0


def test_exp_factor_range(rng):
    for _ in range(30):
        contacts = random_sphere_contacts(rng, int(rng.integers(1, 6)))
        W = build_wrench_matrix(contacts, 0.2).columns
        r = force_closure_energy(contacts)
        factor = np.exp(-r.sigma_product)
        assert 0 < factor <= 1
        if np.linalg.matrix_rank(W) < 6:
            assert factor == 1.0


def test_rotation_invariance_frictionless(rng):
    from scipy.spatial.transform import Rotation

    w = EnergyWeights(mu=0.0)
    for _ in range(20):
        p, n = random_sphere_contacts(rng, 4)
        p = p * rng.uniform(0.5, 1.0, size=(4, 1))
        R = Rotation.random(random_state=rng).as_matrix()
        a = e_fc_graspqp((p, n), w)[0]
        b = e_fc_graspqp((p @ R.T, n @ R.T), w)[0]
        assert abs(a - b) < 1e-8


def test_rotation_invariance_under_axis_permutations(rng):
    # the pyramid's tangent basis is seeded from world axes, so with friction
    # the energy is invariant under rotations that permute the axes
    from scipy.spatial.transform import Rotation

    perms = Rotation.create_group("O").as_matrix()
    for _ in range(20):
        p, n = random_sphere_contacts(rng, 4)
        R = perms[rng.integers(len(perms))]
        a = e_fc_graspqp((p, n))[0]
        b = e_fc_graspqp((p @ R.T, n @ R.T))[0]
        assert abs(a - b) < 1e-8


def test_fc_wrench_gradient_matches_finite_differences(rng):
    checked = 0
    h = 1e-6
    while checked < 50:
        k = int(rng.integers(2, 5))
        W = rng.normal(size=(6, 4 * k))
        out, dW = fc_from_wrench(W, "graspqp", grad=True)
        if out.flags & NONSMOOTH_FLAGS:
            continue
        D = rng.normal(size=W.shape)
        fd = (fc_from_wrench(W + h * D)[0].value - fc_from_wrench(W - h * D)[0].value) / (2 * h)
        an = np.sum(dW * D)
        assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-8)
        checked += 1


def symmetric_grasp(obj):
    # fingers mirror each other through the object center, palm clear of it
    return Grasp(obj.com - np.array([0.0, 0.0, 0.065]), IDENTITY, np.array([0.045]), np.array([1, 5, 9, 13]))


def test_symmetric_grasp_has_no_lateral_gradient(toy_sphere, parallel_2f):
    g, flags = energy_gradient(symmetric_grasp(toy_sphere), toy_sphere, parallel_2f, EnergyWeights())
    assert not flags & NONSMOOTH_FLAGS
    assert np.linalg.norm(g[:2]) < 1e-6


def test_breakdown_accounting(toy_sphere, parallel_2f):
    grasp = symmetric_grasp(toy_sphere)
    only_fc = total_energy(grasp, toy_sphere, parallel_2f, EnergyWeights(w_dis=0, w_pen=0, w_spen=0, w_joints=0))
    assert only_fc.total == only_fc.e_fc
    a = total_energy(grasp, toy_sphere, parallel_2f, EnergyWeights(w_dis=100.0))
    b = total_energy(grasp, toy_sphere, parallel_2f, EnergyWeights(w_dis=200.0))
    assert (b.total - b.e_fc - 100 * a.e_pen - 10 * a.e_spen - a.e_joints) == pytest.approx(200 * a.e_dis, rel=1e-12)
    assert a.total == pytest.approx(a.e_fc + 100 * a.e_dis + 100 * a.e_pen + 10 * a.e_spen + a.e_joints, rel=1e-14)


def test_exp_factor_between_variants(toy_sphere, parallel_2f):
    grasp = symmetric_grasp(toy_sphere)
    grasp.contacts = np.array([0, 6, 9, 15])
    a = total_energy(grasp, toy_sphere, parallel_2f, EnergyWeights(variant="graspqp"))
    b = total_energy(grasp, toy_sphere, parallel_2f, EnergyWeights(variant="graspqp_no_exp"))
    # independent sigma product from the eigenvalues of W W^T
    fk = forward_kinematics(parallel_2f, grasp.translation, grasp.quat, grasp.q)
    pts = fk.candidate_points[grasp.contacts]
    s = sdf_eval(toy_sphere.sdf, pts)
    n = s.gradient / np.linalg.norm(s.gradient, axis=1, keepdims=True)
    W = build_wrench_matrix((pts - toy_sphere.com, n), 0.2).columns
    prod = np.prod(np.sqrt(np.clip(np.linalg.eigvalsh(W @ W.T), 0, None)))
    assert prod > 0
    assert a.e_fc == pytest.approx(b.e_fc * np.exp(-prod), rel=1e-9)


def test_distance_only_gradient_is_one_term_chain(toy_sphere, parallel_2f):
    grasp = Grasp(toy_sphere.com - np.array([0.0, 0.0, 0.065]), IDENTITY, np.array([0.045]), np.array([5]))
    base = dict(w_pen=0.0, w_spen=0.0, w_joints=0.0, normal_weighted_dis=False)
    g1, _ = energy_gradient(grasp, toy_sphere, parallel_2f, EnergyWeights(w_dis=1.0, **base))
    g0, _ = energy_gradient(grasp, toy_sphere, parallel_2f, EnergyWeights(w_dis=0.0, **base))
    J = fk_jacobian(parallel_2f, grasp.translation, grasp.quat, grasp.q, 5)
    p = forward_kinematics(parallel_2f, grasp.translation, grasp.quat, grasp.q).candidate_points[5]
    s = sdf_eval(toy_sphere.sdf, p[None])
    expected = np.sign(s.distance[0]) * s.gradient[0] @ J
    np.testing.assert_allclose(g1 - g0, expected, rtol=1e-9, atol=1e-12)


def _random_config(model, obj, rng):
    t = obj.com + rng.normal(size=3) * 0.03
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    q = model.lower + (model.upper - model.lower) * rng.uniform(0.2, 0.8, model.n_q)
    contacts = rng.choice(model.n_candidates, 4, replace=False)
    return t, quat, q, contacts


@pytest.mark.parametrize("gripper", ["parallel_2f", "trifinger"])
@pytest.mark.parametrize("variant", ["graspqp", "dexgraspnet", "gendexgrasp", "constrained_ii"])
def test_full_gradient_matches_finite_differences(gripper, variant, toy_sphere, request, rng):
    model = request.getfixturevalue(gripper)
    w = EnergyWeights(variant=variant)
    h = 1e-7
    checked = 0
    for _ in range(15):
        t, quat, q, c = _random_config(model, toy_sphere, rng)
        be = evaluate_grasps(model, toy_sphere, t, quat, q, c, w)
        if be.flags[0] & NONSMOOTH_FLAGS:
            continue
        g = be.grad[0]
        fd = np.zeros_like(g)
        for k in range(len(g)):
            d = np.zeros(len(g))
            d[k] = h

            def E(d):
                return evaluate_grasps(model, toy_sphere, t + d[:3], retract_quat(quat, d[3:6]), q + d[6:], c, w,
                                       grad=False).total[0]

            fd[k] = (E(d) - E(-d)) / (2 * h)
        assert np.linalg.norm(fd - g) <= 1e-3 * np.linalg.norm(fd)
        checked += 1
    assert checked >= 10
