import numpy as np
import pytest

from triafem.assembly import (
    DiscreteSolution,
    NonlinearSolveError,
    SolverError,
    assemble_linear,
    assemble_operator,
    element_gradients,
    energy_products,
    evaluate,
    grad_norm_sq,
    h1_error_sq,
    l2_norm,
    laplace_stiffness,
    nonlinear_jacobian,
    nonlinear_residual,
    p1_gradients,
    read_solution,
    restrict_functional,
    solve_linear,
    solve_nonlinear,
    transfer,
    write_solution,
)
from triafem.mesh import refine_nvb, uniform_refine, unit_square_mesh
from triafem.problems import (
    LinearProblem,
    NonlinearProblem,
    builtin_problem,
)
from triafem.problems import _constant_matrix, _constant_scalar, _constant_vector


def poisson(source=_constant_scalar(1.0), **kw):
    return LinearProblem(
        name="poisson", diffusion=_constant_matrix(np.eye(2)), source=source,
        ellipticity_const=1.0, continuity_const=1.0, **kw,
    )


def interpolate(mesh, fn):
    values = fn(mesh.vertices)
    values[mesh.is_boundary_vertex] = 0.0
    return DiscreteSolution(mesh, values)


def test_p1_gradients_reference_triangle():
    from triafem.mesh import load_initial_mesh

    mesh = load_initial_mesh([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], [(0, 1, 2)])
    grads = p1_gradients(mesh)
    tri = mesh.triangles[0]
    by_vertex = {tuple(mesh.vertices[tri[k]]): grads[0, k] for k in range(3)}
    assert by_vertex[(0.0, 0.0)] == pytest.approx([-1.0, -1.0])
    assert by_vertex[(1.0, 0.0)] == pytest.approx([1.0, 0.0])
    assert by_vertex[(0.0, 1.0)] == pytest.approx([0.0, 1.0])


def test_all_boundary_mesh_gives_empty_system():
    mesh = unit_square_mesh()
    system = assemble_linear(mesh, poisson())
    assert system.rhs.shape == (0,)
    sol = solve_linear(system)
    assert np.all(sol.values == 0.0)


def test_stiffness_row_sums():
    mesh = uniform_refine(unit_square_mesh(cross=True), 4)
    matrix, _ = assemble_operator(mesh, poisson())
    # constants lie in the kernel of the full stiffness matrix
    assert np.abs(matrix @ np.ones(mesh.n_vertices)).max() < 1e-12
    # restricted rows sum to zero whenever no neighbour is on the boundary
    system = assemble_linear(mesh, poisson())
    row_sums = np.asarray(system.matrix.sum(axis=1)).ravel()
    full_csr = matrix.tocsr()
    for k, v in enumerate(system.interior):
        neighbours = full_csr.indices[full_csr.indptr[v]: full_csr.indptr[v + 1]]
        if not np.any(mesh.is_boundary_vertex[neighbours]):
            assert abs(row_sums[k]) < 1e-12


def test_convection_matrix_against_hand_formula():
    # b . grad(phi_j) is constant per element and int_T phi_i = |T| / 3,
    # so every entry has a closed form; this oracle walks the elements
    mesh = uniform_refine(unit_square_mesh(cross=True), 2)
    b = np.array([1.0, 0.0])
    problem = LinearProblem(
        name="pure_convection",
        diffusion=_constant_matrix(np.zeros((2, 2))),
        advection=_constant_vector(b),
        source=_constant_scalar(0.0),
    )
    matrix, _ = assemble_operator(mesh, problem)
    grads = p1_gradients(mesh)
    expected = np.zeros((mesh.n_vertices, mesh.n_vertices))
    for n, tri in enumerate(mesh.triangles):
        for j_loc, j in enumerate(tri):
            conv = b @ grads[n, j_loc]
            for i in tri:
                expected[i, j] += conv * mesh.areas[n] / 3.0
    assert np.abs(matrix.toarray() - expected).max() < 1e-13


def test_solve_zero_rhs():
    mesh = uniform_refine(unit_square_mesh(cross=True), 2)
    system = assemble_linear(mesh, poisson(source=_constant_scalar(0.0)))
    sol = solve_linear(system)
    assert np.all(sol.values == 0.0)


def test_cross_mesh_single_dof_hand_value():
    # one interior vertex: K_cc = 4, rhs_c = 1/3, so U_c = 1/12
    mesh = unit_square_mesh(cross=True)
    system = assemble_linear(mesh, poisson())
    assert system.matrix.shape == (1, 1)
    assert system.matrix[0, 0] == pytest.approx(4.0)
    assert system.rhs[0] == pytest.approx(1.0 / 3.0)
    sol = solve_linear(system)
    centre = np.nonzero(~mesh.is_boundary_vertex)[0][0]
    assert sol.values[centre] == pytest.approx(1.0 / 12.0)


def test_square_smooth_nodal_error_order():
    problem = builtin_problem("square_smooth")
    errors = []
    for levels in (4, 6):
        mesh = uniform_refine(problem.make_initial_mesh(), levels)
        sol = solve_linear(assemble_linear(mesh, problem))
        errors.append(np.abs(sol.values - problem.exact_u(mesh.vertices)).max())
    ratio = errors[0] / errors[1]
    assert 3.0 < ratio < 5.0


def test_solver_stagnation_reports_residual():
    mesh = uniform_refine(unit_square_mesh(cross=True), 8)
    system = assemble_linear(mesh, poisson())
    with pytest.raises(SolverError) as err:
        solve_linear(system, method="iterative", maxiter=0)
    assert err.value.achieved is not None and err.value.achieved > 1e-10


def test_iterative_path_meets_contract():
    problem = builtin_problem("convection_diffusion")
    mesh = uniform_refine(problem.make_initial_mesh(), 8)
    system = assemble_linear(mesh, problem)
    direct = solve_linear(system, method="direct")
    iterative = solve_linear(system, method="iterative")
    assert np.abs(direct.values - iterative.values).max() < 1e-8


def wrapped_linear_as_nonlinear():
    def flux(x, y):
        return y

    def flux_jacobian(x, y):
        return np.broadcast_to(np.eye(2), y.shape + (2,))

    smooth = builtin_problem("square_smooth")
    return NonlinearProblem(
        name="wrapped_poisson",
        flux=flux,
        flux_jacobian=flux_jacobian,
        source=smooth.source,
        lipschitz_const=1.0,
        monotone_const=1.0,
        exact_u=smooth.exact_u,
        exact_grad=smooth.exact_grad,
        make_initial_mesh=smooth.make_initial_mesh,
    )


def test_newton_converges_in_one_step_for_affine_residual():
    problem = wrapped_linear_as_nonlinear()
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    sol, info = solve_nonlinear(mesh, problem, full_output=True)
    assert info["newton_iterations"] == 1
    assert info["fallback_iterations"] == 0
    linear = solve_linear(assemble_linear(mesh, builtin_problem("square_smooth")))
    assert np.abs(sol.values - linear.values).max() < 1e-9


def test_newton_accepts_exact_initial_guess():
    problem = builtin_problem("magnetostatics_nl")
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    sol = solve_nonlinear(mesh, problem)
    again, info = solve_nonlinear(mesh, problem, initial_guess=sol, full_output=True)
    assert info["newton_iterations"] == 0
    assert np.array_equal(again.values, sol.values)


def test_magnetostatics_converges_under_refinement():
    problem = builtin_problem("magnetostatics_nl")
    distances = []
    for levels in (2, 4, 6, 8):
        mesh = uniform_refine(problem.make_initial_mesh(), levels)
        sol = solve_nonlinear(mesh, problem)
        nodal = interpolate(mesh, problem.exact_u)
        distances.append(np.sqrt(grad_norm_sq(mesh, sol.values - nodal.values)))
    ratios = [b / a for a, b in zip(distances, distances[1:])]
    assert all(r < 0.6 for r in ratios)
    assert ratios[-1] < 0.52


def test_zarantonello_only_converges():
    problem = builtin_problem("magnetostatics_nl")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    sol, info = solve_nonlinear(mesh, problem, method="zarantonello", full_output=True)
    assert info["newton_iterations"] == 0
    assert 0 < info["fallback_iterations"] <= 10_000
    newton = solve_nonlinear(mesh, problem)
    assert np.abs(sol.values - newton.values).max() < 1e-7


def test_nonlinear_budget_exhaustion_carries_best_residual():
    problem = builtin_problem("magnetostatics_nl")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    with pytest.raises(NonlinearSolveError) as err:
        solve_nonlinear(mesh, problem, method="zarantonello", max_fallback=3)
    assert 0.0 < err.value.best_residual < 1.0


def test_nonlinear_jacobian_matches_finite_differences():
    problem = builtin_problem("magnetostatics_nl")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    rng = np.random.default_rng(0)
    values = np.zeros(mesh.n_vertices)
    values[mesh.interior_vertices] = rng.normal(0.0, 0.3, mesh.interior_vertices.size)
    jac = nonlinear_jacobian(mesh, problem, values).toarray()
    n = mesh.interior_vertices.size
    fd = np.empty((n, n))
    step = 1e-6
    for k, v in enumerate(mesh.interior_vertices):
        up, down = values.copy(), values.copy()
        up[v] += step
        down[v] -= step
        fd[:, k] = (
            nonlinear_residual(mesh, problem, up) - nonlinear_residual(mesh, problem, down)
        ) / (2.0 * step)
    assert np.abs(fd - jac).max() / np.abs(jac).max() < 1e-5


def test_energy_products_linear():
    problem = builtin_problem("square_smooth")
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    rng = np.random.default_rng(1)
    w = np.zeros(mesh.n_vertices)
    v = np.zeros(mesh.n_vertices)
    w[mesh.interior_vertices] = rng.normal(size=mesh.interior_vertices.size)
    v[mesh.interior_vertices] = rng.normal(size=mesh.interior_vertices.size)
    ws, vs = DiscreteSolution(mesh, w), DiscreteSolution(mesh, v)
    _, zero = energy_products(mesh, problem, ws, ws)
    assert zero == pytest.approx(0.0, abs=1e-14)
    # for A = I the energy distance is the squared H1 seminorm
    _, dl_sq = energy_products(mesh, problem, ws, vs)
    assert dl_sq == pytest.approx(grad_norm_sq(mesh, w - v), rel=1e-12)
    b_wv, _ = energy_products(mesh, problem, ws, vs)
    assert np.isfinite(b_wv)


def test_energy_products_mesh_mismatch():
    problem = builtin_problem("square_smooth")
    mesh = problem.make_initial_mesh()
    finer = uniform_refine(mesh, 1)
    a = DiscreteSolution(mesh, np.zeros(mesh.n_vertices))
    b = DiscreteSolution(finer, np.zeros(finer.n_vertices))
    with pytest.raises(ValueError, match="mesh"):
        energy_products(mesh, problem, a, b)


def test_nonlinear_energy_distance_band():
    # C_mono |grad(w - v)|^2 <= dl^2 <= 2 C_lip |grad(w - v)|^2 on random pairs
    problem = builtin_problem("magnetostatics_nl")
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    rng = np.random.default_rng(2)
    for _ in range(100):
        w = np.zeros(mesh.n_vertices)
        v = np.zeros(mesh.n_vertices)
        w[mesh.interior_vertices] = rng.normal(0.0, 0.5, mesh.interior_vertices.size)
        v[mesh.interior_vertices] = rng.normal(0.0, 0.5, mesh.interior_vertices.size)
        _, dl_sq = energy_products(
            mesh, problem, DiscreteSolution(mesh, w), DiscreteSolution(mesh, v)
        )
        h1 = grad_norm_sq(mesh, w - v)
        assert problem.monotone_const * h1 - 1e-12 <= dl_sq
        assert dl_sq <= 2.0 * problem.lipschitz_const * h1 + 1e-12


def test_transfer_is_pointwise_exact():
    problem = builtin_problem("square_smooth")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    sol = solve_linear(assemble_linear(mesh, problem))
    fine = uniform_refine(mesh, 2)
    moved = transfer(sol, fine)
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.05, 0.95, size=(50, 2))
    assert np.abs(evaluate(moved, pts) - evaluate(sol, pts)).max() < 1e-14


def test_transfer_zero_and_composition():
    mesh = unit_square_mesh(cross=True)
    zero = DiscreteSolution(mesh, np.zeros(mesh.n_vertices))
    mid = uniform_refine(mesh, 1)
    fine = uniform_refine(mid, 1)
    assert np.all(transfer(zero, fine).values == 0.0)
    rng = np.random.default_rng(4)
    vals = np.zeros(mesh.n_vertices)
    vals[mesh.interior_vertices] = rng.normal(size=mesh.interior_vertices.size)
    sol = DiscreteSolution(mesh, vals)
    direct = transfer(sol, fine)
    stepped = transfer(transfer(sol, mid), fine)
    assert np.array_equal(direct.values, stepped.values)


def test_transfer_rejects_non_refinement():
    base = unit_square_mesh(cross=True)
    m1, _ = refine_nvb(base, {0})
    m2, _ = refine_nvb(base, {1})
    sol = DiscreteSolution(m1, np.zeros(m1.n_vertices))
    with pytest.raises(ValueError, match="refinement"):
        transfer(sol, m2)


def test_galerkin_orthogonality_against_reference():
    # f = 1 keeps all quadratures exact, so the discrete orthogonality
    # b(u_ref - U, phi_coarse) = 0 holds to solver precision
    problem = builtin_problem("convection_diffusion")
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    sol = solve_linear(assemble_linear(mesh, problem))
    ref_mesh = uniform_refine(mesh, 3)
    ref_matrix, _ = assemble_operator(ref_mesh, problem)
    ref_sol = solve_linear(assemble_linear(ref_mesh, problem))
    err = ref_sol.values - transfer(sol, ref_mesh).values
    functional = restrict_functional(ref_mesh, mesh, ref_matrix @ err)
    f_norm = l2_norm(ref_mesh, problem.source)
    assert np.abs(functional[~mesh.is_boundary_vertex]).max() <= 1e-8 * f_norm


@pytest.mark.parametrize("name,cea_slack", [
    ("convection_diffusion", 1.0),
    ("square_smooth", 1.05),
])
def test_cea_bound_with_nodal_interpolant(name, cea_slack):
    problem = builtin_problem(name)
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    sol = solve_linear(assemble_linear(mesh, problem))
    ref_mesh = uniform_refine(mesh, 2)
    ref_sol = solve_linear(assemble_linear(ref_mesh, problem))
    moved = transfer(sol, ref_mesh)
    galerkin_err = np.sqrt(grad_norm_sq(ref_mesh, ref_sol.values - moved.values))

    # candidate interpolants: the nodal interpolant of u_ref plus random
    # interior perturbations of it
    idx = np.searchsorted(ref_mesh.vertex_gids, mesh.vertex_gids)
    nodal = np.zeros(mesh.n_vertices)
    nodal[:] = ref_sol.values[idx]
    nodal[mesh.is_boundary_vertex] = 0.0
    rng = np.random.default_rng(5)
    candidate_errors = []
    for k in range(20):
        cand = nodal.copy()
        if k:
            cand[mesh.interior_vertices] += rng.normal(
                0.0, 0.1 * np.abs(nodal).max(), mesh.interior_vertices.size
            )
        moved_cand = transfer(DiscreteSolution(mesh, cand), ref_mesh)
        candidate_errors.append(
            np.sqrt(grad_norm_sq(ref_mesh, ref_sol.values - moved_cand.values))
        )
    cea_const = problem.continuity_const / problem.ellipticity_const
    nodal_err = candidate_errors[0]
    assert galerkin_err <= cea_slack * cea_const * nodal_err
    assert galerkin_err <= cea_slack * cea_const * min(candidate_errors)


def test_residual_error_equivalence_across_levels():
    # dual-norm residual surrogate vs exact H1 error on 4 uniform levels
    problem = builtin_problem("magnetostatics_nl")
    ratios = []
    for levels in (2, 4, 6, 8):
        mesh = uniform_refine(problem.make_initial_mesh(), levels)
        sol = solve_nonlinear(mesh, problem)
        fine = uniform_refine(mesh, 1)
        moved = transfer(sol, fine)
        residual = nonlinear_residual(fine, problem, moved.values)
        import scipy.sparse.linalg as spla

        dual = float(np.sqrt(residual @ spla.spsolve(laplace_stiffness(fine).tocsc(), residual)))
        h1 = np.sqrt(h1_error_sq(mesh, sol.values, problem.exact_grad))
        ratios.append(dual / h1)
    assert max(ratios) / min(ratios) < 10.0


def test_element_gradients_of_linear_function():
    mesh = uniform_refine(unit_square_mesh(cross=True), 2)
    values = 2.0 * mesh.vertices[:, 0] - 3.0 * mesh.vertices[:, 1]
    grads = element_gradients(mesh, values)
    assert np.abs(grads - np.array([2.0, -3.0])).max() < 1e-12


def test_solution_file_roundtrip(tmp_path):
    problem = builtin_problem("square_smooth")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    sol = solve_linear(assemble_linear(mesh, problem))
    path = tmp_path / "sol.txt"
    write_solution(sol, path)
    back = read_solution(mesh, path)
    assert np.array_equal(back.values, sol.values)


def test_boundary_values_must_be_zero():
    mesh = unit_square_mesh(cross=True)
    bad = np.ones(mesh.n_vertices)
    with pytest.raises(ValueError, match="boundary"):
        DiscreteSolution(mesh, bad)
