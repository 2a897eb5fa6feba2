import numpy as np
import pytest

from triafem.assembly import (
    DiscreteSolution,
    assemble_linear,
    h1_error_sq,
    solve_linear,
    solve_nonlinear,
)
from triafem.estimator import (
    EstimatorError,
    estimate,
    local_sum,
    oscillations,
    read_report_csv,
    write_report_csv,
)
from triafem.mesh import load_initial_mesh, refine_nvb, uniform_refine, unit_square_mesh
from triafem.problems import LinearProblem, builtin_problem
from triafem.problems import _constant_matrix, _constant_scalar


def poisson(source):
    return LinearProblem(
        name="poisson", diffusion=_constant_matrix(np.eye(2)), source=source,
        ellipticity_const=1.0, continuity_const=1.0,
    )


def test_zero_data_zero_indicators():
    mesh = uniform_refine(unit_square_mesh(cross=True), 2)
    sol = DiscreteSolution(mesh, np.zeros(mesh.n_vertices))
    report = estimate(mesh, sol, poisson(_constant_scalar(0.0)))
    assert np.all(report.indicators_sq == 0.0)
    assert report.eta_sq_total == 0.0
    assert report.osc_sq_total == 0.0


def test_hand_computed_jump_indicator():
    # 2-triangle square bisected at the diagonal; U is the hat at the new
    # centre vertex. Every interior edge has |grad U| jump of size 2*sqrt(2)
    # normal to it, every triangle carries two such edges:
    #   indicator(T)^2 = sqrt(1/4) * 2 * (sqrt(2)/2 * 8) = 4*sqrt(2)
    mesh, _ = refine_nvb(unit_square_mesh(), {0})
    assert mesh.n_elements == 4
    centre = int(np.nonzero(~mesh.is_boundary_vertex)[0][0])
    values = np.zeros(mesh.n_vertices)
    values[centre] = 1.0
    sol = DiscreteSolution(mesh, values)
    report = estimate(mesh, sol, poisson(_constant_scalar(0.0)))
    assert report.indicators_sq == pytest.approx(np.full(4, 4.0 * np.sqrt(2.0)), rel=1e-12)
    assert report.eta_sq_total == pytest.approx(16.0 * np.sqrt(2.0), rel=1e-12)
    assert np.all(report.osc_sq == 0.0)


def test_total_is_sum_of_indicators():
    problem = builtin_problem("square_smooth")
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    sol = solve_linear(assemble_linear(mesh, problem))
    report = estimate(mesh, sol, problem)
    assert report.eta_sq_total == pytest.approx(report.indicators_sq.sum(), rel=1e-12)


def test_estimator_decay_under_uniform_refinement():
    problem = builtin_problem("square_smooth")
    totals = []
    for levels in (4, 6):
        mesh = uniform_refine(problem.make_initial_mesh(), levels)
        sol = solve_linear(assemble_linear(mesh, problem))
        totals.append(estimate(mesh, sol, problem).eta_sq_total)
    ratio = totals[0] / totals[1]
    assert 3.0 < ratio < 5.0


def test_oscillation_of_linear_source_on_reference_triangle():
    # f(x, y) = x, U = 0: osc^2 = |T| * ||x - 1/3||^2 = 1/2 * 1/36
    mesh = load_initial_mesh([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], [(0, 1, 2)])
    sol = DiscreteSolution(mesh, np.zeros(3))
    problem = poisson(lambda x: x[..., 0])
    report = estimate(mesh, sol, problem)
    assert report.osc_sq[0] == pytest.approx(1.0 / 72.0, rel=1e-12)
    # eta^2 = |T| * ||x||^2 = 1/2 * 1/12 (no interior edges)
    assert report.indicators_sq[0] == pytest.approx(1.0 / 24.0, rel=1e-12)
    assert np.array_equal(oscillations(mesh, sol, problem), report.osc_sq)


def test_constant_data_has_zero_oscillation():
    problem = builtin_problem("convection_diffusion")
    mesh = uniform_refine(problem.make_initial_mesh(), 3)
    sol = solve_linear(assemble_linear(mesh, problem))
    report = estimate(mesh, sol, problem)
    # f and the coefficients are constant, u_h is linear per element, so
    # the volume residual is elementwise linear; only the reaction c*u
    # contributes to oscillations here
    assert np.all(report.osc_sq <= report.indicators_sq + 1e-15)


def test_oscillation_bounded_by_volume_term():
    problem = builtin_problem("lshape_poisson")
    mesh = uniform_refine(problem.make_initial_mesh(), 4)
    sol = solve_linear(assemble_linear(mesh, problem))
    report = estimate(mesh, sol, problem)
    assert np.all(report.osc_sq <= report.indicators_sq * (1.0 + 1e-12) + 1e-15)
    assert report.osc_sq_total <= report.eta_sq_total


def test_exact_discrete_solution_leaves_pure_oscillation():
    # single triangle: no interior vertex, so U = 0 is the discrete
    # solution; a mean-free f makes the indicator pure oscillation
    mesh = load_initial_mesh([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], [(0, 1, 2)])
    sol = DiscreteSolution(mesh, np.zeros(3))
    problem = poisson(lambda x: x[..., 0] - 1.0 / 3.0)
    report = estimate(mesh, sol, problem)
    assert report.indicators_sq[0] == pytest.approx(report.osc_sq[0], rel=1e-12)


def test_local_sum():
    problem = builtin_problem("square_smooth")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    sol = solve_linear(assemble_linear(mesh, problem))
    report = estimate(mesh, sol, problem)
    assert local_sum(report, range(mesh.n_elements)) == pytest.approx(report.eta_sq_total)
    assert local_sum(report, set()) == 0.0
    assert local_sum(report, {0, 2}) == pytest.approx(
        report.indicators_sq[0] + report.indicators_sq[2]
    )
    with pytest.raises(IndexError):
        local_sum(report, {mesh.n_elements})


def test_mesh_solution_mismatch():
    problem = builtin_problem("square_smooth")
    mesh = problem.make_initial_mesh()
    other = uniform_refine(mesh, 1)
    sol = DiscreteSolution(mesh, np.zeros(mesh.n_vertices))
    with pytest.raises(EstimatorError):
        estimate(other, sol, problem)


def test_nonlinear_estimator_requires_grad_only_flux():
    problem = builtin_problem("magnetostatics_nl")
    bad = problem.__class__(**{**problem.__dict__, "grad_only": False})
    mesh = problem.make_initial_mesh()
    sol = DiscreteSolution(mesh, np.zeros(mesh.n_vertices))
    with pytest.raises(EstimatorError, match="gradient-only"):
        estimate(mesh, sol, bad)


def test_nonlinear_estimator_volume_term_for_zero_solution():
    # U = 0: the flux vanishes, so eta^2(T) = |T| * ||f||_T^2 exactly
    problem = builtin_problem("magnetostatics_nl")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    sol = DiscreteSolution(mesh, np.zeros(mesh.n_vertices))
    report = estimate(mesh, sol, problem)
    from triafem import quadrature

    p = mesh.vertices[mesh.triangles]
    pts = quadrature.triangle_points(p[:, 0], p[:, 1], p[:, 2])
    f_sq = problem.source(pts.reshape(-1, 2)).reshape(mesh.n_elements, -1) ** 2
    expected = mesh.areas**2 * (f_sq @ quadrature.TRI_WEIGHTS)
    assert report.indicators_sq == pytest.approx(expected, rel=1e-12)


def test_nonlinear_estimator_on_solution():
    problem = builtin_problem("magnetostatics_nl")
    totals = []
    for levels in (3, 5):
        mesh = uniform_refine(problem.make_initial_mesh(), levels)
        sol = solve_nonlinear(mesh, problem)
        totals.append(estimate(mesh, sol, problem).eta_sq_total)
    assert 3.0 < totals[0] / totals[1] < 5.0


def test_reliability_and_efficiency_constants():
    # fitted over a uniform refinement run of the singular benchmark
    problem = builtin_problem("lshape_poisson")
    mesh = problem.make_initial_mesh()
    rel_ratios, eff_ratios = [], []
    for _ in range(6):
        mesh = uniform_refine(mesh, 2)
        sol = solve_linear(assemble_linear(mesh, problem))
        report = estimate(mesh, sol, problem)
        err = np.sqrt(h1_error_sq(mesh, sol.values, problem.exact_grad))
        eta = np.sqrt(report.eta_sq_total)
        osc = np.sqrt(report.osc_sq_total)
        rel_ratios.append(err / eta)
        eff_ratios.append(eta / (err + osc))
    assert max(rel_ratios) <= 10.0
    assert max(eff_ratios) <= 10.0
    # the reliability ratio must not blow up along the run
    assert rel_ratios[-1] <= 2.0 * np.median(rel_ratios)


def test_report_csv_roundtrip(tmp_path):
    problem = builtin_problem("square_smooth")
    mesh = uniform_refine(problem.make_initial_mesh(), 2)
    sol = solve_linear(assemble_linear(mesh, problem))
    report = estimate(mesh, sol, problem)
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    back = read_report_csv(path)
    assert np.array_equal(back.indicators_sq, report.indicators_sq)
    assert np.array_equal(back.osc_sq, report.osc_sq)
