import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from barrierlab import rng
from barrierlab.barrier import ControllerSpec, linear_barrier, make_controller
from barrierlab.models import brownian, frozen, halfline, single_integrator
from barrierlab.sde import (
    IntegratorConfig,
    ModelEvaluationError,
    PathRecorder,
    bridge_crossing_probability,
    detect_exit,
    em_step,
    simulate_batch,
    simulate_path,
    simulate_paths,
    write_path_csv,
)

from conftest import scalar_model


def _none(model, barrier):
    return make_controller(ControllerSpec("none"), barrier, model)


# -- em_step -----------------------------------------------------------------


def test_em_step_pure_noise():
    m = scalar_model(sigma=1.0)
    assert em_step(m, [1.0], [0.0], 0.1, [0.3]) == pytest.approx([1.3])


def test_em_step_pure_drift():
    m = scalar_model(g=1.0, sigma=1.0)
    assert em_step(m, [1.0], [2.0], 0.1, [0.0]) == pytest.approx([1.2])


def test_em_step_deterministic_euler():
    m = scalar_model(f=lambda X: -X, sigma=0.0)
    assert em_step(m, [1.0], [0.0], 0.01, [0.0]) == pytest.approx([0.99])


def test_em_step_reports_offending_state():
    m = scalar_model(f=lambda X: np.log(X - 2.0), sigma=1.0)
    with pytest.raises(ModelEvaluationError, match="1.0"):
        with np.errstate(invalid="ignore"):
            em_step(m, [1.0], [0.0], 0.1, [0.0])


# -- exit detection -------------------------------------------------------------


def test_detect_exit_sign_change():
    assert detect_exit(0.5, -0.1, 1e-3, 1.0, True, 0.999)
    assert detect_exit(0.5, -0.1, 1e-3, 1.0, False, 0.999)


def test_detect_exit_far_from_boundary():
    assert bridge_crossing_probability(2.0, 2.0, 1.0, 1e-3) == pytest.approx(math.exp(-8000), abs=1e-300)
    assert not detect_exit(2.0, 2.0, 1e-3, 1.0, True, 1e-12)


def test_detect_exit_bridge_probability():
    p = bridge_crossing_probability(0.01, 0.01, 1.0, 1e-2)
    assert p == pytest.approx(math.exp(-0.02), rel=1e-12)
    assert p == pytest.approx(0.9802, abs=1e-4)
    assert detect_exit(0.01, 0.01, 1e-2, 1.0, True, 0.98)
    assert not detect_exit(0.01, 0.01, 1e-2, 1.0, True, 0.981)
    assert not detect_exit(0.01, 0.01, 1e-2, 1.0, False, 0.0001)


def test_detect_exit_zero_diffusion_skips_bridge():
    assert bridge_crossing_probability(0.01, 0.01, 0.0, 1e-2) == 0.0
    assert not detect_exit(0.01, 0.01, 1e-2, 0.0, True, 1e-15)


def test_detect_exit_requires_positive_h_prev():
    with pytest.raises(ValueError):
        detect_exit(0.0, 1.0, 1e-3, 1.0, True, 0.5)


# -- integrator config ----------------------------------------------------------


def test_integrator_config_steps():
    cfg = IntegratorConfig(dt=0.3, horizon=1.0)
    assert cfg.n_steps == 4
    assert cfg.step_size(3) == pytest.approx(0.1)
    assert cfg.time(4) == pytest.approx(1.0)
    assert IntegratorConfig(dt=1e-4, horizon=1.0).n_steps == 10_000


def test_integrator_config_rejects_dt_above_horizon():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=2.0, horizon=1.0)


# -- simulate_path ----------------------------------------------------------


def _reference_brownian(seed, index, x0, dt, n):
    """Independent re-implementation of the noise layout: first variate per step is dW."""
    x = x0
    for k in range(n):
        u = rng.uniforms(seed, [index], k, 2)[0]
        from scipy.special import ndtri

        x = x + math.sqrt(dt) * float(ndtri(u[0]))
        if x <= 0:
            return True, (k + 1) * dt
    return False, None


def test_brownian_paths_match_reference_generator():
    m, b = brownian(), halfline()
    c = _none(m, b)
    seen = {True: None, False: None}
    for seed in range(40):
        cfg = IntegratorConfig(dt=1e-3, horizon=1.0, seed=seed, bridge_correction=False)
        path = simulate_path(m, c, b, [1.0], cfg)
        exited, t_exit = _reference_brownian(seed, 0, 1.0, 1e-3, cfg.n_steps)
        assert path.exited == exited
        if exited:
            assert path.exit_time == pytest.approx(t_exit)
            assert path.exit_time < 1.0
            assert path.h[-1] <= 0
        else:
            assert path.times[-1] == pytest.approx(1.0)
        seen[exited] = seed
        if all(v is not None for v in seen.values()):
            break
    assert seen[True] is not None and seen[False] is not None


def test_frozen_model_constant_path():
    m, b = frozen(), halfline()
    path = simulate_path(m, _none(m, b), b, [1.0], IntegratorConfig(1e-2, 1.0))
    assert not path.exited
    assert np.all(path.states == 1.0)
    assert len(path.times) == 101


def test_path_sample_invariants():
    m, b = brownian(), halfline()
    for seed in range(10):
        cfg = IntegratorConfig(dt=1e-2, horizon=1.0, seed=seed, bridge_correction=False)
        p = simulate_path(m, _none(m, b), b, [0.5], cfg)
        assert np.all(np.diff(p.times) > 0)
        assert len(p.states) == len(p.times) == len(p.h)
        assert len(p.controls) == len(p.times) - 1
        assert p.noise_stream_id == (seed, 0)
        if p.exited:
            assert p.exit_time <= 1.0 + 1e-12
            assert p.h[-1] <= 0


def test_zero_noise_matches_forward_euler():
    m = scalar_model(f=lambda X: -X + 0.5 * np.sin(X), g=1.0, sigma=0.0)
    b = halfline()
    c = make_controller(ControllerSpec("zcbf"), b, m)
    cfg = IntegratorConfig(dt=1e-2, horizon=2.0, seed=3)
    path = simulate_path(m, c, b, [1.5], cfg)
    x = 1.5
    ref = [x]
    for _ in range(cfg.n_steps):
        u, _ = c([x])
        x = x + (-x + 0.5 * math.sin(x) + float(u[0])) * cfg.dt
        ref.append(x)
    np.testing.assert_allclose(path.states[:, 0], ref, rtol=0, atol=1e-14)


def test_single_path_equals_batch_member():
    m, b = single_integrator(), halfline()
    c = make_controller(ControllerSpec("rcbf", __import__("barrierlab").AlphaFn()), b, m)
    cfg = IntegratorConfig(dt=1e-2, horizon=0.5, seed=11, path_index=7)
    single = simulate_path(m, c, b, [0.3], cfg)
    rec = PathRecorder(m, cfg.n_steps)
    out = simulate_batch(m, c, b, [0.3], cfg, np.arange(20), [rec])
    member = rec.sample(7, out, cfg.seed)
    np.testing.assert_array_equal(single.states, member.states)
    np.testing.assert_array_equal(single.controls, member.controls)
    assert single.exited == member.exited


@settings(max_examples=10, deadline=None)
@given(chunk=st.integers(1, 64), workers=st.integers(1, 3))
def test_chunking_and_workers_do_not_change_results(chunk, workers):
    m, b = brownian(), halfline()
    cfg = IntegratorConfig(dt=1e-2, horizon=1.0, seed=5)
    base, _ = simulate_paths(m, _none(m, b), b, [0.5], cfg, 64, chunk_size=64)
    other, _ = simulate_paths(m, _none(m, b), b, [0.5], cfg, 64, chunk_size=chunk, workers=workers)
    np.testing.assert_array_equal(base.exited, other.exited)
    np.testing.assert_array_equal(base.final_state, other.final_state)
    np.testing.assert_array_equal(base.exit_time, other.exit_time)


def test_rerun_is_bit_identical():
    m, b = brownian(), halfline()
    cfg = IntegratorConfig(dt=1e-3, horizon=0.2, seed=99, path_index=3)
    a = simulate_path(m, _none(m, b), b, [1.0], cfg)
    c = simulate_path(m, _none(m, b), b, [1.0], cfg)
    assert a.states.tobytes() == c.states.tobytes()


def test_weak_moments_of_brownian_endpoint():
    m = brownian()
    far = linear_barrier([1.0], 50.0)
    cfg = IntegratorConfig(dt=0.05, horizon=1.0, seed=2)
    out, _ = simulate_paths(m, _none(m, far), far, [1.0], cfg, 100_000)
    x = out.final_state[:, 0]
    n = x.size
    assert abs(x.mean() - 1.0) < 3 / math.sqrt(n)
    assert abs(x.var() - 1.0) < 3 * math.sqrt(2 / n)


def test_controller_infeasibility_halts_path():
    m, b = single_integrator(), halfline()
    c = make_controller(ControllerSpec("rcbf", __import__("barrierlab").AlphaFn(), u_max=0.5), b, m)
    path = simulate_path(m, c, b, [0.2], IntegratorConfig(1e-2, 1.0))
    assert path.infeasible
    assert "infeasible" in path.diagnostic
    assert not path.exited


def test_initial_state_outside_safe_set_rejected():
    m, b = brownian(), halfline()
    with pytest.raises(ValueError):
        simulate_path(m, _none(m, b), b, [-1.0], IntegratorConfig(1e-2, 1.0))


def test_write_path_csv(tmp_path):
    m, b = single_integrator(), halfline()
    c = make_controller(ControllerSpec("zcbf"), b, m)
    path = simulate_path(m, c, b, [1.0], IntegratorConfig(0.25, 1.0, seed=1, bridge_correction=False))
    target = write_path_csv(path, tmp_path / "p.csv")
    lines = target.read_text().splitlines()
    assert lines[0] == "t,x_1,u_1,h"
    assert len(lines) == len(path.times) + 1
    assert lines[-1].split(",")[2] == ""
    assert float(lines[1].split(",")[1]) == 1.0
