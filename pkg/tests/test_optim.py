import numpy as np
import pytest

from desklm.errors import ConfigError
from desklm.model import get_preset
from desklm.optim import (
    AdamWConfig,
    ClipConfig,
    OptimizerState,
    PredivideConfig,
    ScheduleConfig,
    adamw_step,
    clip_grad_norm,
    global_grad_norm,
    lr_at,
    predivide_reduce,
)


def schedule_175b() -> ScheduleConfig:
    p = get_preset("175B")
    return ScheduleConfig(
        max_lr=p.max_lr,
        warmup_steps=2000,
        tokens_per_step=p.batch_tokens,
        decay_horizon_tokens=300_000_000_000,
    )


def schedule_125m() -> ScheduleConfig:
    p = get_preset("125M")
    return ScheduleConfig(
        max_lr=p.max_lr,
        warmup_tokens=375_000_000,
        decay_horizon_tokens=300_000_000_000,
    )


def test_lr_midwarmup_175b():
    s = schedule_175b()
    assert lr_at(s, 1000, 1000 * 2_000_000) == pytest.approx(0.6e-4, abs=1e-12)


def test_lr_decays_to_ten_percent_floor():
    s = schedule_175b()
    horizon = 300_000_000_000
    step = horizon // 2_000_000
    assert lr_at(s, step, horizon) == pytest.approx(0.1 * 1.2e-4, abs=1e-12)
    assert lr_at(s, step + 500, horizon + 10**9) == pytest.approx(0.1 * 1.2e-4, abs=1e-12)


def test_lr_zero_at_start_and_continuous_at_joint():
    for s, batch in [(schedule_175b(), 2_000_000), (schedule_125m(), 500_000)]:
        assert lr_at(s, 0, 0) == 0.0
        if s.warmup_steps is not None:
            end_step = s.warmup_steps
            end_tokens = end_step * batch
        else:
            end_tokens = s.warmup_tokens
            end_step = end_tokens // batch
        just_before = lr_at(s, end_step - 1, end_tokens - batch)
        at_joint = lr_at(s, end_step, end_tokens)
        assert at_joint == pytest.approx(s.max_lr, rel=1e-9)
        assert just_before < at_joint


def oracle_lr(max_lr, warmup_end_tokens, horizon, end_factor, overrides, step, tokens):
    """Straight-line reimplementation: compute each segment independently."""
    if tokens < warmup_end_tokens:
        base = max_lr * tokens / warmup_end_tokens
    elif tokens >= horizon:
        base = max_lr * end_factor
    else:
        span = horizon - warmup_end_tokens
        base = max_lr + (max_lr * end_factor - max_lr) * (tokens - warmup_end_tokens) / span
    for s, f in overrides:
        if step >= s:
            base *= f
    return base


def test_lr_override_matches_oracle_pointwise():
    p = get_preset("125M")
    batch = 1000
    s = ScheduleConfig(
        max_lr=p.max_lr,
        warmup_tokens=50_000,
        decay_horizon_tokens=1_000_000,
        overrides=((120, 2 / 3), (400, 0.5)),
    )
    for step in range(0, 1100, 7):
        tokens = step * batch
        got = lr_at(s, step, tokens)
        want = oracle_lr(p.max_lr, 50_000, 1_000_000, 0.1, s.overrides, step, tokens)
        assert got == pytest.approx(want, rel=1e-12), step
    # factor multiplies the remaining schedule: ratio to the clean schedule is exact
    clean = ScheduleConfig(max_lr=p.max_lr, warmup_tokens=50_000, decay_horizon_tokens=1_000_000)
    assert lr_at(s, 200, 200 * batch) == pytest.approx(lr_at(clean, 200, 200 * batch) * 2 / 3, rel=1e-12)
    assert lr_at(s, 500, 500 * batch) == pytest.approx(lr_at(clean, 500, 500 * batch) * (2 / 3) * 0.5, rel=1e-12)


def test_lr_never_negative_and_piecewise_linear():
    s = schedule_125m()
    batch = 500_000
    values = [lr_at(s, i, i * batch) for i in range(0, 700_000, 1000)]
    assert min(values) >= 0.0


def test_schedule_config_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(max_lr=1e-4, decay_horizon_tokens=100)  # no warmup given
    with pytest.raises(ConfigError):
        ScheduleConfig(max_lr=1e-4, warmup_steps=10, decay_horizon_tokens=100)  # no tokens_per_step
    with pytest.raises(ConfigError):
        ScheduleConfig(max_lr=1e-4, warmup_tokens=200, decay_horizon_tokens=100)  # warmup past horizon
    with pytest.raises(ConfigError):
        ScheduleConfig(
            max_lr=1e-4, warmup_tokens=10, decay_horizon_tokens=100,
            overrides=((5, 0.5), (5, 0.5)),
        )


def test_adamw_zero_grad_is_pure_decay():
    cfg = AdamWConfig()
    params = {"w": np.array([2.0, -3.0])}
    state = OptimizerState.for_params(params)
    lr = 0.01
    expected = params["w"] - (lr * cfg.weight_decay) * params["w"]
    adamw_step(params, {"w": np.zeros(2)}, state, lr, cfg)
    np.testing.assert_array_equal(params["w"], expected)


def test_adamw_single_scalar_hand_oracle():
    # g=1, t=1, wd=0: mhat=1, vhat=1, update = -lr / (1 + eps)
    cfg = AdamWConfig(weight_decay=0.0)
    params = {"w": np.array([0.5])}
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.array([1.0])}, state, lr=0.1, cfg=cfg)
    assert params["w"][0] == pytest.approx(0.5 - 0.1 / (1.0 + cfg.eps), rel=1e-15)
    assert state.t == 1


def test_adamw_descends_convex_quadratic():
    # f(x) = x^2, grad = 2x; |x| shrinks steadily after a warm start.
    cfg = AdamWConfig(weight_decay=0.0)
    params = {"x": np.array([1.0])}
    state = OptimizerState.for_params(params)
    trace = []
    for _ in range(50):
        adamw_step(params, {"x": 2 * params["x"]}, state, lr=0.02, cfg=cfg)
        trace.append(abs(params["x"][0]))
    assert all(b < a for a, b in zip(trace[5:], trace[6:]))
    assert trace[-1] < 0.2


def test_adamw_matches_plain_adam_when_wd_zero():
    cfg = AdamWConfig(weight_decay=0.0)
    rng = np.random.default_rng(0)
    params = {"w": rng.standard_normal(4)}
    reference = params["w"].copy()
    state = OptimizerState.for_params(params)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 8):
        g = rng.standard_normal(4)
        adamw_step(params, {"w": g}, state, lr=0.01, cfg=cfg)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        reference -= 0.01 * (m / (1 - cfg.beta1**t)) / (np.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
    np.testing.assert_allclose(params["w"], reference, rtol=1e-14)


def test_adamw_rejects_nonfinite_grads():
    params = {"w": np.array([1.0])}
    state = OptimizerState.for_params(params)
    with pytest.raises(ValueError, match="non-finite"):
        adamw_step(params, {"w": np.array([np.nan])}, state, 0.01, AdamWConfig())


def test_clip_noop_below_threshold():
    grads = {"a": np.array([0.3, 0.4])}  # norm 0.5
    out, norm = clip_grad_norm(grads, ClipConfig(max_norm=1.0))
    assert norm == pytest.approx(0.5)
    assert out is grads


def test_clip_halves_at_double_norm():
    grads = {"a": np.array([1.2, 1.6])}  # norm 2.0
    out, norm = clip_grad_norm(grads, ClipConfig(max_norm=1.0))
    assert norm == pytest.approx(2.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.8], rtol=1e-15)
    assert global_grad_norm(out) == pytest.approx(1.0, abs=1e-12)


def test_clip_recomputed_norm_oracle():
    rng = np.random.default_rng(1)
    grads = {f"p{i}": rng.standard_normal((3, 4)) for i in range(5)}
    pre = np.sqrt(sum((g**2).sum() for g in grads.values()))
    out, norm = clip_grad_norm(grads, ClipConfig(max_norm=0.3))
    assert norm == pytest.approx(pre, rel=1e-12)
    assert global_grad_norm(out) == pytest.approx(min(pre, 0.3), abs=1e-12)


def test_clip_idempotent():
    rng = np.random.default_rng(2)
    grads = {"a": rng.standard_normal(10) * 5}
    once, _ = clip_grad_norm(grads, ClipConfig(max_norm=1.0))
    twice, _ = clip_grad_norm(once, ClipConfig(max_norm=1.0))
    np.testing.assert_allclose(twice["a"], once["a"], rtol=1e-12)


def test_predivide_identity_for_single_worker():
    g = {"w": np.array([1.0, 2.0])}
    out = predivide_reduce([g], PredivideConfig(world_size=1))
    np.testing.assert_allclose(out["w"], g["w"], rtol=1e-15)


def test_predivide_equal_workers_n16():
    g = {"w": np.array([4.0, -8.0])}
    out = predivide_reduce([{k: v.copy() for k, v in g.items()} for _ in range(16)],
                           PredivideConfig(world_size=16))
    np.testing.assert_allclose(out["w"], g["w"], rtol=1e-12)
    # intermediate pre-sum values are g/sqrt(16) = g/4
    np.testing.assert_allclose(g["w"] / np.sqrt(16), g["w"] / 4, rtol=0)


def test_predivide_matches_naive_mean():
    rng = np.random.default_rng(3)
    workers = [{"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(5)} for _ in range(4)]
    out = predivide_reduce(workers, PredivideConfig(world_size=4))
    for k in ("a", "b"):
        naive = sum(w[k] for w in workers) / 4
        np.testing.assert_allclose(out[k], naive, atol=1e-12)


def test_predivide_intermediates_bounded():
    rng = np.random.default_rng(4)
    n = 16
    workers = [{"a": rng.standard_normal(100)} for _ in range(n)]
    gmax = max(np.abs(w["a"]).max() for w in workers)
    root = np.sqrt(n)
    partial = np.zeros(100)
    for w in workers:
        partial = partial + w["a"] / root
        assert np.abs(partial).max() <= gmax * root + 1e-12


def test_predivide_length_mismatch():
    with pytest.raises(ValueError, match="expected 4"):
        predivide_reduce([{"a": np.zeros(1)}] * 3, PredivideConfig(world_size=4))
