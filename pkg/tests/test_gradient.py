import csv
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import Data, fd_relative_errors, random_data, random_fis, two_input_system
from evonf import _engine
from evonf.errors import EmptyDataset, NonDifferentiablePoint, UnsupportedFisKind
from evonf.fuzzy_core import (
    BellMF,
    FisKind,
    FuzzyInferenceSystem,
    FuzzyRule,
    FuzzyVariable,
    GaussianMF,
    OperatorParams,
    rmse,
)
from evonf.gradient import (
    TrainSpec,
    gd_call_count,
    gd_finetune,
    mf_gradients,
    mf_parameters,
    operator_gradients,
    reset_gd_call_count,
    with_mf_parameters,
    write_loss_trace,
)


def line_fit_problem():
    """1 input, 2 rules, fitting y = x on 20 samples."""
    var = FuzzyVariable("x", (0.0, 1.0), [GaussianMF(0.2, 0.3), GaussianMF(0.7, 0.3)])
    rules = [FuzzyRule(((1, 0),), (0.0, 0.0)), FuzzyRule(((0, 1),), (1.0, 0.0))]
    fis = FuzzyInferenceSystem([var], rules)
    x = np.linspace(0.0, 1.0, 20)
    return fis, Data(x[:, None], x.copy())


def test_train_spec_validation():
    assert TrainSpec().learning_rate == 0.1 and TrainSpec().epochs == 100
    with pytest.raises(ValueError):
        TrainSpec(learning_rate=0.5)
    with pytest.raises(ValueError):
        TrainSpec(epochs=0)
    assert TrainSpec(learning_rate=0.0, allow_any_rate=True).learning_rate == 0.0
    with pytest.raises(ValueError):
        TrainSpec(learning_rate=-1.0, allow_any_rate=True)


def test_parameter_vector_round_trip():
    fis = two_input_system()
    theta = mf_parameters(fis)
    assert theta.size == 3 + 3 + 2 + 2
    again = with_mf_parameters(fis, theta)
    assert again == fis
    with pytest.raises(ValueError):
        with_mf_parameters(fis, theta[:-1])


def test_zero_residual_zero_gradient():
    fis = two_input_system()
    x = np.random.default_rng(0).random((12, 2))
    g = mf_gradients(fis, Data(x, fis.predict(x)))
    np.testing.assert_array_equal(g, 0.0)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(31)
    worst = 0.0
    for trial in range(40):
        fis = random_fis(rng, fixed_min=trial % 4 == 0)
        rel = fd_relative_errors(fis, random_data(rng, fis.n_inputs, 20))
        worst = max(worst, float(np.nanmax(rel)))
    assert worst <= 1e-4


def test_compiled_and_reference_routes_agree():
    rng = np.random.default_rng(32)
    for trial in range(20):
        fis = random_fis(rng, fixed_min=trial % 3 == 0)
        data = random_data(rng, fis.n_inputs, 20)
        plan = fis.plan
        fast = _engine.forward(plan, data.inputs, compiled=True).y
        ref = _engine.forward(plan, data.inputs, compiled=False).y
        np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-13)


def test_pure_numpy_switch():
    code = "from evonf import _engine; print(_engine.use_compiled())"
    env = dict(os.environ, EVONF_PURE_NUMPY="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "False"


def test_single_rule_center_sign():
    """The gradient on r has the sign of the finite difference."""
    rng = np.random.default_rng(33)
    agree = 0
    trials = 10**4
    h = 1e-6
    for _ in range(trials):
        p, q, r = rng.uniform(0.1, 0.6), rng.uniform(0.6, 3.0), rng.uniform(0, 1)
        var = FuzzyVariable("x", (0.0, 1.0), [BellMF(p, q, r), GaussianMF(0.5, 0.3)])
        c = rng.uniform(-1, 1, 2)
        rules = [FuzzyRule(((1, 0),), tuple(c)), FuzzyRule(((0, 1),), (0.0, 0.0))]
        fis = FuzzyInferenceSystem([var], rules)
        x = rng.random((3, 1))
        data = Data(x, rng.random(3))
        g = mf_gradients(fis, data)[2]

        def loss(rr):
            f = with_mf_parameters(fis, np.r_[p, q, rr, 0.5, 0.3])
            return 0.5 * np.mean((f.predict(x) - data.targets) ** 2)

        fd = (loss(r + h) - loss(r - h)) / (2 * h)
        agree += np.sign(g) == np.sign(fd) or abs(fd) < 1e-9
    assert agree == trials


def test_operator_gradients():
    rng = np.random.default_rng(34)
    h = 1e-6
    for _ in range(10):
        fis = random_fis(rng)
        data = random_data(rng, fis.n_inputs)
        g = operator_gradients(fis, data)

        def loss(tp, sp):
            f = FuzzyInferenceSystem(fis.inputs, fis.rules, OperatorParams(tp, sp))
            return 0.5 * np.mean((f.predict(data.inputs) - data.targets) ** 2)

        tp, sp = fis.operators.tnorm_p, fis.operators.tconorm_p
        fd = [(loss(tp + h, sp) - loss(tp - h, sp)) / (2 * h),
              (loss(tp, sp + h) - loss(tp, sp - h)) / (2 * h)]
        for a, b in zip(g, fd):
            assert abs(a - b) / max(abs(a), abs(b), 1e-5) <= 1e-4
    fixed = two_input_system(fixed_min=True)
    np.testing.assert_array_equal(operator_gradients(fixed, random_data(rng, 2)), 0.0)


def test_strict_mode():
    var = FuzzyVariable("x", (0.0, 1.0), [BellMF(0.3, 0.4, 0.5), GaussianMF(0.0, 0.3)])
    fis = FuzzyInferenceSystem([var], [FuzzyRule(((1, 0),), (0.1, 1.0)), FuzzyRule(((0, 1),), (0.0, 0.0))])
    data = Data(np.array([[0.5], [0.2]]), np.array([0.0, 1.0]))
    assert np.all(np.isfinite(mf_gradients(fis, data)))
    with pytest.raises(NonDifferentiablePoint):
        mf_gradients(fis, data, strict=True)

    parts = [GaussianMF(0.2, 0.3), GaussianMF(0.9, 0.25)]
    twins = [FuzzyVariable("a", (0.0, 1.0), parts), FuzzyVariable("b", (0.0, 1.0), parts)]
    rules = [FuzzyRule(((1, 0), (1, 0)), (0.1, 1.0, 0.0)), FuzzyRule(((0, 1), (0, 1)), (0.0, 0.0, 1.0))]
    tie = FuzzyInferenceSystem(twins, rules, OperatorParams(fixed_min=True))
    # identical variables at the same input tie inside every rule's minimum
    tied = Data(np.array([[0.4, 0.4]]), np.array([0.3]))
    assert np.all(np.isfinite(mf_gradients(tie, tied)))
    with pytest.raises(NonDifferentiablePoint):
        mf_gradients(tie, tied, strict=True)
    mf_gradients(tie, Data(np.array([[0.4, 0.45]]), np.array([0.3])), strict=True)


def test_bell_center_limit_is_zero():
    var = FuzzyVariable("x", (0.0, 1.0), [BellMF(0.3, 2.0, 0.5), GaussianMF(0.0, 0.3)])
    fis = FuzzyInferenceSystem([var], [FuzzyRule(((1, 0),), (0.1, 1.0)), FuzzyRule(((0, 1),), (0.0, 0.0))])
    g = mf_gradients(fis, Data(np.array([[0.5]]), np.array([2.0])))
    assert g[1] == 0.0 and g[2] == 0.0


def test_errors():
    fis = two_input_system()
    with pytest.raises(EmptyDataset):
        mf_gradients(fis, Data(np.zeros((0, 2)), np.zeros(0)))
    mam = FuzzyInferenceSystem(fis.inputs, fis.rules, fis.operators, FisKind.MAMDANI)
    with pytest.raises(UnsupportedFisKind):
        gd_finetune(mam, Data(np.zeros((2, 2)), np.zeros(2)), TrainSpec())


def test_zero_rate_leaves_system_unchanged():
    fis, data = line_fit_problem()
    tuned, trace = gd_finetune(fis, data, TrainSpec(0.0, 25, allow_any_rate=True))
    assert tuned == fis
    assert len(trace) == 26 and len(set(trace)) == 1


def test_line_fit_descends():
    fis, data = line_fit_problem()
    tuned, trace = gd_finetune(fis, data, TrainSpec(0.1, 100))
    assert len(trace) == 101
    assert trace[0] == pytest.approx(rmse(fis, data), abs=1e-15)
    assert trace[-1] == pytest.approx(rmse(tuned, data), abs=1e-15)
    assert trace[-1] < trace[0]


def test_fixed_min_finetune_finite():
    rng = np.random.default_rng(35)
    fis = random_fis(rng, n_inputs=3, fixed_min=True)
    tuned, trace = gd_finetune(fis, random_data(rng, 3, 40), TrainSpec(0.2, 100))
    assert np.all(np.isfinite(trace))
    assert tuned.operators.fixed_min


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.1, 0.2]))
def test_finetune_keeps_structure_and_floors(seed, lr):
    rng = np.random.default_rng(seed)
    fis = random_fis(rng)
    data = random_data(rng, fis.n_inputs, 15)
    tuned, trace = gd_finetune(fis, data, TrainSpec(lr, 30))
    assert tuned.rules == fis.rules
    assert tuned.operators == fis.operators
    for var in tuned.inputs:
        lo, hi = var.universe
        for mf in var.partitions:
            assert lo <= mf.center <= hi
            if isinstance(mf, BellMF):
                assert mf.p >= 1e-3 and mf.q >= 1e-3
            else:
                assert mf.sigma >= 1e-3
    assert np.all(np.isfinite(trace))


def test_descent_on_suite_seeds():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        fis = random_fis(rng, multi_label=False)
        data = random_data(rng, fis.n_inputs, 30)
        for lr in (0.05, 0.2):
            _, trace = gd_finetune(fis, data, TrainSpec(lr, 100))
            assert trace[-1] <= trace[0]


def test_operator_tuning():
    rng = np.random.default_rng(36)
    fis = random_fis(rng, n_inputs=2)
    data = random_data(rng, 2, 30)
    tuned, trace = gd_finetune(fis, data, TrainSpec(0.1, 50, tune_operators=True))
    assert tuned.operators != fis.operators
    assert 1e-3 <= tuned.operators.tnorm_p <= 50.0
    assert trace[-1] == pytest.approx(rmse(tuned, data), abs=1e-12)
    # the shared plan of the input system is not touched
    assert fis.plan.tnorm_p == fis.operators.tnorm_p


def test_call_counter():
    fis, data = line_fit_problem()
    reset_gd_call_count()
    gd_finetune(fis, data, TrainSpec(0.1, 2))
    gd_finetune(fis, data, TrainSpec(0.1, 2))
    assert gd_call_count() == 2


def test_loss_trace_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_trace([0.5, 0.25], path)
    rows = list(csv.reader(open(path)))
    assert rows == [["epoch", "train_rmse"], ["0", "0.5"], ["1", "0.25"]]


def test_deterministic_trace():
    rng = np.random.default_rng(37)
    fis = random_fis(rng, n_inputs=3)
    data = random_data(rng, 3, 50)
    _, a = gd_finetune(fis, data, TrainSpec(0.1, 20))
    _, b = gd_finetune(fis, data, TrainSpec(0.1, 20))
    assert a == b
