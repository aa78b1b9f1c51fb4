from collections import OrderedDict

import pytest
import torch

from duw.errors import DuwError
from duw.params import (
    check_finite,
    checksum,
    mean_params,
    param_distance,
    sgd_step,
)


def _p(**kwargs):
    return OrderedDict((k, torch.as_tensor(v, dtype=torch.float32)) for k, v in kwargs.items())


def test_sgd_step_scalar():
    out = sgd_step(_p(w=[1.0]), _p(w=[2.0]), lr=0.1)
    assert torch.allclose(out["w"], torch.tensor([0.8]))


def test_sgd_step_zero_gradient_is_identity():
    params = _p(w=[[1.0, -2.0], [0.5, 3.0]])
    out = sgd_step(params, _p(w=[[0.0, 0.0], [0.0, 0.0]]), lr=0.5)
    assert torch.equal(out["w"], params["w"])


def test_sgd_step_lr_zero_is_identity():
    params = _p(w=[1.0, 2.0])
    out = sgd_step(params, _p(w=[5.0, -5.0]), lr=0.0)
    assert torch.equal(out["w"], params["w"])


def test_sgd_converges_on_quadratic():
    # Closed form: p_t - 3 = (1 - lr*2)^t (p_0 - 3) for loss (p-3)^2.
    p = _p(w=[0.0])
    for _ in range(100):
        grad = OrderedDict(w=2.0 * (p["w"] - 3.0))
        p = sgd_step(p, grad, lr=0.1)
    assert abs(float(p["w"]) - 3.0) < 1e-3
    assert abs(float(p["w"]) - (3.0 - 3.0 * 0.8 ** 100)) < 1e-5


def test_sgd_step_rejects_nonfinite_gradient():
    with pytest.raises(DuwError) as err:
        sgd_step(_p(w=[1.0]), _p(w=[float("nan")]), lr=0.1)
    assert err.value.code == "numerical-divergence"
    assert "w" in err.value.message


def test_param_distance_identity_and_pythagorean():
    a = _p(v=[0.0, 0.0])
    assert param_distance(a, a) == 0.0
    assert param_distance(a, _p(v=[3.0, 4.0])) == pytest.approx(5.0)


def test_param_distance_matches_flat_loop_oracle():
    gen = torch.Generator().manual_seed(7)
    a = OrderedDict(
        (name, torch.randn(shape, generator=gen))
        for name, shape in [("w1", (4, 3)), ("b1", (4,)), ("w2", (2, 4))]
    )
    b = OrderedDict((k, v + torch.randn(v.shape, generator=gen)) for k, v in a.items())
    total = 0.0
    for k in a:
        for x, y in zip(a[k].flatten().tolist(), b[k].flatten().tolist()):
            total += (x - y) ** 2
    assert param_distance(a, b) == pytest.approx(total ** 0.5, abs=1e-6)
    assert param_distance(a, b) == pytest.approx(param_distance(b, a))


def test_param_distance_shape_mismatch():
    with pytest.raises(DuwError) as err:
        param_distance(_p(w=[1.0]), _p(w=[1.0, 2.0]))
    assert err.value.code == "incompatible-parameters"


def test_mean_params_identity_and_midpoint():
    a = _p(w=[0.0])
    assert torch.equal(mean_params([a])["w"], a["w"])
    mid = mean_params([_p(w=[0.0]), _p(w=[1.0])])
    assert torch.allclose(mid["w"], torch.tensor([0.5]))


def test_mean_params_matches_flat_loop_oracle():
    gen = torch.Generator().manual_seed(11)
    models = [
        OrderedDict(
            (name, torch.randn(shape, generator=gen))
            for name, shape in [("w", (5, 5)), ("b", (5,))]
        )
        for _ in range(5)
    ]
    got = mean_params(models)
    for name in ("w", "b"):
        flat = [m[name].flatten().tolist() for m in models]
        for j, val in enumerate(got[name].flatten().tolist()):
            expected = sum(row[j] for row in flat) / len(models)
            assert val == pytest.approx(expected, abs=1e-7)


def test_mean_params_empty_list_rejected():
    with pytest.raises(DuwError):
        mean_params([])


def test_checksum_is_bitwise():
    a = _p(w=[1.0, 2.0])
    b = _p(w=[1.0, 2.0])
    assert checksum(a) == checksum(b)
    b["w"][0] += 1e-7
    assert checksum(a) != checksum(b)


def test_check_finite_names_group():
    with pytest.raises(DuwError) as err:
        check_finite(_p(conv=[float("inf")]), "theta_f")
    assert "theta_f" in str(err.value) and "conv" in str(err.value)
