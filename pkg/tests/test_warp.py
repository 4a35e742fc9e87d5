import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crseg.phantom import PhantomConfig, generate_subject
from crseg.volume import LabelMap, LogitMap, Volume3D
from crseg.warp import (DisplacementField, grad_smoothness, load_field, local_ncc, registration_loss,
                        save_field, warp)
from gradcheck_util import relative_error


def test_zero_field_identity_both_modes():
    rng = np.random.default_rng(0)
    v = torch.from_numpy(rng.random((6, 7, 8)))
    field = torch.zeros(3, 6, 7, 8, dtype=torch.float64)
    for interp in ("trilinear", "nearest"):
        assert torch.equal(warp(field, v, interp), v)
    vol = Volume3D(rng.random((5, 5, 5)))
    assert np.array_equal(warp(DisplacementField(np.zeros((3, 5, 5, 5))), vol).data, vol.data)


def test_integer_shift():
    v = torch.rand(6, 6, 6, dtype=torch.float64)
    field = torch.zeros(3, 6, 6, 6, dtype=torch.float64)
    field[0] = 1
    for interp in ("trilinear", "nearest"):
        out, inside = warp(field, v, interp, return_mask=True)
        assert torch.equal(out[:-1], v[1:])
        assert torch.equal(out[-1], v[-1])  # border clamp
        assert not inside[-1].any() and inside[:-1].all()


def test_logitmap_per_channel():
    rng = np.random.default_rng(1)
    z = LogitMap(rng.normal(size=(2, 5, 5, 5)))
    field = DisplacementField(rng.normal(size=(3, 5, 5, 5)))
    out = warp(field, z)
    assert isinstance(out, LogitMap)
    for c in range(2):
        single = warp(torch.from_numpy(np.array(field.data)), torch.from_numpy(np.array(z.data[c])))
        assert np.array_equal(out.data[c], single.numpy())


def test_shape_mismatch():
    with pytest.raises(ValueError):
        warp(torch.zeros(3, 4, 4, 4), torch.zeros(5, 5, 5))


def test_nearest_label_values_preserved():
    rng = np.random.default_rng(2)
    lab = torch.from_numpy(rng.integers(0, 2, (6, 6, 6)).astype(np.float64))
    field = torch.from_numpy(rng.normal(scale=2, size=(3, 6, 6, 6)))
    out = warp(field, lab, "nearest")
    assert set(out.unique().tolist()) <= {0.0, 1.0}
    lab3 = torch.from_numpy(np.array([0.0, 2.0, 7.0])[rng.integers(0, 3, (6, 6, 6))])
    assert set(warp(field, lab3, "nearest").unique().tolist()) <= {0.0, 2.0, 7.0}


def test_trilinear_midpoint():
    v = torch.zeros(4, 4, 4, dtype=torch.float64)
    v[2] = 1
    field = torch.zeros(3, 4, 4, 4, dtype=torch.float64)
    field[0] = 0.5
    assert torch.allclose(warp(field, v)[1], torch.full((4, 4), 0.5, dtype=torch.float64))


def test_ncc_examples():
    rng = np.random.default_rng(3)
    a = rng.random((8, 8, 8))
    assert local_ncc(Volume3D(a), Volume3D(a)) >= 0.999
    assert abs(local_ncc(Volume3D(a), Volume3D(2 * a + 3)) - local_ncc(Volume3D(a), Volume3D(a))) <= 1e-5
    vals = [local_ncc(Volume3D(rng.random((8, 8, 8))), Volume3D(rng.random((8, 8, 8)))) for _ in range(20)]
    assert max(abs(v) for v in vals) < 0.3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ncc_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = torch.from_numpy(rng.random((6, 6, 6))), torch.from_numpy(rng.random((6, 6, 6)))
    v = local_ncc(a, b).item()
    assert abs(v - local_ncc(b, a).item()) <= 1e-6
    assert -1 <= v <= 1


def test_ncc_window_and_shape_errors():
    with pytest.raises(ValueError):
        local_ncc(torch.rand(4, 4, 4), torch.rand(4, 4, 5))
    with pytest.raises(ValueError):
        local_ncc(torch.rand(6, 6, 6), torch.rand(6, 6, 6), window=(4, 4, 4))


def test_ncc_constant_volume_is_finite():
    assert np.isfinite(local_ncc(Volume3D(np.zeros((6, 6, 6))), Volume3D(np.zeros((6, 6, 6)))))


def test_smoothness_examples():
    assert grad_smoothness(torch.full((3, 5, 5, 5), 2.5)).item() == 0
    ramp = torch.zeros(3, 6, 6, 6, dtype=torch.float64)
    ramp[0] = torch.arange(6, dtype=torch.float64).view(6, 1, 1)
    assert abs(grad_smoothness(ramp).item() - 1 / 3) < 1e-12
    f = torch.rand(3, 5, 5, 5, dtype=torch.float64)
    assert abs(grad_smoothness(f).item() - grad_smoothness(f + 4.0).item()) < 1e-12
    assert grad_smoothness(DisplacementField(np.zeros((3, 4, 4, 4)))).item() == 0


def test_registration_loss_examples():
    rng = np.random.default_rng(4)
    a = torch.from_numpy(rng.random((8, 8, 8)))
    zero = torch.zeros(3, 8, 8, 8, dtype=torch.float64)
    assert abs(registration_loss(a, a, zero, 1.0).item() + 1.0) < 1e-3
    f = torch.from_numpy(rng.normal(scale=0.5, size=(3, 8, 8, 8)))
    assert torch.isclose(registration_loss(a, a, f, 0.0), -local_ncc(a, warp(f, a)))


def test_registration_loss_prefers_true_shift():
    cfg = PhantomConfig(grid_size=(24, 24, 24), num_frames=2, motion_amplitude=0, noise_sigma=0)
    img = torch.from_numpy(generate_subject(cfg, 0).series.array()[0].astype(np.float64))
    moving = torch.roll(img, shifts=2, dims=0)
    # fixed(p) = moving(p + 2 e_0)
    true = torch.zeros(3, 24, 24, 24, dtype=torch.float64)
    true[0] = 2
    zero = torch.zeros_like(true)
    assert registration_loss(img, moving, true, 1.0) < registration_loss(img, moving, zero, 1.0)


def test_gradients():
    rng = np.random.default_rng(5)
    for _ in range(3):
        a = torch.from_numpy(rng.random((4, 4, 4)))
        b = torch.from_numpy(rng.random((4, 4, 4)))
        assert relative_error(lambda x: local_ncc(x, b, (3, 3, 3)), a) < 1e-4
        f = torch.from_numpy(rng.normal(size=(3, 4, 4, 4)))
        assert relative_error(grad_smoothness, f) < 1e-4
        f = torch.from_numpy(rng.uniform(-0.4, 0.4, size=(3, 4, 4, 4)))
        assert relative_error(lambda x: registration_loss(a, b, x, 0.5, (3, 3, 3)), f) < 1e-4


def test_field_type_and_io(tmp_path):
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ValueError):
        DisplacementField(np.full((3, 2, 2, 2), np.nan))
    f = DisplacementField(np.random.default_rng(6).normal(size=(3, 4, 5, 6)))
    assert f.shape == (4, 5, 6)
    back = load_field(save_field(tmp_path / "phi.raw", f))
    assert np.array_equal(back.data, f.data)
