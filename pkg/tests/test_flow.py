import numpy as np
import pytest

from flowvos import flow as F
from flowvos.errors import FormatError, InputError

RNG = np.random.default_rng(11)


def test_identity_transform_zero_flow():
    f_dir, f_inv = F.synth_flow(F.AffineTransform.translation(0.0, 0.0), 6, 8)
    assert not f_dir.u.any() and not f_dir.v.any()
    assert not f_inv.u.any() and not f_inv.v.any()


def test_translation_closed_form():
    f_dir, f_inv = F.synth_flow(F.AffineTransform.translation(5.0, 0.0), 4, 6)
    np.testing.assert_allclose(f_dir.u, 5.0)
    np.testing.assert_allclose(f_dir.v, 0.0)
    np.testing.assert_allclose(f_inv.u, -5.0)
    np.testing.assert_allclose(f_inv.v, 0.0)
    assert f_dir.direction == "direct" and f_inv.direction == "inverse"


def test_rotation_composition_round_trip():
    h, w = 24, 32
    rot = F.AffineTransform.rotation(10.0, center=((w - 1) / 2, (h - 1) / 2))
    f_dir, f_inv = F.synth_flow(rot, h, w)
    grid = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).astype(np.float64)
    back = grid + F.sample_flow(f_inv, grid)
    restored = back + F.sample_flow(f_dir, back)
    assert np.max(np.abs(restored - grid)) <= 1e-4


@pytest.mark.parametrize("transform", [
    F.AffineTransform.rotation(7.0, center=(10.0, 8.0)),
    F.AffineTransform.scaling(1.1, center=(12.0, 9.0)),
    F.AffineTransform(np.array([[1.05, 0.02, 1.5], [-0.03, 0.97, -0.8]])),
])
def test_affine_composition_all_grid_points(transform):
    h, w = 20, 26
    f_dir, f_inv = F.synth_flow(transform, h, w)
    grid = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).astype(np.float64)
    back = grid + F.sample_flow(f_inv, grid)
    restored = back + F.sample_flow(f_dir, back)
    assert np.max(np.abs(restored - grid)) <= 1e-4


def test_noninvertible_affine_rejected():
    with pytest.raises(InputError):
        F.AffineTransform(np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]]))


def test_piecewise_deformation_inverse():
    warp = F.PiecewiseDeformation(amplitude=1.5, wavelength=40.0, phase=(0.3, 1.1))
    pts = RNG.uniform(0, 30, size=(50, 2))
    onto = warp.apply(pts)
    back = warp.apply_inverse(onto)
    assert np.max(np.abs(back - pts)) <= 1e-3


def test_numeric_inversion_matches_exact():
    tr = F.AffineTransform.translation(2.0, -1.0)
    f_dir, f_inv = F.synth_flow(tr, 16, 16)
    approx = F.invert_flow(f_dir)
    assert approx.direction == "inverse"
    assert np.max(np.abs(approx.u - f_inv.u)) <= 1e-3
    assert np.max(np.abs(approx.v - f_inv.v)) <= 1e-3


def test_flo_round_trip_bit_exact(tmp_path):
    u = RNG.standard_normal((5, 7)).astype(np.float32)
    v = RNG.standard_normal((5, 7)).astype(np.float32)
    field = F.FlowField(u, v, "direct")
    p = tmp_path / "x.flo"
    F.write_flo(p, field)
    back = F.read_flo(p)
    assert np.array_equal(back.u, u) and np.array_equal(back.v, v)


def test_flo_zero_field(tmp_path):
    p = tmp_path / "z.flo"
    F.write_flo(p, F.FlowField.zeros(2, 2))
    back = F.read_flo(p)
    assert back.shape == (2, 2)
    assert not back.u.any() and not back.v.any()


def test_flo_bad_magic(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(b"\x00\x00\x00\x00" + b"\x02\x00\x00\x00" * 2 + b"\x00" * 64)
    with pytest.raises(FormatError):
        F.read_flo(p)


def test_flo_truncated(tmp_path):
    p = tmp_path / "trunc.flo"
    field = F.FlowField.zeros(4, 4)
    F.write_flo(p, field)
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(FormatError):
        F.read_flo(p)


def test_pool_to_stride_units():
    # constant 8 px displacement becomes 1 px at stride 8
    field = F.FlowField(np.full((32, 32), 8.0, np.float32), np.zeros((32, 32), np.float32), "inverse")
    pooled = F.pool_to_stride(field, 8)
    assert pooled.shape == (4, 4, 2)
    np.testing.assert_allclose(pooled[..., 0], 1.0)
    np.testing.assert_allclose(pooled[..., 1], 0.0)


def test_flow_embed_level_sizes_and_determinism():
    embed = F.FlowEmbed(16, np.random.default_rng(3))
    field = F.FlowField.zeros(64, 64)
    levels = embed(field)
    assert [lv.shape for lv in levels] == [(16, 8, 8), (16, 4, 4), (16, 2, 2)]
    embed2 = F.FlowEmbed(16, np.random.default_rng(3))
    levels2 = embed2(field)
    for a, b in zip(levels, levels2):
        assert np.array_equal(a.data, b.data)


def test_flow_embed_zero_flow_constant_pattern():
    embed = F.FlowEmbed(8, np.random.default_rng(5))
    levels = embed(F.FlowField.zeros(64, 64))
    # zero input map -> every spatial position carries the same bias pattern
    lv = levels[0].data
    inner = lv[:, 1:-1, 1:-1]
    assert np.allclose(inner, inner[:, :1, :1], atol=1e-6)
