import numpy as np
import pytest

from fvp import grid, prompt
from fvp.errors import DomainError, FormatError

import oracles


def rand_prompt(r, c, variant, seed):
    rng = np.random.default_rng(seed)
    p = prompt.new_prompt(r, c, variant)
    p.real_part[:] = rng.standard_normal(p.real_part.shape)
    if variant == "complex":
        p.imag_part[:] = rng.standard_normal(p.imag_part.shape)
    return p


def test_param_counts():
    assert prompt.new_prompt(32, 1, "complex").param_count == 2048
    assert prompt.new_prompt(16, 1, "complex").param_count == 512
    assert prompt.new_prompt(4, 2, "amplitude").param_count == 32


def test_new_prompt_zero_init_and_validation():
    p = prompt.new_prompt(8, 1, "phase")
    assert np.all(p.real_part == 0.0) and np.all(p.imag_part == 0.0)
    with pytest.raises(DomainError):
        prompt.new_prompt(0, 1, "complex")
    with pytest.raises(DomainError):
        prompt.new_prompt(4, 1, "bogus")


def test_embed_zero_prompt():
    p = prompt.new_prompt(4, 1, "complex")
    assert np.all(prompt.embed_prompt(p, 8, 8) == 0.0)


def test_embed_full_size_box():
    p = rand_prompt(4, 1, "complex", seed=0)
    e = prompt.embed_prompt(p, 4, 4)
    assert np.all(e != 0.0) or np.count_nonzero(e) == e.size


def test_embed_box_indices():
    p = prompt.new_prompt(2, 1, "complex")
    p.real_part[:] = 1.0
    e = prompt.embed_prompt(p, 4, 4)
    centered = grid.fftshift(e)
    occupied = {(i, j) for i in range(4) for j in range(4) if centered[i, j, 0] != 0}
    assert occupied == {(1, 1), (1, 2), (2, 1), (2, 2)}


def test_embed_rejects_oversized_box():
    p = prompt.new_prompt(8, 1, "complex")
    with pytest.raises(DomainError):
        prompt.embed_prompt(p, 4, 4)


def test_apply_complex_zero_prompt_exact():
    x = np.random.default_rng(1).standard_normal((8, 8, 1))
    p = prompt.new_prompt(4, 1, "complex")
    assert np.array_equal(prompt.apply_complex(x, p), x)


def test_apply_complex_two_sided_identity():
    x = np.random.default_rng(2).standard_normal((16, 16, 1))
    p = rand_prompt(4, 1, "complex", seed=3)
    lhs = np.real(grid.ifft2(grid.fft2(x) + prompt.embed_prompt(p, 16, 16)))
    rhs = prompt.apply_complex(x, p)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_apply_complex_unit_bin_is_plane_wave():
    h = w = 8
    p2 = prompt.new_prompt(3, 1, "complex")
    # box center (1, 1) is the DC bin; (1, 2) is one column to its right
    p2.real_part[1, 2, 0] = 1.0
    x = np.zeros((h, w, 1))
    xhat = prompt.apply_complex(x, p2)
    ww = np.arange(w)
    expected = np.cos(2 * np.pi * ww / w) / (h * w)
    expected = np.broadcast_to(expected[None, :, None], (h, w, 1))
    assert np.max(np.abs(xhat - expected)) < 1e-12


def test_apply_real_zero_prompt():
    x = np.random.default_rng(4).standard_normal((8, 8, 1))
    for variant in ("amplitude", "phase"):
        p = prompt.new_prompt(4, 1, variant)
        assert np.max(np.abs(prompt.apply_real(x, p) - x)) < 1e-10


def test_apply_real_amplitude_matches_split_merge_oracle():
    x = np.random.default_rng(5).standard_normal((8, 8, 1))
    p = rand_prompt(4, 1, "amplitude", seed=6)
    got = prompt.apply_real(x, p)
    spec = oracles.vectorized_dft2(x)
    amp = np.abs(spec)
    phase = np.arctan2(spec.imag, spec.real)
    e = prompt.embed_prompt(p, 8, 8).real
    recomposed = (amp + e) * np.exp(1j * phase)
    expected = oracles.vectorized_dft2(recomposed, inverse=True).real
    assert np.max(np.abs(got - expected)) < 1e-10


def test_apply_real_phase_pi_at_dc_flips_constant_image():
    x = np.full((8, 8, 1), 2.0)
    p = prompt.new_prompt(1, 1, "phase")
    p.real_part[0, 0, 0] = np.pi
    got = prompt.apply_real(x, p)
    assert np.max(np.abs(got + x)) < 1e-10


def test_apply_real_variant_mismatch():
    p = prompt.new_prompt(4, 1, "amplitude")
    with pytest.raises(DomainError):
        prompt.apply_real(np.zeros((8, 8, 1)), p, component="phase")
    with pytest.raises(DomainError):
        prompt.apply_complex(np.zeros((8, 8, 1)), p)


def test_svp_apply_and_structure():
    rng = np.random.default_rng(7)
    s = prompt.new_spatial_prompt(2, 8, 8, 1)
    border = s.border_mask
    vals = rng.standard_normal((8, 8, 1))
    vals[~border] = 0.0
    s.values[:] = vals
    x = rng.standard_normal((8, 8, 1))
    xhat = prompt.apply_svp(x, s)
    assert np.array_equal(xhat, x + vals)  # direct addition oracle
    assert np.array_equal(xhat[2:6, 2:6], x[2:6, 2:6])  # interior untouched
    zero = prompt.new_spatial_prompt(2, 8, 8, 1)
    assert np.array_equal(prompt.apply_svp(x, zero), x)


def test_svp_param_count_and_interior_validation():
    s = prompt.new_spatial_prompt(2, 8, 8, 1)
    assert s.param_count == 8 * 8 - 4 * 4
    full = prompt.new_spatial_prompt(4, 8, 8, 2)
    assert full.param_count == 2 * 64
    bad = np.ones((8, 8, 1))
    with pytest.raises(DomainError):
        prompt.SpatialPrompt(2, 8, 8, 1, bad)
    with pytest.raises(DomainError):
        prompt.apply_svp(np.zeros((4, 4, 1)), s)


def test_prompt_backward_zero_upstream():
    p = rand_prompt(4, 1, "complex", seed=8)
    g = prompt.prompt_backward(p, np.zeros((8, 8, 1)))
    assert np.all(g.real == 0.0) and np.all(g.imag == 0.0)


@pytest.mark.parametrize("variant", ["complex", "amplitude", "phase"])
def test_prompt_backward_matches_finite_differences(variant):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((8, 8, 1))
    gout = rng.standard_normal((8, 8, 1))
    p = rand_prompt(4, 1, variant, seed=10)
    p.real_part[:] *= 0.3
    if variant == "complex":
        p.imag_part[:] *= 0.3

    def apply(q):
        return prompt.apply_complex(x, q) if variant == "complex" else prompt.apply_real(x, q)

    def scalar(flat):
        q = p.copy()
        n = q.real_part.size
        q.real_part[:] = flat[:n].reshape(q.real_part.shape)
        if variant == "complex":
            q.imag_part[:] = flat[n:].reshape(q.imag_part.shape)
        return float((apply(q) * gout).sum())

    flat0 = (np.concatenate([p.real_part.ravel(), p.imag_part.ravel()])
             if variant == "complex" else p.real_part.ravel())
    fd = oracles.central_difference(scalar, flat0, step=1e-5)
    g = prompt.prompt_backward(p, gout, x=x)
    analytic = (np.concatenate([g.real.ravel(), g.imag.ravel()])
                if variant == "complex" else g.real.ravel())
    denom = np.maximum(np.abs(fd), np.abs(analytic))
    denom[denom < 1e-10] = 1.0
    assert np.max(np.abs(fd - analytic) / denom) < 1e-6


def test_prompt_backward_svp():
    rng = np.random.default_rng(11)
    s = prompt.new_spatial_prompt(1, 6, 6, 1)
    gout = rng.standard_normal((6, 6, 1))
    g = prompt.prompt_backward(s, gout)
    assert np.all(g.real[1:5, 1:5] == 0.0)
    assert np.array_equal(g.real[0, :], gout[0, :])


def test_additivity():
    x = np.random.default_rng(12).standard_normal((16, 16, 1))
    v1 = rand_prompt(4, 1, "complex", seed=13)
    v2 = rand_prompt(4, 1, "complex", seed=14)
    vsum = prompt.new_prompt(4, 1, "complex")
    vsum.real_part[:] = v1.real_part + v2.real_part
    vsum.imag_part[:] = v1.imag_part + v2.imag_part
    once = prompt.apply_complex(x, vsum)
    twice = prompt.apply_complex(prompt.apply_complex(x, v1), v2)
    assert np.max(np.abs(once - twice)) < 1e-10


def test_hermitian_prompt_has_tiny_imaginary_residue():
    h = w = 8
    p = prompt.new_prompt(4, 1, "complex")
    z = 0.7 - 0.2j
    # pair of bins symmetric about the DC row/col in the centered layout
    p.real_part[2, 3, 0] = z.real
    p.imag_part[2, 3, 0] = z.imag
    p.real_part[2, 1, 0] = z.real
    p.imag_part[2, 1, 0] = -z.imag
    p.real_part[2, 2, 0] = 0.5  # DC must be real
    embedded = prompt.embed_prompt(p, h, w)
    residue = np.max(np.abs(np.imag(grid.ifft2(embedded))))
    assert residue < 1e-10


def test_dataset_agnostic_contribution():
    rng = np.random.default_rng(15)
    p = rand_prompt(4, 1, "complex", seed=16)
    x1 = rng.standard_normal((12, 12, 1))
    x2 = rng.standard_normal((12, 12, 1))
    d1 = prompt.apply_complex(x1, p) - x1
    d2 = prompt.apply_complex(x2, p) - x2
    assert np.max(np.abs(d1 - d2)) < 1e-12


def test_batch_transform_counts():
    rng = np.random.default_rng(17)
    xs = [rng.standard_normal((8, 8, 1)) for _ in range(5)]
    pc = rand_prompt(4, 1, "complex", seed=18)
    grid.reset_op_counter()
    prompt.apply_complex_batch(xs, pc)
    assert grid.op_counter["ifft2"] == 1 and grid.op_counter["fft2"] == 0

    pa = rand_prompt(4, 1, "amplitude", seed=19)
    grid.reset_op_counter()
    prompt.apply_real_batch(xs, pa)
    assert grid.op_counter["ifft2"] == 5 and grid.op_counter["fft2"] == 5


def test_prompt_file_roundtrip(tmp_path):
    for variant in ("complex", "amplitude", "phase"):
        p = rand_prompt(5, 2, variant, seed=20)
        path = tmp_path / f"{variant}.fvpp"
        prompt.save_prompt(path, p)
        q = prompt.load_prompt(path)
        assert q.variant == variant and q.r == 5 and q.channels == 2
        assert np.array_equal(q.real_part, p.real_part)
        assert np.array_equal(q.imag_part, p.imag_part)

    s = prompt.new_spatial_prompt(2, 8, 8, 1)
    s.values[0, 0, 0] = 1.5
    path = tmp_path / "svp.fvpp"
    prompt.save_prompt(path, s)
    t = prompt.load_prompt(path)
    assert isinstance(t, prompt.SpatialPrompt)
    assert t.pad_width == 2 and np.array_equal(t.values, s.values)


def test_prompt_file_corruption(tmp_path):
    p = rand_prompt(4, 1, "complex", seed=21)
    path = tmp_path / "p.fvpp"
    prompt.save_prompt(path, p)
    raw = path.read_bytes()
    (tmp_path / "magic.fvpp").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        prompt.load_prompt(tmp_path / "magic.fvpp")
    (tmp_path / "trunc.fvpp").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        prompt.load_prompt(tmp_path / "trunc.fvpp")
    (tmp_path / "trail.fvpp").write_bytes(raw + b"!")
    with pytest.raises(FormatError):
        prompt.load_prompt(tmp_path / "trail.fvpp")
