import struct

import numpy as np
import pytest

from smemvqa.features import (
    GRID_PATCH_DIMS,
    FeatureFormatError,
    RasterImage,
    SpatialFeatures,
    TinyConvParams,
    conv_patches,
    extract_grid_patch,
    extract_tiny_conv,
    load_precomputed,
    save_precomputed,
    tiny_conv_forward,
)
from smemvqa.tensor import DimensionError, Tensor, finite_diff_check, matmul, mean_axis, softmax_cross_entropy


def image_with_square(x, y, side=12, size=64):
    img = RasterImage.blank(size, size)
    img.pixels[y:y + side, x:x + side] = (255, 0, 0)
    return img


def test_all_white_image():
    f = extract_grid_patch(RasterImage.blank(64, 64), 4, 4)
    assert f.S.shape == (16, GRID_PATCH_DIMS) and f.grid == (4, 4)
    assert np.array_equal(f.S[:, 0:3], np.ones((16, 3)))
    assert np.array_equal(f.S[:, 3], np.zeros(16))
    assert np.array_equal(f.S[:, 4], np.ones(16))
    assert np.array_equal(f.S[:, 5:], np.zeros((16, 7)))


def test_pure_red_cell():
    img = image_with_square(16, 16, side=16)
    f = extract_grid_patch(img, 4, 4)
    cell = f.S[5]
    assert cell[3] == 1.0 and cell[4] == 0.0
    assert np.array_equal(cell[0:3], [1, 0, 0])


def test_half_red_half_white_cell():
    img = RasterImage.blank(64, 64)
    img.pixels[0:16, 0:8] = (255, 0, 0)  # left half of cell 0
    f = extract_grid_patch(img, 4, 4)
    # pixel-counting oracle
    cell = img.pixels[0:16, 0:16].astype(int)
    red = ((cell[..., 0] > 200) & (cell[..., 1] < 80) & (cell[..., 2] < 80)).sum() / cell[..., 0].size
    assert red == 0.5
    assert abs(f.S[0, 3] - red) <= 1 / 256


def test_gray_fraction():
    img = RasterImage.blank(64, 64)
    img.pixels[0:16, 0:4] = (128, 128, 128)
    assert extract_grid_patch(img, 4, 4).S[0, 5] == 0.25


def test_signed_gradients_follow_layout():
    img = RasterImage.blank(64, 64)
    img.pixels[0:16, 8:16] = (0, 0, 0)  # white -> black going right
    f = extract_grid_patch(img, 4, 4)
    assert f.S[0, 9] < 0 and f.S[0, 10] == 0
    assert f.S[0, 11] > 0


def test_moving_square_swaps_red_fraction():
    a = extract_grid_patch(image_with_square(18, 2, side=10), 4, 4).S  # inside cell 1
    b = extract_grid_patch(image_with_square(50, 34, side=10), 4, 4).S  # inside cell 11
    assert a[1, 3] == b[11, 3] and a[11, 3] == b[1, 3]
    assert np.array_equal(a[1], b[11])
    assert np.array_equal(np.delete(a, [1, 11], 0), np.delete(b, [1, 11], 0))


def test_deterministic():
    img = image_with_square(20, 5)
    assert np.array_equal(extract_grid_patch(img).S, extract_grid_patch(img).S)


def test_uneven_grid_pads_by_replication():
    img = RasterImage.blank(10, 7)
    f = extract_grid_patch(img, 3, 3)
    assert f.S.shape == (9, GRID_PATCH_DIMS)
    assert all(y1 > y0 and x1 > x0 for y0, y1, x0, x1 in f.cells)
    assert np.array_equal(f.S[:, 4], np.ones(9))


def test_zero_size_image():
    with pytest.raises(ValueError):
        extract_grid_patch(RasterImage(0, 0, np.zeros((0, 0, 3))), 4, 4)


def test_geometry_invariant():
    with pytest.raises(DimensionError):
        SpatialFeatures(np.zeros((5, 3)), (2, 2))


# ------------------------------------------------------------------ tiny conv

def test_zero_kernel_gives_zero_features():
    params = TinyConvParams(Tensor(np.zeros((75, 4))), Tensor(np.zeros(4)))
    f = extract_tiny_conv(image_with_square(10, 10), params)
    assert np.array_equal(f.S, np.zeros((16, 4)))


def test_averaging_kernel_on_constant_image():
    params = TinyConvParams(Tensor(np.full((75, 1), 1 / 75)), Tensor(np.zeros(1)))
    f = extract_tiny_conv(RasterImage.blank(64, 64, (51, 102, 153)), params)
    assert np.allclose(f.S, 0.4, atol=1e-12)
    assert np.ptp(f.S) == 0.0


def test_conv_geometry_mismatch():
    params = TinyConvParams(Tensor(np.zeros((27, 2))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        extract_tiny_conv(RasterImage.blank(64, 64), params)


def test_conv_windows_cover_cells():
    img = image_with_square(0, 0, side=16)
    P = conv_patches(img, 4, 4)
    assert P.shape == (16, 75)
    assert np.allclose(P[0].reshape(5, 5, 3)[..., 0], 1.0)
    assert np.allclose(P[1].reshape(5, 5, 3)[..., 1], 1.0)


def test_conv_gradient_check():
    rng = np.random.default_rng(0)
    params = TinyConvParams.init(3, rng)
    params.bias.data[:] = 0.1
    P = np.stack([conv_patches(image_with_square(x, 20), 2, 2) for x in (0, 30)])
    W = Tensor(rng.normal(size=(3, 2)))

    def loss():
        feats = tiny_conv_forward(P, params)
        return softmax_cross_entropy(matmul(mean_axis(feats, -2), W), [0, 1])

    assert finite_diff_check(loss, [params.kernels, params.bias], 1e-5) < 1e-4


# ------------------------------------------------------------------ files

def test_precomputed_roundtrip(tmp_path):
    S = np.random.default_rng(0).normal(size=(16, 12)).astype(np.float32)
    path = tmp_path / "a.smemfeat"
    save_precomputed(path, S)
    f = load_precomputed(path)
    assert f.S.dtype == np.float64 and f.grid == (4, 4)
    assert np.array_equal(f.S, S.astype(np.float64))
    save_precomputed(tmp_path / "b.smemfeat", f)
    assert (tmp_path / "b.smemfeat").read_bytes() == path.read_bytes()


def test_precomputed_googlenet_shape(tmp_path):
    path = tmp_path / "g.smemfeat"
    payload = np.arange(49 * 1024, dtype="<f4")
    path.write_bytes(b"SMEMFEAT" + struct.pack("<III", 1, 49, 1024) + payload.tobytes())
    f = load_precomputed(path)
    assert (f.L, f.M) == (49, 1024) and f.grid == (7, 7)
    assert f.S[48, 1023] == 49 * 1024 - 1


def test_truncated_payload_reports_offset(tmp_path):
    path = tmp_path / "t.smemfeat"
    save_precomputed(path, np.zeros((4, 3)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FeatureFormatError, match="expected 68 bytes.*offset 63"):
        load_precomputed(path)


@pytest.mark.parametrize("blob, where", [
    (b"NOTMAGIC" + bytes(12), "offset 0"),
    (b"SMEMFEAT" + struct.pack("<III", 2, 1, 1) + bytes(4), "offset 8"),
    (b"SMEMFEAT" + bytes(4), "offset 12"),
])
def test_header_faults(tmp_path, blob, where):
    path = tmp_path / "h.smemfeat"
    path.write_bytes(blob)
    with pytest.raises(FeatureFormatError, match=where):
        load_precomputed(path)
