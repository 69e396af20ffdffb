import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmclip import tensor as T
from ssmclip.checkpoint import Checkpoint
from ssmclip.gradcheck import gradcheck
from ssmclip.tensor import Tensor
from ssmclip.vision import (PatchGrid, PatchMerge, ResolutionError, VisionConfig, VisionEncoder, VSSBlock,
                            cross_merge, cross_scan, depthwise_conv2d, patch_embed, patch_merge, read_ppm,
                            traversal_orders, write_ppm)


def tiny_config(**kw):
    base = dict(patch_size=4, stage_depths=(1,), stage_widths=(8,), n_state=3, projection_dim=6)
    base.update(kw)
    return VisionConfig(**base)


def test_single_patch_is_linear_map_of_whole_image(rng):
    img = rng.uniform(size=(4, 4, 3))
    w, b = rng.normal(size=(48, 5)), rng.normal(size=5)
    grid = patch_embed(img, 4, Tensor(w), Tensor(b))
    assert (grid.rows, grid.cols) == (1, 1)
    np.testing.assert_allclose(grid.data.data[0, 0], img.reshape(-1) @ w + b, rtol=1e-13)


def test_patch_grid_shape(rng):
    grid = patch_embed(rng.uniform(size=(32, 32, 3)), 4, Tensor(rng.normal(size=(48, 7))))
    assert grid.data.shape == (8, 8, 7)
    with pytest.raises(ResolutionError):
        patch_embed(np.zeros((30, 32, 3)), 4, Tensor(np.zeros((48, 7))))


def test_patch_contents_follow_raster_order(rng):
    img = rng.uniform(size=(8, 12, 3))
    w = np.eye(48)
    grid = patch_embed(img, 4, Tensor(w)).data.data
    np.testing.assert_array_equal(grid[1, 2], img[4:8, 8:12].reshape(-1))


def test_traversal_orders_on_two_by_two():
    np.testing.assert_array_equal(traversal_orders(2, 2),
                                  [[0, 1, 2, 3], [3, 2, 1, 0], [0, 2, 1, 3], [3, 1, 2, 0]])


def test_one_cell_grid_paths_coincide(rng):
    g = rng.normal(size=(1, 1, 5))
    seqs = cross_scan(PatchGrid(Tensor(g))).data
    for k in range(4):
        np.testing.assert_array_equal(seqs[k], seqs[0])
    np.testing.assert_array_equal(cross_merge(Tensor(seqs), 1, 1).data.data, 4 * g)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_merge_of_scan_is_four_times_grid(rows, cols, seed):
    g = np.random.default_rng(seed).normal(size=(2, rows, cols, 3))
    out = cross_merge(cross_scan(PatchGrid(Tensor(g))), rows, cols).data.data
    np.testing.assert_array_equal(out, 4 * g)


@given(st.integers(1, 6), st.integers(1, 6))
def test_each_path_round_trips(rows, cols):
    orders = traversal_orders(rows, cols)
    cells = np.arange(rows * cols)
    for path in orders:
        assert sorted(path.tolist()) == cells.tolist()
        unflat = np.empty_like(cells)
        unflat[path] = cells[path]
        np.testing.assert_array_equal(unflat, cells)


def test_horizontal_flip_maps_paths(rng):
    g = rng.normal(size=(3, 4, 2))
    flipped = cross_scan(PatchGrid(Tensor(g[:, ::-1].copy()))).data
    # row-forward over the flipped grid reads each original row right to left
    np.testing.assert_array_equal(flipped[0], g[:, ::-1].reshape(-1, 2))
    np.testing.assert_array_equal(flipped[1], flipped[0][::-1])


def test_merge_rejects_wrong_shape():
    with pytest.raises(T.ShapeError):
        cross_merge(Tensor(np.zeros((3, 4, 2))), 2, 2)


def test_depthwise_conv_against_loops(rng):
    x, w, b = rng.normal(size=(4, 5, 2)), rng.normal(size=(3, 3, 2)), rng.normal(size=2)
    y = depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    for r in range(4):
        for c in range(5):
            expected = b.copy()
            for i in range(3):
                for j in range(3):
                    rr, cc = r + i - 1, c + j - 1
                    if 0 <= rr < 4 and 0 <= cc < 5:
                        expected += w[i, j] * x[rr, cc]
            np.testing.assert_allclose(y[r, c], expected, rtol=1e-13)


def test_vss_block_with_zero_output_is_identity(rng):
    blk = VSSBlock(4, 3, rng=rng)
    blk.out_proj.weight.data[:] = 0.0
    g = rng.normal(size=(4, 4, 4))
    np.testing.assert_array_equal(blk(PatchGrid(Tensor(g))).data.data, g)


def test_vss_receptive_field_is_dense(rng):
    blk = VSSBlock(4, 3, rng=rng)
    for cell in [(0, 0), (3, 3), (1, 2)]:
        g = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
        T.backward(T.sum(blk(PatchGrid(g)).data[cell]))
        assert np.all(np.linalg.norm(g.grad, axis=-1) > 0)


def test_vss_block_gradient(rng):
    blk = VSSBlock(4, 3, 1, 3, "mamba1", rng)
    g = Tensor(rng.normal(size=(3, 3, 4)))
    w = rng.normal(size=(3, 3, 4))
    assert gradcheck(lambda: T.sum(blk(PatchGrid(g)).data * w), [g] + blk.parameters()) <= 1e-6


def test_vss_block_width_checked(rng):
    with pytest.raises(T.ShapeError):
        VSSBlock(4, rng=rng)(PatchGrid(Tensor(np.zeros((2, 2, 3)))))


def test_patch_merge_shapes(rng):
    out = PatchMerge(2, rng)(PatchGrid(Tensor(rng.normal(size=(2, 2, 2)))))
    assert out.data.shape == (1, 1, 4)
    out = PatchMerge(3, rng)(PatchGrid(Tensor(rng.normal(size=(5, 8, 8, 3)))))
    assert out.data.shape == (5, 4, 4, 6)
    with pytest.raises(ResolutionError):
        PatchMerge(3, rng)(PatchGrid(Tensor(np.zeros((3, 4, 3)))))


def test_patch_merge_concatenates_neighbourhood(rng):
    g = rng.normal(size=(2, 2, 3))
    w = rng.normal(size=(12, 6))
    out = patch_merge(PatchGrid(Tensor(g)), Tensor(w)).data.data[0, 0]
    concat = np.concatenate([g[0, 0], g[0, 1], g[1, 0], g[1, 1]])
    np.testing.assert_allclose(out, concat @ w, rtol=1e-13)


def test_config_validation():
    with pytest.raises(ValueError):
        VisionConfig(stage_depths=(1, 1), stage_widths=(8, 12))
    with pytest.raises(ValueError):
        VisionConfig(stage_depths=(1,), stage_widths=(8, 16))
    assert VisionConfig().divisor == 8


def test_encoder_outputs_unit_vectors_at_any_resolution(rng):
    enc = VisionEncoder(VisionConfig(4, (1, 1), (4, 8), 3, 6), rng)
    n_params = enc.num_parameters()
    before = Checkpoint("", 0, 0.0, enc.state_dict()).to_bytes()
    for res in (16, 32, 24):
        out = enc(rng.uniform(size=(2, res, res, 3))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
        assert out.shape == (2, 6)
    assert enc.num_parameters() == n_params
    assert Checkpoint("", 0, 0.0, enc.state_dict()).to_bytes() == before


def test_encoder_rejects_indivisible_resolution(rng):
    enc = VisionEncoder(VisionConfig(4, (1, 1), (4, 8), 3, 6), rng)
    with pytest.raises(ResolutionError):
        enc(np.zeros((1, 12, 12, 3)))


def test_encoder_gradient(rng):
    enc = VisionEncoder(tiny_config(), rng)
    img = Tensor(rng.uniform(size=(16, 16, 3)))
    w = rng.normal(size=6)
    err = gradcheck(lambda: T.sum(enc(img) * w), [img] + enc.parameters(), max_coords=20, rng=rng)
    assert err <= 1e-6


def test_ppm_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    np.testing.assert_allclose(read_ppm(path), img, atol=1e-12)
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")
