import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from countocc.pyramid import (FeaturePyramid, downsample_mask, dump_pyramid, load_pyramid, occluded_values,
                              reassemble, separate_tokens)


def test_pyramid_validation():
    with pytest.raises(ValueError):
        FeaturePyramid([])
    with pytest.raises(ValueError):
        FeaturePyramid([torch.zeros(1, 2, 4, 4), torch.zeros(2, 2, 2, 2)])
    with pytest.raises(ValueError):
        FeaturePyramid([torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4)])
    p = FeaturePyramid([torch.zeros(3, 2, 8, 8), torch.zeros(3, 4, 4, 4)])
    assert p.batch_size == 3 and p.dims == [(8, 8), (4, 4)] and len(p) == 2


def test_downsample_examples():
    assert downsample_mask(np.zeros((8, 8)), (2, 2)).sum() == 0
    assert downsample_mask(np.ones((8, 8)), (2, 2)).sum() == 4
    m = np.zeros((4, 4))
    m[:2, 2:] = 1
    out = downsample_mask(m, (2, 2))[0]
    assert out.tolist() == [[0.0, 1.0], [0.0, 0.0]]
    # exactly half covered counts as occluded
    half = np.zeros((4, 4))
    half[:1, :2] = 1
    assert downsample_mask(half, (2, 2))[0, 0, 0] == 1.0
    assert downsample_mask(torch.zeros(3, 8, 8), (4, 4)).shape == (3, 4, 4)


def test_separate_two_by_two_example():
    z = torch.arange(4, dtype=torch.float64).reshape(1, 1, 2, 2)
    split = separate_tokens(z, torch.tensor([[[1.0, 0.0], [0.0, 0.0]]]))
    assert split.visible_tokens[0].flatten().tolist() == [1.0, 2.0, 3.0]
    assert split.occluded_indices[0].tolist() == [0]
    assert split.n_visible == [3] and split.n_occluded == [1]
    out = reassemble(z, torch.tensor([[[1.0, 0.0], [0.0, 0.0]]]), [torch.tensor([[9.0]], dtype=torch.float64)])
    assert out.flatten().tolist() == [9.0, 1.0, 2.0, 3.0]


def test_zero_and_full_masks():
    z = torch.randn(2, 3, 4, 5)
    s0 = separate_tokens(z, torch.zeros(2, 4, 5))
    assert s0.n_visible == [20, 20] and s0.n_occluded == [0, 0]
    s1 = separate_tokens(z, torch.ones(2, 4, 5))
    assert s1.n_visible == [0, 0] and s1.n_occluded == [20, 20]
    assert torch.equal(reassemble(z, torch.zeros(2, 4, 5), [torch.zeros(0, 3)] * 2), z)


def test_reassemble_count_mismatch():
    z = torch.randn(1, 2, 2, 2)
    with pytest.raises(ValueError):
        reassemble(z, torch.ones(1, 2, 2), [torch.zeros(3, 2)])
    with pytest.raises(ValueError):
        separate_tokens(z, torch.ones(1, 3, 3))


def _random_case(seed):
    g = torch.Generator().manual_seed(seed)
    b, c = int(torch.randint(1, 4, (1,), generator=g)), int(torch.randint(1, 6, (1,), generator=g))
    h, w = int(torch.randint(1, 7, (1,), generator=g)), int(torch.randint(1, 7, (1,), generator=g))
    z = torch.randn(b, c, h, w, generator=g)
    m = (torch.rand(b, h, w, generator=g) < 0.4).float()
    return z, m


@given(st.integers(0, 10_000))
def test_round_trip_and_visible_preservation(seed):
    z, m = _random_case(seed)
    split = separate_tokens(z, m)
    assert all(v + o == split.num_positions for v, o in zip(split.n_visible, split.n_occluded))
    assert torch.equal(reassemble(z, m, occluded_values(z, split)), z)
    junk = [torch.full((n, z.shape[1]), 1e6 + k) for k, n in enumerate(split.n_occluded)]
    out = reassemble(z, m, junk)
    keep = (m == 0)[:, None].expand_as(z)
    assert torch.equal(out[keep], z[keep])
    assert all(torch.equal(a, b) for a, b in zip(occluded_values(out, separate_tokens(out, m)), junk))


def test_dump_and_load(tmp_path):
    p = FeaturePyramid([torch.randn(2, 3, 4, 4), torch.randn(2, 5, 2, 2)])
    dump_pyramid(tmp_path / "p.bin", p)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:20] == np.array([0, 2, 3, 4, 4], dtype="<i4").tobytes()
    q = load_pyramid(tmp_path / "p.bin")
    assert all(torch.equal(a, b) for a, b in zip(p.levels, q.levels))
