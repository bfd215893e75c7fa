import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from csi_ood.data import Sample
from csi_ood.transforms import (IDENTITY_POLICY, AugmentationPolicy, apply_augmentation,
                                apply_shift, compose_shift_families, family_from_descriptor,
                                make_shift_family, sample_augmentation, sample_augmentations,
                                select_permutations)

ALL = ("identity", "rotate", "perm", "noise", "blur", "cutout", "sobel")


def batch(b=2, c=3, h=8, w=8, seed=0):
    return torch.rand(b, c, h, w, generator=torch.Generator().manual_seed(seed))


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_area_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentationPolicy(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(mode="test")
    p = AugmentationPolicy()
    assert AugmentationPolicy.from_dict(p.to_dict()) == p


def test_flip_prob_zero_never_flips():
    aug = sample_augmentations(AugmentationPolicy(flip_prob=0.0), 500, np.random.default_rng(0))
    assert not aug.flip.any()


def test_controlled_policy_crop_area_and_determinism():
    pol = AugmentationPolicy().controlled()
    a = sample_augmentation(pol, np.random.default_rng(0))
    b = sample_augmentation(pol, np.random.default_rng(99))
    assert a.crop_area[0] == pytest.approx(0.54, abs=1e-12)
    x = batch(1)
    assert torch.equal(apply_augmentation(x, a), apply_augmentation(x, b))
    # majority outcomes: no flip (0.5 tie -> off), jitter on, grayscale off
    assert not a.flip[0] and a.jitter[0] and not a.gray[0]


def test_same_state_same_transform():
    pol = AugmentationPolicy()
    x = batch(3)
    a = apply_augmentation(x, sample_augmentations(pol, 3, np.random.default_rng(5)))
    b = apply_augmentation(x, sample_augmentations(pol, 3, np.random.default_rng(5)))
    assert torch.equal(a, b)


def test_crop_area_uniform_chi_square():
    areas = sample_augmentations(AugmentationPolicy(), 1000, np.random.default_rng(0)).crop_area
    counts, _ = np.histogram(areas, bins=10, range=(0.08, 1.0))
    assert chisquare(counts).pvalue > 0.001
    other = sample_augmentations(AugmentationPolicy(), 1000, np.random.default_rng(1)).crop_area
    assert not np.allclose(areas, other)


def test_identity_policy_is_identity():
    x = batch(2)
    out = apply_augmentation(x, sample_augmentations(IDENTITY_POLICY, 2, np.random.default_rng(0)))
    assert torch.allclose(out, x, atol=1e-6)


@pytest.mark.parametrize("name", ALL)
def test_index_zero_is_bit_exact_identity(name):
    fam = make_shift_family(name)
    x = batch(2)
    assert torch.equal(fam.apply(x, 0), x)
    s = Sample(np.random.default_rng(0).random((8, 8, 3)), label=2)
    out = apply_shift(s, fam, 0)
    assert np.array_equal(out.pixels, s.pixels) and out.shift_label == 0


@pytest.mark.parametrize("name", ALL)
def test_range_preserved_and_bad_index(name):
    fam = make_shift_family(name)
    x = batch(2)
    for k in range(fam.K):
        y = fam.apply(x, k, np.random.default_rng(k))
        assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    with pytest.raises(IndexError):
        fam.apply(x, fam.K)
    with pytest.raises(IndexError):
        apply_shift(Sample(np.zeros((8, 8, 3))), fam, -1)


def test_family_sizes():
    assert make_shift_family("rotate").K == 4
    assert make_shift_family("rotate").names[0] == "rot0"
    for name in ("noise", "blur", "cutout", "sobel"):
        assert make_shift_family(name).K == 2
    with pytest.raises(ValueError, match="options"):
        make_shift_family("swirl")


@settings(max_examples=30, deadline=None)
@given(i=st.integers(0, 3), j=st.integers(0, 3), seed=st.integers(0, 1000))
def test_rotation_closure(i, j, seed):
    fam = make_shift_family("rotate")
    x = batch(1, seed=seed)
    assert torch.equal(fam.apply(fam.apply(x, i), j), fam.apply(x, (i + j) % 4))


def test_rotation_four_quarter_turns():
    fam = make_shift_family("rotate")
    x = batch(1)
    y = x
    for _ in range(4):
        y = fam.apply(y, 1)
    assert torch.equal(x, y)


def test_perm_family_selection():
    fam = make_shift_family("perm", grid=2, k=4, seed=0)
    perms = [tuple(p) for p in fam.descriptor["perms"]]
    assert fam.K == 4 and perms[0] == (0, 1, 2, 3) and len(set(perms)) == 4
    assert (0, 1, 2, 3) not in perms[1:]
    assert select_permutations(4, 4, seed=0) == select_permutations(4, 4, seed=0)
    with pytest.raises(ValueError):
        select_permutations(4, 25)


def test_perm_block_bookkeeping():
    fam = make_shift_family("perm", grid=2, k=4, seed=0)
    # each block filled with its own index
    x = torch.zeros(1, 1, 4, 4)
    for b in range(4):
        r, c = divmod(b, 2)
        x[0, 0, 2 * r:2 * r + 2, 2 * c:2 * c + 2] = b / 4
    for k in range(1, 4):
        perm = fam.descriptor["perms"][k]
        y = fam.apply(x, k)
        for slot in range(4):
            r, c = divmod(slot, 2)
            block = y[0, 0, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
            assert torch.all(block == perm[slot] / 4)


def test_noise_is_clipped_and_seeded():
    fam = make_shift_family("noise", sigma=0.5)
    x = batch(2)
    a = fam.apply(x, 1, np.random.default_rng(3))
    b = fam.apply(x, 1, np.random.default_rng(3))
    assert torch.equal(a, b) and a.min() >= 0 and a.max() <= 1


def test_cutout_zeroes_a_quarter_side_patch():
    fam = make_shift_family("cutout")
    x = torch.ones(1, 3, 8, 8)
    y = fam.apply(x, 1, np.random.default_rng(0))
    assert int((y[0, 0] == 0).sum()) == 4


def test_compose_families():
    rot, noise = make_shift_family("rotate"), make_shift_family("noise")
    prod = compose_shift_families(rot, noise)
    assert prod.K == 8 and prod.names[0] == "identity"
    x = batch(1)
    assert torch.equal(prod.apply(x, 0), x)
    # member (i, j) = noise_j first, then rot_i
    a = prod.apply(x, 1 * 2 + 1, np.random.default_rng(4))
    b = rot.apply(noise.apply(x, 1, np.random.default_rng(4)), 1)
    assert torch.equal(a, b)
    ident = compose_shift_families(make_shift_family("identity"), rot)
    assert ident.K == 4
    for k in range(4):
        assert torch.equal(ident.apply(x, k), rot.apply(x, k))
    with pytest.raises(ValueError, match="cap"):
        compose_shift_families(rot, rot, cap=10)


def test_descriptor_roundtrip():
    fam = compose_shift_families(make_shift_family("rotate"),
                                 make_shift_family("perm", grid=2, k=3, seed=2))
    back = family_from_descriptor(fam.descriptor)
    assert back.names == fam.names and back.descriptor == fam.descriptor
