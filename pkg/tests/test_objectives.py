import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from csi_ood.model import ModelBundle
from csi_ood.objectives import (LossConfig, cls_si_objective, compute_loss, con_si_loss,
                                contrastive_loss, csi_loss, joint_labels, shifted_union,
                                simclr_loss, simclr_objective, sup_csi_loss, supclr_loss,
                                supclr_objective, two_views)
from csi_ood.transforms import AugmentationPolicy, make_shift_family

from oracles import naive_multi_positive, naive_simclr, naive_supclr

TAU = 0.5


def toy_bundle(K=1, seed=0):
    torch.manual_seed(seed)
    return ModelBundle(arch="toy", in_channels=3, image_size=4, width=8, proj_dim=8,
                       num_shifts=K).double()


def images(b, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, 4, 4, generator=g, dtype=torch.float64)


# -- contrastive primitive ----------------------------------------------------


def test_contrastive_closed_form():
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    pos = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
    neg = torch.tensor([[0.0, 3.0]], dtype=torch.float64)
    val = contrastive_loss(q, pos, neg, temperature=1.0)
    assert float(val) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert float(val) == pytest.approx(0.31326, abs=1e-5)


def test_contrastive_no_negatives_is_zero():
    q = torch.randn(5, dtype=torch.float64)
    pos = torch.randn(3, 5, dtype=torch.float64)
    assert float(contrastive_loss(q, pos, torch.zeros(0, 5), TAU)) == pytest.approx(0.0, abs=1e-12)


def test_contrastive_query_scale():
    g = torch.Generator().manual_seed(1)
    q, pos, neg = (torch.randn(n, 6, generator=g, dtype=torch.float64) for n in (1, 2, 4))
    a = contrastive_loss(q[0], pos, neg, TAU)
    b = contrastive_loss(7.5 * q[0], pos, neg, TAU)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_contrastive_zero_norm_raises():
    with pytest.raises(ValueError, match="zero-norm"):
        contrastive_loss(torch.zeros(3), torch.ones(1, 3), torch.ones(1, 3))


def test_contrastive_needs_positive():
    with pytest.raises(ValueError):
        contrastive_loss(torch.ones(3), torch.zeros(0, 3), torch.ones(1, 3))


def test_contrastive_matches_anchor_oracle():
    from oracles import anchor_loss
    rng = np.random.default_rng(3)
    for _ in range(20):
        q, P, N = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        got = float(contrastive_loss(torch.from_numpy(q), torch.from_numpy(P),
                                     torch.from_numpy(N), 0.7))
        assert got == pytest.approx(anchor_loss(q, P, N, 0.7), abs=1e-12)


# -- embedding-level objectives ---------------------------------------------------


def test_simclr_objective_single_pair_is_zero():
    z1, z2 = torch.randn(1, 8, dtype=torch.float64), torch.randn(1, 8, dtype=torch.float64)
    assert float(simclr_objective(z1, z2)) == pytest.approx(0.0, abs=1e-12)


def test_simclr_objective_b2_oracle():
    rng = np.random.default_rng(0)
    z1, z2 = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    got = float(simclr_objective(torch.from_numpy(z1), torch.from_numpy(z2), TAU))
    assert got == pytest.approx(naive_simclr(z1, z2, TAU), abs=1e-6)


def test_supclr_objective_single_label_is_zero():
    z1, z2 = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    assert float(supclr_objective(z1, z2, [2, 2, 2, 2])) == pytest.approx(0.0, abs=1e-12)


def test_supclr_unique_labels_equals_simclr():
    z1, z2 = torch.randn(5, 8, dtype=torch.float64), torch.randn(5, 8, dtype=torch.float64)
    a = supclr_objective(z1, z2, [4, 1, 0, 3, 2])
    assert float(a) == float(simclr_objective(z1, z2))


def test_supclr_objective_oracle():
    rng = np.random.default_rng(5)
    z1, z2 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    labels = [0, 1]
    got = float(supclr_objective(torch.from_numpy(z1), torch.from_numpy(z2), labels, TAU))
    assert got == pytest.approx(naive_supclr(z1, z2, labels, TAU), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(2, 6))
def test_objectives_permutation_invariant(seed, b):
    g = torch.Generator().manual_seed(seed)
    z1 = torch.randn(b, 5, generator=g, dtype=torch.float64)
    z2 = torch.randn(b, 5, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (b,), generator=g)
    perm = torch.randperm(b, generator=g)
    a = simclr_objective(z1, z2)
    c = simclr_objective(z1[perm], z2[perm])
    assert float(a) == pytest.approx(float(c), abs=1e-12)
    a = supclr_objective(z1, z2, labels)
    c = supclr_objective(z1[perm], z2[perm], labels[perm])
    assert float(a) == pytest.approx(float(c), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100.0))
def test_objectives_scale_invariant(seed, c):
    g = torch.Generator().manual_seed(seed)
    z1 = torch.randn(4, 5, generator=g, dtype=torch.float64)
    z2 = torch.randn(4, 5, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 0, 2])
    assert float(simclr_objective(c * z1, c * z2)) == pytest.approx(
        float(simclr_objective(z1, z2)), abs=1e-9)
    assert float(supclr_objective(c * z1, c * z2, labels)) == pytest.approx(
        float(supclr_objective(z1, z2, labels)), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_objectives_nonnegative_finite(seed):
    g = torch.Generator().manual_seed(seed)
    z1 = torch.randn(3, 4, generator=g, dtype=torch.float64)
    z2 = torch.randn(3, 4, generator=g, dtype=torch.float64)
    for val in (simclr_objective(z1, z2), supclr_objective(z1, z2, [0, 0, 1])):
        assert math.isfinite(float(val)) and float(val) >= -1e-12


# -- cls-SI --------------------------------------------------------------------


def test_cls_si_perfect_classifier():
    logits = 1e4 * torch.eye(4, dtype=torch.float64)
    assert float(cls_si_objective(logits, [0, 1, 2, 3])) == pytest.approx(0.0, abs=1e-12)


def test_cls_si_uniform_is_log_k():
    logits = torch.zeros(8, 4, dtype=torch.float64)
    val = cls_si_objective(logits, [0, 1, 2, 3, 3, 2, 1, 0])
    assert float(val) == pytest.approx(math.log(4), abs=1e-12)
    assert float(val) == pytest.approx(1.38629, abs=1e-5)


def test_cls_si_single_shift_is_zero():
    logits = torch.randn(6, 1, dtype=torch.float64)
    assert float(cls_si_objective(logits, [0] * 6)) == pytest.approx(0.0, abs=1e-12)


def test_cls_si_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        cls_si_objective(torch.zeros(2, 4), [0, 4])


def test_joint_labels_layout():
    y = torch.tensor([0, 1, 2, 0])
    k = torch.tensor([0, 0, 1, 3])
    assert joint_labels(y, k, 3).tolist() == [0, 1, 5, 9]


# -- image-batch losses --------------------------------------------------------


def test_simclr_loss_b1_is_zero():
    b = toy_bundle()
    val = simclr_loss(images(1), AugmentationPolicy(), b, TAU, np.random.default_rng(0))
    assert float(val) == pytest.approx(0.0, abs=1e-12)


def test_simclr_loss_matches_oracle():
    bundle, x, pol = toy_bundle(), images(3, 1), AugmentationPolicy()
    got = float(simclr_loss(x, pol, bundle, TAU, np.random.default_rng(4)))
    v1, v2 = two_views(x, pol, np.random.default_rng(4))
    with torch.no_grad():
        z = bundle.embed(torch.cat([v1, v2])).numpy()
    assert got == pytest.approx(naive_simclr(z[:3], z[3:], TAU), abs=1e-6)


def test_con_si_identity_family_equals_simclr():
    bundle, x, pol = toy_bundle(), images(4, 2), AugmentationPolicy()
    ident = make_shift_family("identity")
    a = con_si_loss(x, ident, pol, bundle, TAU, np.random.default_rng(9))
    b = simclr_loss(x, pol, bundle, TAU, np.random.default_rng(9))
    assert float(a) == float(b)


def test_con_si_k2_b1_oracle_and_membership():
    bundle, x, pol = toy_bundle(K=2), images(1, 3), AugmentationPolicy()
    fam = make_shift_family("noise")
    got = float(con_si_loss(x, fam, pol, bundle, TAU, np.random.default_rng(2)))
    r = np.random.default_rng(2)
    union, ks = shifted_union(x, fam, r)
    v1, v2 = two_views(union, pol, r)
    assert v1.shape[0] + v2.shape[0] == 4
    with torch.no_grad():
        z = bundle.embed(torch.cat([v1, v2])).numpy()
    # group = (shift, image); the two shifted copies of one image are negatives
    groups = [(int(k), 0) for k in ks] * 2
    assert got == pytest.approx(naive_multi_positive(list(z), groups, TAU), abs=1e-6)
    as_positive = naive_multi_positive(list(z), [0] * 4, TAU)
    assert abs(got - as_positive) > 1e-3


def test_con_si_memory_cap():
    bundle, x = toy_bundle(K=4), images(4)
    with pytest.raises(ValueError, match="memory cap"):
        con_si_loss(x, make_shift_family("rotate"), AugmentationPolicy(), bundle, max_views=31)


def test_csi_lambda_linearity():
    bundle, x, pol = toy_bundle(K=4), images(3, 5), AugmentationPolicy()
    fam = make_shift_family("rotate")
    t0, p0 = csi_loss(x, fam, pol, bundle, LossConfig(lambda_cls=0.0), np.random.default_rng(1))
    con = con_si_loss(x, fam, pol, bundle, TAU, np.random.default_rng(1))
    assert float(t0) == float(con)
    t2, p2 = csi_loss(x, fam, pol, bundle, LossConfig(lambda_cls=2.0), np.random.default_rng(1))
    assert float(t2 - p2["con_si"]) == pytest.approx(2 * float(p2["cls_si"]), abs=1e-12)
    assert LossConfig().lambda_cls == 1.0


def test_supclr_loss_b2_oracle():
    bundle, x, pol = toy_bundle(), images(2, 6), AugmentationPolicy()
    labels = torch.tensor([0, 1])
    got = float(supclr_loss(x, labels, pol, bundle, TAU, np.random.default_rng(3)))
    v1, v2 = two_views(x, pol, np.random.default_rng(3))
    with torch.no_grad():
        z = bundle.embed(torch.cat([v1, v2])).numpy()
    assert got == pytest.approx(naive_supclr(z[:2], z[2:], [0, 1], TAU), abs=1e-6)


def test_sup_csi_identity_equals_supclr():
    bundle, x, pol = toy_bundle(), images(4, 7), AugmentationPolicy()
    labels = torch.tensor([0, 1, 1, 0])
    a = sup_csi_loss(x, labels, make_shift_family("identity"), pol, bundle, TAU,
                     np.random.default_rng(0))
    b = supclr_loss(x, labels, pol, bundle, TAU, np.random.default_rng(0))
    assert float(a) == float(b)


def test_sup_csi_k2_oracle_and_membership():
    bundle, x, pol = toy_bundle(K=2), images(2, 8), AugmentationPolicy()
    labels = torch.tensor([1, 1])
    fam = make_shift_family("sobel")
    got = float(sup_csi_loss(x, labels, fam, pol, bundle, TAU, np.random.default_rng(6)))
    r = np.random.default_rng(6)
    union, ks = shifted_union(x, fam, r)
    v1, v2 = two_views(union, pol, r)
    with torch.no_grad():
        z = bundle.embed(torch.cat([v1, v2])).numpy()
    # same class, different shift -> different joint label -> negative
    groups = [(1, int(k)) for k in ks] * 2
    assert got == pytest.approx(naive_multi_positive(list(z), groups, TAU), abs=1e-6)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_cls=-1.0)
    with pytest.raises(ValueError, match="valid modes"):
        LossConfig(mode="moco")


def test_compute_loss_dispatch_components():
    bundle, x, pol = toy_bundle(K=4), images(3), AugmentationPolicy()
    fam = make_shift_family("rotate")
    labels = torch.tensor([0, 1, 0])
    for mode, keys in [("simclr", {"simclr"}), ("con_si", {"con_si"}), ("cls_si", {"cls_si"}),
                       ("csi", {"con_si", "cls_si"}), ("supclr", {"supclr"}),
                       ("sup_csi", {"sup_csi"})]:
        total, parts = compute_loss(LossConfig(mode=mode), x, bundle, pol, fam,
                                    np.random.default_rng(0), labels=labels)
        assert set(parts) == keys
        assert math.isfinite(float(total))
    with pytest.raises(ValueError, match="labels"):
        compute_loss(LossConfig(mode="supclr"), x, bundle, pol, fam, np.random.default_rng(0))


def test_align_mode_uses_single_pair_positives():
    bundle, x, pol = toy_bundle(K=4), images(3), AugmentationPolicy()
    fam = make_shift_family("rotate")
    total, parts = compute_loss(LossConfig(mode="csi", align_shift_as_positive=True), x, bundle,
                                pol, fam, np.random.default_rng(0))
    assert math.isfinite(float(total)) and set(parts) == {"con_si", "cls_si"}
