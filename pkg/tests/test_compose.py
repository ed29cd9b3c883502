import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from slotcompose.compose import (
    LossWeights,
    MixSpec,
    mix_random,
    mix_shared_init,
    reg_loss,
    total_loss,
)
from slotcompose.errors import ContractError, TrainingAbort
from slotcompose.slotcore import AttentionMap, SlotSet


def make_pair(n, d=6, b=2, seed=0, shared=True):
    g = torch.Generator().manual_seed(seed)
    s1 = torch.randn(b, n, d, generator=g)
    s2 = torch.randn(b, n, d, generator=g)
    iid = "draw0" if shared else None
    return (SlotSet(slots=s1, init_id=iid),
            SlotSet(slots=s2, init_id=iid if shared else "other"))


# ---------------------------------------------------------------------------
# mix_random
# ---------------------------------------------------------------------------

def test_mix_random_n1_frequency_oracle():
    s1, s2 = make_pair(1, b=1)
    g = torch.Generator().manual_seed(0)
    counts = [0, 0]
    for _ in range(10_000):
        mixed, spec = mix_random(s1, s2, g)
        src = 0 if spec.picks[0] == 0 else 1
        counts[src] += 1
        expect = s1.slots if src == 0 else s2.slots
        assert torch.equal(mixed.slots, expect)
    assert chisquare(counts).pvalue > 0.01


def test_mix_random_union_degeneracy():
    s1, _ = make_pair(4)
    mixed, _ = mix_random(s1, s1, torch.Generator().manual_seed(1))
    for i in range(4):
        row = mixed.slots[:, i]
        assert any(torch.equal(row, s1.slots[:, j]) for j in range(4))


@settings(deadline=None, max_examples=25)
@given(n=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_mix_random_no_synthesis_property(n, seed):
    s1, s2 = make_pair(n, seed=seed)
    mixed, spec = mix_random(s1, s2, torch.Generator().manual_seed(seed))
    union = torch.cat([s1.slots, s2.slots], dim=1)
    assert len(spec.picks) == n
    assert len(set(spec.picks)) == n  # without replacement
    assert spec.picks == tuple(sorted(spec.picks))
    for i, p in enumerate(spec.picks):
        assert torch.equal(mixed.slots[:, i], union[:, p])


def test_mix_random_shape_mismatch():
    s1, _ = make_pair(3)
    s2, _ = make_pair(4)
    with pytest.raises(ValueError):
        mix_random(s1, s2, torch.Generator().manual_seed(0))


# ---------------------------------------------------------------------------
# mix_shared_init
# ---------------------------------------------------------------------------

def test_mix_shared_init_smallest_mix():
    s1, s2 = make_pair(2)
    g = torch.Generator().manual_seed(0)
    seen = set()
    for _ in range(50):
        mixed, spec = mix_shared_init(s1, s2, g)
        i1, i2 = spec.partition
        seen.add((i1, i2))
        for i in range(2):
            src = s1 if i in i1 else s2
            assert torch.equal(mixed.slots[:, i], src.slots[:, i])
    assert seen == {((0,), (1,)), ((1,), (0,))}  # never the full set on one side


def test_mix_shared_init_requires_matching_ids():
    s1, s2 = make_pair(3, shared=False)
    with pytest.raises(ContractError):
        mix_shared_init(s1, s2, torch.Generator().manual_seed(0))
    with pytest.raises(ContractError):
        mix_shared_init(torch.randn(1, 3, 4), torch.randn(1, 3, 4),
                        torch.Generator().manual_seed(0))


def test_mix_shared_init_uniform_partition_oracle():
    s1, s2 = make_pair(3)
    g = torch.Generator().manual_seed(7)
    freq = {}
    n_draws = 10_000
    for _ in range(n_draws):
        _, spec = mix_shared_init(s1, s2, g)
        freq[spec.partition] = freq.get(spec.partition, 0) + 1
    assert len(freq) == 6  # 2^3 - 2 valid both-nonempty partitions
    assert chisquare(list(freq.values())).pvalue > 0.01


@settings(deadline=None, max_examples=25)
@given(n=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_mix_shared_init_partition_invariants(n, seed):
    s1, s2 = make_pair(n, seed=seed)
    mixed, spec = mix_shared_init(s1, s2, torch.Generator().manual_seed(seed))
    i1, i2 = spec.partition
    assert set(i1) | set(i2) == set(range(n))
    assert set(i1) & set(i2) == set()
    assert len(i1) >= 1 and len(i2) >= 1
    assert mixed.init_id == s1.init_id
    # reconstruction from the MixSpec alone
    rebuilt = torch.stack(
        [s1.slots[:, i] if i in i1 else s2.slots[:, i] for i in range(n)], dim=1
    )
    assert torch.equal(mixed.slots, rebuilt)


def test_mix_shared_init_single_slot():
    s1, s2 = make_pair(1)
    g = torch.Generator().manual_seed(0)
    sides = set()
    for _ in range(20):
        mixed, spec = mix_shared_init(s1, s2, g)
        sides.add(spec.partition)
    assert sides <= {((0,), ()), ((), (0,))}
    assert len(sides) == 2


# ---------------------------------------------------------------------------
# reg_loss
# ---------------------------------------------------------------------------

def grid_attn(b, m, n, grid, value=None):
    w = torch.full((b, m, n), 1.0 / n) if value is None else value
    return AttentionMap(weights=w, iteration=1, grid=grid)


def test_reg_loss_zero_when_images_equal():
    x = torch.randn(2, 3, 8, 8)
    a = grid_attn(2, 16, 4, (4, 4))
    spec = MixSpec(strategy="shared_init", partition=((0, 1), (2, 3)))
    loss = reg_loss(a, a, x, x, x.clone(), spec)
    assert float(loss.detach()) == pytest.approx(0.0, abs=1e-12)


def test_reg_loss_constant_error_closed_form():
    # uniform attention 1/N and constant per-pixel squared error c -> 2c/N
    b, n, grid = 2, 4, (4, 4)
    c = 0.75
    x_c = torch.zeros(b, 3, 8, 8)
    delta = np.sqrt(c / 3.0)
    x1 = torch.full_like(x_c, delta)
    x2 = torch.full_like(x_c, -delta)
    a = grid_attn(b, 16, n, grid)
    for partition in [((0,), (1, 2, 3)), ((0, 1), (2, 3)), ((0, 1, 2), (3,))]:
        spec = MixSpec(strategy="shared_init", partition=partition)
        loss = reg_loss(a, a, x1, x2, x_c, spec)
        assert float(loss.detach()) == pytest.approx(2 * c / n, rel=1e-6)


def test_reg_loss_stop_gradient_contract():
    a_w = torch.rand(1, 16, 3, requires_grad=True)
    attn = AttentionMap(weights=torch.softmax(a_w, dim=-1), iteration=1, grid=(4, 4))
    x1 = torch.randn(1, 3, 8, 8)
    x2 = torch.randn(1, 3, 8, 8)
    x_c = torch.randn(1, 3, 8, 8, requires_grad=True)
    spec = MixSpec(strategy="shared_init", partition=((0, 1), (2,)))
    loss = reg_loss(attn, attn, x1, x2, x_c, spec)
    loss.backward()
    assert x_c.grad is None or torch.equal(x_c.grad, torch.zeros_like(x_c.grad))
    assert a_w.grad is not None and float(a_w.grad.abs().sum()) > 0


def test_reg_loss_random_picks_columns():
    # random strategy: columns split by source image
    spec = MixSpec(strategy="random", picks=(0, 2, 5, 7))
    assert spec.sources(4) == ((0, 2), (1, 3))
    a = grid_attn(1, 4, 4, (2, 2))
    x = torch.randn(1, 3, 4, 4)
    loss = reg_loss(a, a, x, x, torch.zeros_like(x), spec)
    assert torch.isfinite(loss.detach())


def test_reg_loss_grid_mismatch():
    a = grid_attn(1, 9, 2, (3, 3))
    x = torch.randn(1, 3, 8, 8)
    spec = MixSpec(strategy="shared_init", partition=((0,), (1,)))
    with pytest.raises(ValueError):
        reg_loss(a, a, x, x, x, spec)


# ---------------------------------------------------------------------------
# total_loss
# ---------------------------------------------------------------------------

def test_total_loss_default_arithmetic():
    bd = total_loss(1.0, 1.0, 1.0, 1.0)
    assert bd.total == pytest.approx(3.25)
    assert bd.lambdas == LossWeights()


def test_total_loss_prior_off_is_autoencoding_config():
    lam = LossWeights(prior=0.0, reg=0.0)
    bd = total_loss(123.0, 2.0, 3.0, 456.0, lam)
    assert bd.total == pytest.approx(2.0 + 3.0)


def test_total_loss_random_arithmetic_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, d, r, g = rng.normal(size=4)
        lam = LossWeights(*np.abs(rng.normal(size=4)))
        bd = total_loss(p, d, r, g, lam)
        assert bd.total == pytest.approx(
            lam.prior * p + lam.diff * d + lam.recon * r + lam.reg * g, rel=1e-12
        )


def test_total_loss_linearity_finite_difference():
    base = dict(prior=0.3, diff=1.2, recon=0.7, reg=0.1)
    lam = LossWeights(prior=0.5, diff=1.0, recon=2.0, reg=0.25)
    coefs = {"prior": 0.5, "diff": 1.0, "recon": 2.0, "reg": 0.25}
    h = 1e-3
    for term, coef in coefs.items():
        hi = dict(base)
        lo = dict(base)
        hi[term] += h
        lo[term] -= h
        slope = (total_loss(**hi, lambdas=lam).total
                 - total_loss(**lo, lambdas=lam).total) / (2 * h)
        assert slope == pytest.approx(coef, rel=1e-9)


def test_total_loss_aborts_on_nan_with_term_name():
    with pytest.raises(TrainingAbort) as e:
        total_loss(1.0, float("nan"), 1.0, 1.0)
    assert e.value.term == "diff"
    with pytest.raises(TrainingAbort) as e:
        total_loss(torch.tensor(float("inf")), 1.0, 1.0, 1.0)
    assert e.value.term == "prior"


def test_total_loss_tensor_breakdown_detach():
    bd = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0),
                    torch.tensor(4.0))
    d = bd.to_dict()
    assert d["total"] == pytest.approx(1 + 2 + 3 + 0.25 * 4)
    assert d["lambdas"]["reg"] == 0.25
