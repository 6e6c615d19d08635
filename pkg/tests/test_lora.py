import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import max_rel_error
from slowalign.errors import ContractViolation
from slowalign.lora import LoRALinear, absorb, absorb_all, adapters, attach_lora, svd_init
from slowalign.nn import Linear, build_model, extend_head, forward_logits
from slowalign.numcore import RngState, Tensor
from slowalign.losses import ce


def _model(seed=0):
    m = build_model((6, 10, 8, 5), "gelu", RngState(seed))
    extend_head(m, [0, 1, 2], 1, RngState(seed + 1))
    return m


def test_attach_is_identity():
    m = _model()
    x = np.random.default_rng(0).normal(size=(16, 6))
    before = forward_logits(m, x).data.tobytes()
    attach_lora(m, "all", 4)
    assert forward_logits(m, x).data.tobytes() == before


def test_loss_unchanged_after_svd_init():
    m = _model()
    x = np.random.default_rng(1).normal(size=(8, 6))
    y = [0, 1, 2, 0, 1, 2, 0, 1]
    before = ce(forward_logits(m, x), y).item()
    for ad in attach_lora(m, "all", 3, RngState(0), init="random"):
        svd_init(ad)
    assert ce(forward_logits(m, x), y).item() == before


def test_svd_init_diagonal():
    lin = Linear(np.diag([3.0, 1.0, 0.0]), np.zeros(3))
    ad = LoRALinear(lin, 1, np.zeros((1, 3)), np.zeros((3, 1)))
    svd_init(ad)
    assert np.allclose(ad.A.data, [[1.0, 0.0, 0.0]], atol=1e-12)
    assert not ad.B.data.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_svd_init_rows_orthonormal(k, seed):
    m = build_model((6, 10, 8, 5), "gelu", RngState(seed))
    for ad in attach_lora(m, "all", k):
        assert np.abs(ad.A.data @ ad.A.data.T - np.eye(k)).max() < 1e-8
        assert ad.A.shape[0] == k and ad.B.shape[1] == k


def test_rank_bounds():
    m = _model()
    with pytest.raises(ContractViolation):
        attach_lora(m, "all", 0)
    # min dimension over all layers is 5
    with pytest.raises(ContractViolation):
        attach_lora(m, "all", 6)
    assert len(attach_lora(m, "all", 5)) == 3


def test_double_attach_rejected():
    m = _model()
    attach_lora(m, "attn", 2)
    with pytest.raises(ContractViolation):
        attach_lora(m, [0], 2)
    assert len(attach_lora(m, "mlp", 2)) == 1


def test_random_init_needs_rng():
    with pytest.raises(ContractViolation):
        attach_lora(_model(), "all", 2, init="random")


def test_random_init_is_identity_and_differs_from_svd():
    m1, m2 = _model(), _model()
    x = np.random.default_rng(2).normal(size=(4, 6))
    before = forward_logits(m1, x).data.tobytes()
    r = attach_lora(m1, "all", 2, RngState(7), init="random")
    s = attach_lora(m2, "all", 2)
    assert forward_logits(m1, x).data.tobytes() == before
    assert not np.allclose(r[0].A.data, s[0].A.data)


def test_absorb_zero_b_is_exact():
    m = _model()
    ad = attach_lora(m, [0], 2)[0]
    plain = absorb(ad)
    assert plain.weight.data.tobytes() == ad.weight.data.tobytes()


def test_absorb_matches_random_factors():
    rng = np.random.default_rng(3)
    m = _model()
    attach_lora(m, "all", 2)
    for ad in adapters(m):
        ad.A.data[:] = rng.normal(size=ad.A.shape)
        ad.B.data[:] = rng.normal(size=ad.B.shape)
    batches = [rng.normal(size=(10, 6)) for _ in range(100)]
    adapted = [forward_logits(m, x).data for x in batches]
    absorb_all(m)
    assert not adapters(m)
    for x, ref in zip(batches, adapted):
        assert np.abs(forward_logits(m, x).data - ref).max() < 1e-10


def test_absorb_twice_rejected():
    m = _model()
    ad = attach_lora(m, [0], 2)[0]
    plain = absorb(ad)
    with pytest.raises(ContractViolation):
        absorb(ad)
    with pytest.raises(ContractViolation):
        absorb(plain)


def test_adapted_layer_gradient():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(4, 5))

    def f(x, A, B, b):
        ad = LoRALinear(Linear(Tensor(W), b), 2, A, B)
        return (ad(x) ** 2).sum()

    for _ in range(20):
        arrays = [rng.uniform(-1, 1, s) for s in [(3, 5), (2, 5), (4, 2), (4,)]]
        assert max_rel_error(f, arrays) < 1e-5
