import math

import numpy as np
import pytest

from cmcsar.errors import (
    DegenerateEmbeddingError,
    DimensionError,
    DomainError,
    InsufficientNegativesError,
    OracleScopeError,
    PairingError,
)
from cmcsar.gradcheck import check
from cmcsar.loss import (
    EmbeddingSet,
    cosine_similarity,
    fullgraph_cmc_loss,
    loss_oracle,
    pairwise_loss,
    relationships_per_instance,
)
from cmcsar.tensor import Tensor

HAND = 4 * math.log(1 + math.exp(-1))


def es(z, labels=None, tau=0.1):
    return EmbeddingSet(Tensor(np.asarray(z, dtype=np.float64), dtype=np.float64), labels or [], tau)


def random_set(rng, b=None, m=None, n=None, d=None):
    b = b or int(rng.integers(2, 5))
    m = m or int(rng.integers(1, 4))
    n = n or int(rng.integers(1, 3))
    if m * n < 2:
        n = 2
    d = d or int(rng.integers(2, 9))
    labels = [mi for mi in range(m) for _ in range(n)]
    return es(rng.standard_normal((b, m * n, d)), labels, float(rng.uniform(0.05, 1.0)))


def test_cosine_basics(rng):
    u = rng.normal(size=5)
    assert cosine_similarity(u, u).item() == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    with pytest.raises(DegenerateEmbeddingError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_cosine_scale_invariance(rng):
    for _ in range(100):
        u, v = rng.normal(size=(2, 6))
        a, b = rng.uniform(0.01, 100, 2)
        base = cosine_similarity(Tensor(u, dtype=np.float64), Tensor(v, dtype=np.float64)).item()
        scaled = cosine_similarity(Tensor(a * u, dtype=np.float64), Tensor(b * v, dtype=np.float64)).item()
        assert abs(base - scaled) < 1e-6


def naive_pairwise(z, partner, tau):
    n = len(z)
    d = lambda a, b: float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))  # noqa: E731
    total = 0.0
    for i in range(n):
        den = sum(math.exp(d(z[i], z[k]) / tau) for k in range(n) if k != i)
        total -= math.log(math.exp(d(z[i], z[partner[i]]) / tau) / den)
    return total


def test_pairwise_single_pair_is_zero(rng):
    assert pairwise_loss(Tensor(rng.normal(size=(2, 4)), dtype=np.float64), [1, 0], 0.3).item() == 0.0


@pytest.mark.parametrize("n", [1, 2, 3, 6])
def test_pairwise_uniform(n):
    z = np.ones((2 * n, 3))
    partner = [i ^ 1 for i in range(2 * n)]
    got = pairwise_loss(Tensor(z, dtype=np.float64), partner, 1.0).item()
    assert got == pytest.approx(2 * n * math.log(2 * n - 1), abs=1e-6)


def test_pairwise_matches_naive(rng):
    z = rng.normal(size=(6, 4))
    partner = [3, 4, 5, 0, 1, 2]
    got = pairwise_loss(Tensor(z, dtype=np.float64), partner, 0.1).item()
    assert got == pytest.approx(naive_pairwise(z, partner, 0.1), abs=1e-6)


def test_pairwise_bad_pairing():
    z = Tensor(np.ones((4, 2)))
    for partner in ([1, 0, 2, 3], [1, 2, 3, 0], [1, 0, 3], [1, 0, 3, 7]):
        with pytest.raises(PairingError):
            pairwise_loss(z, partner, 1.0)


def test_relationship_count():
    assert relationships_per_instance(3, 2) == 15
    e = es(np.random.default_rng(0).normal(size=(2, 6, 4)), [0, 0, 1, 1, 2, 2])
    assert e.n_views * (e.n_views - 1) == 30


def test_hand_case():
    z = [[[1, 0], [1, 0]], [[0, 1], [0, 1]]]
    e = es(z, tau=1.0)
    assert fullgraph_cmc_loss(e).item() == pytest.approx(HAND, abs=1e-5)
    assert loss_oracle(e) == pytest.approx(HAND, abs=1e-5)
    assert HAND == pytest.approx(1.25304, abs=1e-5)


@pytest.mark.parametrize("b,v", [(2, 2), (3, 4), (4, 6)])
def test_uniform_similarity(b, v):
    e = es(np.ones((b, v, 3)), tau=0.5)
    want = b * v * (v - 1) * math.log(b)
    assert fullgraph_cmc_loss(e).item() == pytest.approx(want, abs=1e-6)
    assert loss_oracle(e) == pytest.approx(want, abs=1e-6)


def test_oracle_agreement():
    rng = np.random.default_rng(7)
    for _ in range(200):
        e = random_set(rng)
        assert abs(fullgraph_cmc_loss(e).item() - loss_oracle(e)) < 1e-6


def test_mean_reduction(rng):
    e = random_set(rng, b=3, m=2, n=2)
    total = fullgraph_cmc_loss(e).item()
    assert fullgraph_cmc_loss(e, "mean").item() == pytest.approx(total / (3 * 4 * 3))
    assert loss_oracle(e, "mean") == pytest.approx(total / (3 * 4 * 3))
    with pytest.raises(ValueError):
        fullgraph_cmc_loss(e, "max")


def test_positive_for_random_inputs(rng):
    for _ in range(20):
        assert fullgraph_cmc_loss(random_set(rng)).item() > 0


def test_invariances():
    rng = np.random.default_rng(3)
    for _ in range(50):
        e = random_set(rng)
        z = e.z.data
        base = fullgraph_cmc_loss(e).item()
        perm_b = rng.permutation(z.shape[0])
        perm_v = rng.permutation(z.shape[1])
        scale = rng.uniform(0.1, 10, size=z.shape[:2] + (1,))
        labels = [e.modality_of_view[i] for i in perm_v]
        assert abs(fullgraph_cmc_loss(es(z[perm_b], e.modality_of_view, e.temperature)).item() - base) < 1e-6
        assert abs(fullgraph_cmc_loss(es(z[:, perm_v], labels, e.temperature)).item() - base) < 1e-6
        assert abs(fullgraph_cmc_loss(es(z * scale, e.modality_of_view, e.temperature)).item() - base) < 1e-6


def test_loss_gradient():
    rng = np.random.default_rng(11)
    for _ in range(10):
        e = random_set(rng)
        fn = lambda z: fullgraph_cmc_loss(EmbeddingSet(z, e.modality_of_view, e.temperature))  # noqa: E731
        assert check(fn, [e.z.data]) < 1e-3


def test_errors(rng):
    with pytest.raises(InsufficientNegativesError):
        fullgraph_cmc_loss(es(rng.normal(size=(1, 4, 3))))
    with pytest.raises(DomainError):
        es(rng.normal(size=(2, 2, 3)), tau=0.0)
    with pytest.raises(DimensionError):
        es(rng.normal(size=(2, 3, 3)), [0, 0, 1])
    with pytest.raises(DegenerateEmbeddingError):
        fullgraph_cmc_loss(es(np.zeros((2, 2, 3))))
    with pytest.raises(OracleScopeError):
        loss_oracle(es(rng.normal(size=(11, 6, 2))))
