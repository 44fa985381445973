import numpy as np
import pytest

from cmcsar import augment
from cmcsar.augment import (
    AugmentChain,
    GaussianBlur,
    HFlip,
    RandomCrop,
    Resize,
    Rotate,
    VFlip,
    apply,
    blur_kernel_size,
    finetune_chain,
    pretrain_chain,
)
from cmcsar.errors import RegistrationError


def triple(rng, s=32):
    gt = np.zeros((1, s, s), dtype=np.float32)
    gt[0, 5:12, 8:20] = 1
    return {"SAR": rng.random((3, s, s)), "EO": rng.random((3, s, s)), "GT": gt}


def test_blur_kernel_scaling():
    assert blur_kernel_size(448) == 23
    assert blur_kernel_size(32) == 3
    assert blur_kernel_size(100) == 5
    with pytest.raises(ValueError):
        GaussianBlur(kernel=4)


def test_pretrain_chain_sizes(rng):
    chain = pretrain_chain(32)
    assert [op.kind for op in chain.ops] == ["resize", "random_crop", "hflip", "vflip", "rotate", "gaussian_blur"]
    assert chain.ops[0].target(32, 32) == (38, 38)
    assert pretrain_chain(448).ops[0].target(448, 448) == (537, 537)
    out = apply(chain, triple(rng))
    assert {t.shape[1:] for t in out.values()} == {(32, 32)}
    with pytest.raises(ValueError):
        pretrain_chain(4)


def test_degenerate_chain_is_deterministic(rng):
    chain = AugmentChain((Resize(ratio=1.2), RandomCrop(32), HFlip(0), VFlip(0), Rotate(0, 0), GaussianBlur(3, 0.1, 0.2, 0)), 3)
    t = triple(rng)
    a, b = apply(chain, t, key=(1,)), apply(chain, t, key=(1,))
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_same_seed_same_output_different_seed_differs(rng):
    t = triple(rng)
    chain = pretrain_chain(32, seed=1)
    a, b = apply(chain, t, key=(0, 0)), apply(chain, t, key=(0, 0))
    assert all(np.array_equal(a[n], b[n]) for n in a)
    outs = {apply(chain.with_seed(s), t, key=(0, 0))["SAR"].tobytes() for s in range(20)}
    assert len(outs) == 20


def test_mask_stays_binary_after_rotation(rng):
    chain = AugmentChain((Rotate(30, 30),), 0)
    out = apply(chain, triple(rng))
    assert set(np.unique(out["GT"])) <= {0.0, 1.0}


def test_geometric_consistency_marker(rng):
    s = 32
    marker = np.zeros((1, s, s), dtype=np.float32)
    marker[0, 9, 21] = 1
    tiles = {"A": np.repeat(marker, 3, axis=0), "B": marker.copy(), "GT": marker.copy()}
    for seed in range(10):
        chain = AugmentChain((RandomCrop(24), HFlip(0.5), VFlip(0.5)), seed)
        out = apply(chain, tiles, masks=("GT", "B"))
        locs = {n: tuple(np.argwhere(t[0] == 1).ravel()) for n, t in out.items()}
        assert len(set(locs.values())) == 1


def test_rotation_moves_modalities_identically(rng):
    t = triple(rng)
    t["EO"] = np.repeat(t["GT"], 3, axis=0)
    out = apply(AugmentChain((Rotate(-45, 45),), 9), t, key=(2,))
    eo_mask = out["EO"][0] > 0.5
    assert np.mean(eo_mask == (out["GT"][0] > 0.5)) > 0.97


def test_flip_involution(rng):
    t = triple(rng)
    twice = AugmentChain((HFlip(1.0), HFlip(1.0), VFlip(1.0), VFlip(1.0)), 0)
    out = apply(twice, t)
    assert all(np.array_equal(out[n], np.asarray(t[n], dtype=np.float32)) for n in t)


def test_zero_rotation_full_crop_identity(rng):
    t = triple(rng)
    out = apply(AugmentChain((Rotate(0, 0), RandomCrop(32)), 0), t)
    assert all(np.max(np.abs(out[n] - t[n])) < 1e-6 for n in t)


def test_finetune_chain(rng):
    t = triple(rng)
    chain = finetune_chain(32)
    assert [op.kind for op in chain.ops] == ["resize", "hflip", "vflip"]
    no_flip = AugmentChain((Resize(size=32), HFlip(0), VFlip(0)), 0)
    out = apply(no_flip, t)
    assert all(np.max(np.abs(out[n] - t[n])) < 1e-6 for n in t)


def test_finetune_flips_match_pretrain_flips(rng):
    t = triple(rng)
    for seed in range(8):
        ft = apply(AugmentChain((HFlip(), VFlip()), seed), t, key=(seed,))
        pre = apply(AugmentChain((Rotate(0, 0), HFlip(), VFlip()), seed), t, key=(seed,))
        assert np.allclose(ft["SAR"], pre["SAR"], atol=1e-6)


def test_registration_error(rng):
    with pytest.raises(RegistrationError):
        apply(finetune_chain(32), {"SAR": rng.random((3, 32, 32)), "GT": np.zeros((1, 30, 30))})


def test_chain_serialisation_roundtrip():
    chain = pretrain_chain(32, seed=4)
    assert AugmentChain.from_dict(chain.to_dict()) == chain


def test_blur_only_touches_images(rng):
    t = triple(rng)
    out = apply(AugmentChain((GaussianBlur(5, 1.0, 1.0, 1.0),), 0), t)
    assert np.array_equal(out["GT"], t["GT"])
    assert not np.allclose(out["SAR"], t["SAR"])
    assert np.allclose(out["SAR"].mean(), augment._blur(t["SAR"].astype(np.float32), 5, 1.0).mean())
