"""Decoders: hidden-grid reshape, naive head, cascaded upsampler, skip wiring."""

import numpy as np
import pytest

from tunet import tensor as T
from tunet.decoder import CupBlock, CupDecoder, NaiveDecoder, reshape_hidden
from tunet.errors import ConfigError, ContractError
from tunet.tensor import Tensor


def test_reshape_hidden_196_tokens():
    z = Tensor(np.random.default_rng(0).standard_normal((196, 768)).astype(np.float32))
    h = reshape_hidden(z)
    assert h.shape == (768, 14, 14)


def test_reshape_hidden_roundtrip():
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((16, 8)))
    h = reshape_hidden(z, (4, 4))
    back = T.transpose(T.reshape(h, (8, 16)))
    assert np.array_equal(back.data, z.data)


def test_reshape_hidden_tiny_grid():
    z = Tensor(np.zeros((16, 8)))
    assert reshape_hidden(z).shape == (8, 4, 4)


def test_reshape_hidden_rejects_nonsquare():
    with pytest.raises(ContractError):
        reshape_hidden(Tensor(np.zeros((12, 8))))


def test_reshape_hidden_rejects_bad_grid():
    with pytest.raises(ContractError):
        reshape_hidden(Tensor(np.zeros((16, 8))), (3, 4))


# ---------------------------------------------------------------------------
# naive head
# ---------------------------------------------------------------------------


def test_naive_head_full_resolution_shape():
    rng = np.random.default_rng(2)
    dec = NaiveDecoder(rng, 768, 9)
    z = Tensor(rng.standard_normal((196, 768)).astype(np.float32))
    logits = dec.forward(reshape_hidden(z), 224, 224)
    assert logits.shape == (9, 224, 224)


def test_naive_head_constant_hidden_gives_constant_logits():
    rng = np.random.default_rng(3)
    dec = NaiveDecoder(rng, 8, 3)
    dec.head.data = rng.standard_normal((3, 8, 1, 1)).astype(np.float32)
    hidden = Tensor(np.broadcast_to(np.arange(8.0, dtype=np.float32)[:, None, None], (8, 4, 4)).copy())
    logits = dec.forward(hidden, 16, 16).data
    for k in range(3):
        assert np.allclose(logits[k], logits[k, 0, 0], atol=1e-6)


def test_naive_head_gradient_reaches_conv():
    rng = np.random.default_rng(4)
    dec = NaiveDecoder(rng, 8, 3)
    hidden = Tensor(rng.standard_normal((8, 4, 4)))
    T.backward(T.tsum(dec.forward(hidden, 8, 8)))
    assert dec.head.grad is not None and np.abs(dec.head.grad).max() > 0


# ---------------------------------------------------------------------------
# cascaded upsampler
# ---------------------------------------------------------------------------


def test_cup_block_doubles_extents():
    rng = np.random.default_rng(5)
    block = CupBlock(rng, 8, 16)
    x = Tensor(rng.standard_normal((8, 5, 7)))
    assert block.forward(x).shape == (16, 10, 14)


def test_cup_full_pipeline_224():
    rng = np.random.default_rng(6)
    dec = CupDecoder(rng, 768, (256, 128, 64, 16), 9, skip_channels=(16, 32, 64), skip_count=3)
    hidden = Tensor(rng.standard_normal((768, 14, 14)).astype(np.float32))
    skips = [
        Tensor(rng.standard_normal((16, 112, 112)).astype(np.float32)),
        Tensor(rng.standard_normal((32, 56, 56)).astype(np.float32)),
        Tensor(rng.standard_normal((64, 28, 28)).astype(np.float32)),
    ]
    with T.no_grad():
        logits = dec.forward(hidden, skips)
    assert logits.shape == (9, 224, 224)


def test_cup_skipless_cascade():
    rng = np.random.default_rng(7)
    dec = CupDecoder(rng, 32, (16, 16, 16, 16), 4, skip_count=0)
    hidden = Tensor(rng.standard_normal((32, 4, 4)).astype(np.float32))
    with T.no_grad():
        logits = dec.forward(hidden, None)
    assert logits.shape == (4, 64, 64)


def test_cup_single_skip_attaches_at_quarter_scale():
    rng = np.random.default_rng(8)
    dec = CupDecoder(rng, 32, (16, 16, 16, 16), 4, skip_channels=(8, 16, 24), skip_count=1)
    hidden = Tensor(rng.standard_normal((32, 4, 4)).astype(np.float32))
    f4 = Tensor(rng.standard_normal((16, 16, 16)).astype(np.float32))
    with T.no_grad():
        logits = dec.forward(hidden, [f4])
    assert logits.shape == (4, 64, 64)
    # wrong shape is reported with its scale
    bad = Tensor(rng.standard_normal((16, 8, 8)).astype(np.float32))
    with pytest.raises(ConfigError, match="1/4"):
        dec.forward(hidden, [bad])


def test_cup_zeroed_skips_match_zeroed_skip_columns():
    # feeding zero skip tensors == zeroing the conv columns that read skips
    dim, widths, k = 8, (16, 16, 16, 16), 3
    skip_ch = (8, 16, 24)
    dec_a = CupDecoder(np.random.default_rng(9), dim, widths, k, skip_channels=skip_ch, skip_count=3)
    dec_b = CupDecoder(np.random.default_rng(9), dim, widths, k, skip_channels=skip_ch, skip_count=3)
    head = np.random.default_rng(14).standard_normal(dec_a.head.shape).astype(np.float32)
    dec_a.head.data = head.copy()
    dec_b.head.data = head.copy()
    # block i consumes [prev | skip]; zero the skip columns in decoder B
    prev = [dim, widths[0], widths[1]]
    for i, block in enumerate(dec_b.blocks[:3]):
        block.conv.data[:, prev[i] :, :, :] = 0.0
    rng = np.random.default_rng(10)
    hidden = Tensor(rng.standard_normal((dim, 4, 4)).astype(np.float32))
    zeros = [
        Tensor(np.zeros((24, 8, 8), dtype=np.float32)),
        Tensor(np.zeros((16, 16, 16), dtype=np.float32)),
        Tensor(np.zeros((8, 32, 32), dtype=np.float32)),
    ]
    randoms = [
        Tensor(rng.standard_normal((24, 8, 8)).astype(np.float32)),
        Tensor(rng.standard_normal((16, 16, 16)).astype(np.float32)),
        Tensor(rng.standard_normal((8, 32, 32)).astype(np.float32)),
    ]
    # decoder takes skips highest-resolution first: [f2, f4, f8]
    with T.no_grad():
        out_a = dec_a.forward(hidden, list(reversed(zeros))).data
        out_b = dec_b.forward(hidden, list(reversed(randoms))).data
    assert np.allclose(out_a, out_b, atol=1e-6)


def test_cup_skip_influences_output():
    rng = np.random.default_rng(11)
    dec = CupDecoder(rng, 8, (16, 16, 16, 16), 3, skip_channels=(8, 8, 8), skip_count=3)
    dec.head.data = rng.standard_normal(dec.head.shape).astype(np.float32)
    hidden = Tensor(rng.standard_normal((8, 4, 4)).astype(np.float32))
    skips = [
        Tensor(rng.standard_normal((8, 32, 32)).astype(np.float32)),
        Tensor(rng.standard_normal((8, 16, 16)).astype(np.float32)),
        Tensor(rng.standard_normal((8, 8, 8)).astype(np.float32)),
    ]
    with T.no_grad():
        base = dec.forward(hidden, skips).data
        skips[1].data[...] += 1.0
        bumped = dec.forward(hidden, skips).data
    assert np.abs(base - bumped).max() > 1e-4


def test_cup_missing_skips_rejected():
    rng = np.random.default_rng(12)
    dec = CupDecoder(rng, 8, (16, 16, 16, 16), 3, skip_channels=(8, 8, 8), skip_count=3)
    hidden = Tensor(rng.standard_normal((8, 4, 4)).astype(np.float32))
    with pytest.raises(ConfigError):
        dec.forward(hidden, None)


def test_cup_skip_fusion_needs_four_blocks():
    with pytest.raises(ConfigError):
        CupDecoder(np.random.default_rng(13), 8, (16, 16, 16), 3, skip_channels=(8, 8, 8), skip_count=3)
