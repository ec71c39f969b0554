import numpy as np
import pytest

from esproto.nncore import (
    BN_EPS,
    CheckpointError,
    EmbeddingNet,
    ParameterSizeError,
    ParamVector,
    ShapeError,
    activation_bytes,
    batchnorm_normalize,
    closed_form_param_count,
    conv_block_forward,
    embed,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def reference_block(x, kernel, gain, bias):
    """Straightforward NCHW block: explicit 3x3 taps, BN, ReLU, then pool."""
    b, c, h, w = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((b, kernel.shape[0], h, w))
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, :, dy : dy + h, dx : dx + w]
            y += np.einsum("bchw,oc->bohw", patch, kernel[:, :, dy, dx].astype(np.float64))
    mean = y.mean(axis=(0, 2, 3), keepdims=True)
    var = y.var(axis=(0, 2, 3), keepdims=True)
    y = (y - mean) / np.sqrt(var + BN_EPS)
    y = y * gain[None, :, None, None] + bias[None, :, None, None]
    y = np.maximum(y, 0)
    return y.reshape(b, -1, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def block(params, k):
    return (params.slice(f"block{k}.conv"), params.slice(f"block{k}.bn_gain"),
            params.slice(f"block{k}.bn_bias"))


def test_block_shape_arithmetic(rng):
    net = EmbeddingNet(channels=64)
    params = init_params(net, 0)
    x = rng.random((100, 1, 32, 32), dtype=np.float32)
    assert conv_block_forward(x, block(params, 0)).shape == (100, 64, 16, 16)


def test_zero_input_gives_zero_output(params16):
    x = np.zeros((4, 1, 32, 32), np.float32)
    out = conv_block_forward(x, block(params16, 0))
    assert not out.any()


def test_shape_chain(net16):
    assert net16.spatial_trace() == [16, 8, 4, 2]
    assert net16.embedding_dim == 4 * 16


def test_block_rejects_input_past_end_of_chain():
    net = EmbeddingNet(channels=64)
    params = init_params(net, 0)
    x = np.ones((100, 64, 2, 2), np.float32)
    with pytest.raises(ShapeError) as err:
        conv_block_forward(x, block(params, 3), net=net, block=3)
    assert err.value.layer == "block3"
    # 4x4 is what block 3 actually receives
    out = conv_block_forward(np.ones((100, 64, 4, 4), np.float32), block(params, 3), net=net, block=3)
    assert out.shape == (100, 64, 2, 2)


def test_block_channel_mismatch_names_layer(params16):
    with pytest.raises(ShapeError, match="block1"):
        conv_block_forward(np.ones((2, 3, 8, 8), np.float32), block(params16, 1), layer="block1")


@pytest.mark.parametrize("channels,dim", [(64, 256), (32, 128), (16, 64)])
def test_embedding_dim(channels, dim, rng):
    net = EmbeddingNet(channels=channels)
    z = embed(net, init_params(net, 1), rng.random((3, 1, 32, 32), dtype=np.float32))
    assert z.shape == (3, dim)


def test_duplicate_images_embed_identically(net16, params16, rng):
    x = rng.random((6, 1, 32, 32), dtype=np.float32)
    x[3] = x[1]
    z = embed(net16, params16, x)
    np.testing.assert_array_equal(z[1], z[3])


def test_forward_is_bit_reproducible(net16, params16, rng):
    x = rng.random((10, 1, 32, 32), dtype=np.float32)
    np.testing.assert_array_equal(embed(net16, params16, x), embed(net16, params16, x))


def test_embed_matches_reference_implementation(rng):
    net = EmbeddingNet(channels=8)
    params = init_params(net, 3)
    # move batchnorm off its identity init, including a negative gain
    values = params.values.copy()
    for entry in params.layout:
        if "bn" in entry.name:
            values[entry.offset : entry.stop] += rng.normal(0, 0.5, entry.size).astype(np.float32)
    params = params.with_values(values)
    x = rng.random((12, 1, 32, 32), dtype=np.float32)
    ref = x.astype(np.float64)
    for k in range(4):
        ref = reference_block(ref, *block(params, k))
    np.testing.assert_allclose(embed(net, params, x), ref.reshape(12, -1), rtol=1e-4, atol=1e-4)


def test_batchnorm_normalizes_each_channel(rng):
    y = (rng.normal(3.0, 5.0, size=(4096, 16))).astype(np.float32)
    z = batchnorm_normalize(y).astype(np.float64)
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-4)
    np.testing.assert_allclose(z.var(axis=0), 1, atol=1e-4)


def test_init_is_seeded(net16):
    np.testing.assert_array_equal(init_params(net16, 5).values, init_params(net16, 5).values)


def test_init_batchnorm_convention(net16, params16):
    for k in range(4):
        assert (params16.slice(f"block{k}.bn_gain") == 1).all()
        assert (params16.slice(f"block{k}.bn_bias") == 0).all()


def test_init_seeds_differ(net16):
    a, b = init_params(net16, 1), init_params(net16, 2)
    conv = [e for e in a.layout if e.name.endswith(".conv")]
    differ = sum((a.values[e.offset : e.stop] != b.values[e.offset : e.stop]).sum() for e in conv)
    total = sum(e.size for e in conv)
    assert differ / total >= 0.99


def test_init_fan_in_scale():
    net = EmbeddingNet(channels=64)
    w = init_params(net, 0).slice("block2.conv")
    assert abs(w.std() - np.sqrt(2 / (64 * 9))) < 0.01 * np.sqrt(2 / (64 * 9)) * 10


@pytest.mark.parametrize("channels", [16, 32, 64])
def test_param_count_closed_form(channels):
    net = EmbeddingNet(channels=channels)
    assert net.param_count == closed_form_param_count(channels)
    layout = net.layout()
    assert layout[0].offset == 0
    for prev, cur in zip(layout, layout[1:]):
        assert cur.offset == prev.stop
    assert sum(e.size for e in layout) == net.param_count


def test_param_size_error(net16):
    other = init_params(EmbeddingNet(channels=32), 0)
    with pytest.raises(ParameterSizeError):
        embed(net16, other, np.zeros((1, 1, 32, 32), np.float32))
    with pytest.raises(ParameterSizeError):
        ParamVector(np.zeros(10, np.float32), net16.layout())


def test_activation_bytes_matches_forward_shapes(net16):
    batch = 7
    expected = 0
    for size in (32, 16, 8, 4):
        expected += 3 * batch * 16 * size * size + batch * 16 * (size // 2) ** 2
    assert activation_bytes(net16, batch) == 4 * expected


def test_checkpoint_round_trip(tmp_path, net16, rng):
    params = init_params(net16, 9)
    params = params.with_values(params.values + rng.normal(size=params.size).astype(np.float32))
    path = tmp_path / "ck.espn"
    save_checkpoint(path, net16, params)
    raw = path.read_bytes()
    assert raw[:4] == b"ESPN"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 16
    assert int.from_bytes(raw[12:20], "little") == net16.param_count
    assert len(raw) == 20 + 4 * net16.param_count
    net2, loaded = load_checkpoint(path)
    assert net2 == net16
    assert loaded.values.tobytes() == params.values.tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path, net16, params16):
    path = tmp_path / "ck.espn"
    save_checkpoint(path, net16, params16)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, net16, params16):
    path = tmp_path / "ck.espn"
    save_checkpoint(path, net16, params16)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
