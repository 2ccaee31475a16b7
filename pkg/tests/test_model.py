import struct

import numpy as np
import pytest

from diffmesh.errors import ConfigError, FormatError, ShapeError, StateError
from diffmesh.geometry import Camera, JointRegressor, MeshTopology, project, regress_joints
from diffmesh.losses import LossWeights, Target, total_loss
from diffmesh.model import (
    MODEL_MAGIC,
    Attention,
    AttentionBlock,
    ConvEncoder,
    DepthBranch,
    Denoiser,
    FeatureBlock,
    ModelConfig,
    Pyramid,
    VertexBlock,
    conv_index,
    describe,
    dumps_model,
    load_model,
    loads_model,
    save_model,
    sinusoidal_embed,
)
from diffmesh.numcore import ParamStore, Rng, Tensor, add, grad_check, mul, scale, sub, sum_all


def small_config(**changes):
    settings = dict(width=16, heads=2, num_blocks=1, vertex_count=16, image_size=8)
    settings.update(changes)
    return ModelConfig(**settings)


@pytest.fixture
def inputs():
    rng = Rng(21)
    return rng.normal((16, 3)) * 0.5, rng.uniform((8, 8, 1)), rng.uniform((8, 8, 1))


def test_config_checks():
    with pytest.raises(ConfigError):
        small_config(width=18)
    with pytest.raises(ConfigError):
        small_config(vertex_count=8)
    with pytest.raises(ConfigError):
        small_config(image_size=12)
    with pytest.raises(ConfigError):
        small_config(depth_init="none")


def test_sinusoidal_embed():
    embedding = sinusoidal_embed(5, 8)
    assert embedding[0] == pytest.approx(np.sin(5.0))
    assert embedding[1] == pytest.approx(np.cos(5.0))
    assert np.all(np.abs(embedding) <= 1.0)


def test_conv_index_stride_one():
    out, index = conv_index(3, 1)
    assert out == 3
    assert index[4].tolist() == list(range(9))


def test_pyramid_levels():
    coords = Rng(2).normal((64, 3))
    pyramid = Pyramid.build(coords)
    assert pyramid.select1.shape == (16,)
    assert pyramid.select2.shape == (4,)
    assert pyramid.assign1.shape == (64,)
    assert set(pyramid.assign1[pyramid.select1].tolist()) == set(range(16))
    with pytest.raises(ConfigError):
        Pyramid.build(coords[:8])


@pytest.mark.parametrize("cross_modality", [True, False])
def test_decode_shape(inputs, cross_modality):
    coords, image, _ = inputs
    model = Denoiser(small_config(use_cross_modality_decoder=cross_modality))
    out = model.forward(coords, 10, image)
    assert out.shape == (16, 3)
    assert np.all(np.isfinite(out.data))
    with pytest.raises(ShapeError):
        model.forward(coords[:15], 10, image)
    with pytest.raises(ShapeError):
        model.forward(coords, 10, np.zeros((16, 16, 1)))


def test_same_seed_same_model(inputs):
    coords, image, _ = inputs
    a = Denoiser(small_config(), seed=3).forward(coords, 7, image).data
    b = Denoiser(small_config(), seed=3).forward(coords, 7, image).data
    assert np.array_equal(a, b)


def test_predict_records_no_graph(inputs):
    coords, image, _ = inputs
    model = Denoiser(small_config())
    cond = model.condition(image)
    assert isinstance(model.predict(coords, 3, cond), np.ndarray)
    assert all(param.grad is None for _, param in model.store.trainable())


def test_decoder_gradients(inputs):
    coords, image, _ = inputs
    model = Denoiser(small_config())
    weights = Rng(4).normal((16, 3))
    head = model.store.params["decoder.head.weight"]
    lift = model.store.params["decoder.lift.weight"]
    coords = Tensor(coords, requires_grad=True)

    def f(coords, head, lift):
        return sum_all(mul(model.forward(coords, 12, image), weights))

    assert grad_check(f, [coords, head, lift], coordinates=12) < 1e-4


@pytest.mark.parametrize("depth_init", ["output", "all"])
def test_depth_branch_starts_as_identity(depth_init):
    base = Denoiser(small_config(depth_init=depth_init))
    with pytest.raises(StateError):
        base.attach_depth_branch()
    augmented = loads_model(dumps_model(base))
    augmented.store.step = 1
    augmented.attach_depth_branch()
    with pytest.raises(StateError):
        augmented.attach_depth_branch()
    rng = Rng(22)
    for _ in range(100):
        coords = rng.normal((16, 3))
        image, depth = rng.uniform((8, 8, 1)), rng.uniform((8, 8, 1))
        step = int(rng.integers(0, 1000))
        before = base.forward(coords, step, image).data
        after = augmented.forward(coords, step, image, depth).data
        assert np.array_equal(before, after)


def test_queries_only_without_diffusion():
    with pytest.raises(StateError):
        Denoiser(small_config()).query_input()
    model = Denoiser(small_config(use_diffusion=False))
    assert model.query_input().shape == (16, 3)


def test_model_roundtrip(tmp_path, inputs):
    coords, image, depth = inputs
    model = Denoiser(small_config(use_cross_modality_decoder=False), seed=9)
    model.store.step = 4
    model.attach_depth_branch()
    path = str(tmp_path / "model.bin")
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.store.step == 4
    assert loaded.depth_branch is not None
    assert np.array_equal(
        loaded.forward(coords, 5, image, depth).data, model.forward(coords, 5, image, depth).data
    )
    assert "depth branch" in describe(loaded)


def test_loads_model_rejects_bad_blobs():
    blob = dumps_model(Denoiser(small_config()))
    with pytest.raises(FormatError):
        loads_model(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        loads_model(blob[:12])
    with pytest.raises(FormatError):
        loads_model(blob[:-5])


def test_model_records_training_settings():
    model = Denoiser(small_config())
    assert "timesteps" not in model.header()
    assert loads_model(dumps_model(model)).timesteps is None
    model.timesteps, model.objective = 50, "epsilon"
    loaded = loads_model(dumps_model(model))
    assert (loaded.timesteps, loaded.objective) == (50, "epsilon")
    assert "decoder.norm.gain" not in model.store.names()


def test_loads_model_needs_both_settings():
    model = Denoiser(small_config())
    model.timesteps, model.objective = 50, "x0"
    header = model.header()
    del header["objective"]
    text = header.dumps().encode("utf-8")
    blob = MODEL_MAGIC + struct.pack("<I", len(text)) + text + model.store.dumps()
    with pytest.raises(FormatError):
        loads_model(blob)


WIDTH, HEADS = 16, 2


@pytest.fixture
def block_inputs():
    rng = Rng(31)
    return rng.normal((32, WIDTH)), rng.normal(WIDTH), rng.normal((4, WIDTH))


def test_attention_single_context_row():
    store, rng = ParamStore(), Rng(32)
    attention = Attention(store, "attn", rng, WIDTH, HEADS)
    attention.bias.data = rng.normal(WIDTH)
    x, context = rng.normal((3, WIDTH)), rng.normal((1, WIDTH))
    expected = attention.bias.data.copy()
    for _, _, value, out in attention.heads:
        expected = expected + (context @ value.data) @ out.data
    got = attention(Tensor(x), Tensor(context)).data
    assert got == pytest.approx(np.tile(expected, (3, 1)), abs=1e-12)


@pytest.mark.parametrize("rows", [1, 5])
def test_attention_block_gradients(block_inputs, rows):
    x, embedding, tokens = block_inputs
    block = AttentionBlock(ParamStore(), "block", Rng(33), WIDTH, HEADS)
    weights = Rng(34).normal((rows, WIDTH))
    inputs = [Tensor(x[:rows]), Tensor(embedding), Tensor(tokens)]

    def f(x, embedding, tokens):
        return sum_all(mul(block(x, embedding, tokens), weights))

    assert grad_check(f, inputs) < 1e-5


def test_attention_block_ignores_token_order(block_inputs):
    x, embedding, tokens = block_inputs
    block = AttentionBlock(ParamStore(), "block", Rng(35), WIDTH, HEADS)
    out = block(Tensor(x), Tensor(embedding), Tensor(tokens)).data
    shuffled = tokens[Rng(36).permutation(4)]
    assert np.allclose(block(Tensor(x), Tensor(embedding), Tensor(shuffled)).data, out)


def test_zeroed_vertex_block_is_identity(block_inputs):
    x, embedding, tokens = block_inputs
    block = VertexBlock(ParamStore(), "vertex", Rng(37), WIDTH, HEADS)
    block.zero_()
    pyramid = Pyramid.build(Rng(38).normal((32, 3)))
    out = block(Tensor(x), pyramid, Tensor(embedding), Tensor(tokens)).data
    assert np.array_equal(out, x)


def test_vertex_block_gradient_reaches_every_row(block_inputs):
    x, embedding, tokens = block_inputs
    block = VertexBlock(ParamStore(), "vertex", Rng(39), WIDTH, HEADS)
    pyramid = Pyramid.build(Rng(40).normal((32, 3)))
    weights = Rng(41).normal((32, WIDTH))
    x = Tensor(x, requires_grad=True)
    out = block(x, pyramid, Tensor(embedding), Tensor(tokens))
    assert out.shape == (32, WIDTH)
    sum_all(mul(out, weights)).backward()
    assert np.all(np.any(x.grad != 0.0, axis=1))
    # Without the outer residual only the pyramid's level-1 rows are reached.
    x.grad = None
    sum_all(mul(sub(block(x, pyramid, Tensor(embedding), Tensor(tokens)), x), weights)).backward()
    assert np.all(np.any(x.grad[pyramid.select1] != 0.0, axis=1))


def test_feature_block(block_inputs):
    x, _, _ = block_inputs
    block = FeatureBlock(ParamStore(), "feature", Rng(42), WIDTH)
    rows = np.vstack([x[:3], x[:1]])
    out = block(Tensor(rows)).data
    assert out.shape == (4, WIDTH)
    assert out[3] == pytest.approx(out[0], abs=1e-12)
    weights = Rng(43).normal((4, WIDTH))
    assert grad_check(lambda x: sum_all(mul(block(x), weights)), [Tensor(rows)]) < 1e-5
    block.zero_()
    assert np.array_equal(block(Tensor(rows)).data, rows)


def test_encoder_shapes():
    config = ModelConfig(width=64, image_size=32, vertex_count=16)
    encoder = ConvEncoder(ParamStore(), Rng(44), config)
    encoded = encoder(Rng(45).uniform((32, 32, 1)))
    assert encoded.feature_map.shape == (16, 64)
    assert encoded.embedding.shape == (64,)
    assert np.all(np.isfinite(encoded.embedding.data))
    with pytest.raises(ShapeError):
        encoder(np.zeros((16, 16, 1)))


def test_image_positions_flag():
    image = Rng(46).uniform((16, 16, 1))
    plain = Denoiser(small_config(image_size=16))
    assert "encoder.pos_embed" not in plain.store.names()
    cond = plain.condition(image)
    assert cond.tokens is cond.encoded.feature_map
    model = Denoiser(small_config(image_size=16, image_pos_embed=True))
    pos_embed = model.store.params["encoder.pos_embed"]
    assert pos_embed.shape == (4, 16)
    cond = model.condition(image)
    assert cond.tokens.data - cond.encoded.feature_map.data == pytest.approx(pos_embed.data)


@pytest.mark.parametrize("cross_modality", [True, False])
def test_decode_permutes_with_vertices(inputs, cross_modality):
    coords, image, _ = inputs
    model = Denoiser(small_config(use_cross_modality_decoder=cross_modality))
    # Keeping index 0 in place keeps the farthest point seed.
    perm = np.concatenate([[0], 1 + Rng(47).permutation(15)])
    cond = model.condition(image)
    out = model.predict(coords, 20, cond)
    assert model.predict(coords[perm], 20, cond) == pytest.approx(out[perm], abs=1e-10)


def test_depth_branch_gradients():
    config = small_config()
    store = ParamStore()
    branch = DepthBranch(store, Rng(48), config)
    rng = Rng(49)
    for _, param in store.trainable():
        param.data = rng.normal(param.shape) * 0.3
    depth = rng.uniform((8, 8, 1))
    weights = rng.normal(16)
    params = [param for _, param in store.trainable()]

    def f(*params):
        return sum_all(mul(branch(depth), weights))

    assert grad_check(f, params, coordinates=20) < 1e-5


def test_full_model_gradients():
    count = 20
    model = Denoiser(small_config(width=32, heads=4, vertex_count=count), seed=5)
    rng = Rng(50)
    topology = MeshTopology([[i, i + 1, i + 2] for i in range(count - 2)], count)
    weights = rng.uniform((4, count))
    regressor = JointRegressor(weights / weights.sum(axis=1, keepdims=True))
    camera = Camera(40.0, 40.0, 16.0, 16.0)
    gt = rng.normal((count, 3)) * 0.3 + [0.0, 0.0, 3.0]
    joints = regress_joints(gt, regressor)
    target = Target(gt, joints, project(joints, camera), regressor, camera, topology, 32)
    image = rng.uniform((8, 8, 1))
    coords = Tensor(rng.normal((count, 3)) * 0.5)
    head = model.store.params["decoder.head.weight"]
    lift = model.store.params["decoder.lift.weight"]

    def f(coords, head, lift):
        out = model.forward(coords, 40, image)
        pred = add(scale(out, 0.2), [0.0, 0.0, 3.0])
        return total_loss(pred, target, LossWeights()).total

    assert grad_check(f, [coords, head, lift], coordinates=30) < 1e-4
