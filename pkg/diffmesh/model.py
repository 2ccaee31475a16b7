""" The image-conditioned vertex denoiser and its building blocks. """

import dataclasses
import logging
import math
import struct
import typing as t

import numpy as np

from diffmesh.config import ConfigSection, register_check
from diffmesh.errors import ConfigError, DimensionError, FormatError, ShapeError, StateError
from diffmesh.geometry import farthest_point_sample, nearest_selected
from diffmesh.numcore import (
    ParamStore,
    Rng,
    Tensor,
    add,
    as_tensor,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mean,
    no_grad,
    reshape,
    scale,
    softmax_rows,
    transpose_last_two,
)
from diffmesh.parsers import Settings, transaction
from diffmesh.typing import Array, Timestep


logger = logging.getLogger(__name__)

MODEL_MAGIC = b"DMH1"
MODEL_FORMAT_VERSION = 1
DEPTH_INIT_MODES = ("all", "output")
MIN_VERTICES = 16


@ConfigSection.register_section("model")
@dataclasses.dataclass
class ModelConfig(ConfigSection):
    """Architecture of the denoiser."""

    width: int = 64
    heads: int = 4
    num_blocks: int = 3
    vertex_count: int = 320
    image_size: int = 32
    channels: int = 1
    image_pos_embed: bool = False
    use_diffusion: bool = True
    use_cross_modality_decoder: bool = True
    depth_init: str = "all"

    @register_check
    def width_splits(self):
        if self.width < 4 or self.width % 4 or self.width % self.heads:
            raise ConfigError(
                f"width {self.width} must be a multiple of 4 and of heads {self.heads}"
            )

    @register_check
    def enough_vertices(self):
        if self.vertex_count < MIN_VERTICES:
            raise ConfigError(
                f"vertex_count must be at least {MIN_VERTICES}, got {self.vertex_count}"
            )

    @register_check
    def image_divides(self):
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError(f"image_size must be a multiple of 8, got {self.image_size}")

    @register_check
    def known_depth_init(self):
        if self.depth_init not in DEPTH_INIT_MODES:
            raise ConfigError(
                f"depth_init must be one of {', '.join(DEPTH_INIT_MODES)}, "
                f"got {self.depth_init!r}"
            )

    @register_check
    def positive_blocks(self):
        if self.num_blocks < 1 or self.channels < 1:
            raise ConfigError("num_blocks and channels must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // 8


def sinusoidal_embed(t: Timestep, dim: int) -> Array:
    """
    Timestep embedding with sin on even and cos on odd entries, frequencies
    10000^(−2i/dim).

    Examples:

        >>> sinusoidal_embed(0, 4).tolist()
        [0.0, 1.0, 0.0, 1.0]

        >>> sinusoidal_embed(3, 5)
        Traceback (most recent call last):
          ...
        diffmesh.errors.ConfigError: Embedding width must be even, got 5
    """
    if dim % 2:
        raise ConfigError(f"Embedding width must be even, got {dim}")
    exponent = np.arange(0, dim, 2, dtype=np.float64) / dim
    angle = float(t) / 10000.0 ** exponent
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


class Linear:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        rng: Rng,
        d_in: int,
        d_out: int,
        zero: bool = False,
    ):
        std = 0.0 if zero else 1.0 / math.sqrt(d_in)
        self.weight = store.add(f"{name}.weight", rng.normal((d_in, d_out)) * std)
        self.bias = store.add(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: t.Any) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            return reshape(self(reshape(x, (1, x.shape[0]))), (self.bias.shape[0],))
        return add(matmul(x, self.weight), self.bias)

    def zero_(self):
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, width: int):
        self.gain = store.add(f"{name}.gain", np.ones(width))
        self.bias = store.add(f"{name}.bias", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP:
    """Two linear layers with a gelu in between."""

    def __init__(
        self, store: ParamStore, name: str, rng: Rng, d_in: int, d_hidden: int, d_out: int
    ):
        self.inner = Linear(store, f"{name}.inner", rng, d_in, d_hidden)
        self.outer = Linear(store, f"{name}.outer", rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x)))

    def zero_(self):
        self.inner.zero_()
        self.outer.zero_()


class Attention:
    """
    Multi-head scaled dot-product attention. Each head projects queries,
    keys and values to width/heads and back; head outputs are summed.
    """

    def __init__(self, store: ParamStore, name: str, rng: Rng, width: int, heads: int):
        head_width = width // heads
        self.scale = 1.0 / math.sqrt(head_width)
        std = 1.0 / math.sqrt(width)
        self.heads = []
        for h in range(heads):
            self.heads.append(
                tuple(
                    store.add(f"{name}.head{h}.{part}", rng.normal(shape) * std)
                    for part, shape in (
                        ("query", (width, head_width)),
                        ("key", (width, head_width)),
                        ("value", (width, head_width)),
                        ("out", (head_width, width)),
                    )
                )
            )
        self.bias = store.add(f"{name}.bias", np.zeros(width))

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        out = self.bias
        for query, key, value, proj in self.heads:
            scores = scale(
                matmul(matmul(x, query), transpose_last_two(matmul(context, key))),
                self.scale,
            )
            heads_out = matmul(softmax_rows(scores), matmul(context, value))
            out = add(matmul(heads_out, proj), out)
        return out

    def zero_(self):
        for params in self.heads:
            for param in params:
                param.data = np.zeros_like(param.data)
        self.bias.data = np.zeros_like(self.bias.data)


class AttentionBlock:
    """
    Self-attention over point features plus a projection of the global
    embedding, then cross-attention from the points to the image tokens.
    Both halves are pre-normalized and residual.
    """

    def __init__(self, store: ParamStore, name: str, rng: Rng, width: int, heads: int):
        self.norm_self = LayerNorm(store, f"{name}.norm_self", width)
        self.self_attention = Attention(store, f"{name}.self", rng, width, heads)
        self.embed = Linear(store, f"{name}.embed", rng, width, width)
        self.norm_cross = LayerNorm(store, f"{name}.norm_cross", width)
        self.cross_attention = Attention(store, f"{name}.cross", rng, width, heads)

    def __call__(self, x: Tensor, embedding: Tensor, tokens: Tensor) -> Tensor:
        h = self.norm_self(x)
        y = add(add(x, self.self_attention(h, h)), self.embed(embedding))
        return add(y, self.cross_attention(self.norm_cross(y), tokens))

    def zero_(self):
        self.self_attention.zero_()
        self.embed.zero_()
        self.cross_attention.zero_()


@dataclasses.dataclass
class Pyramid:
    """
    Farthest-point levels of a vertex set. `select1` picks level-1 points
    from level 0 and `select2` level-2 points from level 1; `assign1` and
    `assign2` map every finer point to its nearest coarser one.
    """

    select1: Array
    select2: Array
    assign1: Array
    assign2: Array

    @classmethod
    def build(cls, coords: Array) -> "Pyramid":
        count = coords.shape[0]
        if count < MIN_VERTICES:
            raise ConfigError(
                f"A vertex block needs at least {MIN_VERTICES} points, got {count}"
            )
        select1 = farthest_point_sample(coords, count // 4)
        level1 = coords[select1]
        select2 = farthest_point_sample(level1, count // 16)
        return cls(
            select1=select1,
            select2=select2,
            assign1=nearest_selected(coords, select1),
            assign2=nearest_selected(level1, select2),
        )


class VertexBlock:
    """
    U-shaped block over the point pyramid: downsample by farthest point
    sampling with attention at each coarser level, then upsample by copying
    each coarse feature to its nearest fine points, an MLP and an additive
    lateral connection.
    """

    def __init__(self, store: ParamStore, name: str, rng: Rng, width: int, heads: int):
        self.down1 = AttentionBlock(store, f"{name}.down1", rng, width, heads)
        self.down2 = AttentionBlock(store, f"{name}.down2", rng, width, heads)
        self.up2 = MLP(store, f"{name}.up2", rng, width, width, width)
        self.up1 = MLP(store, f"{name}.up1", rng, width, width, width)

    def __call__(
        self, x: Tensor, pyramid: Pyramid, embedding: Tensor, tokens: Tensor
    ) -> Tensor:
        level1 = self.down1(gather_rows(x, pyramid.select1), embedding, tokens)
        level2 = self.down2(gather_rows(level1, pyramid.select2), embedding, tokens)
        level1 = add(self.up2(gather_rows(level2, pyramid.assign2)), level1)
        return add(self.up1(gather_rows(level1, pyramid.assign1)), x)

    def zero_(self):
        self.down1.zero_()
        self.down2.zero_()
        self.up2.zero_()
        self.up1.zero_()


class FeatureBlock:
    """Position-wise MLP C → 4C → C, pre-normalized and residual."""

    def __init__(self, store: ParamStore, name: str, rng: Rng, width: int):
        self.norm = LayerNorm(store, f"{name}.norm", width)
        self.mlp = MLP(store, f"{name}.mlp", rng, width, 4 * width, width)

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.mlp(self.norm(x)))

    def zero_(self):
        self.mlp.zero_()


class CrossModalityDecoder:
    """
    Lift coordinates to features, run `num_blocks` pairs of vertex and
    feature blocks, and project back to coordinates.
    """

    def __init__(self, store: ParamStore, rng: Rng, config: ModelConfig):
        width = config.width
        self.lift = Linear(store, "decoder.lift", rng, 3, width)
        self.blocks = [
            (
                VertexBlock(store, f"decoder.block{i}.vertex", rng, width, config.heads),
                FeatureBlock(store, f"decoder.block{i}.feature", rng, width),
            )
            for i in range(config.num_blocks)
        ]
        self.head = Linear(store, "decoder.head", rng, width, 3)

    def __call__(
        self,
        coords: t.Any,
        embedding: Tensor,
        tokens: Tensor,
        depth_feature: t.Optional[Tensor] = None,
    ) -> Tensor:
        coords = as_tensor(coords)
        pyramid = Pyramid.build(coords.data)
        x = self.lift(coords)
        if depth_feature is not None:
            x = add(x, depth_feature)
        for vertex_block, feature_block in self.blocks:
            x = feature_block(vertex_block(x, pyramid, embedding, tokens))
        return self.head(x)


class VanillaDecoder:
    """
    Decoder without the vertex pyramid or image cross-attention: the global
    embedding is added after lifting and blocks of self-attention and
    feature MLPs follow.
    """

    def __init__(self, store: ParamStore, rng: Rng, config: ModelConfig):
        width = config.width
        self.lift = Linear(store, "decoder.lift", rng, 3, width)
        self.blocks = [
            (
                LayerNorm(store, f"decoder.block{i}.norm", width),
                Attention(store, f"decoder.block{i}.self", rng, width, config.heads),
                FeatureBlock(store, f"decoder.block{i}.feature", rng, width),
            )
            for i in range(config.num_blocks)
        ]
        self.head = Linear(store, "decoder.head", rng, width, 3)

    def __call__(
        self,
        coords: t.Any,
        embedding: Tensor,
        tokens: Tensor,
        depth_feature: t.Optional[Tensor] = None,
    ) -> Tensor:
        x = add(self.lift(as_tensor(coords)), embedding)
        if depth_feature is not None:
            x = add(x, depth_feature)
        for norm, attention, feature_block in self.blocks:
            h = norm(x)
            x = feature_block(add(x, attention(h, h)))
        return self.head(x)


def conv_index(size: int, stride: int) -> t.Tuple[int, Array]:
    """
    Row indices of the 3×3 neighbourhoods of a strided, zero-padded
    convolution over a row-major `size`×`size` grid. Padding is -1.

    Examples:

        >>> out, index = conv_index(4, 2)
        >>> out, index.shape
        (2, (4, 9))
        >>> index[0].tolist()
        [-1, -1, -1, -1, 0, 1, -1, 4, 5]
    """
    out = (size - 1) // stride + 1
    rows = np.arange(out) * stride
    offsets = np.arange(3) - 1
    i = rows[:, None, None, None] + offsets[None, None, :, None]
    j = rows[None, :, None, None] + offsets[None, None, None, :]
    i, j = np.broadcast_arrays(i, j)
    index = np.where(
        (i >= 0) & (i < size) & (j >= 0) & (j < size), i * size + j, -1
    )
    return out, index.reshape(out * out, 9)


class Conv:
    """3×3 convolution with padding 1 as a gather followed by a matmul."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        rng: Rng,
        size: int,
        stride: int,
        d_in: int,
        d_out: int,
        zero: bool = False,
    ):
        self.out_size, self.index = conv_index(size, stride)
        self.d_in = d_in
        self.linear = Linear(store, name, rng, 9 * d_in, d_out, zero=zero)

    def __call__(self, x: Tensor) -> Tensor:
        patches = gather_rows(x, self.index)
        return self.linear(reshape(patches, (self.index.shape[0], 9 * self.d_in)))


@dataclasses.dataclass
class EncoderOutput:
    """
    Image tokens `feature_map` (G² rows of width C, row-major over the G×G
    grid) and the image `embedding` (C).
    """

    feature_map: Tensor
    embedding: Tensor

    def __post_init__(self):
        if self.feature_map.shape[-1] != self.embedding.shape[0]:
            raise DimensionError(
                f"Feature width {self.feature_map.shape} does not match "
                f"embedding {self.embedding.shape}"
            )


@dataclasses.dataclass
class GlobalEmbedding:
    """Sum of the image embedding and the timestep embedding."""

    image: Tensor
    time: Array
    vector: Tensor = dataclasses.field(init=False)

    def __post_init__(self):
        if tuple(self.image.shape) != tuple(np.shape(self.time)):
            raise DimensionError(
                f"Cannot add embeddings {self.image.shape} and {np.shape(self.time)}"
            )
        self.vector = add(self.image, self.time)


def _grid_input(image: Array, size: int, channels: int) -> Tensor:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape != (size, size, channels):
        raise ShapeError(f"Expected a {size}×{size}×{channels} grid, got {image.shape}")
    return Tensor(image.reshape(size * size, channels))


class ConvEncoder:
    """
    Four 3×3 convolution stages with strides 1, 2, 2, 2, so a grid of side H
    becomes G = H/8 tokens per side. The embedding is a linear layer over the
    mean token.
    """

    def __init__(self, store: ParamStore, rng: Rng, config: ModelConfig):
        width = config.width
        widths = (config.channels, width // 4, width // 2, width, width)
        size = config.image_size
        self.size = size
        self.channels = config.channels
        self.stages = []
        for i, stride in enumerate((1, 2, 2, 2)):
            conv = Conv(store, f"encoder.conv{i}", rng, size, stride, widths[i], widths[i + 1])
            self.stages.append(conv)
            size = conv.out_size
        self.embed = Linear(store, "encoder.embed", rng, width, width)

    def __call__(self, image: Array) -> EncoderOutput:
        x = _grid_input(image, self.size, self.channels)
        for conv in self.stages:
            x = gelu(conv(x))
        return EncoderOutput(feature_map=x, embedding=self.embed(mean(x, axis=0)))


class DepthBranch:
    """
    Convolutional branch turning a depth grid into one additive feature
    vector. With `depth_init = "all"` every layer starts at zero; with
    `"output"` only the final projection does. Either way the branch outputs
    zeros until trained.

    Under `"all"` the convolutions and projection weight receive zero
    gradient, so finetuning moves only `depth.project.bias`.
    """

    def __init__(self, store: ParamStore, rng: Rng, config: ModelConfig):
        width = config.width
        zero_all = config.depth_init == "all"
        self.size = config.image_size
        self.stages = []
        size = config.image_size
        for i, (d_in, d_out) in enumerate(((1, width // 4), (width // 4, width // 2))):
            conv = Conv(store, f"depth.conv{i}", rng, size, 2, d_in, d_out, zero=zero_all)
            self.stages.append(conv)
            size = conv.out_size
        self.project = Linear(store, "depth.project", rng, width // 2, width, zero=True)

    def __call__(self, depth: Array) -> Tensor:
        x = _grid_input(depth, self.size, 1)
        for conv in self.stages:
            x = gelu(conv(x))
        return self.project(mean(x, axis=0))


@dataclasses.dataclass
class Condition:
    """Everything the decoder needs from one image, computed once."""

    encoded: EncoderOutput
    tokens: Tensor
    depth_feature: t.Optional[Tensor] = None


class Denoiser:
    """
    The full model: encoder, optional image token positions, decoder,
    optional learned query set and optional depth branch, with all
    parameters in one `ParamStore`. `timesteps` and `objective` record the
    diffusion settings the model was trained with, None until then.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.timesteps: t.Optional[int] = None
        self.objective: t.Optional[str] = None
        self.store = ParamStore()
        self.rng = Rng(seed, stream=0x6D6F64656C)
        self.encoder = ConvEncoder(self.store, self.rng.substream(0), config)
        self.pos_embed = None
        if config.image_pos_embed:
            tokens = config.grid_size ** 2
            self.pos_embed = self.store.add(
                "encoder.pos_embed", self.rng.substream(1).normal((tokens, config.width)) * 0.02
            )
        decoder_cls = CrossModalityDecoder if config.use_cross_modality_decoder else VanillaDecoder
        self.decoder = decoder_cls(self.store, self.rng.substream(2), config)
        self.queries = None
        if not config.use_diffusion:
            self.queries = self.store.add(
                "queries", self.rng.substream(3).normal((config.vertex_count, 3)) * 0.5
            )
        self.depth_branch = None

    def __repr__(self) -> str:
        return f"Denoiser({self.config!r})"

    def attach_depth_branch(self, force: bool = False) -> DepthBranch:
        """Add the zero-initialized depth branch to a trained model."""
        if self.depth_branch is not None:
            raise StateError("Depth branch is already attached")
        if self.store.step == 0 and not force:
            raise StateError("Train the base model before attaching the depth branch")
        self.depth_branch = DepthBranch(self.store, self.rng.substream(4), self.config)
        return self.depth_branch

    def encode(self, image: Array) -> EncoderOutput:
        return self.encoder(image)

    def condition(self, image: Array, depth: t.Optional[Array] = None) -> Condition:
        encoded = self.encode(image)
        tokens = encoded.feature_map
        if self.pos_embed is not None:
            tokens = add(tokens, self.pos_embed)
        depth_feature = None
        if self.depth_branch is not None and depth is not None:
            depth_feature = self.depth_branch(depth)
        return Condition(encoded, tokens, depth_feature)

    def decode(self, coords: t.Any, t: Timestep, cond: Condition) -> Tensor:
        if tuple(coords.shape) != (self.config.vertex_count, 3):
            raise ShapeError(
                f"Expected {self.config.vertex_count}×3 coordinates, got {tuple(coords.shape)}"
            )
        embedding = GlobalEmbedding(
            cond.encoded.embedding, sinusoidal_embed(t, self.config.width)
        ).vector
        return self.decoder(coords, embedding, cond.tokens, cond.depth_feature)

    def forward(
        self, coords: t.Any, t: Timestep, image: Array, depth: t.Optional[Array] = None
    ) -> Tensor:
        return self.decode(coords, t, self.condition(image, depth))

    def query_input(self) -> Tensor:
        if self.queries is None:
            raise StateError("Only models without diffusion have a query set")
        return self.queries

    def predict(self, coords: Array, t: Timestep, cond: Condition) -> Array:
        """Clean prediction as an array, without recording a graph."""
        with no_grad():
            return self.decode(coords, t, cond).numpy()

    def header(self) -> Settings:
        settings = Settings(
            [("format_version", str(MODEL_FORMAT_VERSION)), ("step", str(self.store.step))]
        )
        settings.update(self.config.to_settings())
        settings["depth_branch"] = "true" if self.depth_branch is not None else "false"
        if self.timesteps is not None:
            settings["timesteps"] = str(self.timesteps)
            settings["objective"] = self.objective
        return settings


def dumps_model(model: Denoiser) -> bytes:
    header = model.header().dumps().encode("utf-8")
    return b"".join(
        [MODEL_MAGIC, struct.pack("<I", len(header)), header, model.store.dumps()]
    )


def loads_model(blob: bytes) -> Denoiser:
    """
    Rebuild a model from its serialized header and parameters. A header
    that does not describe the stored parameters is a format error.
    """
    if blob[:4] != MODEL_MAGIC:
        raise FormatError("Not a model file: bad magic bytes")
    if len(blob) < 8:
        raise FormatError("Truncated model file")
    (length,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + length:
        raise FormatError("Truncated model header")
    header = Settings.loads(blob[8 : 8 + length].decode("utf-8"), name="model header")
    version = header.pop("format_version", None)
    if version != str(MODEL_FORMAT_VERSION):
        raise FormatError(f"Unsupported model format version {version}")
    step = int(header.pop("step", "0"))
    with_depth = header.pop("depth_branch", "false") == "true"
    timesteps = header.pop("timesteps", None)
    objective = header.pop("objective", None)
    if (timesteps is None) != (objective is None):
        raise FormatError("Model header needs both timesteps and objective, or neither")
    config = ModelConfig.from_settings(header)
    model = Denoiser(config)
    if timesteps is not None:
        try:
            model.timesteps = int(timesteps)
        except ValueError:
            raise FormatError(f"Invalid timesteps {timesteps!r} in model header")
        model.objective = objective
    if with_depth:
        model.attach_depth_branch(force=True)
    store = ParamStore.loads(blob[8 + length :])
    model.store.load_values(store, strict=True)
    model.store.step = step
    return model


def save_model(path: str, model: Denoiser):
    with transaction(path) as fh:
        fh.write(dumps_model(model))


def load_model(path: str) -> Denoiser:
    with open(path, "rb") as fh:
        return loads_model(fh.read())


def describe(model: Denoiser) -> str:
    text = f"{type(model.decoder).__name__}, {model.store.count()} parameters"
    if model.depth_branch is not None:
        text += ", depth branch"
    return text
