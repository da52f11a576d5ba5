"""A small dual-branch CNN/transformer classifier.

The network follows the Conformer layout: a convolutional stem, ``L`` paired
convolution and transformer blocks joined by feature coupling units in both
directions, a class token, and two classification heads (a 1x1 convolution
with global average pooling on the CNN branch, a linear layer on the class
token for the transformer branch). Every block works at the patch-grid
resolution, so the final CNN feature map is exactly ``grid x grid`` and lines
up with the transformer tokens one-to-one.

Tensors are batch-first: images are (B, H, W, 3), feature maps (B, C, h, w)
and token sequences (B, 1 + N, D) with the class token in row 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ConformerConfig:
    num_blocks: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    grid: int = 8
    stage_channels: tuple[int, ...] = (16, 32, 32, 64)
    num_fg_classes: int = 3
    image_size: int = 64
    stem_channels: int = 16
    mlp_ratio: int = 4
    bottleneck_ratio: int = 2
    stride_last: int = 1
    conv_grid: int = 16
    shared_qk: bool = True

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 2:
            raise ConfigError(f"num_blocks must be >= 2, got {self.num_blocks}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if len(self.stage_channels) != self.num_blocks:
            raise ConfigError(
                f"stage_channels has {len(self.stage_channels)} entries for {self.num_blocks} blocks")
        if self.grid < 1 or self.image_size % self.grid:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of grid {self.grid}")
        if self.num_fg_classes < 1:
            raise ConfigError("need at least one foreground class")
        if self.stride_last != 1:
            raise ConfigError("the last convolution block must use stride 1")
        if min(self.stage_channels) < 1 or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        cg = self.local_grid
        if cg % self.grid or self.image_size % cg:
            raise ConfigError(f"conv_grid {cg} must be a multiple of grid {self.grid} and divide image_size")

    @property
    def patch_size(self) -> int:
        return self.image_size // self.grid

    @property
    def local_grid(self) -> int:
        """Side of the CNN-branch maps before the last block (``grid`` when ``conv_grid`` is 0)."""
        return self.conv_grid or self.grid

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConformerConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AttentionStack:
    """Head-averaged attention of every transformer block, each (..., 1+N, 1+N)."""

    per_block: list

    def __len__(self) -> int:
        return len(self.per_block)

    def for_sample(self, i: int) -> "AttentionStack":
        return AttentionStack([a[i] for a in self.per_block])


@dataclass
class ForwardOutput:
    features: Tensor
    attn: AttentionStack
    z_conv: Tensor
    z_trans: Tensor
    cam_head: Tensor = field(repr=False, default=None)


# ---------------------------------------------------------------- parameters

def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _bottleneck_width(cfg: ConformerConfig, c_out: int) -> int:
    return max(c_out // cfg.bottleneck_ratio, 4)


def init_params(cfg: ConformerConfig, seed: int = 0) -> tuple[dict, dict]:
    """Fresh (params, buffers) for ``cfg``. Buffers hold batch-norm running statistics."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    D, K = cfg.embed_dim, cfg.num_fg_classes

    def conv(name, o, i, k, bias=True):
        params[f"{name}.weight"] = _trunc_normal(rng, (o, i, k, k))
        if bias:
            params[f"{name}.bias"] = np.zeros(o)

    def bn(name, c):
        params[f"{name}.weight"] = np.ones(c)
        params[f"{name}.bias"] = np.zeros(c)
        buffers[f"{name}.running_mean"] = np.zeros(c)
        buffers[f"{name}.running_var"] = np.ones(c)

    def ln(name, c):
        params[f"{name}.weight"] = np.ones(c)
        params[f"{name}.bias"] = np.zeros(c)

    def lin(name, i, o, bias=True):
        params[f"{name}.weight"] = _trunc_normal(rng, (i, o))
        if bias:
            params[f"{name}.bias"] = np.zeros(o)

    # biases that feed batch norm or the softmax key side would receive zero gradient
    conv("stem.conv", cfg.stem_channels, 3, 3, bias=False)
    bn("stem.bn", cfg.stem_channels)
    conv("patch_embed", D, cfg.stem_channels, 1)
    params["cls_token"] = _trunc_normal(rng, (D,))

    c_in = cfg.stem_channels
    for l, c_out in enumerate(cfg.stage_channels):
        p = f"blocks.{l}"
        width = _bottleneck_width(cfg, c_out)
        conv(f"{p}.conv.down", width, c_in, 1, bias=False)
        bn(f"{p}.conv.down_bn", width)
        conv(f"{p}.conv.spatial", width, width, 3, bias=False)
        bn(f"{p}.conv.spatial_bn", width)
        conv(f"{p}.conv.up", c_out, width, 1, bias=False)
        bn(f"{p}.conv.up_bn", c_out)
        if c_in != c_out:
            conv(f"{p}.conv.proj", c_out, c_in, 1, bias=False)
            bn(f"{p}.conv.proj_bn", c_out)
        conv(f"{p}.fcu_down.proj", D, c_out, 1)
        ln(f"{p}.fcu_down.ln", D)
        ln(f"{p}.attn.ln1", D)
        lin(f"{p}.attn.q", D, D)
        if not cfg.shared_qk:
            lin(f"{p}.attn.k", D, D, bias=False)
        lin(f"{p}.attn.v", D, D)
        lin(f"{p}.attn.proj", D, D)
        ln(f"{p}.attn.ln2", D)
        lin(f"{p}.attn.fc1", D, cfg.mlp_ratio * D)
        lin(f"{p}.attn.fc2", cfg.mlp_ratio * D, D)
        conv(f"{p}.fcu_up.proj", c_out, D, 1, bias=False)
        bn(f"{p}.fcu_up.bn", c_out)
        c_in = c_out

    conv("head.conv", K, cfg.feature_channels, 1)
    ln("head.trans_norm", D)
    lin("head.trans", D, K)
    return params, buffers


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


class _BN:
    """Binds batch-norm parameters and running buffers for one layer."""

    def __init__(self, params: dict, buffers: dict, name: str, training: bool, update_stats: bool):
        self.gamma = params[f"{name}.weight"]
        self.beta = params[f"{name}.bias"]
        self.rm = buffers[f"{name}.running_mean"]
        self.rv = buffers[f"{name}.running_var"]
        self.training = training
        self.update_stats = update_stats

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.rm, self.rv, self.training,
                            BN_MOMENTUM, BN_EPS, self.update_stats)


# ---------------------------------------------------------------- blocks

def stem(image: Tensor, params: dict, buffers: dict, cfg: ConformerConfig,
         training: bool = False, update_stats: bool = True) -> tuple[Tensor, Tensor]:
    """Images (B, H, W, 3) -> (local features (B, C_stem, g_c, g_c), patch tokens (B, N, D)).

    ``g_c`` is ``cfg.local_grid``; tokens come from the local map pooled down to ``cfg.grid``.
    """
    if image.ndim != 4 or image.shape[-1] != 3:
        raise ShapeError(f"stem expects (B, H, W, 3) images, got {image.dims}")
    b, h, w, _ = image.shape
    ps = cfg.patch_size
    if h != w or h % ps:
        raise ShapeError(f"image extent {h}x{w} must be square and a multiple of patch size {ps}")
    x = T.transpose(image, (0, 3, 1, 2))
    x = T.conv2d(x, params["stem.conv.weight"], stride=1, padding=1)
    x = T.gelu(_BN(params, buffers, "stem.bn", training, update_stats)(x))
    g = h // ps
    cg = g * cfg.local_grid // cfg.grid
    local = T.avg_pool2d(x, h // cg)
    pooled = local if cg == g else T.avg_pool2d(local, cg // g)
    tok = T.conv2d(pooled, params["patch_embed.weight"], params["patch_embed.bias"])
    tok = T.transpose(T.reshape(tok, (b, cfg.embed_dim, g * g)), (0, 2, 1))
    return local, tok


def conv_block(f_in: Tensor, params: dict, buffers: dict, prefix: str,
               training: bool = False, update_stats: bool = True) -> Tensor:
    """Bottleneck: 1x1 down-projection, 3x3 spatial, 1x1 up-projection, plus residual.

    All convolutions use stride 1. The residual is the input itself when the
    channel count is unchanged, otherwise a 1x1 projection with batch norm.
    """
    w_down = params[f"{prefix}.down.weight"]
    if f_in.ndim != 4 or f_in.shape[1] != w_down.shape[1]:
        raise ShapeError(f"{prefix}: input {f_in.dims} does not match {w_down.shape[1]} channels")
    bn = lambda n: _BN(params, buffers, f"{prefix}.{n}", training, update_stats)  # noqa: E731
    h = T.gelu(bn("down_bn")(T.conv2d(f_in, w_down)))
    h = T.gelu(bn("spatial_bn")(T.conv2d(h, params[f"{prefix}.spatial.weight"], stride=1, padding=1)))
    h = bn("up_bn")(T.conv2d(h, params[f"{prefix}.up.weight"]))
    if f"{prefix}.proj.weight" in params:
        res = bn("proj_bn")(T.conv2d(f_in, params[f"{prefix}.proj.weight"]))
    else:
        res = f_in
    return T.add(h, res)


def transformer_block(X: Tensor, params: dict, prefix: str, num_heads: int) -> tuple[Tensor, Tensor]:
    """Pre-norm MHSA and MLP with residuals.

    Returns the updated tokens and the head-averaged attention (B, 1+N, 1+N).
    """
    b, t, d = X.shape
    if d % num_heads:
        raise ConfigError(f"width {d} is not divisible by {num_heads} heads")
    dh = d // num_heads
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731

    h = T.layer_norm(X, p("ln1.weight"), p("ln1.bias"), LN_EPS)

    def heads(name):
        y = T.linear(h, p(f"{name}.weight"), params.get(f"{prefix}.{name}.bias"))
        return T.transpose(T.reshape(y, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q, v = heads("q"), heads("v")
    # without a key projection the scores are a similarity kernel between tokens
    k = heads("k") if f"{prefix}.k.weight" in params else q
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    o = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    X = T.add(X, T.linear(o, p("proj.weight"), p("proj.bias")))
    h2 = T.layer_norm(X, p("ln2.weight"), p("ln2.bias"), LN_EPS)
    m = T.linear(T.gelu(T.linear(h2, p("fc1.weight"), p("fc1.bias"))), p("fc2.weight"), p("fc2.bias"))
    X = T.add(X, m)
    return X, T.mean(attn, axis=1)


def fcu_down(f: Tensor, params: dict, prefix: str, grid: int) -> Tensor:
    """CNN features (B, C, h, w) -> token embeddings (B, grid*grid, D)."""
    if f.ndim != 4 or f.shape[2] != f.shape[3]:
        raise ShapeError(f"fcu_down needs square feature maps, got {f.dims}")
    if f.shape[2] % grid:
        raise ShapeError(f"fcu_down: extent {f.shape[2]} does not pool to grid {grid}")
    b = f.shape[0]
    y = T.conv2d(f, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    y = T.avg_pool2d(y, f.shape[2] // grid)
    d = y.shape[1]
    y = T.transpose(T.reshape(y, (b, d, grid * grid)), (0, 2, 1))
    return T.layer_norm(y, params[f"{prefix}.ln.weight"], params[f"{prefix}.ln.bias"], LN_EPS)


def fcu_up(tokens: Tensor, params: dict, buffers: dict, prefix: str, out_hw: tuple[int, int],
           training: bool = False, update_stats: bool = True) -> Tensor:
    """Patch tokens (B, N, D) -> CNN-branch map (B, C, h, w)."""
    b, n, d = tokens.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"fcu_up: {n} tokens do not form a square grid")
    y = T.reshape(T.transpose(tokens, (0, 2, 1)), (b, d, g, g))
    y = T.conv2d(y, params[f"{prefix}.proj.weight"])
    if (g, g) != tuple(out_hw):
        y = T.resize_bilinear(y, out_hw)
    y = _BN(params, buffers, f"{prefix}.bn", training, update_stats)(y)
    return T.gelu(y)


def combine_logits(z_conv: Tensor, z_trans: Tensor, w_conv: float, w_trans: float) -> Tensor:
    """Weighted sum of the two branch logits."""
    if z_conv.shape != z_trans.shape:
        raise ShapeError(f"logit extents differ: {z_conv.dims} vs {z_trans.dims}")
    return T.add(T.scale(z_conv, w_conv), T.scale(z_trans, w_trans))


def forward(images: Tensor, params: dict, buffers: dict, cfg: ConformerConfig,
            training: bool = False, update_stats: bool = True) -> ForwardOutput:
    """Full dual-branch pass over a batch of (B, H, W, 3) images."""
    b = images.shape[0]
    D = cfg.embed_dim
    f, tok = stem(images, params, buffers, cfg, training, update_stats)
    g = images.shape[1] // cfg.patch_size
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, 1, D)), (b, 1, D))
    X = T.concat([cls, tok], axis=1)
    attn = []
    for l in range(cfg.num_blocks):
        pre = f"blocks.{l}"
        if l == cfg.num_blocks - 1 and f.shape[2] != g:
            # the last block runs with stride 1 on the token grid
            f = T.avg_pool2d(f, f.shape[2] // g)
        f = conv_block(f, params, buffers, f"{pre}.conv", training, update_stats)
        down = fcu_down(f, params, f"{pre}.fcu_down", g)
        X = T.concat([X[:, :1], T.add(X[:, 1:], down)], axis=1)
        X, a_bar = transformer_block(X, params, f"{pre}.attn", cfg.num_heads)
        attn.append(a_bar)
        f = T.add(f, fcu_up(X[:, 1:], params, buffers, f"{pre}.fcu_up", f.shape[2:], training, update_stats))
    cam_head = T.conv2d(f, params["head.conv.weight"], params["head.conv.bias"])
    z_conv = T.global_avg_pool(cam_head)
    cls_out = T.layer_norm(X[:, 0], params["head.trans_norm.weight"], params["head.trans_norm.bias"], LN_EPS)
    z_trans = T.linear(cls_out, params["head.trans.weight"], params["head.trans.bias"])
    return ForwardOutput(features=f, attn=AttentionStack(attn), z_conv=z_conv, z_trans=z_trans, cam_head=cam_head)


class MiniConformer:
    """Parameters, running statistics and config bundled for convenience."""

    def __init__(self, config: ConformerConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ConformerConfig()
        raw_params, raw_buffers = init_params(self.config, seed)
        self.params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw_params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in raw_buffers.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def head_weights(self) -> Tensor:
        """CNN classifier weights as (feature_channels, num_fg_classes)."""
        w = self.params["head.conv.weight"]
        k, c = w.shape[:2]
        return Tensor(w.data.reshape(k, c).T.copy())

    def __call__(self, images, training: bool = False, update_stats: bool = True) -> ForwardOutput:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        if images.ndim == 3:
            images = T.reshape(images, (1, *images.shape))
        return forward(images, self.params, self.buffers, self.config, training, update_stats)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k.startswith("buffer:"):
                name = k[len("buffer:"):]
                if name not in self.buffers or self.buffers[name].shape != v.shape:
                    raise ShapeError(f"unexpected buffer {name} with dims {list(v.shape)}")
                self.buffers[name] = np.array(v, dtype=self.dtype)
            else:
                if k not in self.params or self.params[k].shape != v.shape:
                    raise ShapeError(f"unexpected parameter {k} with dims {list(v.shape)}")
                self.params[k] = Tensor(np.array(v, dtype=self.dtype), requires_grad=True)
        missing = set(self.params) | {f"buffer:{b}" for b in self.buffers}
        missing -= set(state)
        if missing:
            raise ShapeError(f"state is missing entries: {sorted(missing)[:5]}")
