"""The network: patchify -> patch embedding + sinusoidal positions -> N1
transformer blocks -> encoding stack into the feature space; a roughly
symmetric decoder back to pixels; and the four-layer reduction into the 2-D
clustering space.

Token width equals the patch pixel count, so the flattened transformer
output has exactly the image dimension d = C*H*W feeding the encoding stack
[d, 512, 512, 3072, m]. The decoder runs [m, 3072, 512, 512, d] and a
per-token linear map back to patch pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PATCH_ROWS = 4
PATCH_COLS = 4
ENCODER_WIDTHS = (512, 512, 3072)
REDUCER_WIDTHS = (50, 50, 100)
EMBED_DIM = 10
CLUSTER_DIM = 2
MLP_RATIO = 4
DEFAULT_HEADS = 4


@dataclass(frozen=True)
class PatchGrid:
    """Fixed 4x4 grid of non-overlapping patches over a C x H x W image."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.height % PATCH_ROWS or self.width % PATCH_COLS:
            raise ValueError(
                f"PatchGrid: height and width must be divisible by "
                f"{PATCH_ROWS}, got {self.height}x{self.width} "
                f"(resize the images first)")

    @property
    def patches(self) -> int:
        return PATCH_ROWS * PATCH_COLS

    @property
    def patch_h(self) -> int:
        return self.height // PATCH_ROWS

    @property
    def patch_w(self) -> int:
        return self.width // PATCH_COLS

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_h * self.patch_w

    @property
    def image_dim(self) -> int:
        return self.channels * self.height * self.width


def patchify(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Split an image into the grid's patches, one flattened patch per row.

    Row p holds patch (p // 4, p % 4) in raster order with channels-major
    flattening; lossless (see unpatchify).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (grid.channels, grid.height, grid.width):
        raise ValueError(
            f"patchify: image shape {image.shape} does not match grid "
            f"({grid.channels}, {grid.height}, {grid.width})")
    c, ph, pw = grid.channels, grid.patch_h, grid.patch_w
    blocks = image.reshape(c, PATCH_ROWS, ph, PATCH_COLS, pw)
    return blocks.transpose(1, 3, 0, 2, 4).reshape(grid.patches, grid.patch_dim)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of patchify."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (grid.patches, grid.patch_dim):
        raise ValueError(
            f"unpatchify: got {patches.shape}, expected "
            f"({grid.patches}, {grid.patch_dim})")
    c, ph, pw = grid.channels, grid.patch_h, grid.patch_w
    blocks = patches.reshape(PATCH_ROWS, PATCH_COLS, c, ph, pw)
    return blocks.transpose(2, 0, 3, 1, 4).reshape(c, grid.height, grid.width)


def positional_encoding(positions: int, width: int) -> np.ndarray:
    """Sinusoidal table: sin at even columns, cos at odd, shared frequency."""
    if width % 2:
        raise ValueError(f"positional_encoding: width must be even, got {width}")
    pos = np.arange(positions, dtype=np.float64)[:, None]
    j = np.arange(width // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * j / width)
    table = np.empty((positions, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def head_count(token_width: int) -> int:
    """4 heads when the token width allows it, otherwise a single head."""
    return DEFAULT_HEADS if token_width % DEFAULT_HEADS == 0 else 1


def _batched_patchify(x: Tensor, grid: PatchGrid) -> Tensor:
    b = x.shape[0]
    c, ph, pw = grid.channels, grid.patch_h, grid.patch_w
    blocks = dc.reshape(x, (b, c, PATCH_ROWS, ph, PATCH_COLS, pw))
    ordered = dc.transpose(blocks, (0, 2, 4, 1, 3, 5))
    return dc.reshape(ordered, (b, grid.patches, grid.patch_dim))


def _batched_unpatchify(tokens: Tensor, grid: PatchGrid) -> Tensor:
    b = tokens.shape[0]
    c, ph, pw = grid.channels, grid.patch_h, grid.patch_w
    blocks = dc.reshape(tokens, (b, PATCH_ROWS, PATCH_COLS, c, ph, pw))
    ordered = dc.transpose(blocks, (0, 3, 1, 4, 2, 5))
    return dc.reshape(ordered, (b, c, grid.height, grid.width))


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return dc.add(dc.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _stack(x: Tensor, params: dict, prefix: str, depth: int,
           hidden=dc.relu) -> Tensor:
    """Linear stack with nonlinear hidden layers and a linear output."""
    for i in range(depth - 1):
        x = hidden(_linear(x, params, f"{prefix}.fc{i}"))
    return _linear(x, params, f"{prefix}.fc{depth - 1}")




def transformer_block(tokens: Tensor, params: dict, prefix: str,
                      n_heads: int) -> Tensor:
    """Self-attention and MLP sublayers, each followed by residual + LN."""
    b, p, e = tokens.shape
    if e % n_heads:
        raise dc.ShapeError(
            f"transformer_block: width {e} not divisible by {n_heads} heads")
    dh = e // n_heads
    q = _linear(tokens, params, f"{prefix}.attn.q")
    k = _linear(tokens, params, f"{prefix}.attn.k")
    v = _linear(tokens, params, f"{prefix}.attn.v")
    ctx = []
    inv_scale = 1.0 / np.sqrt(dh)
    for h in range(n_heads):
        qh = dc.narrow(q, 2, h * dh, dh)
        kh = dc.narrow(k, 2, h * dh, dh)
        vh = dc.narrow(v, 2, h * dh, dh)
        scores = dc.scale(dc.matmul(qh, dc.transpose(kh, (0, 2, 1))), inv_scale)
        ctx.append(dc.matmul(dc.softmax(scores), vh))
    attended = _linear(dc.concat(ctx, axis=2), params, f"{prefix}.attn.o")
    mid = dc.layer_norm(dc.add(attended, tokens),
                        params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    hidden = dc.gelu(_linear(mid, params, f"{prefix}.mlp.fc0"))
    expanded = _linear(hidden, params, f"{prefix}.mlp.fc1")
    return dc.layer_norm(dc.add(expanded, mid),
                         params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


class Network:
    """Encoder/decoder/reducer triple with a flat named parameter dict.

    ``feature_stats``, when set, standardizes the reducer's input with frozen
    constants. The unnormalized encoder inflates the feature scale by orders
    of magnitude under the fixed-rate optimizer while every training
    objective is invariant to that common mode; standardizing with frozen
    statistics is an affine reparameterization (the reachable four-layer map
    family is unchanged) that keeps the reducer numerically workable. The
    trainer refreshes the statistics once per epoch / outer iteration, like
    the frozen targets and centers.
    """

    def __init__(self, grid: PatchGrid, embed_dim: int = EMBED_DIM,
                 enc_blocks: int = 4, dec_blocks: int = 1,
                 params: dict | None = None, rng=None):
        self.grid = grid
        self.embed_dim = embed_dim
        self.enc_blocks = enc_blocks
        self.dec_blocks = dec_blocks
        self.n_heads = head_count(grid.patch_dim)
        self.positions = dc.constant(
            positional_encoding(grid.patches, grid.patch_dim))
        self.feature_stats = None
        if params is None:
            if rng is None:
                raise ValueError("Network: pass either params or an rng")
            params = self._init_params(rng)
        self.params = params

    def set_feature_stats(self, z_w_values: np.ndarray | None) -> None:
        """Freeze reducer-input statistics from a batch of feature values."""
        if z_w_values is None:
            self.feature_stats = None
            return
        z = np.asarray(z_w_values, dtype=np.float64)
        mu = z.mean(axis=0)
        sigma = np.maximum(z.std(axis=0), 1e-12)
        self.feature_stats = (mu, sigma)

    def _init_params(self, rng) -> dict:
        e = self.grid.patch_dim
        d = self.grid.image_dim
        m = self.embed_dim
        params = {}

        def linear(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.w"] = Tensor(
                rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params[f"{name}.b"] = Tensor(
                rng.uniform(-bound, bound, size=fan_out))

        def block(prefix):
            for sub in ("q", "k", "v", "o"):
                linear(f"{prefix}.attn.{sub}", e, e)
            linear(f"{prefix}.mlp.fc0", e, MLP_RATIO * e)
            linear(f"{prefix}.mlp.fc1", MLP_RATIO * e, e)
            for ln in ("ln1", "ln2"):
                params[f"{prefix}.{ln}.g"] = Tensor(np.ones(e))
                params[f"{prefix}.{ln}.b"] = Tensor(np.zeros(e))

        linear("enc.embed", e, e)
        for i in range(self.enc_blocks):
            block(f"enc.blk{i}")
        for i, (a, b) in enumerate(zip((d, *ENCODER_WIDTHS),
                                       (*ENCODER_WIDTHS, m))):
            linear(f"enc.fc{i}", a, b)
        dec_widths = tuple(reversed(ENCODER_WIDTHS))
        for i, (a, b) in enumerate(zip((m, *dec_widths), (*dec_widths, d))):
            linear(f"dec.fc{i}", a, b)
        for i in range(self.dec_blocks):
            block(f"dec.blk{i}")
        linear("dec.out", e, e)
        for i, (a, b) in enumerate(zip((m, *REDUCER_WIDTHS),
                                       (*REDUCER_WIDTHS, CLUSTER_DIM))):
            linear(f"dim.fc{i}", a, b)
        return params

    def replace_params(self, new_values: dict) -> None:
        """Swap in updated parameter values (dict of arrays or Tensors)."""
        self.params = {
            name: v if isinstance(v, Tensor) else Tensor(v)
            for name, v in new_values.items()
        }

    def encode(self, images) -> Tensor:
        """(B, C, H, W) images -> (B, m) features."""
        x = dc.as_tensor(images)
        if x.shape[1:] != (self.grid.channels, self.grid.height, self.grid.width):
            raise dc.ShapeError(
                f"encode: batch shape {x.shape} does not match grid "
                f"({self.grid.channels}, {self.grid.height}, {self.grid.width})")
        tokens = _batched_patchify(x, self.grid)
        tokens = dc.add(_linear(tokens, self.params, "enc.embed"), self.positions)
        for i in range(self.enc_blocks):
            tokens = transformer_block(tokens, self.params, f"enc.blk{i}",
                                       self.n_heads)
        flat = dc.reshape(tokens, (x.shape[0], self.grid.image_dim))
        return _stack(flat, self.params, "enc", 4)

    def decode(self, features) -> Tensor:
        """(B, m) features -> (B, C, H, W) reconstructions."""
        z = dc.as_tensor(features)
        if z.shape[1] != self.embed_dim:
            raise dc.ShapeError(
                f"decode: feature width {z.shape[1]} != {self.embed_dim}")
        flat = _stack(z, self.params, "dec", 4)
        tokens = dc.reshape(flat, (z.shape[0], self.grid.patches,
                                   self.grid.patch_dim))
        tokens = dc.add(tokens, self.positions)
        for i in range(self.dec_blocks):
            tokens = transformer_block(tokens, self.params, f"dec.blk{i}",
                                       self.n_heads)
        pixels = _linear(tokens, self.params, "dec.out")
        return _batched_unpatchify(pixels, self.grid)

    def dim_reduce(self, features) -> Tensor:
        """(B, m) features -> (B, 2) clustering-space coordinates."""
        z = dc.as_tensor(features)
        if z.shape[1] != self.embed_dim:
            raise dc.ShapeError(
                f"dim_reduce: feature width {z.shape[1]} != {self.embed_dim}")
        if self.feature_stats is not None:
            mu, sigma = self.feature_stats
            z = dc.divide(dc.subtract(z, dc.constant(mu)), dc.constant(sigma))
        return _stack(z, self.params, "dim", 4)
