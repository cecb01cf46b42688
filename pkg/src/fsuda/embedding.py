"""Feature embedding network and local-descriptor extraction.

The backbone is a stack of 3x3 convolution blocks. Each block applies a
per-channel learnable scale and bias (in place of batch normalization) and a
ReLU; the first ``pooled_blocks`` blocks end with a 2x2/2 ceil-mode max-pool.
The default 32x32 input gives a 5x5x32 feature map.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .fileformat import load_checkpoint, save_checkpoint
from .kernels import pool_extent

MULTISCALE_GRIDS = (5, 2, 1)


@dataclass(frozen=True)
class EmbeddingConfig:
    height: int = 32
    width: int = 32
    channels_in: int = 1
    blocks: int = 3
    channels: int = 32
    pooled_blocks: int = 2
    padding: int = 0
    seed: int = 0

    def block_extents(self):
        h, w = self.height, self.width
        extents = []
        for b in range(self.blocks):
            h, w = h + 2 * self.padding - 2, w + 2 * self.padding - 2
            if h < 1 or w < 1:
                raise ValueError(f"input {self.height}x{self.width} too small for {self.blocks} blocks")
            if b < self.pooled_blocks:
                h, w = pool_extent(h, 2, 2, True), pool_extent(w, 2, 2, True)
            extents.append((h, w))
        return extents

    @property
    def feature_shape(self):
        h, w = self.block_extents()[-1]
        return h, w, self.channels

    def validate(self):
        h, w, c = self.feature_shape
        if h < 3 or w < 3:
            raise ValueError(f"feature map {h}x{w} is smaller than the 3x3 smoothing kernel")
        if c < 4:
            raise ValueError(f"need at least 4 channels, got {c}")
        return self

    def to_dict(self):
        return asdict(self)


class EmbeddingNet:
    def __init__(self, config=EmbeddingConfig()):
        self.config = config.validate()
        rng = np.random.default_rng([config.seed, 0xF])
        dtype = nx.get_dtype()
        self.params = nx.ParamTape()
        cin = config.channels_in
        for b in range(config.blocks):
            std = np.sqrt(2.0 / (9 * cin))
            w = rng.normal(0.0, std, size=(3, 3, cin, config.channels))
            self.params.register(f"embed.block{b}.weight", nx.Tensor(w, dtype=dtype))
            self.params.register(f"embed.block{b}.scale", nx.Tensor(np.ones(config.channels), dtype=dtype))
            self.params.register(f"embed.block{b}.bias", nx.Tensor(np.zeros(config.channels), dtype=dtype))
            cin = config.channels

    def __call__(self, images):
        return embed(images, self)

    def named_arrays(self):
        return [(n, p.data) for n, p in self.params.items()]

    def load_arrays(self, arrays, strict=True):
        for name, p in self.params.items():
            if name not in arrays:
                if strict:
                    raise KeyError(f"checkpoint has no parameter {name!r}")
                continue
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def architecture(self):
        return [(n, p.shape) for n, p in self.params.items()]


def _as_batch(images, config):
    x = images.data if isinstance(images, nx.Tensor) else np.asarray(images)
    if x.ndim == 2 and config.channels_in == 1:
        x = x[None, :, :, None]
    elif x.ndim == 3 and x.shape[-1] == config.channels_in and x.shape[:2] == (config.height, config.width):
        x = x[None]
    elif x.ndim == 3 and config.channels_in == 1:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (config.height, config.width, config.channels_in):
        raise ValueError(
            f"image extents {tuple(x.shape)} do not match configured "
            f"{(config.height, config.width, config.channels_in)}")
    return nx.Tensor(x, dtype=nx.get_dtype())


def embed(images, net):
    """Feature maps (B,H,W,C) for a batch of images (B,H,W[,Cin])."""
    cfg = net.config
    x = _as_batch(images, cfg)
    for b in range(cfg.blocks):
        p = net.params
        x = nx.conv2d(x, p[f"embed.block{b}.weight"], 1, cfg.padding)
        x = nx.relu(x * p[f"embed.block{b}.scale"] + p[f"embed.block{b}.bias"])
        if b < cfg.pooled_blocks:
            x = nx.pool2d(x, "max", 2, 2, ceil_mode=True)
    return x


def extract_lds(fm):
    """Local descriptor matrix: row ``y*W + x`` is the channel vector at (y, x).

    Accepts a single map (H,W,C) -> (HW,C) or a batch (B,H,W,C) -> (B,HW,C).
    """
    fm = nx.as_tensor(fm)
    if fm.ndim == 3:
        H, W, C = fm.shape
        return nx.reshape(fm, (H * W, C))
    B, H, W, C = fm.shape
    return nx.reshape(fm, (B, H * W, C))


def ld_position(row, H, W):
    """(image, y, x) for a row of a class LD matrix (support-image-major)."""
    image, rem = divmod(row, H * W)
    y, x = divmod(rem, W)
    return image, y, x


def ld_row(image, y, x, H, W):
    return image * H * W + y * W + x


def class_lds(support_maps, n_way, k_shot):
    """Stack support maps (N*K,H,W,C), class-major, into per-class LD matrices (N, K*H*W, C)."""
    B, H, W, C = support_maps.shape
    if B != n_way * k_shot:
        raise ValueError(f"expected {n_way * k_shot} support maps, got {B}")
    return nx.reshape(support_maps, (n_way, k_shot * H * W, C))


def multiscale_lds(support_maps):
    """Adaptive average pools at 5x5, 2x2 and 1x1; 30 descriptors per support image.

    Output rows are grouped per image: 25 (5x5, raster), 4 (2x2), 1 (1x1).
    """
    fm = nx.as_tensor(support_maps)
    if fm.ndim == 3:
        fm = nx.reshape(fm, (1,) + fm.shape)
    B, H, W, C = fm.shape
    if H < 5 or W < 5:
        raise ValueError(f"multiscale descriptors need maps of at least 5x5, got {H}x{W}")
    scales = [nx.reshape(nx.adaptive_avg_pool2d(fm, g, g), (B, g * g, C)) for g in MULTISCALE_GRIDS]
    per_image = sum(g * g for g in MULTISCALE_GRIDS)
    return nx.reshape(nx.concat(scales, axis=1), (B * per_image, C))


def pretrain(net, images, labels, epochs=5, lr=1e-3, batch_size=64, seed=0, log=None):
    """Supervised warm start with a temporary global-pool + linear head.

    The head is discarded afterwards; ``net`` is updated in place and
    returned together with the mean loss of each epoch.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("pretraining needs at least 2 classes")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels])
    rng = np.random.default_rng([seed, 0xA])
    C = net.config.channels
    dtype = nx.get_dtype()
    head_w = nx.Tensor(rng.normal(0, np.sqrt(1.0 / C), size=(C, classes.size)), requires_grad=True, dtype=dtype)
    head_b = nx.Tensor(np.zeros(classes.size), requires_grad=True, dtype=dtype)
    opt = nx.Adam(list(net.params) + [head_w, head_b], lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            fm = embed(images[idx], net)
            pooled = nx.mean(fm, axis=(1, 2))
            logits = pooled @ head_w + head_b
            logp = nx.log_softmax(logits, axis=1)
            loss = -nx.mean(logp[np.arange(len(idx)), y[idx]])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(y))
        if log:
            log(epoch, history[-1])
    return net, history


def save_embedding(path, net, extra=()):
    save_checkpoint(path, list(net.named_arrays()) + list(extra))


def load_embedding(path, config):
    net = EmbeddingNet(config)
    net.load_arrays(load_checkpoint(path), strict=True)
    return net
