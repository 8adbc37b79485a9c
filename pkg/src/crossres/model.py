"""One-stream ViT tracker.

Template and search crops are patchified, projected, given their own learned
position embeddings and concatenated (template rows first). A stack of
pre-norm encoder layers mixes both jointly; the search rows of the final
state go to a small center-based head (score / offset / size maps).

All forward functions accept an optional leading batch axis: an image of
shape (H, W, 3) gives (N, D) tokens, a batch (B, H, W, 3) gives (B, N, D).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import BBox


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    search_resolution: int = 64
    template_resolution: int = 0  # 0 -> half the search resolution
    head_channels: int = 32

    def __post_init__(self):
        if self.template_resolution == 0:
            object.__setattr__(self, "template_resolution", self.search_resolution // 2)
        if self.patch_size < 1 or self.embed_dim < 1 or self.num_heads < 1 or self.num_layers < 0:
            raise ConfigError(f"non-positive architecture field in {self}")
        for name in ("search_resolution", "template_resolution"):
            res = getattr(self, name)
            if res < self.patch_size or res % self.patch_size:
                raise ConfigError(f"{name}={res} not divisible by patch_size={self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by num_heads={self.num_heads}")
        if self.mlp_ratio <= 0 or self.head_channels < 1:
            raise ConfigError("mlp_ratio and head_channels must be positive")

    @property
    def search_grid(self) -> int:
        return self.search_resolution // self.patch_size

    @property
    def template_grid(self) -> int:
        return self.template_resolution // self.patch_size

    @property
    def num_search_tokens(self) -> int:
        return self.search_grid ** 2

    @property
    def num_template_tokens(self) -> int:
        return self.template_grid ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def with_resolution(self, search_resolution: int, template_resolution: int = 0) -> "ModelConfig":
        d = asdict(self)
        d.update(search_resolution=search_resolution, template_resolution=template_resolution)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            kw[k] = float(v) if kinds[k] in (float, "float") else int(v)
        return cls(**kw)


PRESETS = {
    "vit-b": ModelConfig(patch_size=16, embed_dim=768, num_layers=12, num_heads=12,
                         mlp_ratio=4.0, search_resolution=256, head_channels=256),
    "toy-teacher": ModelConfig(search_resolution=96),
    "toy-student": ModelConfig(search_resolution=64),
}


class QKVTriple(NamedTuple):
    q: Tensor
    k: Tensor
    v: Tensor


class HeadOutput(NamedTuple):
    score_map: Tensor   # (..., Hs, Ws) in [0, 1]
    offset_map: Tensor  # (..., Hs, Ws, 2), (x, y) within the cell
    size_map: Tensor    # (..., Hs, Ws, 2), (w, h) as crop fractions


HEAD_OUTPUTS = (("score", 1), ("offset", 2), ("size", 2))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this fixes the parameter layout for a config."""
    d, p = cfg.embed_dim, cfg.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (p * p * 3, d),
        "patch.b": (d,),
        "pos.template": (cfg.num_template_tokens, d),
        "pos.search": (cfg.num_search_tokens, d),
    }
    for m in range(cfg.num_layers):
        pre = f"layer{m}."
        shapes.update({
            pre + "ln1.g": (d,), pre + "ln1.b": (d,),
            pre + "wq": (d, d), pre + "wk": (d, d), pre + "wv": (d, d),
            pre + "proj.w": (d, d), pre + "proj.b": (d,),
            pre + "ln2.g": (d,), pre + "ln2.b": (d,),
            pre + "fc1.w": (d, cfg.mlp_hidden), pre + "fc1.b": (cfg.mlp_hidden,),
            pre + "fc2.w": (cfg.mlp_hidden, d), pre + "fc2.b": (d,),
        })
    for name, k in HEAD_OUTPUTS:
        pre = f"head.{name}."
        shapes.update({
            pre + "w1": (d, cfg.head_channels), pre + "b1": (cfg.head_channels,),
            pre + "w2": (cfg.head_channels, k), pre + "b2": (k,),
        })
    return shapes


class TrackerParams:
    """Named learnable tensors of one tracker plus its config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ConfigError(f"parameter names do not match config (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ad.DimensionError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = tensors
        self.frozen = False

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = 0.02) -> "TrackerParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif leaf.startswith("b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, std, size=shape)
            tensors[name] = Tensor(arr, requires_grad=True)
        # focal-loss prior: start with low foreground probability
        tensors["head.score.b2"].data[:] = -2.19
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "TrackerParams":
        return cls(config, {n: Tensor(np.zeros(s), requires_grad=True)
                            for n, s in param_shapes(config).items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def freeze(self) -> "TrackerParams":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if t.requires_grad]

    def layer(self, m: int) -> dict[str, Tensor]:
        pre = f"layer{m}."
        return {n[len(pre):]: t for n, t in self.tensors.items() if n.startswith(pre)}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


# -- forward pieces ----------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., N, patch*patch*3); patches row-major, pixels row-major inside."""
    image = np.asarray(image, dtype=np.float64)
    *lead, h, w, c = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def tokenize(image, params: TrackerParams) -> Tensor:
    patches = patchify(image.data if isinstance(image, Tensor) else image, params.config.patch_size)
    return ad.matmul(Tensor(patches), params["patch.w"]) + params["patch.b"]


def embed_inputs(template_img, search_img, params: TrackerParams) -> Tensor:
    cfg = params.config
    t_shape = np.shape(template_img.data if isinstance(template_img, Tensor) else template_img)
    s_shape = np.shape(search_img.data if isinstance(search_img, Tensor) else search_img)
    if t_shape[-3:-1] != (cfg.template_resolution,) * 2 or s_shape[-3:-1] != (cfg.search_resolution,) * 2:
        raise ConfigError(
            f"inputs {t_shape}/{s_shape} do not match template {cfg.template_resolution} "
            f"/ search {cfg.search_resolution}")
    t = tokenize(template_img, params) + params["pos.template"]
    s = tokenize(search_img, params) + params["pos.search"]
    return ad.concat_rows(t, s)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    nd = len(lead)
    x = x.reshape(*lead, n, heads, d // heads)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = x.transpose(*range(nd), nd + 1, nd, nd + 2)
    return x.reshape(*lead, n, h * dh)


def encoder_layer(h_in: Tensor, lp: dict[str, Tensor], num_heads: int,
                  return_attn: bool = False):
    """Pre-norm block: H~ = MSA(LN(H)) + H; H' = MLP(LN(H~)) + H~.

    Returns ``(H', (Q, K, V))`` with the merged-head projections of LN(H);
    with ``return_attn`` the per-head attention weights are appended.
    """
    x = ad.layer_norm(h_in, lp["ln1.g"], lp["ln1.b"])
    q = ad.matmul(x, lp["wq"])
    k = ad.matmul(x, lp["wk"])
    v = ad.matmul(x, lp["wv"])
    d = h_in.shape[-1]
    scale = 1.0 / math.sqrt(d // num_heads)
    qh, kh, vh = (_split_heads(t, num_heads) for t in (q, k, v))
    nd = kh.ndim
    kt = kh.transpose(*range(nd - 2), nd - 1, nd - 2)
    attn = ad.softmax_rows(ad.matmul(qh * scale, kt))
    mixed = _merge_heads(ad.matmul(attn, vh))
    h_mid = ad.matmul(mixed, lp["proj.w"]) + lp["proj.b"] + h_in
    y = ad.layer_norm(h_mid, lp["ln2.g"], lp["ln2.b"])
    y = ad.gelu(ad.matmul(y, lp["fc1.w"]) + lp["fc1.b"])
    h_out = ad.matmul(y, lp["fc2.w"]) + lp["fc2.b"] + h_mid
    if return_attn:
        return h_out, (q, k, v), attn
    return h_out, (q, k, v)


class BackboneOutput(NamedTuple):
    feat_template: Tensor
    feat_search: Tensor
    qkv: dict[int, tuple[Tensor, Tensor, Tensor]]  # layer index -> full-token (Q, K, V)


def run_backbone(template_img, search_img, params: TrackerParams,
                 qkv_layers: tuple[int, ...] | None = None) -> BackboneOutput:
    """Full forward; keeps the full Q/K/V of the requested layers (default: last)."""
    cfg = params.config
    if qkv_layers is None:
        qkv_layers = (cfg.num_layers - 1,) if cfg.num_layers else ()
    h = embed_inputs(template_img, search_img, params)
    kept = {}
    for m in range(cfg.num_layers):
        h, qkv = encoder_layer(h, params.layer(m), cfg.num_heads)
        if m in qkv_layers:
            kept[m] = qkv
    f_t, f_s = ad.split_rows(h, cfg.num_template_tokens)
    return BackboneOutput(f_t, f_s, kept)


def search_qkv(qkv: tuple[Tensor, Tensor, Tensor], num_template_tokens: int) -> QKVTriple:
    n = qkv[0].shape[-2]
    return QKVTriple(*(ad.slice_rows(t, num_template_tokens, n) for t in qkv))


def template_qkv(qkv: tuple[Tensor, Tensor, Tensor], num_template_tokens: int) -> QKVTriple:
    return QKVTriple(*(ad.slice_rows(t, 0, num_template_tokens) for t in qkv))


def forward_backbone(template_img, search_img, params: TrackerParams):
    """Returns (F_t, F_s, last-layer search QKVTriple)."""
    out = run_backbone(template_img, search_img, params)
    cfg = params.config
    if cfg.num_layers == 0:
        empty = out.feat_search
        return out.feat_template, out.feat_search, QKVTriple(empty, empty, empty)
    qkv = search_qkv(out.qkv[cfg.num_layers - 1], cfg.num_template_tokens)
    return out.feat_template, out.feat_search, qkv


def head_forward(f_s: Tensor, params: TrackerParams) -> HeadOutput:
    cfg = params.config
    g = cfg.search_grid
    if f_s.shape[-2:] != (cfg.num_search_tokens, cfg.embed_dim):
        raise ad.DimensionError(f"head expects (..., {cfg.num_search_tokens}, {cfg.embed_dim}), got {f_s.shape}")
    lead = f_s.shape[:-2]
    maps = []
    for name, k in HEAD_OUTPUTS:
        pre = f"head.{name}."
        hid = ad.gelu(ad.matmul(f_s, params[pre + "w1"]) + params[pre + "b1"])
        maps.append(ad.sigmoid(ad.matmul(hid, params[pre + "w2"]) + params[pre + "b2"]))
    score, offset, size = maps
    return HeadOutput(score.reshape(*lead, g, g), offset.reshape(*lead, g, g, 2),
                      size.reshape(*lead, g, g, 2))


def track_forward(template_img, search_img, params: TrackerParams) -> HeadOutput:
    _, f_s, _ = forward_backbone(template_img, search_img, params)
    return head_forward(f_s, params)


# -- decoding ------------------------------------------------------------------

def hanning2d(hs: int, ws: int) -> np.ndarray:
    return np.outer(np.hanning(hs), np.hanning(ws))


def decode_box(head: HeadOutput, window_penalty: float = 0.0) -> BBox:
    """Box in crop-normalized coordinates from an unbatched head output."""
    boxes = decode_boxes(head, window_penalty)
    return BBox(*boxes.reshape(-1, 4)[0])


def decode_boxes(head: HeadOutput, window_penalty: float = 0.0) -> np.ndarray:
    """Vectorized decode; returns (..., 4) array of (cx, cy, w, h)."""
    if not 0.0 <= window_penalty <= 1.0:
        raise ValueError(f"window_penalty must lie in [0, 1], got {window_penalty}")
    score = np.asarray(head.score_map.data if isinstance(head.score_map, Tensor) else head.score_map)
    offset = np.asarray(head.offset_map.data if isinstance(head.offset_map, Tensor) else head.offset_map)
    size = np.asarray(head.size_map.data if isinstance(head.size_map, Tensor) else head.size_map)
    hs, ws = score.shape[-2:]
    lead = score.shape[:-2]
    if window_penalty > 0:
        score = score * (1.0 - window_penalty) + window_penalty * hanning2d(hs, ws)
    flat = score.reshape(-1, hs * ws)
    best = flat.argmax(axis=1)  # first maximum in row-major order
    i, j = np.divmod(best, ws)
    b = np.arange(flat.shape[0])
    off = offset.reshape(-1, hs, ws, 2)[b, i, j]
    sz = size.reshape(-1, hs, ws, 2)[b, i, j]
    out = np.stack([(j + off[:, 0]) / ws, (i + off[:, 1]) / hs, sz[:, 0], sz[:, 1]], axis=1)
    return out.reshape(*lead, 4)


# -- cost model ----------------------------------------------------------------

def estimate_macs(cfg: ModelConfig) -> int:
    """Analytic multiply-accumulate count of one forward pass."""
    d = cfg.embed_dim
    n = cfg.num_template_tokens + cfg.num_search_tokens
    per_layer = (3 * n * d * d          # Q, K, V projections
                 + n * d * d            # attention output projection
                 + 2 * n * n * d        # QK^T and attn @ V
                 + 2 * n * d * cfg.mlp_hidden)
    embed = n * 3 * cfg.patch_size ** 2 * d
    out_ch = sum(k for _, k in HEAD_OUTPUTS)
    head = cfg.num_search_tokens * (len(HEAD_OUTPUTS) * d * cfg.head_channels + cfg.head_channels * out_ch)
    return cfg.num_layers * per_layer + embed + head
