"""Instance-feature adapter: appearance tokens, instance semantic maps, fusion, injection.

Per instance, a Perceiver-style resampler turns word tokens from several text
encoder depths into a fixed number of appearance tokens; a grounding token
fuses the EoT summary with the box's location embedding. At each injection
site every instance attends only from the latent cells inside its own box
(semantic map ``s_i``); maps are blended per cell with softmax importance
weights and area gates into ``D``, which enters the frozen attention output
through a ``tanh(lambda)`` gate on the foreground.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .layout import BBox, LayoutSpec, ValidationError, instance_area, rasterize, union_area
from .nn import autograd as ag
from .nn.autograd import NEG_INF, Tensor
from .nn.layers import MLP, LayerNorm, Linear, fourier_embed
from .nn.params import ParamStore
from .text_encoder import EncodedText, ToyTextEncoder

PREFIX = "adapter/"


@dataclass(frozen=True)
class AdapterConfig:
    d: int = 64
    n_queries: int = 4          # appearance tokens per depth
    n_blocks: int = 2           # resampler transformer blocks
    fourier_bands: int = 8
    use_appearance: bool = True
    use_eot: bool = True
    bypass_resampler: bool = False  # diagnostic: h^l = Q_a + location embedding
    seed: int = 0

    def __post_init__(self):
        if not (self.use_appearance or self.use_eot):
            raise ValueError("at least one of appearance tokens / EoT token must be enabled")

    def to_dict(self) -> dict:
        return asdict(self)


def area_gates(regions: Sequence[np.ndarray]) -> np.ndarray:
    """``sigmoid(|union of all regions| / |region_i|)`` per instance."""
    if len(regions) == 0:
        return np.zeros(0)
    u = union_area(regions)
    areas = np.array([instance_area(r) for r in regions], dtype=np.float64)
    if (areas == 0).any():
        raise ValidationError("zero-area instance region")
    return 1.0 / (1.0 + np.exp(-u / areas))


def instance_semantic_map(latent: Tensor, tokens: Tensor, mask, wq, wk, wv) -> Tensor:
    """Masked cross-attention from latent cells (queries) to one instance's tokens.

    ``latent`` (..., HW, C); ``tokens`` (..., R, d); ``mask`` additive over cells,
    shape (..., HW) or (..., HW, 1). Cells outside the region come out zero.
    """
    mask = np.asarray(mask)
    if mask.ndim == latent.ndim - 1:
        mask = mask[..., None]
    return ag.masked_attention(wq(latent), wk(tokens), wv(tokens), mask)


def fuse(maps: Tensor, cover: np.ndarray, gates: np.ndarray, f) -> tuple[Tensor, Tensor]:
    """Blend per-instance maps into the instance semantic map.

    ``maps`` (..., N, HW, C); ``cover`` bool (..., N, HW); ``gates`` (..., N).
    Importance logits ``f(s_i)`` are softmax-normalized over the instances that
    cover each cell only; uncovered cells get D = 0. Returns ``(D, weights)``.
    """
    cover = np.asarray(cover, dtype=bool)
    if maps.shape[:-1] != cover.shape:
        raise ag.DimensionError(f"maps {maps.shape} vs cover {cover.shape}")
    logits = f(maps)
    logits = ag.reshape(logits, logits.shape[:-1])
    weights = ag.masked_softmax(logits, np.where(cover, 0.0, NEG_INF), axis=-2)
    g = np.asarray(gates, dtype=np.float64)[..., None]
    scaled = weights * g
    D = ag.tsum(ag.reshape(scaled, scaled.shape + (1,)) * maps, axis=-3)
    return D, weights


def inject(base_attn: Tensor, D: Tensor, bg_mask: np.ndarray, lam: Tensor) -> Tensor:
    """``base_attn + tanh(lam) * (1 - bg_mask) * D``; ``bg_mask`` broadcast over channels."""
    base_attn = ag.as_tensor(base_attn)
    if base_attn.shape != D.shape:
        raise ag.DimensionError(f"base {base_attn.shape} vs D {D.shape}")
    fg = 1.0 - np.asarray(bg_mask, dtype=np.float64)
    if fg.ndim == D.ndim - 1:
        fg = fg[..., None]
    return base_attn + ag.tanh(lam) * (fg * D)


@dataclass
class AdapterCondition:
    """Per-batch instance condition shared by all injection sites and timesteps."""

    tokens: Tensor | None        # (B, N, R, d); None when the batch has no instances
    cover: np.ndarray            # (B, N, HW) bool
    gates: np.ndarray            # (B, N)
    fg: np.ndarray               # (B, HW) = 1 - background mask

    @property
    def empty(self) -> bool:
        return self.tokens is None


class IFAdapter:
    def __init__(self, store: ParamStore, encoder: ToyTextEncoder, site_channels: Sequence[int],
                 grid: tuple[int, int], config: AdapterConfig | None = None):
        self.config = cfg = config or AdapterConfig()
        self.store = store
        self.encoder = encoder
        self.grid = tuple(grid)
        self.site_channels = tuple(site_channels)
        rng = np.random.default_rng(cfg.seed)
        d, dt = cfg.d, encoder.d_text
        p = PREFIX
        self.loc_mlp = MLP(store, p + "loc", [8 * cfg.fourier_bands, d, d], rng)
        self.queries = store.add(p + "queries", rng.standard_normal((cfg.n_queries, d)) / np.sqrt(d))
        self.blocks = []
        for b in range(cfg.n_blocks):
            q = f"{p}resampler.{b}."
            self.blocks.append({
                "ln_q": LayerNorm(store, q + "ln_q", d),
                "wq": Linear(store, q + "wq", d, d, rng, bias=False),
                "ln_kv": {l: LayerNorm(store, f"{q}ln_kv{l}", dt) for l in encoder.taps},
                "wk": {l: Linear(store, f"{q}wk{l}", dt, d, rng, bias=False) for l in encoder.taps},
                "wv": {l: Linear(store, f"{q}wv{l}", dt, d, rng, bias=False) for l in encoder.taps},
                "wo": Linear(store, q + "wo", d, d, rng),
                "ln_ff": LayerNorm(store, q + "ln_ff", d),
                "ff": MLP(store, q + "ff", [d, 2 * d, d], rng),
            })
        self.ln_out = LayerNorm(store, p + "resampler.ln_out", d)
        self.ground_mlp = MLP(store, p + "ground", [dt + d, d, d], rng)
        self.sites = []
        for s, c in enumerate(self.site_channels):
            q = f"{p}site{s}."
            self.sites.append({
                "wq": Linear(store, q + "wq", c, d, rng, bias=False),
                "wk": Linear(store, q + "wk", d, d, rng, bias=False),
                "wv": Linear(store, q + "wv", d, c, rng, bias=False),
                "f": MLP(store, q + "f", [c, max(c // 4, 1), 1], rng),
                "lam": store.add(q + "lam", np.zeros(())),
            })

    @property
    def n_rows(self) -> int:
        cfg = self.config
        return int(cfg.use_eot) + (len(self.encoder.taps) * cfg.n_queries if cfg.use_appearance else 0)

    def lam(self, site: int) -> Tensor:
        return self.sites[site]["lam"]

    # token construction -----------------------------------------------------

    def location_embedding(self, boxes) -> Tensor:
        """MLP over the Fourier features of (x, y, w, h); boxes (..., 4) or BBox."""
        if isinstance(boxes, BBox):
            boxes = boxes.as_list()
        boxes = np.asarray(boxes, dtype=np.float64)
        feats = fourier_embed(boxes, self.config.fourier_bands)
        feats = feats.reshape(boxes.shape[:-1] + (-1,))
        if feats.ndim == 1:
            return ag.reshape(self.loc_mlp(Tensor(feats[None])), (self.config.d,))
        return self.loc_mlp(Tensor(feats))

    def _resample(self, words: dict[int, np.ndarray], key_mask: np.ndarray, n: int) -> list[Tensor]:
        out = []
        q0 = ag.broadcast_to(self.queries, (n,) + self.queries.shape)
        for depth in self.encoder.taps:
            lat = q0
            if not self.config.bypass_resampler:
                text = Tensor(words[depth])
                for blk in self.blocks:
                    kv = blk["ln_kv"][depth](text)
                    att = ag.masked_attention(blk["wq"](blk["ln_q"](lat)), blk["wk"][depth](kv),
                                              blk["wv"][depth](kv), key_mask)
                    lat = lat + blk["wo"](att)
                    lat = lat + blk["ff"](blk["ln_ff"](lat))
                lat = self.ln_out(lat)
            out.append(lat)
        return out

    def instance_tokens(self, encs: Sequence[EncodedText], boxes) -> Tensor:
        """Token matrices (n, R, d) for n instances; R = ``n_rows`` for every description."""
        n = len(encs)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(n, 4)
        for e in encs:
            missing = set(self.encoder.taps) - set(e.tokens)
            if missing:
                raise ag.DimensionError(f"encoded text lacks depths {sorted(missing)}")
        loc = self.location_embedding(boxes)                      # (n, d)
        rows = []
        if self.config.use_eot:
            eot = Tensor(np.stack([e.eot for e in encs]))
            g = self.ground_mlp(ag.concat([eot, loc], axis=-1))
            rows.append(ag.reshape(g, (n, 1, self.config.d)))
        if self.config.use_appearance:
            # fixed key count keeps each instance's arithmetic independent of its batch mates
            T = self.encoder.config.max_tokens
            words = {}
            for depth in self.encoder.taps:
                arr = np.zeros((n, T, self.encoder.d_text))
                for i, e in enumerate(encs):
                    arr[i, : e.token_count] = e.tokens[depth]
                words[depth] = arr
            key_mask = np.full((n, 1, T), NEG_INF)
            for i, e in enumerate(encs):
                key_mask[i, 0, : e.token_count] = 0.0
            loc3 = ag.reshape(loc, (n, 1, self.config.d))
            rows.extend(h + loc3 for h in self._resample(words, key_mask, n))
        return ag.concat(rows, axis=1) if len(rows) > 1 else rows[0]

    def appearance_tokens(self, enc: EncodedText, bbox: BBox) -> Tensor:
        """Single-instance token matrix (R, d): grounding row then k*L appearance rows."""
        return ag.reshape(self.instance_tokens([enc], [bbox.as_list()]), (self.n_rows, self.config.d))

    # condition packing ------------------------------------------------------

    def prepare(self, layouts: Sequence[LayoutSpec]) -> AdapterCondition:
        """Encode and rasterize the instance sets of a batch of layouts."""
        H, W = self.grid
        B = len(layouts)
        N = max((len(l) for l in layouts), default=0)
        cover = np.zeros((B, N, H * W), dtype=bool)
        gates = np.zeros((B, N))
        fg = np.zeros((B, H * W))
        if N == 0:
            return AdapterCondition(None, cover, gates, fg)
        encs, boxes, index = [], [], np.full((B, N), -1)
        for b, lay in enumerate(layouts):
            regions = [rasterize(box, H, W) for box in lay.boxes]
            if regions:
                gates[b, : len(regions)] = area_gates(regions)
                for i, r in enumerate(regions):
                    cover[b, i] = r.reshape(-1) > 0
                fg[b] = cover[b].any(axis=0)
            for i, inst in enumerate(lay.instances):
                index[b, i] = len(encs)
                encs.append(self.encoder.encode(inst.description))
                boxes.append(inst.bbox.as_list())
        flat = self.instance_tokens(encs, boxes)                  # (M, R, d)
        pad = Tensor(np.zeros((1,) + flat.shape[1:]))
        flat = ag.concat([flat, pad], axis=0)
        index = np.where(index < 0, len(encs), index)
        return AdapterCondition(ag.getitem(flat, index), cover, gates, fg)

    # per-site application ---------------------------------------------------

    def semantic_maps(self, site: int, latent: Tensor, cond: AdapterCondition) -> Tensor:
        """Per-instance maps (B, N, HW, C) from site features ``latent`` (B, HW, C)."""
        st = self.sites[site]
        B, HW, C = latent.shape
        q = ag.reshape(latent, (B, 1, HW, C))
        mask = np.where(cond.cover, 0.0, NEG_INF)[..., None]     # (B, N, HW, 1)
        return instance_semantic_map(q, cond.tokens, mask, st["wq"], st["wk"], st["wv"])

    def semantic_map(self, site: int, latent: Tensor, cond: AdapterCondition):
        """Fused map D (B, HW, C), plus the per-instance maps and fusion weights."""
        maps = self.semantic_maps(site, latent, cond)
        D, w = fuse(maps, cond.cover, cond.gates, self.sites[site]["f"])
        return D, maps, w

    def apply(self, site: int, base_attn: Tensor, latent: Tensor, cond: AdapterCondition | None) -> Tensor:
        if cond is None or cond.empty:
            return base_attn
        D, _, _ = self.semantic_map(site, latent, cond)
        return inject(base_attn, D, 1.0 - cond.fg, self.sites[site]["lam"])
