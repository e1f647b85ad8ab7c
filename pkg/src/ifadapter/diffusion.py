"""Toy latent diffusion: schedule, codec, denoiser, losses, condition dropout, CFG sampling."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict, field
from typing import Callable, Sequence

import numpy as np

from .adapter import PREFIX as ADAPTER_PREFIX, AdapterCondition, AdapterConfig, IFAdapter
from .layout import LayoutSpec
from .nn import autograd as ag
from .nn.autograd import NEG_INF, Tensor, no_grad
from .nn.layers import MLP, Conv2d, LayerNorm, Linear, timestep_embed
from .nn.optim import AdamWState, adamw_step
from .nn.params import ParamStore
from .text_encoder import TextEncoderConfig, ToyTextEncoder

log = logging.getLogger(__name__)

BASE_PREFIX = "base/"


# schedule --------------------------------------------------------------------

class NoiseSchedule:
    """Linear-beta DDPM schedule indexed by t = 1..T."""

    def __init__(self, T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any((t < 1) | (t > self.T)):
            raise ValueError(f"timestep outside [1, {self.T}]: {t}")
        return self.alpha_bars[t - 1]

    def q_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with t broadcast over the batch axis."""
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if x0.shape != eps.shape:
            raise ag.DimensionError(f"x0 {x0.shape} vs eps {eps.shape}")
        ab = self.alpha_bar(t)
        ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def respaced(self, steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Timesteps (descending) and matching betas for a ``steps``-step sampler."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        steps = min(steps, self.T)
        ts = np.unique(np.round(np.linspace(1, self.T, steps)).astype(int))[::-1]
        ab = self.alpha_bars[ts - 1]
        ab_prev = np.append(ab[1:], 1.0)
        return ts, 1.0 - ab / ab_prev


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, beta: float, ab: float, ab_prev: float,
              noise: np.ndarray | None) -> np.ndarray:
    """Ancestral reverse step with the posterior variance."""
    alpha = 1.0 - beta
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + np.sqrt(var) * noise


# latent codec ----------------------------------------------------------------

class LatentCodec:
    """Fixed seeded linear map between 64x64 RGB and a 16x16x4 latent.

    decode: per-cell 4->3 linear mix, +0.5, nearest x4 upsample.
    encode: 4x4 average pool, then the pseudo-inverse mix.
    """

    def __init__(self, channels: int = 4, factor: int = 4, seed: int = 7):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        self.mix = 0.25 * q[:, :3]                 # (C, 3)
        self.unmix = np.linalg.pinv(self.mix)      # (3, C)
        self.factor = factor
        self.channels = channels

    def encode(self, images: np.ndarray) -> np.ndarray:
        img = np.asarray(images, dtype=np.float64)
        *lead, H, W, _ = img.shape
        f = self.factor
        pooled = img.reshape(*lead, H // f, f, W // f, f, 3).mean(axis=(-4, -2))
        return (pooled - 0.5) @ self.unmix

    def decode(self, latents: np.ndarray) -> np.ndarray:
        rgb = np.asarray(latents) @ self.mix + 0.5
        rgb = np.repeat(np.repeat(rgb, self.factor, axis=-3), self.factor, axis=-2)
        return np.clip(rgb, 0.0, 1.0)


# denoiser --------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 4
    grid: int = 16
    width: int = 32
    t_dim: int = 64
    T: int = 200
    inject_sites: tuple[int, ...] = (2, 3)   # decoder half of the four attention sites
    seed: int = 0
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["text"] = TextEncoderConfig(**{**d.get("text", {}), "taps": tuple(d.get("text", {}).get("taps", (1, 2)))})
        d["inject_sites"] = tuple(d.get("inject_sites", (2, 3)))
        return cls(**d)


@dataclass
class CaptionContext:
    keys: np.ndarray   # (B, Tc, d_text)
    mask: np.ndarray   # (B, 1, Tc) additive


class _ResBlock:
    def __init__(self, store, name, c_in, c_out, t_dim, rng):
        self.n1 = LayerNorm(store, name + ".n1", c_in)
        self.c1 = Conv2d(store, name + ".c1", c_in, c_out, 3, rng)
        self.t = Linear(store, name + ".t", t_dim, c_out, rng)
        self.n2 = LayerNorm(store, name + ".n2", c_out)
        self.c2 = Conv2d(store, name + ".c2", c_out, c_out, 3, rng, scale=0.1)
        self.skip = Conv2d(store, name + ".skip", c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.c1(ag.gelu(self.n1(x)))
        B, C = temb.shape[0], h.shape[-1]
        h = h + ag.reshape(self.t(temb), (B, 1, 1, C))
        h = self.c2(ag.gelu(self.n2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class _AttnSite:
    def __init__(self, store, name, c, d_text, rng):
        self.norm = LayerNorm(store, name + ".norm", c)
        self.wq = Linear(store, name + ".wq", c, c, rng, bias=False)
        self.wk = Linear(store, name + ".wk", d_text, c, rng, bias=False)
        self.wv = Linear(store, name + ".wv", d_text, c, rng, bias=False)
        self.wo = Linear(store, name + ".wo", c, c, rng, scale=0.1)


class ToyDenoiser:
    """Small UNet-like epsilon predictor on the latent grid.

    conv_in -> res1 -> attn0 -> pool -> res2 -> attn1 -> up+skip -> res3 -> attn2
    -> res4 -> attn3 -> conv_out. Every attention site cross-attends to the caption
    tokens; adapter output is added at ``config.inject_sites``.
    """

    def __init__(self, store: ParamStore, config: ModelConfig, d_text: int):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        C, p = cfg.width, BASE_PREFIX
        self.t_mlp = MLP(store, p + "temb", [cfg.t_dim, C, C], rng)
        self.conv_in = Conv2d(store, p + "conv_in", cfg.latent_channels, C, 3, rng)
        self.res = [
            _ResBlock(store, p + "res1", C, C, C, rng),
            _ResBlock(store, p + "res2", C, C, C, rng),
            _ResBlock(store, p + "res3", 2 * C, C, C, rng),
            _ResBlock(store, p + "res4", C, C, C, rng),
        ]
        self.sites = [_AttnSite(store, f"{p}attn{i}", C, d_text, rng) for i in range(4)]
        self.norm_out = LayerNorm(store, p + "norm_out", C)
        self.conv_out = Conv2d(store, p + "conv_out", C, cfg.latent_channels, 3, rng, scale=0.1)

    @property
    def site_channels(self) -> list[int]:
        return [self.config.width for _ in self.config.inject_sites]

    def _attend(self, i, h, ctx: CaptionContext, adapter, cond, trace):
        site = self.sites[i]
        B, H, W, C = h.shape
        hn = ag.reshape(site.norm(h), (B, H * W, C))
        a = ag.masked_attention(site.wq(hn), site.wk(Tensor(ctx.keys)), site.wv(Tensor(ctx.keys)), ctx.mask)
        if adapter is not None and cond is not None and i in self.config.inject_sites:
            s = self.config.inject_sites.index(i)
            if trace is not None and not cond.empty:
                D, maps, w = adapter.semantic_map(s, hn, cond)
                trace[f"site{s}"] = {"D": D.data, "maps": maps.data, "weights": w.data}
            a = adapter.apply(s, a, hn, cond)
        return h + ag.reshape(site.wo(a), (B, H, W, C))

    def __call__(self, x, t, ctx: CaptionContext, adapter: IFAdapter | None = None,
                 cond: AdapterCondition | None = None, trace: dict | None = None) -> Tensor:
        x = ag.as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != self.config.latent_channels:
            raise ag.DimensionError(f"latent must be (B, H, W, {self.config.latent_channels}), got {x.shape}")
        temb = self.t_mlp(Tensor(timestep_embed(np.asarray(t, dtype=np.float64), self.config.t_dim)))
        h = self.conv_in(x)
        h = self.res[0](h, temb)
        h = self._attend(0, h, ctx, adapter, cond, trace)
        skip = h
        h = ag.avg_pool2(h)
        h = self.res[1](h, temb)
        h = self._attend(1, h, ctx, adapter, cond, trace)
        h = ag.concat([ag.upsample2(h), skip], axis=-1)
        h = self.res[2](h, temb)
        h = self._attend(2, h, ctx, adapter, cond, trace)
        h = self.res[3](h, temb)
        h = self._attend(3, h, ctx, adapter, cond, trace)
        return self.conv_out(ag.gelu(self.norm_out(h)))


# configs ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    p_drop_local: float = 0.15
    p_drop_global: float = 0.30
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        for name in ("p_drop_local", "p_drop_global"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleConfig:
    steps: int = 200
    cfg_scale: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def cfg_dropout(rng: np.random.Generator, layout: LayoutSpec, cfg: TrainConfig) -> LayoutSpec:
    """Independently null the caption (p_drop_global) and the instance set (p_drop_local)."""
    drop_global = rng.random() < cfg.p_drop_global
    drop_local = rng.random() < cfg.p_drop_local
    if not (drop_global or drop_local):
        return layout
    caption = "" if drop_global else layout.global_caption
    insts = () if drop_local else layout.instances
    return LayoutSpec(caption, insts, layout.max_instances)


def guided_eps(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """``(1 - s) eps_u + s eps_c``: exactly eps_u at s=0 and exactly eps_c at s=1."""
    return (1.0 - scale) * eps_uncond + scale * eps_cond


# model -------------------------------------------------------------------------

class ToyLDM:
    """Text encoder + denoiser (+ optional adapter) sharing one ParamStore."""

    def __init__(self, config: ModelConfig | None = None, adapter_config: AdapterConfig | None = None):
        self.config = cfg = config or ModelConfig()
        self.store = ParamStore()
        self.encoder = ToyTextEncoder(cfg.text)
        self.schedule = NoiseSchedule(cfg.T)
        self.codec = LatentCodec(cfg.latent_channels)
        self.denoiser = ToyDenoiser(self.store, cfg, self.encoder.d_text)
        self.adapter: IFAdapter | None = None
        if adapter_config is not None:
            self.attach_adapter(adapter_config)

    def attach_adapter(self, adapter_config: AdapterConfig) -> IFAdapter:
        if self.adapter is not None:
            raise RuntimeError("adapter already attached")
        g = self.config.grid
        self.adapter = IFAdapter(self.store, self.encoder, self.denoiser.site_channels, (g, g), adapter_config)
        return self.adapter

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        g = self.config.grid
        return (g, g, self.config.latent_channels)

    def caption_context(self, captions: Sequence[str]) -> CaptionContext:
        encs = [self.encoder.encode(c) if c.strip() else self.encoder.encode_null() for c in captions]
        Tc = max(e.token_count for e in encs) + 1
        d = self.encoder.d_text
        final = max(self.encoder.taps)
        keys = np.zeros((len(encs), Tc, d))
        mask = np.full((len(encs), 1, Tc), NEG_INF)
        for i, e in enumerate(encs):
            n = e.token_count
            if n:
                keys[i, :n] = e.tokens[final] if final in e.tokens else 0.0
            keys[i, n] = e.eot
            mask[i, 0, : n + 1] = 0.0
        return CaptionContext(keys, mask)

    def eps(self, x_t, t, layouts: Sequence[LayoutSpec], use_adapter: bool,
            cond: AdapterCondition | None = None, ctx: CaptionContext | None = None,
            trace: dict | None = None) -> Tensor:
        if ctx is None:
            ctx = self.caption_context([l.global_caption for l in layouts])
        adapter = self.adapter if use_adapter else None
        if adapter is not None and cond is None:
            cond = adapter.prepare(layouts)
        return self.denoiser(x_t, t, ctx, adapter, cond, trace)

    def _loss(self, x0, layouts, t, noise, use_adapter: bool) -> Tensor:
        x0 = np.asarray(x0, dtype=np.float64)
        if len(x0) == 0:
            raise ValueError("empty batch")
        x_t = self.schedule.q_sample(x0, t, noise)
        pred = self.eps(x_t, t, layouts, use_adapter)
        diff = pred - noise
        return ag.mean(diff * diff)

    def loss_ldm(self, x0, layouts, t, noise) -> Tensor:
        """Caption-only noise-prediction MSE (adapter bypassed)."""
        return self._loss(x0, layouts, t, noise, use_adapter=False)

    def loss_ifa(self, x0, layouts, t, noise) -> Tensor:
        """Noise-prediction MSE with the instance condition routed through the adapter."""
        if self.adapter is None:
            raise RuntimeError("no adapter attached")
        return self._loss(x0, layouts, t, noise, use_adapter=True)

    # sampling --------------------------------------------------------------

    def sample(self, layouts: Sequence[LayoutSpec], cfg: SampleConfig, use_adapter: bool = True,
               trace: dict | None = None, unconditional: bool = False) -> np.ndarray:
        """Ancestral CFG sampling; returns latents (B, H, W, C).

        ``unconditional=True`` runs the null-condition branch alone.
        """
        layouts = list(layouts)
        B = len(layouts)
        rng = np.random.default_rng(cfg.seed)
        x = rng.standard_normal((B,) + self.latent_shape)
        ts, betas = self.schedule.respaced(cfg.steps)
        ab = self.schedule.alpha_bars[ts - 1]
        use_adapter = use_adapter and self.adapter is not None
        null = [LayoutSpec("", (), l.max_instances) for l in layouts]
        s = float(cfg.cfg_scale)
        with no_grad():
            ctx_u = self.caption_context([""] * B)
            ctx_c = self.caption_context([l.global_caption for l in layouts])
            cond_c = self.adapter.prepare(layouts) if use_adapter else None
            for k, t in enumerate(ts):
                tb = np.full(B, t)
                step_trace = trace if (trace is not None and k == len(ts) - 1) else None
                if unconditional or s != 1.0:
                    e_u = self.eps(x, tb, null, False, ctx=ctx_u).data
                if unconditional:
                    e_hat = e_u
                else:
                    e_c = self.eps(x, tb, layouts, use_adapter, cond=cond_c, ctx=ctx_c, trace=step_trace).data
                    e_hat = e_c if s == 1.0 else guided_eps(e_u, e_c, s)
                ab_prev = ab[k + 1] if k + 1 < len(ts) else 1.0
                noise = rng.standard_normal(x.shape) if k + 1 < len(ts) else None
                x = ddpm_step(x, e_hat, betas[k], ab[k], ab_prev, noise)
        return x

    def render(self, latents: np.ndarray) -> np.ndarray:
        return self.codec.decode(latents)

    # checkpoints -----------------------------------------------------------

    def save_base(self, path) -> str:
        digest = self.store.save(path, BASE_PREFIX)
        _write_sidecar(path, {"model": self.config.to_dict()})
        return digest

    def save_adapter(self, path) -> str:
        if self.adapter is None:
            raise RuntimeError("no adapter attached")
        digest = self.store.save(path, ADAPTER_PREFIX)
        _write_sidecar(path, {"model": self.config.to_dict(), "adapter": self.adapter.config.to_dict()})
        return digest

    @classmethod
    def from_checkpoints(cls, base_path, adapter_path=None, adapter_overrides: dict | None = None) -> "ToyLDM":
        meta = _read_sidecar(base_path)
        model = cls(ModelConfig.from_dict(meta["model"]))
        model.store.load(base_path)
        if adapter_path is not None:
            ameta = _read_sidecar(adapter_path)
            acfg = AdapterConfig(**{**ameta["adapter"], **(adapter_overrides or {})})
            model.attach_adapter(acfg)
            model.store.load(adapter_path, strict=False)
        return model


def _write_sidecar(path, meta: dict) -> None:
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def _read_sidecar(path) -> dict:
    try:
        with open(f"{path}.json", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint metadata {path}.json not found") from None


# training ----------------------------------------------------------------------

def _batches(rng: np.random.Generator, n: int, batch_size: int):
    while True:
        yield rng.integers(0, n, size=batch_size)


def train(model: ToyLDM, latents: np.ndarray, layouts: Sequence[LayoutSpec], cfg: TrainConfig,
          phase: str, log_fn: Callable[[dict], None] | None = None) -> list[float]:
    """Run ``cfg.steps`` AdamW steps of either phase.

    ``phase="base"`` trains the denoiser on the caption-only loss with caption
    dropout; ``phase="adapter"`` freezes every base parameter and trains the
    adapter on the instance-conditioned loss with both dropouts.
    """
    if phase not in ("base", "adapter"):
        raise ValueError(phase)
    store = model.store
    if phase == "adapter":
        if model.adapter is None:
            raise RuntimeError("no adapter attached")
        store.freeze(BASE_PREFIX)
        store.unfreeze(ADAPTER_PREFIX)
        _freeze_unused(model)
    else:
        store.unfreeze(BASE_PREFIX)
        if model.adapter is not None:
            store.freeze(ADAPTER_PREFIX)
    latents = np.asarray(latents, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    index_stream = _batches(rng, len(latents), cfg.batch_size)
    for step in range(1, cfg.steps + 1):
        idx = next(index_stream)
        x0 = latents[idx]
        batch = [cfg_dropout(rng, layouts[i], cfg) for i in idx]
        if phase == "base":
            batch = [l.without_instances() for l in batch]
        t = rng.integers(1, model.schedule.T + 1, size=len(idx))
        noise = rng.standard_normal(x0.shape)
        store.zero_grad()
        loss = model.loss_ifa(x0, batch, t, noise) if phase == "adapter" else model.loss_ldm(x0, batch, t, noise)
        loss.backward()
        adamw_step(store, opt)
        lv = loss.item()
        losses.append(lv)
        if log_fn is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            rec = {"step": step, "loss": lv}
            if phase == "adapter":
                lams = [float(model.adapter.lam(s).data) for s in range(len(model.adapter.sites))]
                rec["lambda_value"] = float(np.mean(lams))
                rec["lambda_sites"] = lams
            log_fn(rec)
    return losses


def _freeze_unused(model: ToyLDM) -> None:
    """Ablated token paths get no gradient; freeze them so AdamW leaves them alone."""
    cfg = model.adapter.config
    if not cfg.use_eot:
        model.store.freeze(ADAPTER_PREFIX + "ground")
    if not cfg.use_appearance or cfg.bypass_resampler:
        model.store.freeze(ADAPTER_PREFIX + "resampler")
    if not cfg.use_appearance:
        model.store.freeze(ADAPTER_PREFIX + "queries")
