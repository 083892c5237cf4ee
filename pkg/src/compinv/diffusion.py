"""Pixel-space toy diffusion model: schedule, forward process, cross-attention
U-Net that predicts the clean image, reconstruction loss, guided sampling."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError, NumericError
from .numerics import RngStream
from .text_encoder import TextEncoder

log = logging.getLogger(__name__)

CANONICAL_RES = 16


@dataclass
class NoiseSchedule:
    """Per-step retention ``alpha`` (index t-1 holds step t), its cumulative
    product, and the loss weights."""

    alpha: torch.Tensor
    w: torch.Tensor
    alpha_bar: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.alpha = self.alpha.to(torch.float64)
        self.alpha_bar = torch.cumprod(self.alpha, 0)
        self.w = self.w.to(torch.float64)

    @property
    def T(self) -> int:
        return self.alpha.numel()

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02,
               reference_T: int = 1000) -> "NoiseSchedule":
        # betas are quoted for a 1000-step chain; rescale so a shorter chain
        # still reaches (almost) pure noise
        scale = reference_T / T
        betas = torch.linspace(beta_start * scale, beta_end * scale, T, dtype=torch.float64)
        # very short chains would otherwise push beta to 1 or beyond
        betas = betas.clamp(max=0.95)
        return cls(1.0 - betas, torch.ones(T, dtype=torch.float64))

    def check(self, t) -> None:
        t = torch.as_tensor(t)
        if (t < 1).any() or (t > self.T).any():
            raise ContractError(f"timestep out of range 1..{self.T}: {t.tolist()}")

    def ab(self, t) -> torch.Tensor:
        """alpha_bar at (1-indexed) t; t = 0 maps to 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar])
        return padded[t]

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "w": self.w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(torch.tensor(d["alpha"], dtype=torch.float64), torch.tensor(d["w"], dtype=torch.float64))


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim())) if v.dim() else v


def forward_step(x_prev: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    schedule.check(t)
    if x_prev.shape != eps.shape:
        raise ContractError("x_prev and eps shapes differ")
    a = _bcast(schedule.alpha[torch.as_tensor(t, dtype=torch.long) - 1], x_prev)
    return a.sqrt() * x_prev + (1 - a).sqrt() * eps


def marginal_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    schedule.check(t)
    ab = _bcast(schedule.ab(t), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ------------------------------------------------------------------ attention


def cross_attention(features: torch.Tensor, context: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                    wv: torch.Tensor, wo: torch.Tensor | None = None, heads: int = 1):
    """Multi-head cross-attention of spatial queries over token keys.

    features: (B, N, Cq), context: (B, L, Ck); weights are (in, out) matrices.
    Returns mixed features (B, N, Cout) and head-averaged maps (B, L, N) whose
    columns sum to one over tokens.
    """
    if features.shape[-1] != wq.shape[0] or context.shape[-1] != wk.shape[0] or wq.shape[1] != wk.shape[1]:
        raise ContractError("cross_attention: feature/projection dimensions mismatch")
    if wq.shape[1] % heads:
        raise ContractError("projection width must be divisible by head count")
    b, n, _ = features.shape
    L = context.shape[1]
    dk = wq.shape[1] // heads
    q = (features @ wq).view(b, n, heads, dk).transpose(1, 2)
    k = (context @ wk).view(b, L, heads, dk).transpose(1, 2)
    v = (context @ wv).view(b, L, heads, -1).transpose(1, 2)
    probs = (q @ k.transpose(-1, -2) / math.sqrt(dk)).softmax(-1)  # (B, heads, N, L)
    mixed = (probs @ v).transpose(1, 2).reshape(b, n, -1)
    if wo is not None:
        mixed = mixed @ wo
    return mixed, probs.mean(1).transpose(1, 2)


class AttentionRecorder:
    """Collects per-layer head-averaged maps during one denoiser call."""

    def __init__(self, keep_graph: bool = False):
        self.keep_graph = keep_graph
        self.maps: dict[str, torch.Tensor] = {}

    def __call__(self, name: str, maps: torch.Tensor) -> None:
        self.maps[name] = maps if self.keep_graph else maps.detach()

    def canonical(self, res: int = CANONICAL_RES) -> torch.Tensor:
        """Layer-averaged (B, L, res, res) maps from layers at the canonical resolution."""
        sel = [m for m in self.maps.values() if m.shape[-1] == res]
        if not sel:
            raise ContractError(f"no attention layers at resolution {res}")
        return torch.stack(sel).mean(0)


@dataclass
class AttentionRecord:
    """Conditional-branch maps for each reverse step: ``steps[i][layer]`` is (B, L, h, w)."""

    timesteps: list[int] = field(default_factory=list)
    steps: list[dict[str, torch.Tensor]] = field(default_factory=list)

    def append(self, t: int, maps: dict[str, torch.Tensor]) -> None:
        self.timesteps.append(int(t))
        self.steps.append({k: v.detach().clone() for k, v in maps.items()})

    def canonical(self, index: int, res: int = CANONICAL_RES) -> torch.Tensor:
        sel = [m for m in self.steps[index].values() if m.shape[-1] == res]
        return torch.stack(sel).mean(0)

    def __len__(self):
        return len(self.steps)


# ------------------------------------------------------------------ network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(8, cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(tdim, cout)
        self.n2 = nn.GroupNorm(8, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class CrossAttnBlock(nn.Module):
    def __init__(self, channels: int, ctx_dim: int, name: str, heads: int = 4, inner: int = 64):
        super().__init__()
        self.name = name
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.wq = nn.Parameter(torch.randn(channels, inner) / math.sqrt(channels))
        self.wk = nn.Parameter(torch.randn(ctx_dim, inner) / math.sqrt(ctx_dim))
        self.wv = nn.Parameter(torch.randn(ctx_dim, inner) / math.sqrt(ctx_dim))
        self.wo = nn.Parameter(torch.randn(inner, channels) / math.sqrt(inner))

    def forward(self, x, ctx, recorder=None):
        b, c, h, w = x.shape
        feats = self.norm(x).flatten(2).transpose(1, 2)
        mixed, maps = cross_attention(feats, ctx, self.wq, self.wk, self.wv, self.wo, self.heads)
        if recorder is not None:
            recorder(self.name, maps.reshape(b, -1, h, w))
        return x + mixed.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Small U-Net returning the clean-image estimate f(x_t, e).

    32x32 (32 ch) -> 16x16 (64 ch, cross-attn) -> 8x8 (64 ch, cross-attn) -> back up.
    """

    def __init__(self, ctx_dim: int = 64, ch: int = 32, ch2: int = 64, tdim: int = 64):
        super().__init__()
        self.tdim = tdim
        self.temb = nn.Sequential(nn.Linear(tdim, 2 * tdim), nn.SiLU(), nn.Linear(2 * tdim, 2 * tdim))
        td = 2 * tdim
        self.inc = nn.Conv2d(3, ch, 3, padding=1)
        self.d1 = ResBlock(ch, ch, td)
        self.down1 = nn.Conv2d(ch, ch2, 3, stride=2, padding=1)
        self.d2 = ResBlock(ch2, ch2, td)
        self.a2 = CrossAttnBlock(ch2, ctx_dim, "down16")
        self.down2 = nn.Conv2d(ch2, ch2, 3, stride=2, padding=1)
        self.m1 = ResBlock(ch2, ch2, td)
        self.am = CrossAttnBlock(ch2, ctx_dim, "mid8")
        self.m2 = ResBlock(ch2, ch2, td)
        self.u2 = ResBlock(2 * ch2, ch2, td)
        self.au = CrossAttnBlock(ch2, ctx_dim, "up16")
        self.u1 = ResBlock(ch2 + ch, ch, td)
        self.out_norm = nn.GroupNorm(8, ch)
        self.outc = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, x, t, ctx, recorder=None):
        temb = self.temb(timestep_embedding(t, self.tdim).to(x.dtype))
        h0 = self.d1(self.inc(x), temb)
        h1 = self.a2(self.d2(self.down1(h0), temb), ctx, recorder)
        m = self.m1(self.down2(h1), temb)
        m = self.m2(self.am(m, ctx, recorder), temb)
        u = F.interpolate(m, scale_factor=2, mode="nearest")
        u = self.au(self.u2(torch.cat([u, h1], 1), temb), ctx, recorder)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.u1(torch.cat([u, h0], 1), temb)
        return self.outc(F.silu(self.out_norm(u)))


def to_chw(images: torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) -> (B, 3, H, W)."""
    return images.permute(0, 3, 1, 2).contiguous()


def to_hwc(images: torch.Tensor) -> torch.Tensor:
    return images.permute(0, 2, 3, 1).contiguous()


class DiffusionModel(nn.Module):
    """Denoiser + text encoder + schedule: everything sampling and inversion need."""

    def __init__(self, encoder: TextEncoder, denoiser: Denoiser, schedule: NoiseSchedule):
        super().__init__()
        self.encoder = encoder
        self.denoiser = denoiser
        self.schedule = schedule

    def predict_x0(self, x_t, t, ids, table=None, recorder=None, context=None):
        ctx = self.encoder.refine(ids, table) if context is None else context
        t = torch.as_tensor(t, dtype=torch.long).expand(x_t.shape[0])
        return self.denoiser(x_t, t, ctx.to(x_t.dtype), recorder)


# -------------------------------------------------------------------- losses


def reconstruction_loss(x0: torch.Tensor, ids: torch.Tensor, model: DiffusionModel | None, rng: RngStream,
                        table: torch.Tensor | None = None, schedule: NoiseSchedule | None = None,
                        denoise_fn: Callable | None = None, t: torch.Tensor | None = None,
                        eps: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of ``w_t * ||f(x_t, e) - x0||^2`` with x_t drawn from the marginal.

    x0 is (B, 3, H, W). ``denoise_fn(x_t, t, ids, table)`` replaces the network
    (oracle tests); ``t``/``eps`` may be supplied to freeze the noise draw.
    """
    if x0.shape[0] == 0:
        raise ContractError("empty batch")
    schedule = schedule or model.schedule
    b = x0.shape[0]
    if t is None:
        t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=b))
    if eps is None:
        eps = rng.normal(x0.shape, x0.dtype)
    x_t = marginal_sample(x0, t, eps, schedule)
    if denoise_fn is None:
        pred = model.predict_x0(x_t, t, ids, table)
    else:
        pred = denoise_fn(x_t, t, ids, table)
    w = schedule.w[t - 1].to(x0.dtype)
    return (w * (pred - x0).pow(2).flatten(1).sum(1)).mean()


# ------------------------------------------------------------------- sampling

GuidanceHook = Callable[[int, int, torch.Tensor, AttentionRecord], torch.Tensor]
HOOK_STEPS = 10


def sampling_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ContractError(f"steps must lie in 1..{T}")
    return [T - (k * T) // steps for k in range(steps)]


def guided_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, guidance_scale: float) -> torch.Tensor:
    """Classifier-free guidance with s = guidance_scale - 1: (1+s) e_c - s e_u."""
    s = guidance_scale - 1.0
    if s == 0.0:
        return eps_cond
    return (1.0 + s) * eps_cond - s * eps_uncond


def x0_to_eps(x_t, x0, ab):
    return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()


def eps_to_x0(x_t, eps, ab):
    return (x_t - (1 - ab).sqrt() * eps) / ab.sqrt()


@torch.no_grad()
def sample(prompt: str | Sequence[str], model: DiffusionModel, guidance_scale: float = 7.5, steps: int = 50,
           rng: RngStream | None = None, hook: GuidanceHook | None = None, batch: int | None = None,
           record: bool = True, table: torch.Tensor | None = None, x_init: torch.Tensor | None = None,
           start_index: int = 0, trace: Callable[[int, torch.Tensor], None] | None = None):
    """Strided ancestral DDPM sampling with classifier-free guidance.

    ``prompt`` may be a single prompt (``batch`` copies, default 1) or a list.
    Returns images (B, H, W, 3) clamped to [-1, 1] and the conditional-branch
    AttentionRecord. ``x_init``/``start_index`` resume from an injected state;
    ``trace(i, x)`` sees the latent entering each reverse step.
    """
    enc = model.encoder
    schedule = model.schedule
    prompts = [prompt] * (batch or 1) if isinstance(prompt, str) else list(prompt)
    b = len(prompts)
    ts = sampling_timesteps(schedule.T, steps)
    rng = rng or RngStream(0, "sampler")
    ids = enc.tokenize_batch(prompts)
    unc = enc.tokenize_batch([""] * b)
    dtype = next(model.denoiser.parameters()).dtype
    ctx = enc.refine(torch.cat([ids, unc]), table).to(dtype)
    size = 32
    x = rng.normal((b, 3, size, size), dtype)
    if x_init is not None:
        x = x_init.clone().to(dtype)
    rec = AttentionRecord()
    for i, t in enumerate(ts):
        noise = rng.normal((b, 3, size, size), dtype)
        if i < start_index:
            continue
        if trace is not None:
            trace(i, x.clone())
        if hook is not None and i < HOOK_STEPS:
            with torch.enable_grad():
                new = hook(i, t, x, rec)
            if new.shape != x.shape:
                raise ContractError(f"guidance hook returned shape {tuple(new.shape)}, expected {tuple(x.shape)}")
            if not torch.isfinite(new).all():
                raise NumericError(f"guidance hook produced non-finite latent at step {i}")
            x = new.detach()
        recorder = AttentionRecorder() if record else None
        tt = torch.full((2 * b,), t, dtype=torch.long)
        if guidance_scale == 1.0:
            x0c = model.denoiser(x, tt[:b], ctx[:b], recorder)
            x0u = x0c
        else:
            both = model.denoiser(torch.cat([x, x]), tt, ctx, _HalfRecorder(recorder, b) if recorder else None)
            x0c, x0u = both[:b], both[b:]
        if recorder is not None:
            rec.append(t, recorder.maps)
        ab = schedule.ab(t).to(dtype)
        ab_prev = schedule.ab(ts[i + 1] if i + 1 < len(ts) else 0).to(dtype)
        eps = guided_eps(x0_to_eps(x, x0c, ab), x0_to_eps(x, x0u, ab), guidance_scale)
        x0 = eps_to_x0(x, eps, ab).clamp(-1, 1)
        a_eff = ab / ab_prev
        beta = 1 - a_eff
        mean = (ab_prev.sqrt() * beta / (1 - ab)) * x0 + (a_eff.sqrt() * (1 - ab_prev) / (1 - ab)) * x
        var = beta * (1 - ab_prev) / (1 - ab)
        x = mean + var.sqrt() * noise if i + 1 < len(ts) else mean
    return to_hwc(x.clamp(-1, 1)), rec


class _HalfRecorder:
    """Forwards only the conditional half of a doubled batch to a recorder."""

    def __init__(self, inner: AttentionRecorder, b: int):
        self.inner, self.b = inner, b

    def __call__(self, name, maps):
        self.inner(name, maps[: self.b])


# ------------------------------------------------------------------- training


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    lr_min: float = 1e-4
    warmup: int = 100
    caption_dropout: float = 0.1
    grad_clip: float = 1.0
    checkpoint_every: int = 1000
    seed: int = 0
    T: int = 100
    log_every: int = 50
    dim: int = 64
    ch: int = 32
    ch2: int = 64
    tdim: int = 64


def build_model(vocab, cfg: PretrainConfig) -> DiffusionModel:
    torch.manual_seed(cfg.seed)
    enc = TextEncoder(vocab, dim=cfg.dim, rng=RngStream(cfg.seed, "init/text"))
    den = Denoiser(ctx_dim=enc.dim, ch=cfg.ch, ch2=cfg.ch2, tdim=cfg.tdim)
    return DiffusionModel(enc, den, NoiseSchedule.linear(cfg.T))


def pretrain(images: torch.Tensor, captions: Sequence[str], model: DiffusionModel, cfg: PretrainConfig,
             start_step: int = 0, optimizer_state: dict | None = None,
             on_checkpoint: Callable[[int, dict, list], None] | None = None) -> tuple[list[float], dict]:
    """Jointly train denoiser and text encoder on the reconstruction loss.

    images: (N, H, W, 3) in [-1, 1]. Returns the per-step loss curve and the
    optimizer state. Training is resumable from ``start_step``;
    ``on_checkpoint(step, optimizer_state, curve_so_far)`` fires every
    ``checkpoint_every`` steps.
    """
    x_all = to_chw(images)
    ids_all = model.encoder.tokenize_batch(captions)
    unc = torch.tensor(model.encoder.tokenize(""), dtype=torch.long)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    curve = []
    t0 = time.time()
    for step in range(start_step, cfg.steps):
        rng = RngStream(cfg.seed, f"pretrain/step{step}")
        idx = torch.from_numpy(rng.integers(0, x_all.shape[0], size=cfg.batch_size))
        ids = ids_all[idx].clone()
        drop = torch.from_numpy(rng.random(cfg.batch_size) < cfg.caption_dropout)
        ids[drop] = unc
        if step < cfg.warmup:
            lr = cfg.lr * (step + 1) / cfg.warmup
        else:
            frac = (step - cfg.warmup) / max(cfg.steps - cfg.warmup, 1)
            lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * frac))
        for g in opt.param_groups:
            g["lr"] = lr
        loss = reconstruction_loss(x_all[idx], ids, model, rng)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        curve.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("pretrain step %d loss %.3f (%.1fs)", step + 1, np.mean(curve[-cfg.log_every:]), time.time() - t0)
        if on_checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1, opt.state_dict(), curve)
    return curve, opt.state_dict()
