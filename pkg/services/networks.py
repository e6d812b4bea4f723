"""Neural components: autoencoder (E, D) with feature taps, the multi-view
denoiser with cross-view / cross-component attention, and the Detail
Injection Network (DIN) built from Residual Dense Blocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from framework.errors import InvalidArgumentError
from models.config import ModelConfig, ScheduleConfig, Task
from services.schedule import NoiseSchedule, make_schedule
from utils.hashing import parameter_hash

logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 8
DECODE_RANGE = (-1.0, 2.0)
# decoder injection site -> encoder tap (deepest encoder tap feeds the earliest site)
INJECTION_PAIRS = {0: 1, 1: 0}

TaskArg = Union[Task, str, Sequence[Union[Task, str]]]
Injector = Callable[[int, torch.Tensor], torch.Tensor]


def _norm(channels: int) -> nn.GroupNorm:
    # at least four channels per group; single-channel groups erase constant maps
    groups = next((g for g in (8, 4, 2) if channels % g == 0 and channels // g >= 4), 1)
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


# -----------------------------------------------------------------------------
# Autoencoder
# -----------------------------------------------------------------------------
class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, dw = cfg.ae_width, cfg.ae_deep_width
        self.layer1 = nn.Conv2d(3, w, 3, padding=1)
        self.layer2 = ResBlock(w, w)
        self.body = nn.Sequential(
            Downsample(w, dw), ResBlock(dw, dw),
            Downsample(dw, dw), ResBlock(dw, dw),
            Downsample(dw, dw), ResBlock(dw, dw),
            _norm(dw), nn.SiLU(),
            nn.Conv2d(dw, 2 * cfg.latent_channels, 3, padding=1),
        )

    def taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Hidden features of the first two layers (full resolution)."""
        h1 = self.layer1(x)
        return [h1, self.layer2(h1)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(self.taps(x)[1])


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, dw = cfg.ae_width, cfg.ae_deep_width
        self.body = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, dw, 3, padding=1), ResBlock(dw, dw),
            Upsample(dw, dw), ResBlock(dw, dw),
            Upsample(dw, w), ResBlock(w, w),
            Upsample(w, w),
        )
        # the last two layers; their inputs are the injection sites
        self.penultimate = ResBlock(w, w)
        self.last = nn.Sequential(_norm(w), nn.SiLU(), nn.Conv2d(w, 3, 3, padding=1))

    def forward(self, z: torch.Tensor, inject: Optional[Injector] = None) -> torch.Tensor:
        h = self.body(z)
        if inject is not None:
            h = inject(0, h)
        h = self.penultimate(h)
        if inject is not None:
            h = inject(1, h)
        return self.last(h)


def _flatten_images(x: torch.Tensor, channels: int) -> torch.Tensor:
    if x.ndim < 4 or x.shape[-3] != channels:
        raise InvalidArgumentError(f"expected [..., {channels}, H, W], got {tuple(x.shape)}")
    return x.reshape(-1, *x.shape[-3:])


class Autoencoder(nn.Module):
    """Images in [0,1] <-> latents at 1/8 resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.latent_channels = cfg.latent_channels
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    @staticmethod
    def _check_spatial(x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise InvalidArgumentError(f"spatial dims {h}x{w} are not divisible by {DOWNSAMPLE_FACTOR}")

    def moments(self, images: torch.Tensor):
        """(mean, logvar) of the unscaled posterior, shaped like the latents."""
        self._check_spatial(images)
        x = _flatten_images(images, 3) * 2.0 - 1.0
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        lead = images.shape[:-3]
        return mean.reshape(*lead, *mean.shape[1:]), logvar.clamp(-30.0, 20.0).reshape(*lead, *mean.shape[1:])

    def encode(self, images: torch.Tensor, sample: bool = False, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        mean, logvar = self.moments(images)
        z = mean
        if sample:
            noise = torch.randn(mean.shape, generator=generator, device=mean.device, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * noise
        return z * self.latent_scale

    def encoder_taps(self, images: torch.Tensor) -> List[torch.Tensor]:
        self._check_spatial(images)
        return self.encoder.taps(_flatten_images(images, 3) * 2.0 - 1.0)

    def decode(self, latents: torch.Tensor, inject: Optional[Injector] = None) -> torch.Tensor:
        z = _flatten_images(latents, self.latent_channels) / self.latent_scale
        out = (self.decoder(z, inject) + 1.0) / 2.0
        out = out.clamp(*DECODE_RANGE)
        return out.reshape(*latents.shape[:-3], *out.shape[1:])


# -----------------------------------------------------------------------------
# Detail Injection Network
# -----------------------------------------------------------------------------
class DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, growth, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat((x, F.relu(self.conv(x))), dim=1)


class ResidualDenseBlock(nn.Module):
    """Dense conv layers, 1x1 local feature fusion, local residual."""

    def __init__(self, channels: int, growth: int, n_layers: int):
        super().__init__()
        self.dense = nn.Sequential(*[DenseLayer(channels + i * growth, growth) for i in range(n_layers)])
        self.fusion = nn.Conv2d(channels + n_layers * growth, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fusion(self.dense(x)) + x


class InjectionBranch(nn.Module):
    def __init__(self, tap_channels: int, cfg: ModelConfig):
        super().__init__()
        width = cfg.din_width
        self.head = nn.Conv2d(2 * tap_channels, width, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualDenseBlock(width, cfg.rdb_growth, cfg.rdb_layers) for _ in range(cfg.n_rdb)])
        self.fuse = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, tap_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, enc_tap: torch.Tensor, dec_tap: torch.Tensor) -> torch.Tensor:
        head = self.head(torch.cat((enc_tap, dec_tap), dim=1))
        return self.out(self.fuse(self.blocks(head)) + head)


class DetailInjectionNetwork(nn.Module):
    """f_phi: one branch per injection site; returns the additive update."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.branches = nn.ModuleList([InjectionBranch(cfg.ae_width, cfg) for _ in INJECTION_PAIRS])

    def forward(self, site: int, enc_tap: torch.Tensor, dec_tap: torch.Tensor) -> torch.Tensor:
        return self.branches[site](enc_tap, dec_tap)


def decode_with_din(
    autoencoder: Autoencoder,
    din: DetailInjectionNetwork,
    latents: torch.Tensor,
    condition_images: torch.Tensor,
) -> torch.Tensor:
    """Decode with H_D <- f(concat(H_E, H_D)) + H_D at both injection sites.

    The leading dims of ``condition_images`` must equal, or be a suffix of,
    those of ``latents``; taps are tiled over the extra leading dims.
    """
    lat_lead, cond_lead = latents.shape[:-3], condition_images.shape[:-3]
    if tuple(latents.shape[-2:]) != tuple(s // DOWNSAMPLE_FACTOR for s in condition_images.shape[-2:]) or \
            any(s % DOWNSAMPLE_FACTOR for s in condition_images.shape[-2:]):
        raise InvalidArgumentError(
            f"latents {tuple(latents.shape[-2:])} x{DOWNSAMPLE_FACTOR} do not match condition images {tuple(condition_images.shape[-2:])}"
        )
    if len(cond_lead) > len(lat_lead) or tuple(lat_lead[len(lat_lead) - len(cond_lead):]) != tuple(cond_lead):
        raise InvalidArgumentError(f"condition leading dims {tuple(cond_lead)} do not align with latents {tuple(lat_lead)}")
    taps = autoencoder.encoder_taps(condition_images)
    reps = math.prod(lat_lead[: len(lat_lead) - len(cond_lead)])
    if reps > 1:
        taps = [t.repeat(reps, 1, 1, 1) for t in taps]

    def inject(site: int, h: torch.Tensor) -> torch.Tensor:
        return h + din(site, taps[INJECTION_PAIRS[site]], h)

    return autoencoder.decode(latents, inject=inject)


# -----------------------------------------------------------------------------
# Denoiser
# -----------------------------------------------------------------------------
def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class MultiViewAttention(nn.Module):
    """Cross-view attention over the tokens of all views of one (scene, task),
    then cross-component attention over the task axis at each (view, pixel).
    No positional codes on the view axis, so the block is view-permutation
    equivariant."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.view_norm = _norm(channels)
        self.view_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.component_norm = _norm(channels)
        self.component_attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, h: torch.Tensor, B: int, K: int, V: int) -> torch.Tensor:
        n, c, hh, ww = h.shape
        s = hh * ww
        x = self.view_norm(h).reshape(B, K, V, c, s).permute(0, 1, 2, 4, 3).reshape(B * K, V * s, c)
        a, _ = self.view_attn(x, x, x, need_weights=False)
        h = h + a.reshape(B, K, V, s, c).permute(0, 1, 2, 4, 3).reshape(n, c, hh, ww)
        x = self.component_norm(h).reshape(B, K, V, c, s).permute(0, 2, 4, 1, 3).reshape(B * V * s, K, c)
        a, _ = self.component_attn(x, x, x, need_weights=False)
        return h + a.reshape(B, V, s, K, c).permute(0, 3, 1, 4, 2).reshape(n, c, hh, ww)


def _task_indices(task: TaskArg) -> List[int]:
    items = [task] if isinstance(task, (Task, str)) else list(task)
    try:
        return [Task(t).index for t in items]
    except ValueError as exc:
        raise InvalidArgumentError(f"unknown task in {items!r}") from exc


class Denoiser(nn.Module):
    """mu_theta: input [B,K,V,2C,h,w] (noisy latent ++ condition latent), one
    timestep per scene, one task per component; output v-prediction [B,K,V,C,h,w]."""

    def __init__(self, cfg: ModelConfig, num_timesteps: int):
        super().__init__()
        C, w, temb = cfg.latent_channels, cfg.unet_width, cfg.time_embed_dim
        heads = cfg.attention_heads
        self.num_timesteps = num_timesteps
        self.latent_channels = C
        self.base_width = w
        self.forward_calls = 0
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.task_embedding = nn.Embedding(len(Task), temb)
        self.conv_in = nn.Conv2d(2 * C, w, 3, padding=1)
        self.down1 = ResBlock(w, w, temb)
        self.downsample1 = Downsample(w, w)
        self.down2 = ResBlock(w, 2 * w, temb)
        self.attn_down = MultiViewAttention(2 * w, heads)
        self.downsample2 = Downsample(2 * w, 2 * w)
        self.mid1 = ResBlock(2 * w, 2 * w, temb)
        self.attn_mid = MultiViewAttention(2 * w, heads)
        self.mid2 = ResBlock(2 * w, 2 * w, temb)
        self.upsample2 = Upsample(2 * w, 2 * w)
        self.up2 = ResBlock(4 * w, 2 * w, temb)
        self.attn_up = MultiViewAttention(2 * w, heads)
        self.upsample1 = Upsample(2 * w, w)
        self.up1 = ResBlock(2 * w, w, temb)
        self.out = nn.Sequential(_norm(w), nn.SiLU(), nn.Conv2d(w, C, 3, padding=1))

    def forward(self, x: torch.Tensor, timesteps: torch.Tensor, tasks: torch.Tensor) -> torch.Tensor:
        self.forward_calls += 1
        if x.ndim != 6 or x.shape[3] != 2 * self.latent_channels:
            raise InvalidArgumentError(f"denoiser input must be [B,K,V,{2 * self.latent_channels},h,w], got {tuple(x.shape)}")
        B, K, V = x.shape[:3]
        hw = x.shape[-2:]
        if hw[0] % 4 or hw[1] % 4:
            raise InvalidArgumentError(f"latent size {tuple(hw)} must be divisible by 4")
        temb = self.time_mlp(timestep_embedding(timesteps.reshape(B), self.base_width).to(x.dtype))
        temb = temb[:, None, :] + self.task_embedding(tasks.to(x.device))[None, :, :]
        temb = temb[:, :, None, :].expand(B, K, V, temb.shape[-1]).reshape(B * K * V, -1)

        h = self.conv_in(x.reshape(B * K * V, *x.shape[3:]))
        s1 = self.down1(h, temb)
        h = self.down2(self.downsample1(s1), temb)
        s2 = self.attn_down(h, B, K, V)
        h = self.mid1(self.downsample2(s2), temb)
        h = self.mid2(self.attn_mid(h, B, K, V), temb)
        h = self.up2(torch.cat((self.upsample2(h), s2), dim=1), temb)
        h = self.attn_up(h, B, K, V)
        h = self.up1(torch.cat((self.upsample1(h), s1), dim=1), temb)
        return self.out(h).reshape(B, K, V, self.latent_channels, *hw)

    def predict_v(self, z_t: torch.Tensor, z_c: torch.Tensor, t: Union[int, torch.Tensor], task: TaskArg) -> torch.Tensor:
        """v_hat for one scene. A single task takes [V,C,h,w] latents; a
        sequence of K tasks takes [K,V,C,h,w] (z_c may be shared [V,C,h,w])."""
        indices = _task_indices(task)
        single = isinstance(task, (Task, str))
        if single:
            z_t = z_t.unsqueeze(0)
        if z_c.ndim == z_t.ndim - 1:
            z_c = z_c.unsqueeze(0).expand_as(z_t)
        if z_t.shape != z_c.shape or z_t.ndim != 5 or z_t.shape[0] != len(indices):
            raise InvalidArgumentError(f"z_t {tuple(z_t.shape)} and z_c {tuple(z_c.shape)} do not align for tasks {indices}")
        if isinstance(t, int) and not 0 <= t <= self.num_timesteps:
            raise InvalidArgumentError(f"timestep {t} out of range [0, {self.num_timesteps}]")
        timesteps = torch.as_tensor([int(t)], device=z_t.device).long()
        x = torch.cat((z_t, z_c), dim=2).unsqueeze(0)
        v = self.forward(x, timesteps, torch.as_tensor(indices, device=z_t.device))[0]
        return v[0] if single else v


def denoise_vpred(denoiser: Denoiser, z_t: torch.Tensor, z_c: torch.Tensor, t: Union[int, torch.Tensor], task: TaskArg) -> torch.Tensor:
    return denoiser.predict_v(z_t, z_c, t, task)


# -----------------------------------------------------------------------------
# Bundle
# -----------------------------------------------------------------------------
@dataclass
class ModelBundle:
    model_config: ModelConfig
    schedule_config: ScheduleConfig
    autoencoder: Autoencoder
    denoiser: Denoiser
    din: DetailInjectionNetwork
    schedule: NoiseSchedule

    @classmethod
    def build(cls, model_config: ModelConfig, schedule_config: ScheduleConfig, seed: Optional[int] = None) -> "ModelBundle":
        if seed is not None:
            torch.manual_seed(seed)
        schedule = make_schedule(schedule_config.num_timesteps, schedule_config.base_kind,
                                 schedule_config.beta_start, schedule_config.beta_end)
        return cls(
            model_config=model_config,
            schedule_config=schedule_config,
            autoencoder=Autoencoder(model_config),
            denoiser=Denoiser(model_config, schedule.T),
            din=DetailInjectionNetwork(model_config),
            schedule=schedule,
        )

    def modules(self) -> Dict[str, nn.Module]:
        return {"autoencoder": self.autoencoder, "denoiser": self.denoiser, "din": self.din}

    def to(self, device: Union[str, torch.device]) -> "ModelBundle":
        for m in self.modules().values():
            m.to(device)
        return self

    @property
    def device(self) -> torch.device:
        return next(self.autoencoder.parameters()).device

    def train(self, mode: bool = True) -> "ModelBundle":
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    def set_trainable(self, *names: str) -> None:
        """Only the named modules keep requires_grad."""
        for name, module in self.modules().items():
            module.requires_grad_(name in names)

    def is_frozen(self, name: str) -> bool:
        return not any(p.requires_grad for p in self.modules()[name].parameters())

    def parameter_hashes(self) -> Dict[str, str]:
        return {name: parameter_hash(m.parameters()) for name, m in self.modules().items()}

    def state_dict(self) -> Dict[str, Dict[str, torch.Tensor]]:
        return {name: m.state_dict() for name, m in self.modules().items()}

    def load_state_dict(self, state: Dict[str, Dict[str, torch.Tensor]]) -> None:
        for name, m in self.modules().items():
            m.load_state_dict(state[name])

    def decode_with_din(self, latents: torch.Tensor, condition_images: torch.Tensor) -> torch.Tensor:
        return decode_with_din(self.autoencoder, self.din, latents, condition_images)
