"""Noise-prediction diffusion model and the mask-guided Langevin sampler that
writes trigger features into a clean image."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoders import DualEncoder, encode_label
from .errors import BadRange, BadStep, EmptyDataset, NonConvergence, NonFiniteState, ShapeMismatch
from .numcore import cosine_similarity
from .saliency import SaliencyMask, fuse, mask_project

ENERGY_LIMIT = 1e3


@dataclass(frozen=True)
class NoiseSchedule:
    beta: Tensor  # float64, index t-1
    alpha_bar: Tensor

    @property
    def T(self) -> int:
        return int(self.beta.numel())

    def check_step(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise BadStep(f"step {t} outside [1, {self.T}]")

    def ab(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha_bar[int(t) - 1])


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas; alpha_bar_t is the running product of (1 - beta)."""
    if T < 1 or not (0 < beta_start <= beta_end < 1):
        raise BadRange(f"need T >= 1 and 0 < beta_start <= beta_end < 1, got {T}, {beta_start}, {beta_end}")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule(beta, torch.cumprod(1 - beta, 0))


def default_schedule(T: int = 50) -> NoiseSchedule:
    """The usual 1e-4..0.02 over 1000 steps, rescaled to ``T`` steps."""
    scale = 1000.0 / T
    return build_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def forward_diffuse(x0: Tensor, t: int, schedule: NoiseSchedule, z: Tensor) -> Tensor:
    ab = schedule.ab(t)
    return math.sqrt(ab) * x0 + math.sqrt(1 - ab) * z


# ---------------------------------------------------------------------------
# networks


def timestep_embedding(t: Tensor, dim: int, dtype=torch.float32) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _as_steps(t, batch: int) -> Tensor:
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t.expand(batch)
    return t


class ImageScoreNet(nn.Module):
    """Small two-level U-Net predicting the noise; t enters per channel."""

    def __init__(self, channels: int = 3, width: int = 32, temb: int = 32):
        super().__init__()
        self.channels, self.width, self.temb = channels, width, temb
        self.t_proj = nn.Linear(temb, temb)
        self.inc = nn.Conv2d(channels, width, 3, padding=1)
        self.inc2 = nn.Conv2d(width, width, 3, padding=1)
        self.down = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.mid = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.up = nn.Conv2d(3 * width, width, 3, padding=1)
        self.up2 = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        chans = (width, width, 2 * width, 2 * width, width, width)
        self.emb = nn.ModuleList([nn.Linear(temb, c) for c in (width, 2 * width, 2 * width, width)])
        # group norm lets the output scale like 1/sigma_t, which additive time
        # embeddings alone cannot express
        self.norms = nn.ModuleList([nn.GroupNorm(8, c) for c in chans])
        self.trained = False
        self.report: dict = {}

    @property
    def config(self) -> dict:
        return {"kind": "image_score_net", "channels": self.channels, "width": self.width,
                "temb": self.temb}

    @classmethod
    def from_config(cls, meta: dict) -> "ImageScoreNet":
        return cls(meta["channels"], meta["width"], meta["temb"])

    def forward(self, x: Tensor, t) -> Tensor:
        t = _as_steps(t, x.shape[0])
        e = F.silu(self.t_proj(timestep_embedding(t, self.temb, x.dtype)))
        b = [m(e)[:, :, None, None] for m in self.emb]
        n = self.norms
        h1 = F.silu(n[0](self.inc(x)) + b[0])
        h1 = F.silu(n[1](self.inc2(h1))) + h1
        h2 = F.silu(n[2](self.down(F.avg_pool2d(h1, 2))) + b[1])
        h3 = F.silu(n[3](self.mid(h2)) + b[2]) + h2
        u = F.interpolate(h3, scale_factor=2, mode="nearest")
        h4 = F.silu(n[4](self.up(torch.cat([u, h1], 1))) + b[3])
        h4 = F.silu(n[5](self.up2(h4))) + h4
        return self.out(h4)


class MLPScoreNet(nn.Module):
    """Noise predictor for low-dimensional vector data."""

    def __init__(self, dim: int = 1, hidden: int = 64, temb: int = 16):
        super().__init__()
        self.dim, self.hidden, self.temb = dim, hidden, temb
        self.net = nn.Sequential(
            nn.Linear(dim + temb, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, dim),
        )
        self.trained = False
        self.report: dict = {}

    @property
    def config(self) -> dict:
        return {"kind": "mlp_score_net", "dim": self.dim, "hidden": self.hidden, "temb": self.temb}

    def forward(self, x: Tensor, t) -> Tensor:
        t = _as_steps(t, x.shape[0])
        return self.net(torch.cat([x, timestep_embedding(t, self.temb, x.dtype)], 1))


# ---------------------------------------------------------------------------
# training


@dataclass
class ScoreTrainConfig:
    lr: float = 2e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    holdout: float = 0.1
    width: int = 32


def denoising_loss(net: nn.Module, x0: Tensor, schedule: NoiseSchedule,
                   gen: torch.Generator) -> Tensor:
    """Noise-regression loss at uniformly drawn steps."""
    shape = (-1, *([1] * (x0.dim() - 1)))
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
    z = torch.randn(x0.shape, generator=gen)
    ab = schedule.alpha_bar[t - 1].float().reshape(shape)
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * z
    return F.mse_loss(net(xt, t), z)


@torch.no_grad()
def heldout_loss(net: nn.Module, x0: Tensor, schedule: NoiseSchedule, seed: int = 12345,
                 repeats: int = 4) -> float:
    gen = torch.Generator().manual_seed(seed)
    return sum(float(denoising_loss(net, x0, schedule, gen)) for _ in range(repeats)) / repeats


def train_score(data: Tensor, schedule: NoiseSchedule, cfg: ScoreTrainConfig = ScoreTrainConfig(),
                net: nn.Module | None = None, require_convergence: bool = True) -> nn.Module:
    """Fit an epsilon-prediction network by noise regression.

    ``data`` is (N, C, H, W) images or (N, D) vectors; the default network
    is chosen from its rank.
    """
    if data.shape[0] == 0:
        raise EmptyDataset("no training data")
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    if net is None:
        net = ImageScoreNet(data.shape[1], cfg.width) if data.dim() == 4 else MLPScoreNet(data.shape[1])
    perm = torch.randperm(data.shape[0], generator=gen)
    n_test = max(1, int(round(cfg.holdout * data.shape[0])))
    test, train = data[perm[:n_test]], data[perm[n_test:]]
    if train.shape[0] == 0:
        train = test
    baseline = heldout_loss(net, test, schedule)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    total = cfg.epochs * math.ceil(train.shape[0] / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, total))
    net.train()
    for _ in range(cfg.epochs):
        order = torch.randperm(train.shape[0], generator=gen)
        for i in range(0, train.shape[0], cfg.batch_size):
            loss = denoising_loss(net, train[order[i:i + cfg.batch_size]], schedule, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    net.eval()
    final = heldout_loss(net, test, schedule)
    net.trained = cfg.epochs > 0
    net.report = {"baseline_loss": baseline, "heldout_loss": final}
    if net.trained and require_convergence and final > 0.5 * baseline:
        raise NonConvergence(f"held-out loss {final:.4f} not below half of baseline {baseline:.4f}")
    return net


# ---------------------------------------------------------------------------
# score, denoiser and guidance


def _eps(net: nn.Module, x_t: Tensor, t: int) -> Tensor:
    batched = x_t.dim() == 4 or (x_t.dim() == 2 and not isinstance(net, ImageScoreNet))
    xb = x_t if batched else x_t.unsqueeze(0)
    out = net(xb, t)
    return out if batched else out[0]


def denoise_estimate(net: nn.Module, x_t: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """x~_t = (x_t - sqrt(1 - ab) eps) / sqrt(ab)."""
    ab = schedule.ab(t)
    return (x_t - math.sqrt(1 - ab) * _eps(net, x_t, t)) / math.sqrt(ab)


def base_score(net: nn.Module, x_t: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    ab = schedule.ab(t)
    return -_eps(net, x_t, t) / math.sqrt(1 - ab)


def guidance_grads(enc: DualEncoder, net: nn.Module, x_t: Tensor, t: int, schedule: NoiseSchedule,
                   x_trig: Tensor, y_trig, exact: bool = True, need=(True, True)):
    """Gradients w.r.t. x_t of the image and label cosine similarities of the
    current denoised estimate.

    With ``exact`` the noise prediction is differentiated too; otherwise it is
    held constant and only the 1/sqrt(ab) rescaling is propagated.
    ``x_t`` may be one image or a batch; in the batched case ``x_trig`` and
    ``y_trig`` are per-image. Returns ``(g_image, g_text)``; entries not
    requested in ``need`` are None.
    """
    if x_t.shape != x_trig.shape:
        raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs x_trig {tuple(x_trig.shape)}")
    schedule.check_step(t)
    ab = schedule.ab(t)
    batched = x_t.dim() == 4
    xb_trig = x_trig if batched else x_trig.unsqueeze(0)
    with torch.no_grad():
        trig_feat = enc.image_features(xb_trig)
        label_feat = encode_label(enc, y_trig)
        if label_feat.dim() == 1:
            label_feat = label_feat.expand_as(trig_feat)
    with torch.enable_grad():
        x = (x_t if batched else x_t.unsqueeze(0)).detach().clone().requires_grad_(True)
        eps = _eps(net, x, t)
        if not exact:
            eps = eps.detach()
        x_tilde = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        feat = enc.image_features(x_tilde)
        out = []
        targets = (trig_feat, label_feat)
        for k in range(2):
            if not need[k]:
                out.append(None)
                continue
            # images are independent, so the gradient of the sum is per-image
            sim = cosine_similarity(feat, targets[k]).sum()
            last = k == 1 or not need[1]
            (g,) = torch.autograd.grad(sim, x, retain_graph=not last)
            out.append(g.detach() if batched else g.detach()[0])
    return out[0], out[1]


def guided_score(base: Tensor, g_image, g_text, mask: SaliencyMask | Tensor,
                 lambda_image: float, lambda_text: float) -> Tensor:
    """s' = s + lambda_I * P_M[g_I] + lambda_T * P_M[g_T]."""
    out = base
    for lam, g in ((lambda_image, g_image), (lambda_text, g_text)):
        if lam == 0 or g is None:
            continue
        if g.shape != base.shape:
            raise ShapeMismatch(f"gradient {tuple(g.shape)} vs score {tuple(base.shape)}")
        out = out + lam * mask_project(g, mask)
    return out


def reverse_step(x_t: Tensor, score: Tensor, gamma: float, z: Tensor) -> Tensor:
    if not gamma > 0:
        raise BadStep(f"step size must be positive, got {gamma}")
    return x_t + gamma * score + math.sqrt(2 * gamma) * z


# ---------------------------------------------------------------------------
# sampler


@dataclass
class SamplerConfig:
    lambda_image: float = 5.0
    lambda_text: float = 2.0
    gamma_scale: float = 0.5
    gammas: list[float] | None = None
    init: str = "forward_from_clean"
    t_star: int | None = None
    t_star_fraction: float = 0.6
    seed: int = 0
    exact_grad: bool = True
    steps_per_level: int = 4
    final: str = "denoised"
    record_states: bool = False

    def __post_init__(self):
        if self.init not in ("pure_noise", "forward_from_clean"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.lambda_image < 0 or self.lambda_text < 0:
            raise ValueError("guidance weights must be non-negative")
        if self.final not in ("state", "denoised"):
            raise ValueError(f"unknown final estimate {self.final!r}")
        if self.steps_per_level < 1:
            raise ValueError("steps_per_level must be at least 1")

    def step_sizes(self, schedule: NoiseSchedule) -> list[float]:
        if self.gammas is not None:
            if len(self.gammas) != schedule.T or any(g <= 0 for g in self.gammas):
                raise BadStep("need T positive step sizes")
            return list(self.gammas)
        return [self.gamma_scale * (1 - float(a)) for a in schedule.alpha_bar]

    def start_step(self, schedule: NoiseSchedule) -> int:
        if self.init == "pure_noise":
            return schedule.T
        t = self.t_star if self.t_star is not None else round(self.t_star_fraction * schedule.T)
        t = int(t)
        schedule.check_step(t)
        return t


@dataclass
class TrajectoryLog:
    steps: list[dict] = field(default_factory=list)
    states: list[Tensor] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"steps": self.steps}


def _norm(x) -> float:
    return 0.0 if x is None else float(torch.linalg.vector_norm(x))


def _noise_source(x0: Tensor, generator):
    """Return a function drawing standard normal noise shaped like ``x0``.

    A list of generators gives every image of a batch its own stream, so the
    result for one image does not depend on what else is in the batch.
    """
    if isinstance(generator, (list, tuple)):
        if x0.dim() != 4 or len(generator) != x0.shape[0]:
            raise ShapeMismatch(f"{len(generator)} generators for batch {tuple(x0.shape)}")
        gens = list(generator)
        return lambda: torch.stack([torch.randn(x0.shape[1:], generator=g) for g in gens])
    return lambda: torch.randn(x0.shape, generator=generator)


def _run_sampler(x0: Tensor, mask, net, schedule: NoiseSchedule, cfg: SamplerConfig,
                 guide=None, generator=None):
    gen = generator if generator is not None else torch.Generator().manual_seed(cfg.seed)
    draw = _noise_source(x0, gen)
    gammas = cfg.step_sizes(schedule)
    start = cfg.start_step(schedule)
    noise = draw()
    x = noise if cfg.init == "pure_noise" else forward_diffuse(x0, start, schedule, noise)
    log = TrajectoryLog()
    x_tilde = x
    for t in range(start, 0, -1):
        ab = schedule.ab(t)
        # several Langevin moves per noise level; one move lags the schedule badly
        for _ in range(cfg.steps_per_level):
            with torch.no_grad():
                eps = _eps(net, x, t)
                x_tilde = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
                s = -eps / math.sqrt(1 - ab)
            g_i = g_t = None
            if guide is not None:
                g_i, g_t = guide(x, t)
                s = guided_score(s, g_i, g_t, mask, cfg.lambda_image, cfg.lambda_text)
            x = reverse_step(x, s, gammas[t - 1], draw())
            if not bool(torch.isfinite(x).all()) or float(x.abs().max()) >= ENERGY_LIMIT:
                raise NonFiniteState(f"sampler state blew up at step {t}; reduce step sizes or guidance")
        log.steps.append({"t": t, "x_norm": _norm(x), "x_tilde_norm": _norm(x_tilde),
                          "g_image_norm": _norm(g_i), "g_text_norm": _norm(g_t)})
        if cfg.record_states:
            log.states.append(x.clone())
    if cfg.final == "state":
        # the denoised estimate at t = 0 is the state itself (alpha_bar_0 = 1)
        return x, log
    # x~ from the last executed step, i.e. before its final update
    return x_tilde, log


def sample_unguided(x0: Tensor, mask, net, schedule: NoiseSchedule, cfg: SamplerConfig,
                    generator=None):
    """Masked reconstruction without any guidance term."""
    x_hat, log = _run_sampler(x0, mask, net, schedule, cfg, None, generator)
    return fuse(x0, x_hat.clamp(0, 1), mask), log


def generate_poison(x0: Tensor, x_trig: Tensor, y_trig, mask, net: nn.Module,
                    enc: DualEncoder, schedule: NoiseSchedule, cfg: SamplerConfig = SamplerConfig(),
                    generator=None):
    """Guided reverse diffusion followed by masked fusion with ``x0``.

    Returns ``(x_poison, TrajectoryLog)``. Pixels outside ``mask`` are copied
    from ``x0`` unchanged. ``x0`` may be a batch, with per-image masks,
    triggered images and labels, and optionally one generator per image.
    """
    if x0.shape != x_trig.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs x_trig {tuple(x_trig.shape)}")
    mask_t = mask.mask if isinstance(mask, SaliencyMask) else mask
    if not bool(mask_t.any()):
        # nothing to edit; skip the sampler entirely
        return x0.clone(), TrajectoryLog()
    need = (cfg.lambda_image != 0, cfg.lambda_text != 0)

    def guide(x, t):
        return guidance_grads(enc, net, x, t, schedule, x_trig, y_trig, cfg.exact_grad, need)
    x_hat, log = _run_sampler(x0, mask, net, schedule, cfg, guide if any(need) else None, generator)
    return fuse(x0, x_hat.clamp(0, 1), mask), log
