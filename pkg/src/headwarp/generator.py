"""Toy style-based generator/discriminator pair with feature taps.

The synthesis backbone uses weight-modulated convolutions (style scales the
conv kernels per input channel, followed by data-independent demodulation),
so the decode path above any tap is exactly translation-equivariant in the
interior. RGB skip summation starts at the warp tap resolution: taps at or
below it decode from the feature alone, while restarting above it re-adds
RGB contributions computed from the unedited style code. That reproduces
the characteristic failure modes of warping too low (loss of control) or
too high (ghosting) while keeping unedited round trips bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container

WEIGHTS_VERSION = "toy-gan-v1"

CHANNELS = {4: 64, 8: 64, 16: 48, 32: 32, 64: 16, 128: 8}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GanConfig:
    resolution: int = 128
    z_dim: int = 64
    w_dim: int = 64
    warp_tap_res: int = 0      # 0 -> resolution // 4
    iterations: int = 1200
    batch_size: int = 8
    lr: float = 2e-3
    lr_disc: float = 0.0       # 0 -> lr / 2
    r1_gamma: float = 10.0
    r1_every: int = 16
    instance_noise: float = 0.1
    # D/G updates are skipped outside this discriminator-accuracy band,
    # which keeps the toy game balanced instead of collapsing either way
    acc_band: tuple = (0.65, 0.9)
    seed: int = 0
    eval_samples: int = 256
    data_workers: int = 0      # >0 precomputes real batches in parallel

    def __post_init__(self):
        if self.warp_tap_res == 0:
            self.warp_tap_res = self.resolution // 4
        if self.lr_disc == 0.0:
            self.lr_disc = self.lr / 2
        if (self.resolution & (self.resolution - 1)
                or not 16 <= self.resolution <= 128):
            raise ValueError("resolution must be a power of two in [16, 128]")


def resolutions(cfg: GanConfig):
    res, out = 4, []
    while res <= cfg.resolution:
        out.append(res)
        res *= 2
    return out


def tap_index_for_res(res: int) -> int:
    return int(round(math.log2(res / 4)))


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """z -> w through a normalizing multi-layer perceptron."""

    def __init__(self, z_dim, w_dim, depth=3):
        super().__init__()
        layers = [PixelNorm()]
        d = z_dim
        for _ in range(depth):
            layers += [nn.Linear(d, w_dim), nn.LeakyReLU(0.2)]
            d = w_dim
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class ModulatedConv2d(nn.Module):
    """Conv whose kernel is scaled per input channel by a style vector."""

    def __init__(self, cin, cout, kernel, w_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(
            torch.randn(cout, cin, kernel, kernel) / math.sqrt(cin * kernel * kernel)
        )
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Linear(w_dim, cin)
        nn.init.normal_(self.affine.weight, std=0.5 / math.sqrt(w_dim))
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x, w):
        # scale the input per channel and demodulate the output; identical to
        # building per-sample kernels but uses one shared conv (fast on CPU)
        b, cin, h, wd = x.shape
        style = self.affine(w)
        out = F.conv2d(x * style.view(b, cin, 1, 1), self.weight, padding=self.padding)
        if self.demodulate:
            w2 = self.weight.pow(2).sum(dim=(2, 3))  # (cout, cin)
            denom = torch.rsqrt(style.pow(2) @ w2.T + 1e-8)
            out = out * denom.view(b, -1, 1, 1)
        return out + self.bias.view(1, -1, 1, 1)


def _up2(x):
    # nearest for feature maps (cheap); the conv after smooths it out
    return F.interpolate(x, scale_factor=2, mode="nearest")


def _up2_rgb(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class Synthesis(nn.Module):
    """Backbone with one tap per resolution and skip RGB from the warp tap up.

    Style rows: [conv4a, conv4b, conv8, ..., conv<out>, rgb] -- one row per
    modulated backbone conv plus a shared row for the RGB heads.
    """

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        self.res_list = resolutions(cfg)
        self.skip_start_res = cfg.warp_tap_res
        ch = {r: CHANNELS[r] for r in self.res_list}
        self.const = nn.Parameter(torch.randn(1, ch[4], 4, 4))
        self.conv4a = ModulatedConv2d(ch[4], ch[4], 3, cfg.w_dim)
        self.conv4b = ModulatedConv2d(ch[4], ch[4], 3, cfg.w_dim)
        self.convs = nn.ModuleList([
            ModulatedConv2d(ch[self.res_list[i - 1]], ch[r], 3, cfg.w_dim)
            for i, r in enumerate(self.res_list) if i > 0
        ])
        self.to_rgbs = nn.ModuleDict({
            str(r): ModulatedConv2d(ch[r], 3, 1, cfg.w_dim, demodulate=False)
            for r in self.res_list if r >= self.skip_start_res
        })
        # optional per-layer stochastic detail, disabled by default
        self.noise_strength = nn.Parameter(
            torch.zeros(len(self.res_list)), requires_grad=False
        )

    @property
    def num_styles(self):
        return len(self.res_list) + 2

    def _feature(self, i, prev, wplus, noise):
        if i == 0:
            x = self.const.expand(wplus.shape[0], -1, -1, -1)
            x = F.leaky_relu(self.conv4a(x, wplus[:, 0]), 0.2)
            x = F.leaky_relu(self.conv4b(x, wplus[:, 1]), 0.2)
        else:
            x = _up2(prev)
            x = F.leaky_relu(self.convs[i - 1](x, wplus[:, i + 1]), 0.2)
        if noise is not None:
            x = x + self.noise_strength[i] * noise[i]
        return x

    def forward(self, wplus, start=None, return_taps=False, noise=None):
        """Run synthesis, optionally restarting from (tap_index, feature)."""
        rgb_w = wplus[:, -1]
        start_i = -1 if start is None else start[0]
        start_res = None if start is None else self.res_list[start_i]
        taps = []
        skip = None
        x = None
        for i, res in enumerate(self.res_list):
            if i < start_i:
                if start_res <= self.skip_start_res:
                    continue
                x = self._feature(i, x, wplus, noise)
            elif i == start_i:
                x = start[1]
                if x.shape[-1] != res:
                    raise ValueError(
                        f"feature at tap {start_i} must be {res}x{res}, got {tuple(x.shape)}"
                    )
            else:
                x = self._feature(i, x, wplus, noise)
            if return_taps:
                taps.append(x)
            if res >= self.skip_start_res:
                rgb = self.to_rgbs[str(res)](x, rgb_w)
                skip = rgb if skip is None else _up2_rgb(skip) + rgb
        # gentle squash keeps the [-1,1] range contract without killing
        # gradients at the typical skip magnitude
        image = torch.tanh(0.25 * skip)
        return (image, taps) if return_taps else image


class Discriminator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        res_list = resolutions(cfg)
        ch = {r: CHANNELS[r] for r in res_list}
        self.from_rgb = nn.Conv2d(3, ch[cfg.resolution], 1)
        blocks = []
        for r in reversed(res_list[1:]):
            nxt = res_list[res_list.index(r) - 1]
            blocks.append(nn.Conv2d(ch[r], ch[nxt], 3, stride=2, padding=1))
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(ch[4], ch[4], 3, padding=1)
        self.out = nn.Linear(ch[4] * 16, 1)

    def forward(self, img):
        x = F.leaky_relu(self.from_rgb(img), 0.2)
        for blk in self.blocks:
            x = F.leaky_relu(blk(x), 0.2)
        x = F.leaky_relu(self.final(x), 0.2)
        return self.out(x.flatten(1)).squeeze(1)


@dataclass
class ToyGan:
    """Immutable-after-load bundle of mapping, synthesis and discriminator."""

    mapping: MappingNetwork
    synthesis: Synthesis
    disc: Discriminator
    config: GanConfig
    meta: dict = field(default_factory=dict)

    @property
    def warp_tap_index(self):
        return tap_index_for_res(self.config.warp_tap_res)

    @property
    def num_styles(self):
        return self.synthesis.num_styles

    def decode_rf_margin(self, tap_res=None) -> int:
        """Conservative output-pixel margin affected by conv/upsample borders."""
        tap_res = tap_res or self.config.warp_tap_res
        margin = 2
        for r in resolutions(self.config):
            if r > tap_res:
                margin += 2 * (self.config.resolution // r)
        return margin

    def eval_(self):
        self.mapping.eval()
        self.synthesis.eval()
        self.disc.eval()
        for p in (list(self.mapping.parameters()) + list(self.synthesis.parameters())
                  + list(self.disc.parameters())):
            p.requires_grad_(False)
        return self


@dataclass
class SynthesisTrace:
    image: torch.Tensor
    taps: list


def build_gan(cfg: GanConfig) -> ToyGan:
    torch.manual_seed(cfg.seed)
    return ToyGan(
        mapping=MappingNetwork(cfg.z_dim, cfg.w_dim),
        synthesis=Synthesis(cfg),
        disc=Discriminator(cfg),
        config=cfg,
        meta={"version": WEIGHTS_VERSION},
    )


def _style_batch(style, gan):
    w = torch.as_tensor(style, dtype=torch.float32)
    if w.dim() == 2:
        w = w.unsqueeze(0)
    if w.shape[-2] != gan.num_styles or w.shape[-1] != gan.config.w_dim:
        raise ValueError(
            f"style code must be ({gan.num_styles},{gan.config.w_dim}), got {tuple(w.shape[-2:])}"
        )
    return w


def map_latent(z, gan: ToyGan, per_layer: bool = False):
    """z -> style code with one row per modulated layer.

    With per_layer=False all rows are the same mapped vector; per_layer=True
    accepts (L, z_dim) input and maps each row independently.
    """
    z = torch.as_tensor(z, dtype=torch.float32)
    squeeze = z.dim() == (2 if per_layer else 1)
    if squeeze:
        z = z.unsqueeze(0)
    if not torch.isfinite(z).all():
        raise ValueError("latent must be finite")
    if per_layer:
        if z.shape[1] != gan.num_styles or z.shape[2] != gan.config.z_dim:
            raise ValueError("per-layer latent must be (L, z_dim)")
        w = gan.mapping(z.reshape(-1, z.shape[-1])).reshape(z.shape[0], z.shape[1], -1)
    else:
        if z.shape[-1] != gan.config.z_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {gan.config.z_dim}")
        w = gan.mapping(z).unsqueeze(1).expand(-1, gan.num_styles, -1)
    return w.squeeze(0) if squeeze else w


def synthesize(style, gan: ToyGan, grad: bool = False) -> SynthesisTrace:
    """Decode a style code, returning the image and every resolution tap."""
    w = _style_batch(style, gan)
    squeeze = torch.as_tensor(style).dim() == 2
    if grad:
        image, taps = gan.synthesis(w, return_taps=True)
    else:
        with torch.no_grad():
            image, taps = gan.synthesis(w, return_taps=True)
    if squeeze:
        return SynthesisTrace(image=image.squeeze(0), taps=[t.squeeze(0) for t in taps])
    return SynthesisTrace(image=image, taps=taps)


def synthesize_from_feature(feature, style, gan: ToyGan, tap_index=None,
                            grad: bool = False):
    """Decode from an edited tap feature; only layers above the tap run."""
    w = _style_batch(style, gan)
    f = feature if isinstance(feature, torch.Tensor) else torch.as_tensor(feature)
    squeeze = f.dim() == 3
    if squeeze:
        f = f.unsqueeze(0)
    res = f.shape[-1]
    if tap_index is None:
        tap_index = tap_index_for_res(res)
    res_list = resolutions(gan.config)
    if not (0 <= tap_index < len(res_list)) or res_list[tap_index] != res:
        raise ValueError(f"tap index {tap_index} invalid for feature of size {res}")
    if f.shape[0] != w.shape[0]:
        if f.shape[0] == 1:
            f = f.expand(w.shape[0], -1, -1, -1)
        elif w.shape[0] == 1:
            w = w.expand(f.shape[0], -1, -1)
    if grad:
        image = gan.synthesis(w, start=(tap_index, f))
    else:
        with torch.no_grad():
            image = gan.synthesis(w, start=(tap_index, f))
    return image.squeeze(0) if squeeze else image


# ---------------------------------------------------------------------------
# procedural training faces

FACE_LAYOUT = {
    # unit coordinates (x, y) and half-extents of the canonical face parts
    "eye_l": (0.37, 0.40, 0.075, 0.055),
    "eye_r": (0.63, 0.40, 0.075, 0.055),
    "mouth": (0.50, 0.70, 0.13, 0.07),
}


def _ellipse(xx, yy, cx, cy, rx, ry, softness=0.05):
    d = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2).sqrt()
    return torch.sigmoid((1.0 - d) / softness)


def sample_faces(n: int, gen: torch.Generator, resolution: int = 128):
    """Procedural face-like images in [-1, 1], deterministic under `gen`."""
    r = resolution
    ys = torch.linspace(0, 1, r)
    xs = torch.linspace(0, 1, r)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    yy = yy.expand(n, r, r)
    xx = xx.expand(n, r, r)

    def scal(lo, hi):
        return lo + (hi - lo) * torch.rand(n, 1, 1, generator=gen)

    def color(lo, hi):
        return lo + (hi - lo) * torch.rand(n, 3, 1, 1, generator=gen)

    # background: tilted two-color gradient plus a soft tinted blob
    bg_a, bg_b = color(0.1, 0.9), color(0.1, 0.9)
    gx, gy = scal(0.2, 1.0), scal(0.2, 1.0)
    mix = (gx * xx + gy * yy) / (gx + gy)
    img = bg_a + (bg_b - bg_a) * mix.unsqueeze(1)
    blob = _ellipse(xx, yy, scal(0.1, 0.9), scal(0.1, 0.9), 0.25, 0.25, softness=0.3)
    img = img + color(-0.15, 0.15) * blob.unsqueeze(1)

    cx = 0.5 + scal(-0.03, 0.03)
    cy = 0.52 + scal(-0.03, 0.03)
    head = _ellipse(xx, yy, cx, cy, scal(0.27, 0.32), scal(0.37, 0.42))
    skin = torch.cat([color(0.65, 0.9)[:, :1], color(0.45, 0.7)[:, :1],
                      color(0.35, 0.6)[:, :1]], dim=1)
    tex = 0.05 * torch.sin(2 * math.pi * (scal(2, 5) * xx + scal(2, 5) * yy)
                           + 2 * math.pi * scal(0, 1))
    img = img + (skin + tex.unsqueeze(1) - img) * head.unsqueeze(1)

    eye_dx = 0.13 + scal(-0.01, 0.01)
    eye_y = cy - 0.12
    blink = scal(0.55, 1.0)
    eye_col = scal(0.05, 0.25).unsqueeze(1).expand(n, 3, 1, 1)
    for sign in (-1.0, 1.0):
        m = _ellipse(xx, yy, cx + sign * eye_dx, eye_y, 0.055, 0.032 * blink)
        img = img + (eye_col - img) * m.unsqueeze(1)

    mouth_open = scal(0.5, 1.6)
    mcol = torch.cat([color(0.45, 0.7)[:, :1], color(0.1, 0.25)[:, :1],
                      color(0.1, 0.25)[:, :1]], dim=1)
    mm = _ellipse(xx, yy, cx, cy + 0.18, 0.10, 0.035 * mouth_open)
    img = img + (mcol - img) * mm.unsqueeze(1)

    return img.clamp(0, 1) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# training


def disc_accuracy(gan: ToyGan, gen: torch.Generator, n: int = 256) -> float:
    """Held-out real-vs-fake accuracy of the discriminator."""
    with torch.no_grad():
        hits = 0
        for start in range(0, n, 64):
            b = min(64, n - start)
            real = sample_faces(b, gen, gan.config.resolution)
            z = torch.randn(b, gan.config.z_dim, generator=gen)
            fake = gan.synthesis(map_latent(z, gan))
            hits += int((gan.disc(real) > 0).sum()) + int((gan.disc(fake) <= 0).sum())
    return hits / (2 * n)


def pretrain_toy_gan(config: GanConfig, faces_fn=None, log_every: int = 0) -> ToyGan:
    """Adversarially pretrain the toy pair on procedural face-like shapes."""
    faces_fn = faces_fn or sample_faces
    gan = build_gan(config)
    data_gen = torch.Generator().manual_seed(config.seed + 1)

    g_params = list(gan.mapping.parameters()) + list(gan.synthesis.parameters())
    opt_g = torch.optim.Adam(g_params, lr=config.lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(gan.disc.parameters(), lr=config.lr_disc, betas=(0.0, 0.99))

    # real batches come from per-iteration seeds so the opt-in parallel
    # pre-generation below cannot change results under a fixed seed
    def real_batch(i):
        g = torch.Generator().manual_seed(config.seed * 1_000_003 + i)
        return faces_fn(config.batch_size, g, config.resolution)

    real_bank = None
    if config.data_workers > 0:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.data_workers) as pool:
            real_bank = list(pool.map(real_batch, range(config.iterations)))

    b = config.batch_size
    acc_ema = 0.75
    lo, hi = config.acc_band
    for it in range(config.iterations):
        sigma = config.instance_noise * max(0.2, 1.0 - it / max(1, config.iterations))
        real = real_bank[it] if real_bank is not None else real_batch(it)
        z = torch.randn(b, config.z_dim, generator=data_gen)
        with torch.no_grad():
            fake = gan.synthesis(map_latent(z, gan))
        noise_r = sigma * torch.randn(real.shape, generator=data_gen)
        noise_f = sigma * torch.randn(fake.shape, generator=data_gen)

        need_r1 = config.r1_gamma > 0 and it % config.r1_every == 0
        real_in = (real + noise_r).requires_grad_(need_r1)
        d_real = gan.disc(real_in)
        d_fake = gan.disc(fake + noise_f)
        d_loss = F.softplus(d_fake).mean() + F.softplus(-d_real).mean()
        if need_r1:
            (grad,) = torch.autograd.grad(d_real.sum(), real_in, create_graph=True)
            d_loss = d_loss + 0.5 * config.r1_gamma * grad.pow(2).sum(dim=(1, 2, 3)).mean()

        batch_acc = 0.5 * (float((d_real > 0).float().mean())
                           + float((d_fake <= 0).float().mean()))
        acc_ema = 0.95 * acc_ema + 0.05 * batch_acc
        if acc_ema <= hi:
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

        z = torch.randn(b, config.z_dim, generator=data_gen)
        g_noise = sigma * torch.randn(fake.shape, generator=data_gen)
        g_loss = None
        if acc_ema >= lo:
            fake = gan.synthesis(map_latent(z, gan))
            g_loss = F.softplus(-gan.disc(fake + g_noise)).mean()
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()

        if not torch.isfinite(d_loss) or (g_loss is not None and not torch.isfinite(g_loss)):
            raise TrainingDiverged(
                f"non-finite GAN loss at iteration {it}:"
                f" d={float(d_loss)}, g={g_loss if g_loss is None else float(g_loss)}"
            )
        if log_every and it % log_every == 0:
            gl = float("nan") if g_loss is None else float(g_loss.detach())
            print(f"[gan] iter {it} d_loss {float(d_loss.detach()):.3f}"
                  f" g_loss {gl:.3f} acc_ema {acc_ema:.3f}")

    # balance finish: nudge D (or G) until held-out accuracy sits inside the
    # band, so the frozen discriminator handed downstream is neither blind
    # nor saturated
    def probe_acc():
        g = torch.Generator().manual_seed(config.seed + 424_242)
        return disc_accuracy(gan, g, 192)

    acc = probe_acc()
    lo_t, hi_t = 0.70, 0.92
    if config.iterations > 0:
        for extra in range(400):
            if lo_t <= acc <= hi_t:
                break
            real = real_batch(config.iterations + extra)
            z = torch.randn(b, config.z_dim, generator=data_gen)
            if acc < lo_t:
                with torch.no_grad():
                    fake = gan.synthesis(map_latent(z, gan))
                d_loss = (F.softplus(gan.disc(fake)).mean()
                          + F.softplus(-gan.disc(real)).mean())
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
            else:
                fake = gan.synthesis(map_latent(z, gan))
                g_loss = F.softplus(-gan.disc(fake)).mean()
                opt_g.zero_grad(set_to_none=True)
                g_loss.backward()
                opt_g.step()
            if extra % 5 == 4:
                acc = probe_acc()

    eval_gen = torch.Generator().manual_seed(config.seed + 99991)
    acc = disc_accuracy(gan, eval_gen, config.eval_samples)
    gan.meta.update({"version": WEIGHTS_VERSION, "disc_accuracy": acc,
                     "iterations": config.iterations})
    return gan.eval_()


# ---------------------------------------------------------------------------
# persistence


def save_weights(gan: ToyGan, path) -> None:
    tensors = {}
    for prefix, module in (
        ("mapping.", gan.mapping), ("synthesis.", gan.synthesis), ("disc.", gan.disc)
    ):
        for k, v in module.state_dict().items():
            tensors[prefix + k] = v
    container.write_meta(tensors, {
        "version": gan.meta.get("version", WEIGHTS_VERSION),
        "config": asdict(gan.config),
        "metrics": {k: v for k, v in gan.meta.items() if k != "version"},
    })
    container.write_tensors(path, tensors)


def load_weights(path) -> ToyGan:
    tensors, meta = container.load_state_dict(path)
    if meta.get("version") != WEIGHTS_VERSION:
        raise container.VersionError(
            f"weight version {meta.get('version')!r}, expected {WEIGHTS_VERSION!r}"
        )
    cfg = GanConfig(**meta["config"])
    gan = build_gan(cfg)
    for prefix, module in (
        ("mapping.", gan.mapping), ("synthesis.", gan.synthesis), ("disc.", gan.disc)
    ):
        state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(state, strict=True)
    gan.meta = {"version": WEIGHTS_VERSION, **meta.get("metrics", {})}
    return gan.eval_()
