"""The pretreatment stage: conditional generator/discriminator, adversarial
training for the three variants, and inference that turns a raw image into a
background-free, brightness-calibrated one.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augment import augment_for_aop
from .config import (
    AOPVariant,
    AugmentationRecipe,
    DiscriminatorSpec,
    GeneratorSpec,
    SSIMConfig,
    TrainConfigAOP,
    variant_from_name,
)
from .data import SegmentationPair, center_crop_square, resize_image, validate_image
from .metrics import adversarial_losses, mae_loss, ssim_loss

log = logging.getLogger(__name__)

CHANNEL_CAP = 512
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; diagnostic state was dumped to `dump_path`."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


def _stage_channels(base: int, depth: int) -> list[int]:
    return [min(base * 2**i, CHANNEL_CAP) for i in range(depth)]


def _init_gan_weights(module: nn.Module, gen: torch.Generator) -> None:
    # N(0, 0.02) init, the usual convention for this family of models
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.normal_(1.0, 0.02, generator=gen)
            m.bias.data.zero_()


class UnetGenerator(nn.Module):
    """Stride-2 conv encoder, resize-convolution decoder (nearest x2 upsample
    then 3x3 conv, avoiding checkerboard patterns), U-net skip concatenations.

    Output passes through a sigmoid, so both rgb and probability-map modes
    land in (0, 1). Input spatial dims must be divisible by 2**depth.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        chans = _stage_channels(spec.base_channels, spec.depth)

        self.enc_convs = nn.ModuleList()
        self.enc_norms = nn.ModuleList()
        cin = 3
        for i, cout in enumerate(chans):
            self.enc_convs.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            use_norm = 0 < i < spec.depth - 1
            self.enc_norms.append(nn.BatchNorm2d(cout) if use_norm else nn.Identity())
            cin = cout

        self.dec_convs = nn.ModuleList()
        self.dec_norms = nn.ModuleList()
        cin = chans[-1]
        for j in range(spec.depth - 1):
            cout = chans[spec.depth - 2 - j]
            self.dec_convs.append(nn.Conv2d(cin, cout, 3, padding=1))
            self.dec_norms.append(nn.BatchNorm2d(cout))
            cin = cout * 2  # skip concat
        self.final_conv = nn.Conv2d(cin, spec.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        factor = 2**self.spec.depth
        if h % factor or w % factor:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^depth = {factor}"
            )
        skips = []
        out = x
        for i, (conv, norm) in enumerate(zip(self.enc_convs, self.enc_norms)):
            if i > 0:
                out = nn.functional.leaky_relu(out, 0.2)
            out = norm(conv(out))
            skips.append(out)
        for j, (conv, norm) in enumerate(zip(self.dec_convs, self.dec_norms)):
            out = nn.functional.relu(out)
            out = nn.functional.interpolate(out, scale_factor=2, mode="nearest")
            out = norm(conv(out))
            out = torch.cat([out, skips[self.spec.depth - 2 - j]], dim=1)
        out = nn.functional.relu(out)
        out = nn.functional.interpolate(out, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.final_conv(out))


class PatchDiscriminator(nn.Module):
    """Patch-level discriminator over the concatenated (input, candidate)
    pair; emits a grid of probabilities in (0, 1)."""

    def __init__(self, spec: DiscriminatorSpec, candidate_channels: int):
        super().__init__()
        self.spec = spec
        self.in_channels = 3 + candidate_channels
        n_stride2 = spec.depth - 2
        chans = _stage_channels(spec.base_channels, spec.depth - 1)
        layers_cin = self.in_channels
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(spec.depth - 1):
            stride = 2 if i < n_stride2 else 1
            self.convs.append(nn.Conv2d(layers_cin, chans[i], 4, stride=stride, padding=1))
            self.norms.append(nn.BatchNorm2d(chans[i]) if i > 0 else nn.Identity())
            layers_cin = chans[i]
        self.final_conv = nn.Conv2d(layers_cin, 1, 4, stride=1, padding=1)

    def forward(self, inp: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        x = torch.cat([inp, candidate], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} concatenated channels, got {x.shape[1]}"
            )
        for conv, norm in zip(self.convs, self.norms):
            x = nn.functional.leaky_relu(norm(conv(x)), 0.2)
        return torch.sigmoid(self.final_conv(x))

    def patch_grid_size(self, input_hw: int) -> int:
        """Spatial side of the output patch grid for a square input."""
        s = input_hw
        for i in range(self.spec.depth - 1):
            stride = 2 if i < self.spec.depth - 2 else 1
            s = (s + 2 * 1 - 4) // stride + 1
        return (s + 2 * 1 - 4) // 1 + 1


def build_generator(spec: GeneratorSpec, init_seed: int = 0) -> UnetGenerator:
    net = UnetGenerator(spec)
    gen = torch.Generator().manual_seed(init_seed)
    _init_gan_weights(net, gen)
    return net


def build_discriminator(
    spec: DiscriminatorSpec, candidate_channels: int = 3, init_seed: int = 0
) -> PatchDiscriminator:
    net = PatchDiscriminator(spec, candidate_channels)
    gen = torch.Generator().manual_seed(init_seed)
    _init_gan_weights(net, gen)
    return net


def threshold_mask(prob: np.ndarray, t: float) -> np.ndarray:
    """Binary mask, 1 where prob >= t (inclusive)."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {t}")
    prob = np.asarray(prob)
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("probability map values outside [0,1]")
    return (prob >= t).astype(np.float32)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pixelwise product; background exactly zero."""
    if img.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: {img.shape[:2]} vs {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask is not binary")
    if img.ndim == 3:
        return img * mask[:, :, None]
    return img * mask


def _pairs_to_batch(
    pairs: list[SegmentationPair],
    variant: AOPVariant,
    recipe: AugmentationRecipe | None,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    inputs, targets = [], []
    for pair in pairs:
        if recipe is None:
            inp = pair.image
            if variant.output_mode == "probability_map":
                tgt = pair.mask
            else:
                tgt = pair.image * pair.mask[:, :, None]
        else:
            inp, tgt = augment_for_aop(pair, recipe, variant, rng)
        inputs.append(inp)
        targets.append(tgt)
    x = torch.from_numpy(np.stack(inputs).astype(np.float32)).permute(0, 3, 1, 2)
    t = np.stack(targets).astype(np.float32)
    if t.ndim == 3:  # masks
        y = torch.from_numpy(t)[:, None]
    else:
        y = torch.from_numpy(t).permute(0, 3, 1, 2)
    return x, y


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint file {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or "version" not in ckpt:
        raise ValueError(f"{path} is not a recognized checkpoint container")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {ckpt['version']} is newer than supported {CHECKPOINT_VERSION}"
        )
    return ckpt


def _dump_divergence(out_dir: str | Path | None, state: dict) -> str | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / "divergence_dump.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return str(path)


def train_aop(
    train_pairs: list[SegmentationPair],
    variant: AOPVariant | str,
    cfg: TrainConfigAOP,
    *,
    gen_spec: GeneratorSpec | None = None,
    disc_spec: DiscriminatorSpec | None = None,
    recipe: AugmentationRecipe | None = None,
    ssim_cfg: SSIMConfig | None = None,
    device: str = "cpu",
    init_seed: int = 0,
    augment_seed: int = 0,
    shuffle_seed: int = 0,
    out_dir: str | Path | None = None,
    resume_from: dict | None = None,
    config_hash: str = "",
    max_steps: int | None = None,
    log_every: int = 1,
) -> dict:
    """Adversarial training loop: alternating discriminator/generator updates
    per minibatch. Returns the final checkpoint dict.

    `recipe=None` disables augmentation (raw pairs each step). `max_steps`
    caps total generator updates (sanity/overfit runs).
    """
    if not train_pairs:
        raise ValueError("no training pairs")
    if isinstance(variant, str):
        variant = variant_from_name(variant)
    gen_spec = gen_spec or GeneratorSpec()
    gen_spec = dataclasses.replace(gen_spec, output_mode=variant.output_mode)
    disc_spec = disc_spec or DiscriminatorSpec()
    ssim_cfg = ssim_cfg or SSIMConfig()
    dev = torch.device(device)

    generator = build_generator(gen_spec, init_seed).to(dev)
    discriminator = build_discriminator(disc_spec, gen_spec.out_channels, init_seed + 1).to(dev)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))

    start_epoch = 0
    if resume_from is not None:
        if resume_from.get("kind") != "aop" or resume_from.get("variant") != variant.name:
            raise ValueError("resume checkpoint kind/variant mismatch")
        generator.load_state_dict(resume_from["generator_state"])
        discriminator.load_state_dict(resume_from["discriminator_state"])
        opt_g.load_state_dict(resume_from["opt_g_state"])
        opt_d.load_state_dict(resume_from["opt_d_state"])
        start_epoch = resume_from["epoch"]

    rng_aug = np.random.default_rng([augment_seed, start_epoch])
    rng_shuffle = np.random.default_rng([shuffle_seed, start_epoch])

    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"aop_{variant.name}_loss.csv"
        if start_epoch == 0 or not csv_path.exists():
            with open(csv_path, "w", newline="") as fh:
                fh.write(f"# config_hash={config_hash}\n")
                csv.writer(fh).writerow(["epoch", "d_loss", "g_adv", "content_loss"])

    def content_fn(pred, target):
        if variant.content_loss == "ssim":
            return ssim_loss(pred, target, ssim_cfg)
        return mae_loss(pred, target)

    n = len(train_pairs)
    steps_done = 0
    epoch = start_epoch
    means = np.zeros(3)
    generator.train()
    discriminator.train()
    t0 = time.time()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng_shuffle.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x, y = _pairs_to_batch([train_pairs[i] for i in idx], variant, recipe, rng_aug)
            x, y = x.to(dev), y.to(dev)

            # discriminator update
            opt_d.zero_grad(set_to_none=True)
            with torch.no_grad():
                fake = generator(x)
            d_real = discriminator(x, y)
            d_fake = discriminator(x, fake)
            _, d_loss = adversarial_losses(d_real, d_fake)
            d_loss.backward()
            opt_d.step()

            # generator update
            opt_g.zero_grad(set_to_none=True)
            fake = generator(x)
            g_adv, _ = adversarial_losses(d_real.detach(), discriminator(x, fake))
            content = content_fn(fake, y)
            g_total = g_adv + cfg.content_weight * content
            g_total.backward()
            opt_g.step()

            vals = (float(d_loss), float(g_adv), float(content))
            if not all(np.isfinite(v) for v in vals):
                dump = _dump_divergence(
                    out_dir,
                    {
                        "epoch": epoch,
                        "losses": {"d_loss": vals[0], "g_adv": vals[1], "content": vals[2]},
                        "generator_state": generator.state_dict(),
                        "discriminator_state": discriminator.state_dict(),
                    },
                )
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (d={vals[0]}, g_adv={vals[1]}, "
                    f"content={vals[2]})",
                    dump,
                )
            sums += vals
            batches += 1
            steps_done += 1
            if max_steps is not None and steps_done >= max_steps:
                break

        means = sums / max(batches, 1)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, f"{means[0]:.6f}", f"{means[1]:.6f}", f"{means[2]:.6f}"])
        if epoch % log_every == 0:
            log.info(
                "aop[%s] epoch %d/%d d=%.4f g_adv=%.4f content=%.4f (%.1fs)",
                variant.name, epoch, cfg.epochs, means[0], means[1], means[2], time.time() - t0,
            )
        if max_steps is not None and steps_done >= max_steps:
            break

    return {
        "version": CHECKPOINT_VERSION,
        "kind": "aop",
        "variant": variant.name,
        "epoch": epoch,
        "config_hash": config_hash,
        "generator_spec": dataclasses.asdict(gen_spec),
        "discriminator_spec": dataclasses.asdict(disc_spec),
        "generator_state": generator.state_dict(),
        "discriminator_state": discriminator.state_dict(),
        "opt_g_state": opt_g.state_dict(),
        "opt_d_state": opt_d.state_dict(),
        "last_losses": {"d_loss": means[0], "g_adv": means[1], "content_loss": means[2]},
    }


def load_generator(ckpt: dict, device: str = "cpu") -> tuple[UnetGenerator, AOPVariant]:
    if ckpt.get("kind") != "aop":
        raise ValueError("not a pretreatment checkpoint")
    spec = GeneratorSpec(**ckpt["generator_spec"])
    net = UnetGenerator(spec).to(torch.device(device))
    net.load_state_dict(ckpt["generator_state"])
    net.eval()
    return net, variant_from_name(ckpt["variant"])


class Pretreater:
    """Inference wrapper: raw image -> background-free, brightness-calibrated
    image at the classifier's input size. Immutable after construction; safe
    for concurrent calls."""

    def __init__(self, ckpt: dict, work_size: int, out_size: int, device: str = "cpu"):
        self.generator, self.variant = load_generator(ckpt, device)
        factor = 2 ** self.generator.spec.depth
        if work_size % factor:
            raise ValueError(f"work_size {work_size} not divisible by 2^depth = {factor}")
        self.work_size = work_size
        self.out_size = out_size
        self.device = torch.device(device)

    @property
    def variant_name(self) -> str:
        return self.variant.name

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return self.batch([img])[0]

    def batch(self, images: list[np.ndarray], chunk: int = 32) -> list[np.ndarray]:
        prepared = []
        for img in images:
            validate_image(img)
            s = center_crop_square(img)
            prepared.append(resize_image(s, self.work_size, self.work_size))
        outs: list[np.ndarray] = []
        with torch.no_grad():
            for lo in range(0, len(prepared), chunk):
                block = prepared[lo : lo + chunk]
                x = torch.from_numpy(np.stack(block).astype(np.float32)).permute(0, 3, 1, 2)
                y = self.generator(x.to(self.device)).cpu().numpy()
                for src, out in zip(block, y):
                    if self.variant.output_mode == "probability_map":
                        mask = threshold_mask(out[0], self.variant.mask_threshold)
                        res = apply_mask(src, mask)
                    else:
                        res = np.transpose(out, (1, 2, 0))
                    outs.append(resize_image(res, self.out_size, self.out_size))
        return outs


def pretreat(
    img: np.ndarray,
    ckpt: dict,
    *,
    work_size: int = 256,
    out_size: int = 224,
    variant: str | None = None,
    device: str = "cpu",
) -> np.ndarray:
    """One-shot pretreatment of a single image (see Pretreater for batches)."""
    if variant is not None and ckpt.get("variant") != variant:
        raise ValueError(
            f"checkpoint holds variant {ckpt.get('variant')!r}, caller expected {variant!r}"
        )
    return Pretreater(ckpt, work_size, out_size, device)(img)
