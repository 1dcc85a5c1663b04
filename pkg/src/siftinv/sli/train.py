"""Two-stage adversarial training of the reconstruction model.

Stage 1 fits the structure network (G1 against D1) mapping feature maps
to LBP rasters.  Stage 2 chains G1 into the image network and optimizes
G1 + G2 against D2 end to end.  Batch size is fixed at 1; every source
of randomness derives from the single config seed, so identical
(seed, corpus, config) produce bit-identical checkpoints.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import InvalidInputError, InvalidParameterError
from ..featmap import build_binary_map, build_feature_map
from ..image import RgbImage, to_grayscale
from ..lbp import extract_lbp, lbp_to_image
from ..sift import SiftFeatures
from .. import autodiff as ad
from ..autodiff import Adam, Tape, Tensor, backward, no_grad
from .losses import (LossWeights, loss_perceptual, loss_ragan, loss_recon,
                     loss_style, stage1_generator_loss, stage2_generator_loss)
from .networks import Discriminator, Generator, NetworkSpec, PerceptNet

LOSS_CSV_HEADER = ("step", "stage", "loss_d", "loss_g", "loss_r", "loss_p",
                   "loss_s", "loss_adv")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    stage1_steps: int = 500
    stage2_steps: int = 1000
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    depth: int = 4
    base_channels: int = 32
    checkpoint_interval: int = 0  # 0 = final checkpoints only
    mode: str = "full"            # "full" (G1+G2) or "binary" (G2prime)
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in ("full", "binary"):
            raise InvalidParameterError(f"mode must be 'full' or 'binary', got {self.mode!r}")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise InvalidParameterError("step counts must be >= 0")


_CONFIG_KEYS = {
    "seed": int, "stage1_steps": int, "stage2_steps": int, "lr": float,
    "lambda_r": float, "lambda_p": float, "lambda_s": float, "lambda_g": float,
    "depth": int, "base_channels": int, "checkpoint_interval": int, "mode": str,
}


def parse_config_text(text: str) -> TrainConfig:
    """key=value lines; '#' starts a comment."""
    cfg = TrainConfig()
    lambdas = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameterError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise InvalidParameterError(f"config line {lineno}: unknown key {key!r}")
        parsed = _CONFIG_KEYS[key](value)
        if key.startswith("lambda_"):
            lambdas[key] = parsed
        else:
            cfg = replace(cfg, **{key: parsed})
    if lambdas:
        cfg = replace(cfg, weights=replace(cfg.weights, **lambdas))
    return cfg


def load_config(path: str | os.PathLike) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


@dataclass
class TrainResult:
    g1: Generator | None
    g2: Generator
    d1: Discriminator | None
    d2: Discriminator
    percept: PerceptNet
    loss_rows: list[tuple]


def image_tensor(img: RgbImage) -> Tensor:
    return Tensor(np.ascontiguousarray(np.transpose(img.data, (2, 0, 1))[None]))


def _corpus_tensors(corpus, cfg: TrainConfig):
    if not corpus:
        raise InvalidInputError("training corpus is empty")
    h, w = corpus[0][0].height, corpus[0][0].width
    div = 2 ** cfg.depth
    if h % div or w % div:
        raise InvalidInputError(f"corpus images must have dims divisible by {div}")
    samples = []
    for img, feats in corpus:
        if (img.height, img.width) != (h, w):
            raise InvalidInputError(
                f"shape-inconsistent corpus: {img.height}x{img.width} vs {h}x{w}")
        if (feats.height, feats.width) != (h, w):
            raise InvalidInputError("SiftFeatures dims do not match their image")
        if cfg.mode == "full":
            src = build_feature_map(feats)
            x = Tensor(np.ascontiguousarray(np.transpose(src.data, (2, 0, 1))[None]))
        else:
            src = build_binary_map(feats)
            x = Tensor(src.data[None, None].copy())
        lbp_img = lbp_to_image(extract_lbp(to_grayscale(img)))
        samples.append((x, Tensor(lbp_img.data[None, None].copy()), image_tensor(img)))
    return samples


class _Shuffler:
    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> int:
        if self.pos == self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i


def _save_nets(nets: dict[str, "Generator | Discriminator"], out_dir: str,
               tag: str = "") -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, net in nets.items():
        if net is None:
            continue
        fname = f"{name}{tag}.ckp"
        net.save(os.path.join(out_dir, fname))


def write_loss_csv(rows: list[tuple], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOSS_CSV_HEADER) + "\n")
        for row in rows:
            fh.write("{},{},{}\n".format(
                row[0], row[1], ",".join(f"{v:.8g}" for v in row[2:])))


def train(corpus: list[tuple[RgbImage, SiftFeatures]], cfg: TrainConfig) -> TrainResult:
    """Run the configured schedule and return the trained networks.

    corpus entries pair a ground-truth image with its extracted SIFT
    features; LBP targets are computed here from the grayscale channel.
    """
    samples = _corpus_tensors(corpus, cfg)
    seeds = [int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(6)]
    percept = PerceptNet(seeds[4])
    w = cfg.weights
    rows: list[tuple] = []

    def maybe_checkpoint(nets, step, stage):
        if cfg.out_dir and cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0:
            _save_nets(nets, cfg.out_dir, tag=f"_s{stage}_{step:06d}")

    if cfg.mode == "binary":
        g2 = Generator(NetworkSpec("G2prime", cfg.depth, cfg.base_channels), seeds[1])
        d2 = Discriminator(NetworkSpec("D2", cfg.depth, cfg.base_channels), seeds[3])
        nets = {"g2prime": g2, "d2": d2}
        _run_image_stage(samples, g2, None, d2, percept, w, cfg.lr, cfg.stage2_steps,
                         seeds[5], rows, maybe_checkpoint, nets)
        result = TrainResult(g1=None, g2=g2, d1=None, d2=d2, percept=percept,
                             loss_rows=rows)
    else:
        g1 = Generator(NetworkSpec("G1", cfg.depth, cfg.base_channels), seeds[0])
        g2 = Generator(NetworkSpec("G2", cfg.depth, cfg.base_channels), seeds[1])
        d1 = Discriminator(NetworkSpec("D1", cfg.depth, cfg.base_channels), seeds[2])
        d2 = Discriminator(NetworkSpec("D2", cfg.depth, cfg.base_channels), seeds[3])
        nets = {"g1": g1, "g2": g2, "d1": d1, "d2": d2}
        _run_lbp_stage(samples, g1, d1, percept, w, cfg.lr, cfg.stage1_steps,
                       seeds[5], rows, maybe_checkpoint, nets)
        _run_image_stage(samples, g2, g1, d2, percept, w, cfg.lr, cfg.stage2_steps,
                         seeds[5] + 1, rows, maybe_checkpoint, nets)
        result = TrainResult(g1=g1, g2=g2, d1=d1, d2=d2, percept=percept,
                             loss_rows=rows)

    if cfg.out_dir:
        _save_nets(nets, cfg.out_dir)
        write_loss_csv(rows, os.path.join(cfg.out_dir, "loss_log.csv"))
    return result


def _run_lbp_stage(samples, g1, d1, percept, w, lr, steps, shuffle_seed, rows,
                   maybe_checkpoint, nets):
    """Stage 1: optimize (G1, D1) on feature map -> ground-truth LBP."""
    opt_g = Adam(g1.parameters(), lr=lr)
    opt_d = Adam(d1.parameters(), lr=lr)
    sh = _Shuffler(len(samples), shuffle_seed)
    for step in range(1, steps + 1):
        x, lbp_gt, _ = samples[sh.next()]

        with no_grad():
            fake = g1(x)
        g1.zero_grad(); d1.zero_grad()
        with Tape():
            l_d, _ = loss_ragan(d1(lbp_gt), d1(fake.detach()))
            backward(l_d)
        opt_d.step()

        g1.zero_grad(); d1.zero_grad()
        with Tape():
            fake = g1(x)
            l_rec = loss_recon(fake, lbp_gt)
            l_perc = loss_perceptual(fake, lbp_gt, percept)
            _, l_adv = loss_ragan(d1(lbp_gt), d1(fake))
            total = stage1_generator_loss(l_rec, l_perc, l_adv, w)
            backward(total)
        opt_g.step()
        g1.step += 1
        d1.step += 1

        rows.append((step, 1, l_d.item(), total.item(), l_rec.item(),
                     l_perc.item(), 0.0, l_adv.item()))
        maybe_checkpoint(nets, step, 1)


def _run_image_stage(samples, g2, g1, d2, percept, w, lr, steps, shuffle_seed,
                     rows, maybe_checkpoint, nets):
    """Stage 2: optimize (G1+G2, D2) on feature map -> ground-truth image.

    With g1=None this trains G2prime directly from binary maps."""
    gen_params = g2.parameters() + (g1.parameters() if g1 is not None else [])
    opt_g = Adam(gen_params, lr=lr)
    opt_d = Adam(d2.parameters(), lr=lr)
    sh = _Shuffler(len(samples), shuffle_seed)

    def forward(x):
        if g1 is None:
            return g2(x)
        return g2(ad.concat([x, g1(x)], axis=1))

    def zero_all():
        g2.zero_grad(); d2.zero_grad()
        if g1 is not None:
            g1.zero_grad()

    for step in range(1, steps + 1):
        x, _, img_gt = samples[sh.next()]

        with no_grad():
            fake = forward(x)
        zero_all()
        with Tape():
            l_d, _ = loss_ragan(d2(img_gt), d2(fake.detach()))
            backward(l_d)
        opt_d.step()

        zero_all()
        with Tape():
            fake = forward(x)
            l_rec = loss_recon(fake, img_gt)
            l_perc = loss_perceptual(fake, img_gt, percept)
            l_sty = loss_style(fake, img_gt, percept)
            _, l_adv = loss_ragan(d2(img_gt), d2(fake))
            total = stage2_generator_loss(l_rec, l_perc, l_sty, l_adv, w)
            backward(total)
        opt_g.step()
        g2.step += 1
        d2.step += 1
        if g1 is not None:
            g1.step += 1

        rows.append((step, 2, l_d.item(), total.item(), l_rec.item(),
                     l_perc.item(), l_sty.item(), l_adv.item()))
        maybe_checkpoint(nets, step, 2)
