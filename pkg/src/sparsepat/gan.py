"""Conditional adversarial training: losses, Adam, loop and checkpoints.

One step on a batch ``(x, y)``:

1. ``fake = G(x)``
2. discriminator update on ``D([x, y])`` vs ``D([x, fake])`` with ``fake``
   detached, so no generator parameter sees a gradient;
3. generator update on ``-log sigmoid(D([x, fake])) + lambda * |fake - y|``
   while only generator parameters are stepped.

Sample order is a pure function of ``(seed, step)`` so an interrupted run
resumes onto exactly the same trajectory.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .containers import ContainerError, read_checkpoint, write_checkpoint
from .models import (
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    PatchDiscriminator,
)

log = logging.getLogger(__name__)

SCORE_CLAMP = 30.0


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    lambda_l1: float = 100.0
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    checkpoint_interval: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.checkpoint_interval < 1:
            raise ValueError(f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")

    def total_steps(self, n_samples):
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * math.ceil(n_samples / self.batch_size)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """In-place bias-corrected Adam update of the arrays in ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: params, grads and moment buffers differ in length")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self):
        ad.zero_grads(self.params)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.cfg)


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean log sigmoid(real) - mean log(1 - sigmoid(fake)), via softplus."""
    if d_real.shape != d_fake.shape:
        raise ad.ShapeError(f"discriminator_loss: shape mismatch {d_real.shape} vs {d_fake.shape}")
    real = ad.clamp(d_real, -SCORE_CLAMP, SCORE_CLAMP)
    fake = ad.clamp(d_fake, -SCORE_CLAMP, SCORE_CLAMP)
    return ad.add(ad.mean(ad.softplus(ad.scale(real, -1.0))), ad.mean(ad.softplus(fake)))


def generator_loss(d_fake: Tensor, g_out: Tensor, target: Tensor, lam: float):
    """Non-saturating adversarial term plus ``lam`` times mean absolute error.

    Returns ``(total, adv, l1)`` as scalar tensors.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if g_out.shape != target.shape:
        raise ad.ShapeError(f"generator_loss: shape mismatch {g_out.shape} vs {target.shape}")
    fake = ad.clamp(d_fake, -SCORE_CLAMP, SCORE_CLAMP)
    adv = ad.mean(ad.softplus(ad.scale(fake, -1.0)))
    l1 = ad.mean(ad.abs_(ad.sub(g_out, target)))
    return ad.add(adv, ad.scale(l1, lam)), adv, l1


@dataclass
class StepReport:
    step: int
    d_loss: float
    g_adv_loss: float
    g_l1_loss: float
    g_total_loss: float

    def to_json(self):
        return json.dumps(asdict(self))


def sample_indices(step, n_samples, batch_size, seed):
    """Dataset indices for ``step`` (0-based): seeded per-epoch permutations."""
    out = []
    for j in range(batch_size):
        i = step * batch_size + j
        epoch, pos = divmod(i, n_samples)
        perm = np.random.default_rng([seed, epoch]).permutation(n_samples)
        out.append(int(perm[pos]))
    return out


@dataclass
class Trainer:
    gen: Generator
    disc: PatchDiscriminator
    cfg: TrainConfig
    step: int = 0
    update_discriminator: bool = True
    g_opt: Adam = field(init=False)
    d_opt: Adam = field(init=False)

    def __post_init__(self):
        if self.disc.cfg.in_channels != self.gen.cfg.in_channels + self.gen.cfg.out_channels:
            raise ValueError(
                "discriminator input channels must equal generator input + output channels"
            )
        self.g_opt = Adam(self.gen.parameters(), self.cfg)
        self.d_opt = Adam(self.disc.parameters(), self.cfg)

    def batch(self, pairs):
        idx = sample_indices(self.step, len(pairs), self.cfg.batch_size, self.cfg.seed)
        x = np.stack([pairs[i][0] for i in idx])[:, None].astype(np.float32)
        y = np.stack([pairs[i][1] for i in idx])[:, None].astype(np.float32)
        return x, y

    def train_step(self, x, y) -> StepReport:
        self.gen.train()
        xt, yt = Tensor(x), Tensor(y)
        if x.shape[1] != self.gen.cfg.in_channels or y.shape[1] != self.gen.cfg.out_channels:
            raise ad.ShapeError(
                f"sample channels {x.shape[1]}/{y.shape[1]} do not match generator "
                f"{self.gen.cfg.in_channels}/{self.gen.cfg.out_channels}"
            )
        fake = self.gen(xt)

        self.d_opt.zero_grad()
        d_real = self.disc(ad.concat([xt, yt]))
        d_fake = self.disc(ad.concat([xt, fake.detach()]))
        d_loss = discriminator_loss(d_real, d_fake)
        ad.backward(d_loss)
        if self.update_discriminator:
            self.d_opt.step()

        self.g_opt.zero_grad()
        total, adv, l1 = generator_loss(self.disc(ad.concat([xt, fake])), fake, yt, self.cfg.lambda_l1)
        ad.backward(total)
        self.g_opt.step()
        self.d_opt.zero_grad()

        report = StepReport(self.step, d_loss.item(), adv.item(), l1.item(), total.item())
        if not all(math.isfinite(v) for v in (report.d_loss, report.g_adv_loss, report.g_l1_loss)):
            raise TrainingError(f"non-finite loss at step {self.step}: {report}")
        self.step += 1
        return report

    def run(self, pairs, num_steps, log_path=None, checkpoint_dir=None, on_report=None):
        """Train until ``self.step == num_steps``; yields nothing, returns reports."""
        if not len(pairs):
            raise ValueError("training set is empty")
        reports = []
        logf = open(log_path, "a") if log_path else None
        try:
            while self.step < num_steps:
                x, y = self.batch(pairs)
                rep = self.train_step(x, y)
                reports.append(rep)
                if logf:
                    logf.write(rep.to_json() + "\n")
                    logf.flush()
                if on_report:
                    on_report(rep)
                if checkpoint_dir and (self.step % self.cfg.checkpoint_interval == 0 or self.step == num_steps):
                    self.save(Path(checkpoint_dir) / f"step_{self.step:07d}.ckpt")
        finally:
            if logf:
                logf.close()
        return reports

    def state_arrays(self):
        arrays = {}
        for prefix, model, opt in (("G", self.gen, self.g_opt), ("D", self.disc, self.d_opt)):
            names = [n for n, _ in model.named_parameters()]
            for name, p in model.named_parameters():
                arrays[f"{prefix}/{name}"] = p.data
            for name, b in model.named_buffers():
                arrays[f"{prefix}.buffer/{name}"] = b
            for name, m, v in zip(names, opt.state.m, opt.state.v):
                arrays[f"{prefix}.adam_m/{name}"] = m
                arrays[f"{prefix}.adam_v/{name}"] = v
        return arrays

    def header(self):
        return {
            "kind": "gan",
            "arch": self.gen.cfg.arch.value,
            "generator": self.gen.cfg.to_dict(),
            "discriminator": self.disc.cfg.to_dict(),
            "train": asdict(self.cfg),
            "step": self.step,
            "seed": self.cfg.seed,
            "adam_t": {"G": self.g_opt.state.t, "D": self.d_opt.state.t},
        }

    def save(self, path):
        write_checkpoint(path, self.header(), self.state_arrays())

    @classmethod
    def from_checkpoint(cls, path, cfg: TrainConfig | None = None):
        header, arrays = read_checkpoint(path)
        if header.get("kind") != "gan":
            raise ContainerError(f"{path}: not a training checkpoint")
        gcfg = GeneratorConfig(**header["generator"])
        dcfg = DiscriminatorConfig(**header["discriminator"])
        cfg = cfg or TrainConfig(**header["train"])
        trainer = cls(Generator(gcfg), PatchDiscriminator(dcfg), cfg)
        trainer.load_state(header, arrays, path)
        return trainer

    def load_state(self, header, arrays, path="<checkpoint>"):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ContainerError(
                f"{path}: checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})"
            )
        for name, dst in expected.items():
            src = arrays[name]
            if src.shape != dst.shape:
                raise ContainerError(f"{path}: {name} has shape {src.shape}, model expects {dst.shape}")
            dst[...] = src
        self.step = int(header["step"])
        self.g_opt.state.t = int(header["adam_t"]["G"])
        self.d_opt.state.t = int(header["adam_t"]["D"])


def train(gen, disc, pairs, cfg: TrainConfig, log_path=None, checkpoint_dir=None):
    """Train from scratch for ``cfg.total_steps`` steps; returns the StepReports."""
    trainer = Trainer(gen, disc, cfg)
    return trainer.run(pairs, cfg.total_steps(len(pairs)), log_path, checkpoint_dir)


def load_generator(path) -> Generator:
    """Generator (with running statistics) from a training or generator checkpoint."""
    header, arrays = read_checkpoint(path)
    if "generator" not in header:
        raise ContainerError(f"{path}: checkpoint has no generator config")
    gen = Generator(GeneratorConfig(**header["generator"]))
    targets = {f"G/{n}": p.data for n, p in gen.named_parameters()}
    targets.update({f"G.buffer/{n}": b for n, b in gen.named_buffers()})
    for name, dst in targets.items():
        if name not in arrays:
            raise ContainerError(f"{path}: missing record {name}")
        if arrays[name].shape != dst.shape:
            raise ContainerError(f"{path}: {name} shape {arrays[name].shape} != {dst.shape}")
        dst[...] = arrays[name]
    return gen


def predict(gen: Generator, image: np.ndarray) -> np.ndarray:
    """Run the generator on one (H, W) image in eval mode."""
    gen.eval()
    with ad.no_grad():
        out = gen(Tensor(image[None, None].astype(np.float32)))
    return out.data[0, 0]
