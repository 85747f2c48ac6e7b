"""Cycle-consistent adversarial training with deterministic resume.

One step updates both discriminators on real/fake pairs, then both
generators on the combined adversarial + cycle objective.  Batch
selection is a pure function of (seed, step index), so a run resumed
from a checkpoint at step k reproduces the uninterrupted run's batches,
losses, and final weights exactly.  Checkpoints are written atomically
and carry the network specs, all four optimizer states, and the
fingerprints of the config and the positive slices they were fit to.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .losses import (
    LossBundle,
    LossError,
    adversarial_loss,
    bundle_from_parts,
    cycle_loss,
)
from .manifest import DatasetManifest, manifest_fingerprint
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    state_checksum,
)
from .pipeline import DataPipelineConfig, load_stack

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Bad training inputs or a diverged run."""


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


class CheckpointError(RuntimeError):
    """Unreadable, incompatible, or mismatched checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 2
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    cycle_weight: float = 10.0
    seed: int = 0
    checkpoint_interval: int = 100

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise TrainingError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        # zero is allowed so a no-op step can be used as a diagnostic
        if self.learning_rate < 0:
            raise TrainingError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for beta in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= beta < 1.0:
                raise TrainingError(f"adam betas must be in [0, 1), got {beta}")
        if self.cycle_weight < 0:
            raise TrainingError(f"cycle_weight must be >= 0, got {self.cycle_weight}")
        if self.checkpoint_interval < 1:
            raise TrainingError("checkpoint_interval must be >= 1")


class CycleGanModel:
    """The four networks plus their optimizers and a step counter."""

    def __init__(
        self,
        g: torch.nn.Module,
        f: torch.nn.Module,
        d_x: torch.nn.Module,
        d_y: torch.nn.Module,
        gen_spec: GeneratorSpec,
        disc_spec: DiscriminatorSpec,
        optimizers: dict[str, torch.optim.Adam],
        step: int = 0,
    ):
        self.g = g
        self.f = f
        self.d_x = d_x
        self.d_y = d_y
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.opt = optimizers
        self.step = step

    @classmethod
    def build(
        cls,
        gen_spec: GeneratorSpec,
        disc_spec: DiscriminatorSpec,
        cfg: TrainConfig,
    ) -> "CycleGanModel":
        if gen_spec.input_side != disc_spec.input_side:
            raise TrainingError(
                f"generator side {gen_spec.input_side} != discriminator side "
                f"{disc_spec.input_side}"
            )
        g = build_generator(gen_spec, cfg.seed)
        f = build_generator(gen_spec, cfg.seed + 1)
        d_x = build_discriminator(disc_spec, cfg.seed + 2)
        d_y = build_discriminator(disc_spec, cfg.seed + 3)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        optimizers = {
            "g": torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=betas),
            "f": torch.optim.Adam(f.parameters(), lr=cfg.learning_rate, betas=betas),
            "d_x": torch.optim.Adam(d_x.parameters(), lr=cfg.learning_rate, betas=betas),
            "d_y": torch.optim.Adam(d_y.parameters(), lr=cfg.learning_rate, betas=betas),
        }
        return cls(g, f, d_x, d_y, gen_spec, disc_spec, optimizers)

    def networks(self) -> dict[str, torch.nn.Module]:
        return {"g": self.g, "f": self.f, "d_x": self.d_x, "d_y": self.d_y}

    def train_mode(self) -> None:
        for net in self.networks().values():
            net.train()

    def eval_mode(self) -> None:
        for net in self.networks().values():
            net.eval()

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, net in sorted(self.networks().items()):
            digest.update(name.encode())
            digest.update(state_checksum(net).encode())
        return digest.hexdigest()


@dataclass
class TrainResult:
    model: CycleGanModel
    history: list[LossBundle] = field(default_factory=list)
    checkpoint_path: str | None = None
    log_path: str | None = None


def default_generator_spec(side: int) -> GeneratorSpec:
    return GeneratorSpec(input_side=side, depth=6 if side >= 256 else 4)


def default_discriminator_spec(side: int) -> DiscriminatorSpec:
    return DiscriminatorSpec(input_side=side, depth=3)


def config_fingerprint(
    cfg: TrainConfig, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec
) -> str:
    payload = json.dumps(
        {"train": asdict(cfg), "generator": asdict(gen_spec), "discriminator": asdict(disc_spec)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def batch_indices(pool_size: int, batch_size: int, seed: int, step: int, role: int) -> np.ndarray:
    """Deterministic batch draw for one (seed, step, role) triple."""
    if pool_size < 1:
        raise TrainingError("cannot draw a batch from an empty pool")
    rng = np.random.default_rng([seed, step, role])
    replace_draw = pool_size < batch_size
    return rng.choice(pool_size, size=batch_size, replace=replace_draw)


def generator_objective(
    model: CycleGanModel,
    x: torch.Tensor,
    y: torch.Tensor,
    cycle_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Generator-side losses (adv_g, adv_f, cycle, total) as tensors."""
    fake_y = model.g(x)
    fake_x = model.f(y)
    adv_g = adversarial_loss(None, model.d_y(fake_y), role="generator")
    adv_f = adversarial_loss(None, model.d_x(fake_x), role="generator")
    cyc = cycle_loss(x, model.f(fake_y), y, model.g(fake_x))
    total = adv_g + adv_f + cycle_weight * cyc
    return adv_g, adv_f, cyc, total


def train_step(model: CycleGanModel, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig) -> LossBundle:
    """One full update: both discriminators, then both generators."""
    model.train_mode()

    with torch.no_grad():
        fake_y = model.g(x)
        fake_x = model.f(y)
    d_y_loss = adversarial_loss(model.d_y(y), model.d_y(fake_y), role="discriminator")
    model.opt["d_y"].zero_grad()
    d_y_loss.backward()
    model.opt["d_y"].step()
    d_x_loss = adversarial_loss(model.d_x(x), model.d_x(fake_x), role="discriminator")
    model.opt["d_x"].zero_grad()
    d_x_loss.backward()
    model.opt["d_x"].step()

    adv_g, adv_f, cyc, total = generator_objective(model, x, y, cfg.cycle_weight)
    model.opt["g"].zero_grad()
    model.opt["f"].zero_grad()
    total.backward()
    model.opt["g"].step()
    model.opt["f"].step()

    model.step += 1
    try:
        return bundle_from_parts(
            adv_g.item(),
            adv_f.item(),
            cyc.item(),
            cfg.cycle_weight,
            d_x=d_x_loss.item(),
            d_y=d_y_loss.item(),
        )
    except LossError as exc:
        raise NonFiniteLossError(model.step, str(exc)) from exc


def save_checkpoint(
    model: CycleGanModel,
    path: str,
    config_hash: str = "",
    positives_hash: str = "",
    synthesis_floor_hu: float | None = None,
) -> str:
    """Atomic write (temp file + rename) of the full training state.

    ``synthesis_floor_hu`` records a background level calibrated for this
    checkpoint so downstream synthesis can reuse it.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": model.step,
        "generator_spec": asdict(model.gen_spec),
        "discriminator_spec": asdict(model.disc_spec),
        "networks": {name: net.state_dict() for name, net in model.networks().items()},
        "optimizers": {name: opt.state_dict() for name, opt in model.opt.items()},
        "config_hash": config_hash,
        "positives_hash": positives_hash,
        "synthesis_floor_hu": synthesis_floor_hu,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(
    path: str,
    expected_generator_spec: GeneratorSpec | None = None,
    expected_discriminator_spec: DiscriminatorSpec | None = None,
) -> tuple[CycleGanModel, dict]:
    """Rebuild a model (networks, optimizers, step) from a checkpoint."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path!r} has version {payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        gen_spec = GeneratorSpec(**payload["generator_spec"])
        disc_spec = DiscriminatorSpec(**payload["discriminator_spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path!r} has malformed specs: {exc}") from exc
    if expected_generator_spec is not None and gen_spec != expected_generator_spec:
        raise CheckpointError(
            f"checkpoint generator spec {gen_spec} != expected {expected_generator_spec}"
        )
    if expected_discriminator_spec is not None and disc_spec != expected_discriminator_spec:
        raise CheckpointError(
            f"checkpoint discriminator spec {disc_spec} != expected {expected_discriminator_spec}"
        )
    model = CycleGanModel.build(gen_spec, disc_spec, TrainConfig())
    try:
        for name, net in model.networks().items():
            net.load_state_dict(payload["networks"][name])
        for name, opt in model.opt.items():
            opt.load_state_dict(payload["optimizers"][name])
        model.step = int(payload["step"])
    except (KeyError, RuntimeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path!r} is incomplete: {exc}") from exc
    meta = {
        "config_hash": payload.get("config_hash", ""),
        "positives_hash": payload.get("positives_hash", ""),
        "synthesis_floor_hu": payload.get("synthesis_floor_hu"),
        "step": model.step,
    }
    return model, meta


def checkpoint_file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _run_loop(
    model: CycleGanModel,
    x_pool: torch.Tensor,
    y_pool: torch.Tensor,
    cfg: TrainConfig,
    out_dir: str | None,
    log_path: str | None,
    config_hash: str,
    positives_hash: str,
) -> TrainResult:
    history: list[LossBundle] = []
    log_fh = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        log_fh = open(log_path, "a" if model.step > 0 else "w", encoding="utf-8")
    final_path = None
    try:
        for t in range(model.step, cfg.steps):
            xi = batch_indices(len(x_pool), cfg.batch_size, cfg.seed, t, 0)
            yi = batch_indices(len(y_pool), cfg.batch_size, cfg.seed, t, 1)
            bundle = train_step(model, x_pool[xi], y_pool[yi], cfg)
            history.append(bundle)
            if log_fh:
                record = {"step": model.step}
                record.update(bundle.to_dict())
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out_dir and model.step % cfg.checkpoint_interval == 0 and model.step < cfg.steps:
                save_checkpoint(
                    model,
                    os.path.join(out_dir, f"checkpoint_step{model.step:06d}.pt"),
                    config_hash=config_hash,
                    positives_hash=positives_hash,
                )
        if out_dir:
            final_path = save_checkpoint(
                model,
                os.path.join(out_dir, "checkpoint.pt"),
                config_hash=config_hash,
                positives_hash=positives_hash,
            )
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model=model, history=history, checkpoint_path=final_path, log_path=log_path)


def train_ccsgan(
    normals: DatasetManifest,
    positives: DatasetManifest,
    cfg: TrainConfig,
    pipe: DataPipelineConfig | None = None,
    gen_spec: GeneratorSpec | None = None,
    disc_spec: DiscriminatorSpec | None = None,
    model: CycleGanModel | None = None,
    out_dir: str | None = None,
    log_path: str | None = None,
) -> TrainResult:
    """Fit the translator pair on normal slices vs the (few) positives.

    Pass ``model`` to warm-start (from identity pretraining or a resumed
    checkpoint); training continues from ``model.step`` up to
    ``cfg.steps``.
    """
    if len(positives) == 0:
        raise TrainingError("positive manifest is empty; nothing to translate to")
    if len(normals) == 0:
        raise TrainingError("normal manifest is empty")
    pipe = pipe or DataPipelineConfig()
    if model is not None:
        gen_spec = model.gen_spec
        disc_spec = model.disc_spec
    else:
        gen_spec = gen_spec or default_generator_spec(pipe.side)
        disc_spec = disc_spec or default_discriminator_spec(pipe.side)
    if gen_spec.input_side != pipe.side:
        raise TrainingError(
            f"generator side {gen_spec.input_side} != pipeline side {pipe.side}"
        )
    x_imgs, _ = load_stack(normals, pipe)
    y_imgs, _ = load_stack(positives, pipe)
    if model is None:
        model = CycleGanModel.build(gen_spec, disc_spec, cfg)
    elif model.step >= cfg.steps:
        raise TrainingError(
            f"model is already at step {model.step}, beyond cfg.steps={cfg.steps}"
        )
    return _run_loop(
        model,
        torch.from_numpy(x_imgs),
        torch.from_numpy(y_imgs),
        cfg,
        out_dir,
        log_path,
        config_fingerprint(cfg, gen_spec, disc_spec),
        manifest_fingerprint(positives, content=True),
    )


def pretrain_on_normals(
    normals: DatasetManifest,
    cfg: TrainConfig,
    pipe: DataPipelineConfig | None = None,
    gen_spec: GeneratorSpec | None = None,
    disc_spec: DiscriminatorSpec | None = None,
    out_dir: str | None = None,
    log_path: str | None = None,
    model: CycleGanModel | None = None,
) -> TrainResult:
    """Warm up both translators on normals split into two disjoint halves.

    The returned model's step counter is reset to zero so a subsequent
    fine-tune budget is independent of the warm-up length.  Passing a
    model resumes warming up from its current step toward cfg.steps.
    """
    if len(normals) < 2:
        raise TrainingError("pretraining needs at least two normal slices")
    pipe = pipe or DataPipelineConfig()
    gen_spec = gen_spec or default_generator_spec(pipe.side)
    disc_spec = disc_spec or default_discriminator_spec(pipe.side)
    imgs, _ = load_stack(normals, pipe)
    perm = np.random.default_rng([cfg.seed, 13]).permutation(len(imgs))
    half = len(imgs) // 2
    x_imgs = imgs[perm[:half]]
    y_imgs = imgs[perm[half:]]
    model = model or CycleGanModel.build(gen_spec, disc_spec, cfg)
    result = _run_loop(
        model,
        torch.from_numpy(x_imgs),
        torch.from_numpy(y_imgs),
        cfg,
        out_dir,
        log_path,
        config_fingerprint(cfg, gen_spec, disc_spec),
        positives_hash="",
    )
    result.model.step = 0
    return result
