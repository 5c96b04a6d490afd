"""Deterministic training loops: the two-forward diversity step wrapped
around either base network, with per-sample Adam updates.

RNG discipline (everything below consumes one shared generator, in this
exact order, so that runs are reproducible and resumable):

* epoch start: one ``permutation(len(dataset))`` draw,
* per sample, GAN base only: one noise draw + dropout masks for the
  discriminator-step fake forward,
* per sample: one noise draw, then dropout masks for the noise-fed
  forward, then dropout masks for the zero-noise forward.

Checkpoints are written at epoch boundaries and capture parameters, Adam
buffers, the RNG state, and the config echo, so resuming reproduces the
uninterrupted trajectory bitwise.
"""
from __future__ import annotations

import contextlib
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*_args, **_kwargs):
        return contextlib.nullcontext()

from . import autodiff as ad
from . import losses as ls
from .data import Dataset, NoiseVector, SemanticLayout, ImageRGB, augment
from .models import (CrnCascade, FeatureExtractor, GeneratorUNet, ModelError,
                     PatchDiscriminator, checkpoint_load, checkpoint_save,
                     named_parameters)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base: str = "crn"                 # "gan" | "crn"
    epochs: int = 100
    lr: float = 2e-4
    adam_b1: float = 0.5
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    beta: float | None = None         # None -> 10 for crn, 0.1 for gan
    lambda_c: float = 0.3
    alpha: float = 100.0
    seed: int = 0
    checkpoint_every: int = 0         # epochs between checkpoints, 0 = final only
    # architecture knobs (desk scale defaults)
    unet_width: int = 16
    unet_depth: int = 3
    dropout: float = 0.5
    disc_width: int = 16
    disc_stages: int = 3
    crn_width: int = 32
    crn_base: int = 2
    phi_stages: int = 2
    phi_width: int = 12
    phi_seed: int = 1234
    phi_scale: float = 24.0
    phi_chroma: float = 8.0
    # augmentation (gan path convention; off by default at desk scale)
    augment_jitter: int = 0
    augment_flip: float = 0.0

    def __post_init__(self):
        if self.base not in ("gan", "crn"):
            raise TrainError(f"unknown base kind {self.base!r}")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.lr <= 0:
            raise TrainError("learning rate must be > 0")
        if self.beta is None:
            self.beta = 10.0 if self.base == "crn" else 0.1

    def lambda_k(self) -> list[float]:
        return [1.0 / self.phi_stages] * self.phi_stages


class AdamState:
    """First/second moment buffers per parameter plus the shared step count."""

    def __init__(self, params: list[ad.Parameter]):
        self.m = {p.name: np.zeros(p.shape, dtype=np.float32) for p in params}
        self.v = {p.name: np.zeros(p.shape, dtype=np.float32) for p in params}
        self.t = 0


def adam_update(params: list[ad.Parameter], grads: dict[str, np.ndarray],
                state: AdamState, lr: float, b1: float = 0.5, b2: float = 0.999,
                eps: float = 1e-8) -> None:
    """Bias-corrected Adam step; aborts without touching any parameter if a
    gradient is non-finite."""
    for p in params:
        g = grads[p.name]
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for parameter {p.name} "
                             f"(|g|_max={np.nanmax(np.abs(g))})")
    state.t += 1
    c1 = np.float32(1.0 - b1 ** state.t)
    c2 = np.float32(1.0 - b2 ** state.t)
    lr32, b1_, b2_ = np.float32(lr), np.float32(b1), np.float32(b2)
    one = np.float32(1.0)
    eps32 = np.float32(eps)
    for p in params:
        g = grads[p.name].astype(np.float32, copy=False)
        m = state.m[p.name]
        v = state.v[p.name]
        np.multiply(m, b1_, out=m)
        m += (one - b1_) * g
        np.multiply(v, b2_, out=v)
        v += (one - b2_) * (g * g)
        step = lr32 * (m / c1) / (np.sqrt(v / c2) + eps32)
        p.assign(p.data - step)


@dataclass
class StepReport:
    loss_base: float
    loss_div: float
    loss_total: float
    grad_norm: float
    noise: list[float]
    loss_disc_pre: float | None = None
    loss_disc_post: float | None = None


def _image_tensor(image: ImageRGB) -> ad.Tensor:
    return ad.wrap(np.ascontiguousarray(image.values.transpose(2, 0, 1)))


def _dump_offending(layout: SemanticLayout, noise: NoiseVector, arrays: dict) -> str:
    fd, path = tempfile.mkstemp(prefix="divsynth_nonfinite_", suffix=".npz")
    import os
    os.close(fd)
    np.savez(path, layout=layout.pixels, noise=noise.entries,
             **{k: v for k, v in arrays.items()})
    return path


def _check_finite_loss(value: float, layout, noise, arrays) -> None:
    if not np.isfinite(value):
        path = _dump_offending(layout, noise, arrays)
        raise TrainError(f"non-finite loss {value}; offending inputs saved to {path}")


def algorithm1_step(generator, pair: tuple[SemanticLayout, ImageRGB],
                    rng: np.random.Generator, cfg: TrainConfig,
                    opt: AdamState, *, discriminator: PatchDiscriminator | None = None,
                    phi: FeatureExtractor | None = None,
                    real_feats: list | None = None) -> StepReport:
    """One two-forward diversity step: sample noise, synthesize with and
    without it, anchor both outputs to the ground truth, reward segmentwise
    separation, and apply one Adam update to the generator."""
    layout, image = pair
    classes = layout.classes
    noise = NoiseVector.sample(classes, rng)
    train_dropout = cfg.base == "gan" and cfg.dropout > 0

    out_noise = generator.generate(layout, noise, dropout_on=train_dropout, rng=rng)
    out_zero = generator.generate(layout, NoiseVector.zero(classes),
                                  dropout_on=train_dropout, rng=rng)

    real = _image_tensor(image)
    if cfg.base == "gan":
        if discriminator is None:
            raise TrainError("gan base needs a discriminator")
        lf1 = ls.loss_generator(discriminator.score(layout, out_noise), out_noise,
                                real, alpha=cfg.alpha)
        lf2 = ls.loss_generator(discriminator.score(layout, out_zero), out_zero,
                                real, alpha=cfg.alpha)
    else:
        if phi is None:
            raise TrainError("crn base needs a feature extractor")
        target = real_feats if real_feats is not None else real
        lf1 = ls.loss_content(out_noise, target, phi, cfg.lambda_k())
        lf2 = ls.loss_content(out_zero, target, phi, cfg.lambda_k())
    base_loss = ad.scale(ad.add(lf1, lf2), 0.5)

    div_loss = ls.diversity_hinged(out_zero, out_noise, layout, noise, cfg.lambda_c)
    # with beta == 0 the objective is structurally the base loss alone, so the
    # trajectory reduces bitwise to training the base network by itself
    total = base_loss if cfg.beta == 0.0 else ls.objective_combined(base_loss, div_loss, cfg.beta)

    _check_finite_loss(float(total.data), layout, noise,
                       {"out_noise": out_noise.data, "out_zero": out_zero.data})

    tape = ad.backward(total)
    params = generator.parameters()
    grads = {p.name: tape.grad(p) for p in params}
    adam_update(params, grads, opt, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads.values())))
    return StepReport(
        loss_base=float(base_loss.data),
        loss_div=float(div_loss.data),
        loss_total=float(total.data),
        grad_norm=gnorm,
        noise=[float(x) for x in noise.entries],
    )


def gan_alternating_step(generator: GeneratorUNet, discriminator: PatchDiscriminator,
                         pair: tuple[SemanticLayout, ImageRGB], rng: np.random.Generator,
                         cfg: TrainConfig, opt_g: AdamState, opt_d: AdamState) -> StepReport:
    """One D maximization step on a fresh noise-fed fake (generator held
    constant), then one generator step via the two-forward procedure."""
    layout, image = pair
    real = _image_tensor(image)

    noise_d = NoiseVector.sample(layout.classes, rng)
    fake = generator.generate(layout, noise_d, dropout_on=cfg.dropout > 0, rng=rng)
    fake_const = ad.wrap(fake.data)  # G is constant during the D step
    d_real = discriminator.score(layout, real)
    d_fake = discriminator.score(layout, fake_const)
    disc_loss = ls.loss_discriminator(d_real, d_fake)
    _check_finite_loss(float(disc_loss.data), layout, noise_d,
                       {"fake": fake.data, "d_real": d_real.data, "d_fake": d_fake.data})
    tape = ad.backward(ad.scale(disc_loss, -1.0))  # maximize via negation
    d_params = discriminator.parameters()
    adam_update(d_params, {p.name: tape.grad(p) for p in d_params}, opt_d,
                cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    post = ls.loss_discriminator(discriminator.score(layout, real),
                                 discriminator.score(layout, fake_const))

    report = algorithm1_step(generator, pair, rng, cfg, opt_g,
                             discriminator=discriminator)
    report.loss_disc_pre = float(disc_loss.data)
    report.loss_disc_post = float(post.data)
    return report


@dataclass
class TrainResult:
    generator: object
    discriminator: PatchDiscriminator | None
    phi: FeatureExtractor | None
    metrics: list[dict]
    final_checkpoint: Path | None
    step_reports: list[StepReport] = field(default_factory=list)


def build_models(cfg: TrainConfig, class_count: int, image_size: int):
    """Seeded model construction; the generator seed derives from cfg.seed."""
    if cfg.base == "gan":
        gen = GeneratorUNet(class_count, base_width=cfg.unet_width, depth=cfg.unet_depth,
                            dropout_rate=cfg.dropout, seed=cfg.seed)
        disc = PatchDiscriminator(class_count, base_width=cfg.disc_width,
                                  stages=cfg.disc_stages, seed=cfg.seed + 1)
        return gen, disc, None
    doublings = int(np.log2(image_size / cfg.crn_base))
    if cfg.crn_base * 2 ** doublings != image_size:
        raise TrainError(f"image size {image_size} is not crn_base * 2^D")
    gen = CrnCascade(class_count, base_h=cfg.crn_base, base_w=cfg.crn_base,
                     doublings=doublings, width=cfg.crn_width, seed=cfg.seed)
    phi = FeatureExtractor(stages=cfg.phi_stages, base_width=cfg.phi_width,
                           seed=cfg.phi_seed, feature_scale=cfg.phi_scale,
                           chroma_gain=cfg.phi_chroma)
    return gen, None, phi


def _collect_state(gen, disc, opt_g: AdamState, opt_d: AdamState | None) -> dict[str, np.ndarray]:
    tensors = {p.name: np.asarray(p.data) for p in gen.parameters()}
    if disc is not None:
        tensors.update({p.name: np.asarray(p.data) for p in disc.parameters()})
    for tag, opt in (("g", opt_g), ("d", opt_d)):
        if opt is None:
            continue
        for name, m in opt.m.items():
            tensors[f"adam_{tag}/{name}/m"] = m
            tensors[f"adam_{tag}/{name}/v"] = opt.v[name]
        tensors[f"adam_{tag}/t"] = np.float32(opt.t).reshape(())
    return tensors


def _restore_opt(tag: str, params: list[ad.Parameter], tensors: dict) -> AdamState:
    opt = AdamState(params)
    for p in params:
        opt.m[p.name] = tensors[f"adam_{tag}/{p.name}/m"].copy()
        opt.v[p.name] = tensors[f"adam_{tag}/{p.name}/v"].copy()
    opt.t = int(tensors[f"adam_{tag}/t"].reshape(())[()])
    return opt


def save_training_checkpoint(path, gen, disc, opt_g, opt_d, cfg: TrainConfig,
                             epoch: int, rng: np.random.Generator,
                             extra_meta: dict | None = None) -> None:
    meta = {
        "epoch": epoch,
        "config": asdict(cfg),
        "arch": {
            "generator": gen.arch(),
            "discriminator": disc.arch() if disc is not None else None,
        },
        "rng_state": rng.bit_generator.state,
    }
    if extra_meta:
        meta.update(extra_meta)
    checkpoint_save(path, _collect_state(gen, disc, opt_g, opt_d), meta)


def load_training_checkpoint(path):
    """Rebuild models + optimizer states + rng from a training checkpoint."""
    tensors, meta = checkpoint_load(path)
    if meta is None or "arch" not in meta:
        raise TrainError(f"{path}: checkpoint has no training metadata")
    cfg = TrainConfig(**meta["config"])
    from .models import build_model
    gen = build_model(meta["arch"]["generator"])
    disc = build_model(meta["arch"]["discriminator"]) if meta["arch"]["discriminator"] else None
    phi = (FeatureExtractor(stages=cfg.phi_stages, base_width=cfg.phi_width,
                            seed=cfg.phi_seed, feature_scale=cfg.phi_scale,
                            chroma_gain=cfg.phi_chroma)
           if cfg.base == "crn" else None)

    expected = set(named_parameters(gen))
    if disc is not None:
        expected |= set(named_parameters(disc))
    for name in tensors:
        base = name
        if name.startswith("adam_"):
            continue
        if base not in expected:
            raise TrainError(f"{path}: unknown tensor name {name!r} in checkpoint")
    try:
        for p in gen.parameters():
            p.assign(tensors[p.name])
        opt_g = _restore_opt("g", gen.parameters(), tensors)
        opt_d = None
        if disc is not None:
            for p in disc.parameters():
                p.assign(tensors[p.name])
            opt_d = _restore_opt("d", disc.parameters(), tensors)
    except KeyError as exc:
        raise TrainError(f"{path}: checkpoint is missing tensor {exc.args[0]!r}") from None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return gen, disc, phi, opt_g, opt_d, cfg, int(meta["epoch"]), rng, meta


def load_generator(path):
    """Frozen generator + metadata for evaluation and serving."""
    gen, _disc, _phi, _og, _od, _cfg, _epoch, _rng, meta = load_training_checkpoint(path)
    return gen, meta


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, resume=None,
          keep_step_reports: bool = False, extra_meta: dict | None = None) -> TrainResult:
    """Run ``cfg.epochs`` over the dataset (shuffled per epoch); returns the
    trained models and per-epoch mean losses. Fully reproducible from
    (dataset, cfg.seed); ``resume`` continues from an epoch checkpoint."""
    # the GEMMs here are tiny; multithreaded BLAS only adds sync overhead
    with threadpool_limits(limits=1, user_api="blas"):
        return _train_impl(dataset, cfg, out_dir, resume, keep_step_reports, extra_meta)


def _train_impl(dataset: Dataset, cfg: TrainConfig, out_dir, resume,
                keep_step_reports: bool, extra_meta: dict | None) -> TrainResult:
    image_size = dataset.pairs[0][0].height
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        gen, disc, phi, opt_g, opt_d, saved_cfg, start_epoch, rng, _meta = \
            load_training_checkpoint(resume)
        cfg = saved_cfg
    else:
        gen, disc, phi = build_models(cfg, dataset.class_count, image_size)
        opt_g = AdamState(gen.parameters())
        opt_d = AdamState(disc.parameters()) if disc is not None else None
        rng = np.random.default_rng(cfg.seed)
        start_epoch = 0

    feat_cache: dict[int, list] = {}

    def real_features(idx: int, image: ImageRGB):
        feats = feat_cache.get(idx)
        if feats is None:
            feats = [ad.wrap(np.asarray(f.data)) for f in phi.features(_image_tensor(image))]
            feat_cache[idx] = feats
        return feats

    metrics: list[dict] = []
    reports: list[StepReport] = []
    csv_path = out / "metrics.csv" if out is not None else None
    csv_header = "epoch,loss_base,loss_div,loss_total" + (",loss_disc" if cfg.base == "gan" else "")
    csv_lines = [csv_header]

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(dataset))
        sums = np.zeros(4, dtype=np.float64)
        for idx in order:
            pair = dataset.pairs[int(idx)]
            if cfg.augment_jitter > 0 or cfg.augment_flip > 0:
                pair = augment(pair, target=image_size, jitter=cfg.augment_jitter,
                               flip_prob=cfg.augment_flip, rng=rng)
            if cfg.base == "gan":
                rep = gan_alternating_step(gen, disc, pair, rng, cfg, opt_g, opt_d)
                sums += (rep.loss_base, rep.loss_div, rep.loss_total, rep.loss_disc_pre)
            else:
                rep = algorithm1_step(gen, pair, rng, cfg, opt_g, phi=phi,
                                      real_feats=real_features(int(idx), pair[1]))
                sums += (rep.loss_base, rep.loss_div, rep.loss_total, 0.0)
            if keep_step_reports:
                reports.append(rep)
        means = sums / len(dataset)
        row = {"epoch": epoch + 1, "loss_base": means[0], "loss_div": means[1],
               "loss_total": means[2]}
        if cfg.base == "gan":
            row["loss_disc"] = means[3]
        metrics.append(row)
        csv_lines.append(",".join(_fmt(row[k]) for k in row))
        if out is not None:
            csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and epoch + 1 < cfg.epochs:
                save_training_checkpoint(out / f"ckpt_epoch{epoch + 1:03d}.dsyn",
                                         gen, disc, opt_g, opt_d, cfg, epoch + 1, rng,
                                         extra_meta)

    final = None
    if out is not None:
        final = out / "model.dsyn"
        save_training_checkpoint(final, gen, disc, opt_g, opt_d, cfg, cfg.epochs, rng,
                                 extra_meta)
    return TrainResult(generator=gen, discriminator=disc, phi=phi, metrics=metrics,
                       final_checkpoint=final, step_reports=reports)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
