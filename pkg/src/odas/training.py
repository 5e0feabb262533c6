"""Training: adaptive sampling, the four losses, pretraining, adversarial loop.

The classifier is first pretrained on windows with the classification loss
plus a weighted temporal-consistency (similarity) loss. The adversarial
phase then alternates one generator step on the feature-matching loss with
one discriminator step on the K+2-way real/fake losses plus the weighted
similarity loss. Expectations are realized as per-batch means.

All loss functions accumulate gradients into the updated network's buffers
(callers zero them) and return the loss value actually differentiated,
i.e. already scaled by `weight` where applicable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (DataError, ModelConfig, ROLE_START, StartPair,
                   TrainingDivergedError, WindowSample)
from .nn import (Discriminator, GradCheckEntry, Generator, check_gradients,
                 log_softmax, sgd_step)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    similarity_weight: float = 1.0
    lr_pretrain: float = 0.05
    lr_gen: float = 0.02
    lr_disc: float = 0.02
    momentum: float = 0.9
    pretrain_iters: int = 500
    gan_iters: int = 200
    seed: int = 0
    adaptive_sampling: bool = True

    def __post_init__(self):
        if self.batch_size < 4 or self.batch_size % 2:
            raise DataError("batch_size must be even and >= 4")
        for name in ("lr_pretrain", "lr_gen", "lr_disc"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be > 0")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must be in [0, 1)")
        if self.pretrain_iters < 0 or self.gan_iters < 0:
            raise DataError("iteration counts must be >= 0")
        if self.similarity_weight < 0:
            raise DataError("similarity_weight must be >= 0")


@dataclass(frozen=True)
class Methods:
    """Which of the three training methods are enabled."""

    adaptive: bool = True
    tc: bool = True
    gan: bool = True

    NAMES = ("adaptive", "tc", "gan")

    @classmethod
    def from_string(cls, spec: str) -> "Methods":
        parts = [p.strip() for p in spec.split(",") if p.strip()]
        unknown = [p for p in parts if p not in cls.NAMES]
        if unknown:
            raise DataError(f"unknown method(s): {', '.join(unknown)}")
        return cls(adaptive="adaptive" in parts, tc="tc" in parts,
                   gan="gan" in parts)


def _stream(seed: int, phase: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(phase, index)))


def make_models(cfg: ModelConfig, seed: int):
    """Seeded discriminator and generator (independent init streams)."""
    return (Discriminator(cfg, _stream(seed, 0, 0)),
            Generator(cfg, _stream(seed, 0, 1)))


# ---------------------------------------------------------------------------
# Batch sampling


def split_pools(samples: Sequence[WindowSample]):
    """(start windows, everything else)."""
    starts = [s for s in samples if s.role == ROLE_START]
    others = [s for s in samples if s.role != ROLE_START]
    return starts, others


def adaptive_sample_batch(rng: np.random.Generator,
                          starts: Sequence[WindowSample],
                          others: Sequence[WindowSample],
                          n: int) -> list[WindowSample]:
    """Half the batch from start windows, half from the rest, shuffled."""
    if n < 2 or n % 2:
        raise DataError("batch size must be even and >= 2")
    if not starts or not others:
        raise DataError("adaptive sampling needs non-empty start and "
                        "non-start pools")
    half = n // 2
    picks = [starts[i] for i in rng.integers(0, len(starts), size=half)]
    picks += [others[i] for i in rng.integers(0, len(others), size=half)]
    return [picks[i] for i in rng.permutation(n)]


def uniform_sample_batch(rng: np.random.Generator,
                         pool: Sequence[WindowSample], n: int) -> list[WindowSample]:
    if not pool:
        raise DataError("cannot sample from an empty pool")
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def sample_pairs(rng: np.random.Generator, pairs: Sequence[StartPair],
                 n: int) -> list[StartPair]:
    if not pairs:
        raise DataError("cannot sample from an empty pair pool")
    return [pairs[i] for i in rng.integers(0, len(pairs), size=n)]


def _xy(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple):
        x, y = batch
        return (np.asarray(x, dtype=np.float64),
                np.asarray(y, dtype=np.int64))
    x = np.stack([s.features for s in batch])
    y = np.array([s.label for s in batch], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# Losses


def classification_loss(d: Discriminator, batch, weight: float = 1.0) -> float:
    """Mean cross-entropy over the K+1 non-fake classes.

    The hard-negative logit exists during training but takes no part (and
    no gradient) here; labels must lie in 1..K+1.
    """
    x, y = _xy(batch)
    k1 = d.num_classes + 1
    if y.min() < 1 or y.max() > k1:
        raise DataError(f"classification labels must be in 1..{k1}")
    acts = d.forward(x, train=True)
    logp = log_softmax(acts.logits[:, :k1])
    n = x.shape[0]
    idx = y - 1
    loss = weight * float(-logp[np.arange(n), idx].mean())
    grad = np.zeros_like(acts.logits)
    grad[:, :k1] = np.exp(logp)
    grad[np.arange(n), idx] -= 1.0
    grad *= weight / n
    d.backward(grad_logits=grad, acts=acts)
    return loss


def similarity_loss(d: Discriminator, pairs, weight: float = 1.0) -> float:
    """Mean squared L2 distance between paired fc7 embeddings.

    Both branches share the same parameters; gradients flow through both.
    """
    if isinstance(pairs, tuple):
        xs, xf = (np.asarray(a, dtype=np.float64) for a in pairs)
    else:
        if not pairs:
            raise DataError("similarity loss needs at least one pair")
        xs = np.stack([p.start.features for p in pairs])
        xf = np.stack([p.follow_up.features for p in pairs])
    acts_s = d.forward(xs, train=True)
    acts_f = d.forward(xf, train=True)
    diff = acts_s.a7 - acts_f.a7
    m = xs.shape[0]
    loss = weight * float((diff * diff).sum(axis=1).mean())
    grad = (2.0 * weight / m) * diff
    d.backward(grad_fc7=grad, acts=acts_s)
    d.backward(grad_fc7=-grad, acts=acts_f)
    return loss


def matching_loss(g: Generator, d: Discriminator, start_batch, noise_batch,
                  weight: float = 1.0) -> float:
    """Squared distance between batch-mean fc7 embeddings of real starts
    and generated fakes. Gradients flow into the generator only; the
    discriminator's buffers are left untouched.
    """
    if isinstance(start_batch, (list, tuple)) and start_batch and isinstance(
            start_batch[0], WindowSample):
        xs = np.stack([s.features for s in start_batch])
    else:
        xs = np.asarray(start_batch, dtype=np.float64)
    z = np.asarray(noise_batch, dtype=np.float64)
    if xs.shape[0] != z.shape[0]:
        raise DataError("start batch and noise batch must be the same size")
    if z.shape[0] < 2:
        raise DataError("feature matching needs batches of >= 2")
    acts_real = d.forward(xs, train=True)
    gen_acts = g.forward(z, train=True)
    acts_fake = d.forward(gen_acts.out, train=True)
    v = acts_real.a7.mean(axis=0) - acts_fake.a7.mean(axis=0)
    loss = weight * float((v * v).sum())
    n_f = z.shape[0]
    grad_a7 = np.tile((-2.0 * weight / n_f) * v, (n_f, 1))
    grad_fake_in = d.backward(grad_fc7=grad_a7, acts=acts_fake,
                              accumulate=False)
    g.backward(grad_fake_in, acts=gen_acts)
    return loss


def real_sample_loss(d: Discriminator, batch, weight: float = 1.0) -> float:
    """Mean K+2-way cross-entropy on real windows (labels in 1..K+1)."""
    x, y = _xy(batch)
    k2 = d.num_classes + 2
    if y.min() < 1 or y.max() > k2 - 1:
        raise DataError(f"real-sample labels must be in 1..{k2 - 1}")
    acts = d.forward(x, train=True)
    logp = log_softmax(acts.logits)
    n = x.shape[0]
    idx = y - 1
    loss = weight * float(-logp[np.arange(n), idx].mean())
    grad = np.exp(logp)
    grad[np.arange(n), idx] -= 1.0
    grad *= weight / n
    d.backward(grad_logits=grad, acts=acts)
    return loss


def fake_sample_loss(g: Generator, d: Discriminator, noise_batch,
                     weight: float = 1.0) -> float:
    """Mean -log P(hard negative | G(z)); fakes are treated as constants,
    so the generator receives no gradient."""
    z = np.asarray(noise_batch, dtype=np.float64)
    if z.shape[0] < 2:
        raise DataError("fake-sample loss needs a noise batch of >= 2")
    fakes = g.forward(z, train=True).out
    acts = d.forward(fakes, train=True)
    logp = log_softmax(acts.logits)
    n = z.shape[0]
    fake_idx = d.num_classes + 1  # 0-based index of class K+2
    loss = weight * float(-logp[:, fake_idx].mean())
    grad = np.exp(logp)
    grad[:, fake_idx] -= 1.0
    grad *= weight / n
    d.backward(grad_logits=grad, acts=acts)
    return loss


def discriminator_loss(g: Generator, d: Discriminator, batch, pairs,
                       noise_batch, similarity_weight: float):
    """Full discriminator objective: real + fake + weighted similarity.

    Returns (total, components) where components holds the unweighted
    real/fake/similarity values. Gradients go to the discriminator only.
    """
    loss_real = real_sample_loss(d, batch)
    loss_fake = fake_sample_loss(g, d, noise_batch)
    loss_sim = 0.0
    if similarity_weight != 0:
        loss_sim = similarity_loss(d, pairs, weight=similarity_weight)
        loss_sim /= similarity_weight
    total = loss_real + loss_fake + similarity_weight * loss_sim
    return total, {"real": loss_real, "fake": loss_fake, "sim": loss_sim}


# ---------------------------------------------------------------------------
# Training loops


@dataclass(frozen=True)
class LossRow:
    step: int
    loss_cls: float | None = None
    loss_sim: float | None = None
    loss_match: float | None = None
    loss_real: float | None = None
    loss_fake: float | None = None


def write_training_log(path, rows: Sequence[LossRow]) -> None:
    def fmt(v):
        return "" if v is None else f"{v:.8f}"

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,loss_cls,loss_sim,loss_match,loss_real,loss_fake\n")
        for r in rows:
            fh.write(f"{r.step},{fmt(r.loss_cls)},{fmt(r.loss_sim)},"
                     f"{fmt(r.loss_match)},{fmt(r.loss_real)},{fmt(r.loss_fake)}\n")


def _draw_batch(rng, cfg: TrainConfig, starts, others, everything):
    if cfg.adaptive_sampling:
        return adaptive_sample_batch(rng, starts, others, cfg.batch_size)
    return uniform_sample_batch(rng, everything, cfg.batch_size)


def pretrain(d: Discriminator, samples: Sequence[WindowSample],
             pairs: Sequence[StartPair], cfg: TrainConfig) -> list[LossRow]:
    """Train d in place on classification + weighted similarity.

    Seed-deterministic: batch and pair draws come from fixed substreams of
    cfg.seed. Returns the loss curve. With similarity_weight == 0 the pair
    stream is never consumed and this is plain classifier training.
    """
    starts, others = split_pools(samples)
    if not samples:
        raise DataError("empty training set")
    lam = cfg.similarity_weight
    if lam != 0 and not pairs:
        raise DataError("similarity weight is non-zero but there are no "
                        "start/follow-up pairs")
    rng_batch = _stream(cfg.seed, 1, 0)
    rng_pairs = _stream(cfg.seed, 1, 1)
    rows = []
    for it in range(cfg.pretrain_iters):
        batch = _draw_batch(rng_batch, cfg, starts, others, samples)
        d.zero_grad()
        loss_cls = classification_loss(d, batch)
        loss_sim = None
        if lam != 0:
            pair_batch = sample_pairs(rng_pairs, pairs, cfg.batch_size // 2)
            loss_sim = similarity_loss(d, pair_batch, weight=lam) / lam
        total = loss_cls + (0.0 if loss_sim is None else lam * loss_sim)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at pretrain iteration {it}")
        sgd_step(d, cfg.lr_pretrain, cfg.momentum)
        rows.append(LossRow(step=it, loss_cls=loss_cls, loss_sim=loss_sim))
    return rows


def train_gan(g: Generator, d: Discriminator,
              samples: Sequence[WindowSample], pairs: Sequence[StartPair],
              cfg: TrainConfig) -> list[LossRow]:
    """Alternate one generator step and one discriminator step per iteration.

    The generator minimizes the feature-matching loss with d fixed; the
    discriminator minimizes real + fake + weighted similarity with g fixed.
    Both nets are updated in place; returns the loss curve.
    """
    starts, others = split_pools(samples)
    if not starts:
        raise DataError("adversarial training needs start windows")
    lam = cfg.similarity_weight
    if lam != 0 and not pairs:
        raise DataError("similarity weight is non-zero but there are no "
                        "start/follow-up pairs")
    rng_batch = _stream(cfg.seed, 2, 0)
    rng_pairs = _stream(cfg.seed, 2, 1)
    rng_starts = _stream(cfg.seed, 2, 2)
    rng_noise_g = _stream(cfg.seed, 2, 3)
    rng_noise_d = _stream(cfg.seed, 2, 4)
    rows = []
    for it in range(cfg.gan_iters):
        start_batch = uniform_sample_batch(rng_starts, starts, cfg.batch_size)
        z_g = rng_noise_g.standard_normal((cfg.batch_size, g.noise_dim))
        g.zero_grad()
        loss_match = matching_loss(g, d, start_batch, z_g)
        if not np.isfinite(loss_match):
            raise TrainingDivergedError(
                f"non-finite matching loss at adversarial iteration {it}")
        sgd_step(g, cfg.lr_gen, cfg.momentum)

        batch = _draw_batch(rng_batch, cfg, starts, others, samples)
        z_d = rng_noise_d.standard_normal((cfg.batch_size, g.noise_dim))
        pair_batch = (sample_pairs(rng_pairs, pairs, cfg.batch_size // 2)
                      if lam != 0 else [])
        d.zero_grad()
        total, parts = discriminator_loss(g, d, batch, pair_batch, z_d, lam)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite discriminator loss at adversarial iteration {it}")
        sgd_step(d, cfg.lr_disc, cfg.momentum)
        rows.append(LossRow(step=it, loss_sim=parts["sim"] if lam else None,
                            loss_match=loss_match, loss_real=parts["real"],
                            loss_fake=parts["fake"]))
    return rows


@dataclass
class TrainOutput:
    discriminator: Discriminator
    generator: Generator
    rows: list[LossRow]


def run_training(samples, pairs, model_cfg: ModelConfig, cfg: TrainConfig,
                 methods: Methods = Methods()) -> TrainOutput:
    """Full schedule with ablation switches.

    Disabling a method maps to: adaptive -> uniform sampling, tc -> zero
    similarity weight, gan -> skip the adversarial phase entirely.
    """
    eff = replace(cfg,
                  adaptive_sampling=cfg.adaptive_sampling and methods.adaptive,
                  similarity_weight=cfg.similarity_weight if methods.tc else 0.0)
    d, g = make_models(model_cfg, eff.seed)
    rows = pretrain(d, samples, pairs, eff)
    if methods.gan and eff.gan_iters > 0:
        gan_rows = train_gan(g, d, samples, pairs, eff)
        offset = len(rows)
        rows += [replace(r, step=offset + r.step) for r in gan_rows]
    return TrainOutput(discriminator=d, generator=g, rows=rows)


# ---------------------------------------------------------------------------
# Gradient verification harness


@dataclass
class LossCheck:
    loss_name: str
    entries: list[GradCheckEntry]
    isolation_ok: bool  # the frozen net's gradient buffers stayed zero

    @property
    def passed(self) -> bool:
        return self.isolation_ok and all(e.passed for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)


def _grads_all_zero(net) -> bool:
    return all(not grad.any() for _, _, grad, _ in net.trainable_params())


def run_gradient_checks(cfg: ModelConfig, seed: int, step: float = 1e-5,
                        tol: float = 1e-4, corrupt=None) -> list[LossCheck]:
    """Finite-difference checks of all five losses on fresh seeded nets.

    corrupt, when given, is (loss_name, grad_offset) added to the first
    analytic gradient entry of that loss before comparison; it exists so
    tests can prove a broken gradient is detected.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    d, g = make_models(cfg, seed)
    n = 8
    x = rng.standard_normal((n, cfg.feature_dim))
    y = rng.integers(1, cfg.num_classes + 2, size=n)
    xs = rng.standard_normal((6, cfg.feature_dim))
    xf = rng.standard_normal((6, cfg.feature_dim))
    z = rng.standard_normal((n, cfg.noise_dim))
    lam = 0.7

    cases = [
        ("classification", d, g, lambda: classification_loss(d, (x, y))),
        ("similarity", d, g, lambda: similarity_loss(d, (xs, xf))),
        ("matching", g, d, lambda: matching_loss(g, d, x, z)),
        ("real", d, g, lambda: real_sample_loss(d, (x, y))),
        ("fake", d, g, lambda: fake_sample_loss(g, d, z)),
        ("discriminator", d, g,
         lambda: discriminator_loss(g, d, (x, y), (xs, xf), z, lam)[0]),
    ]
    checks = []
    for name, net, frozen, loss_fn in cases:
        net.zero_grad()
        frozen.zero_grad()
        loss_fn()
        isolation_ok = _grads_all_zero(frozen)
        analytic = [(pname, param, grad.copy())
                    for pname, param, grad, _ in net.trainable_params()]
        if corrupt is not None and corrupt[0] == name:
            analytic[0][2].flat[0] += corrupt[1]
        entries = check_gradients(loss_fn, analytic, step=step, tol=tol)
        checks.append(LossCheck(loss_name=name, entries=entries,
                                isolation_ok=isolation_ok))
    return checks
