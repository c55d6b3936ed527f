"""Training procedures: baselines, distillation, adversarial adaptation.

All randomness comes from named streams derived from ``TrainConfig.seed``,
so every procedure is bit-reproducible for fixed inputs.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as tc
from .losses import (
    DEFAULT_TEMPERATURE,
    SOURCE,
    TARGET,
    adversarial_losses,
    check_temperature,
    cross_entropy,
    distillation_loss,
    softmax,
)
from .models import (
    DiscriminatorConfig,
    ModelParams,
    SegNetConfig,
    forward_disc,
    forward_seg,
    init_params,
)
from .optim import DEFAULT_DECAY_START, DEFAULT_LR, AdamState, LrSchedule, adam_step, lr_at
from .synthdata import SOURCE_TRAIN, TARGET_UNLABELED, Dataset, Sample, standardize

log = logging.getLogger(__name__)

KD = "KD"
ADA = "ADA"


class PipelineError(RuntimeError):
    pass


class UnlabeledDataError(PipelineError):
    pass


class ConfigMismatchError(PipelineError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    base_lr: float = DEFAULT_LR
    decay_start_fraction: float = DEFAULT_DECAY_START
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    ada_disc_lr: float = DEFAULT_LR
    ada_confusion_weight: float = 0.1
    ada_ramp_fraction: float = 0.25
    # source:target share of each distillation batch; None draws from the
    # shuffled union, i.e. proportional to N:M
    mix_ratio: tuple[float, float] | None = None
    soften_student: bool = False
    model: SegNetConfig = SegNetConfig()
    disc: DiscriminatorConfig = DiscriminatorConfig()

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.ada_confusion_weight < 0:
            raise ValueError("ada_confusion_weight must be >= 0")
        check_temperature(self.temperature)
        if self.mix_ratio is not None:
            ratio = tuple(float(r) for r in self.mix_ratio)
            if len(ratio) != 2 or min(ratio) < 0 or abs(sum(ratio) - 1.0) > 1e-9:
                raise ValueError(f"mix_ratio {self.mix_ratio} must be two proportions summing to 1")
            object.__setattr__(self, "mix_ratio", ratio)

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(max(self.epochs, 1), self.decay_start_fraction)

    def lr(self, epoch: int, base: float | None = None) -> float:
        return lr_at(self.schedule, epoch, self.base_lr if base is None else base)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["model"] = asdict(self.model)
        d["disc"] = asdict(self.disc)
        return d


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments) onto a TrainConfig."""
    base = base or TrainConfig()
    known = {f.name: f for f in fields(TrainConfig)}
    updates: dict = {}
    model_updates: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "widths":
            model_updates["widths"] = tuple(int(v) for v in value.split(","))
            model_updates["depth"] = len(model_updates["widths"])
            continue
        if key not in known or key in ("model", "disc"):
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        current = getattr(base, key)
        if key == "mix_ratio":
            updates[key] = None if value.lower() == "none" else tuple(float(v) for v in value.split(":"))
        elif isinstance(current, bool):
            updates[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            updates[key] = int(value)
        else:
            updates[key] = float(value)
    cfg = replace(base, **updates)
    if model_updates:
        cfg = replace(cfg, model=replace(cfg.model, **model_updates))
    return cfg


def desk_config(seed: int = 0, **overrides) -> TrainConfig:
    """Settings used for the scenario matrix at 32x32 scale.

    The learning rates are raised from 1e-4 because a few hundred Adam steps
    at 1e-4 leave a freshly initialised network nowhere near convergence;
    the decay still starts 3/8 of the way through. Batches of 4 give the
    distilled students enough steps to leave the all-background plateau.
    Faster rates do converge sooner but leave teachers with near-zero lesion
    margins, and their softened outputs then teach nothing.
    """
    base = dict(
        epochs=30,
        batch_size=4,
        base_lr=3e-3,
        ada_disc_lr=1e-3,
        ada_confusion_weight=0.1,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainedModel:
    params: ModelParams
    provenance: dict
    loss_curve: list[float] = field(default_factory=list)
    aux: dict = field(default_factory=dict, repr=False)

    @property
    def config(self) -> SegNetConfig:
        return self.params.config


@dataclass(frozen=True)
class SoftLabel:
    sample: Sample
    teacher_logits: tc.Tensor
    origin: str  # "source" or "target"


@dataclass
class SoftLabelSet:
    entries: list[SoftLabel]
    teacher_config: SegNetConfig
    teacher_checksum: str
    n_source: int
    n_target: int

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def derived_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def frozen(params: ModelParams) -> ModelParams:
    """Read-only view: forwards through it build no graph."""
    return ModelParams(params.config, params.seed, {k: t.detach() for k, t in params.items()})


def predict_logits(params: ModelParams, images: np.ndarray, batch: int = 32) -> np.ndarray:
    view = frozen(params)
    return np.concatenate(
        [forward_seg(view, images[i:i + batch]).data for i in range(0, len(images), batch)]
    )


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.moveaxis(np.eye(k)[labels.astype(int)], -1, 1)


def _require_labeled(*datasets: Dataset) -> None:
    for ds in datasets:
        if not ds.labeled:
            raise UnlabeledDataError(f"dataset with role {ds.role!r} has no visible labels")


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _step(params: ModelParams, state: AdamState, loss: tc.Tensor, lr: float) -> None:
    loss.backward()
    adam_step(params, state, lr)
    params.zero_grad()


def _provenance(scenario: str, cfg: TrainConfig, **data) -> dict:
    return {"scenario": scenario, "seed": cfg.seed, "config": cfg.as_dict(), **data}


# ---------------------------------------------------------------------------
# supervised baselines
# ---------------------------------------------------------------------------

def train_teacher(
    source: Dataset,
    cfg: TrainConfig,
    labeled_target: Dataset | None = None,
    scenario: str = "L-bound",
) -> TrainedModel:
    """Cross-entropy training on labelled data (source, plus target for U-bound)."""
    parts = [source] if labeled_target is None else [source, labeled_target]
    _require_labeled(*parts)
    X = np.concatenate([ds.images() for ds in parts])
    Y = _onehot(np.concatenate([ds.labels() for ds in parts]), cfg.model.num_classes)
    params = init_params(cfg.model, cfg.seed)
    state = AdamState(cfg.base_lr)
    rng = stream(cfg.seed, "shuffle")
    curve = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        total = 0.0
        for idx in _batches(rng, len(X), cfg.batch_size):
            probs = softmax(forward_seg(params, X[idx]), axis=1)
            loss = cross_entropy(Y[idx], probs, axis=1)
            _step(params, state, loss.scalar, lr)
            total += loss.value * len(idx)
        curve.append(total / len(X))
    prov = _provenance(
        scenario,
        cfg,
        data=[ds.checksum() for ds in parts],
    )
    return TrainedModel(params, prov, curve)


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------

def make_soft_labels(teacher: TrainedModel, source: Dataset, target: Dataset) -> SoftLabelSet:
    """Raw teacher logits for every source and unlabelled target image."""
    if target.role != TARGET_UNLABELED:
        raise PipelineError(f"target must have role {TARGET_UNLABELED!r}, got {target.role!r}")
    entries = []
    for ds, origin in ((source, "source"), (target, "target")):
        if not len(ds):
            continue
        logits = predict_logits(teacher.params, ds.images())
        entries += [SoftLabel(s, tc.Tensor(z), origin) for s, z in zip(ds.samples, logits)]
    return SoftLabelSet(entries, teacher.config, teacher.params.checksum(), len(source), len(target))


def _mixed_batches(rng: np.random.Generator, soft: SoftLabelSet, cfg: TrainConfig) -> list[np.ndarray]:
    n = len(soft)
    if cfg.mix_ratio is None or soft.n_source == 0 or soft.n_target == 0:
        return _batches(rng, n, cfg.batch_size)
    src = np.array([i for i, e in enumerate(soft.entries) if e.origin == "source"])
    tgt = np.array([i for i, e in enumerate(soft.entries) if e.origin == "target"])
    n_src = int(round(cfg.batch_size * cfg.mix_ratio[0]))
    n_tgt = cfg.batch_size - n_src
    out = []
    for _ in range(-(-n // cfg.batch_size)):
        out.append(np.concatenate([rng.choice(src, n_src), rng.choice(tgt, n_tgt)]))
    return out


def distill_student(soft: SoftLabelSet, cfg: TrainConfig, scenario: str = "KD") -> TrainedModel:
    """Fresh student trained on temperature-softened teacher outputs over the union."""
    if cfg.model != soft.teacher_config:
        raise ConfigMismatchError(
            f"student config {cfg.model} differs from teacher config {soft.teacher_config}"
        )
    X = standardize(np.stack([e.sample.image for e in soft.entries]))
    Z = np.stack([e.teacher_logits.data for e in soft.entries])
    params = init_params(cfg.model, cfg.seed)
    state = AdamState(cfg.base_lr)
    rng = stream(cfg.seed, "distill")
    curve = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        total, count = 0.0, 0
        for idx in _mixed_batches(rng, soft, cfg):
            logits = forward_seg(params, X[idx])
            loss = distillation_loss(
                Z[idx], logits, cfg.temperature, axis=1, soften_student=cfg.soften_student
            )
            _step(params, state, loss.scalar, lr)
            total += loss.value * len(idx)
            count += len(idx)
        curve.append(total / count)
    prov = _provenance(
        scenario,
        cfg,
        teacher=soft.teacher_checksum,
        data=sorted({e.sample.domain_id for e in soft.entries}),
        n_source=soft.n_source,
        n_target=soft.n_target,
    )
    return TrainedModel(params, prov, curve)


# ---------------------------------------------------------------------------
# adversarial adaptation
# ---------------------------------------------------------------------------

def _ramp(cfg: TrainConfig, epoch: int) -> float:
    ramp_epochs = cfg.ada_ramp_fraction * cfg.epochs
    if ramp_epochs <= 0:
        return cfg.ada_confusion_weight
    return cfg.ada_confusion_weight * min(1.0, epoch / ramp_epochs)


def train_ada(
    source: Dataset,
    target_unlabeled: Dataset,
    cfg: TrainConfig,
    init: ModelParams | None = None,
    scenario: str = "ADA",
) -> TrainedModel:
    """Alternate a discriminator step and a segmenter step per source batch.

    The discriminator sees softmax maps with true domain labels. The segmenter
    minimises source cross-entropy plus a ramped weight times the confusion
    loss over both domains. Source batches follow the same shuffle stream as
    :func:`train_teacher`, so with zero confusion weight the segmenter
    trajectory is exactly the source-only baseline.
    """
    _require_labeled(source)
    if target_unlabeled.role != TARGET_UNLABELED:
        raise PipelineError("ADA target must be unlabeled target data")
    k = cfg.model.num_classes
    Xs = source.images()
    Ys = _onehot(source.labels(), k)
    Xt = target_unlabeled.images()
    seg = init.copy() if init is not None else init_params(cfg.model, cfg.seed)
    disc_cfg = replace(cfg.disc, in_channels=k, image_size=tuple(Xs.shape[2:]))
    disc = init_params(disc_cfg, derived_seed(cfg.seed, "discriminator"))
    seg_state = AdamState(cfg.base_lr)
    disc_state = AdamState(cfg.ada_disc_lr)
    rng = stream(cfg.seed, "shuffle")
    trng = stream(cfg.seed, "target")
    t_queue: list[int] = []

    def target_batch(size: int) -> np.ndarray:
        nonlocal t_queue
        size = min(size, len(Xt))
        while len(t_queue) < size:
            t_queue += trng.permutation(len(Xt)).tolist()
        out, t_queue = t_queue[:size], t_queue[size:]
        return np.array(out)

    curve, disc_curve = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        dlr = cfg.lr(epoch, cfg.ada_disc_lr)
        lam = _ramp(cfg, epoch)
        total = dtotal = 0.0
        for idx in _batches(rng, len(Xs), cfg.batch_size):
            tidx = target_batch(len(idx))
            domains = [SOURCE] * len(idx) + [TARGET] * len(tidx)

            # one segmenter forward serves both steps: the discriminator trains
            # on a detached copy, then the segmenter is scored by the updated
            # discriminator through the live graph
            probs_s = softmax(forward_seg(seg, Xs[idx]), axis=1)
            probs_t = softmax(forward_seg(seg, Xt[tidx]), axis=1)
            maps = tc.concat([probs_s, probs_t], axis=0)
            d_loss, _ = adversarial_losses(forward_disc(disc, maps.detach()), domains)
            _step(disc, disc_state, d_loss.scalar, dlr)
            dtotal += d_loss.value

            ce = cross_entropy(Ys[idx], probs_s, axis=1)
            _, conf = adversarial_losses(forward_disc(disc, maps), domains)
            loss = tc.add(ce.scalar, tc.mul(conf.scalar, lam))
            loss.backward()
            adam_step(seg, seg_state, lr)
            seg.zero_grad()
            disc.zero_grad()
            total += loss.item() * len(idx)
        curve.append(total / len(Xs))
        disc_curve.append(dtotal / max(1, -(-len(Xs) // cfg.batch_size)))
    prov = _provenance(
        scenario,
        cfg,
        data=[source.checksum(), target_unlabeled.checksum()],
        warm_start=None if init is None else init.checksum(),
    )
    return TrainedModel(seg, prov, curve, aux={"discriminator": disc, "disc_curve": disc_curve})


def domain_probe(
    seg_params: ModelParams,
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    epochs: int = 30,
    lr: float = 1e-3,
) -> float:
    """Held-out accuracy of a fresh discriminator trained on frozen softmax maps.

    ``train`` and ``test`` are (source images, target images) pairs. Chance
    level is 0.5; high accuracy means the segmenter's outputs still reveal
    the domain.
    """
    k = seg_params.config.num_classes

    def maps(images):
        z = predict_logits(seg_params, images)
        return softmax(tc.Tensor(z), axis=1).data

    Ms = np.concatenate([maps(train[0]), maps(train[1])])
    ys = np.array([SOURCE] * len(train[0]) + [TARGET] * len(train[1]))
    disc_cfg = replace(cfg.disc, in_channels=k, image_size=tuple(Ms.shape[2:]))
    disc = init_params(disc_cfg, derived_seed(cfg.seed, "probe"))
    state = AdamState(lr)
    rng = stream(cfg.seed, "probe")
    for _ in range(epochs):
        for idx in _batches(rng, len(Ms), 16):
            d_loss, _ = adversarial_losses(forward_disc(disc, Ms[idx]), ys[idx])
            _step(disc, state, d_loss.scalar, lr)
    Mt = np.concatenate([maps(test[0]), maps(test[1])])
    yt = np.array([SOURCE] * len(test[0]) + [TARGET] * len(test[1]))
    logits = forward_disc(frozen(disc), Mt).data
    return float((logits.argmax(axis=1) == yt).mean())


# ---------------------------------------------------------------------------
# composite scenarios
# ---------------------------------------------------------------------------

def adapt_on_the_fly(
    model: TrainedModel,
    subject: Sample,
    method: str,
    cfg: TrainConfig,
    source: Dataset,
) -> TrainedModel:
    """Adapt to one unlabelled target subject with ``model`` held fixed.

    KD distils a fresh student from ``model`` over the source set plus the
    subject. ADA starts a copy of ``model`` and runs adversarial training
    against the single subject.
    """
    single = Dataset([subject], TARGET_UNLABELED)
    if method == KD:
        return distill_student(make_soft_labels(model, source, single), cfg, scenario="on-the-fly-KD")
    if method == ADA:
        return train_ada(source, single, cfg, init=model.params, scenario="on-the-fly-ADA")
    raise ValueError(f"method must be {KD!r} or {ADA!r}, got {method!r}")


def distill_from_ada(ada_model: TrainedModel, source: Dataset, target: Dataset, cfg: TrainConfig) -> TrainedModel:
    """Distillation with the adversarially adapted network as the teacher."""
    return distill_student(make_soft_labels(ada_model, source, target), cfg, scenario="KD-on-ADA")
