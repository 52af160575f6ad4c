"""Adversarial training loop, checkpointing and the cross-validation driver."""

from __future__ import annotations

import contextlib
import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError
from .metrics import MetricsReport, predict_full, subject_metrics
from .model import (DEFAULT_LAMBDA, DiscriminatorConfig, GeneratorConfig, InputMode,
                    LossBundle, LossMode, adversarial_losses, build_discriminator,
                    build_generator, check_modes, configs_from_dict, generator_objective,
                    model_config_dict)
from .optim import AdamState, adam_step, load_checkpoint, save_checkpoint
from .sim import load_manifest, load_subject
from .volume import normalize_study

log = logging.getLogger(__name__)


@contextlib.contextmanager
def thread_limit(threads=None):
    """Cap BLAS threads. ``DIXON_THREADS=0`` (or threads=0) is the strict
    single-threaded mode used for bit-reproducible runs."""
    if threads is None:
        env = os.environ.get("DIXON_THREADS")
        threads = int(env) if env not in (None, "") else None
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(1, threads)):
        yield


@dataclass
class TrainConfig:
    corpus_manifest: str = ""
    input_mode: InputMode = InputMode.DUAL_IP_OP
    loss_mode: LossMode = LossMode.L1
    crop_size: tuple = (32, 32, 32)
    batch_size: int = 2
    lr: float = 2e-4
    beta1: float = 0.5
    lam: float = DEFAULT_LAMBDA
    epochs: int = 100
    steps_per_epoch: int = 0  # 0: corpus size / batch size
    seed: int = 0
    folds: int = 0
    levels: int = 4
    filters: tuple = (8, 16, 32, 32)
    disc_filters: tuple = (8, 16)
    disc_strides: tuple = (2, 1, 1)
    conditioned: bool = True
    norm: str = "instance"
    dixon_norm: str = "rms"
    dtype: str = "float32"
    out_dir: str = "run"
    val_subjects: int = 0
    subjects: tuple = ()  # restrict training to these ids (empty: all swap-free)

    def __post_init__(self):
        self.input_mode = InputMode(self.input_mode)
        self.loss_mode = LossMode(self.loss_mode)
        if isinstance(self.crop_size, int):
            self.crop_size = (self.crop_size,) * 3
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if len(self.crop_size) == 1:
            self.crop_size = self.crop_size * 3
        if len(self.crop_size) != 3:
            raise ConfigError(f"crop_size needs 1 or 3 entries, got {self.crop_size}")
        self.filters = tuple(int(f) for f in self.filters)
        self.disc_filters = tuple(int(f) for f in self.disc_filters)
        self.disc_strides = tuple(int(s) for s in self.disc_strides)
        self.subjects = tuple(self.subjects)

    def validate(self):
        check_modes(self.input_mode, self.loss_mode)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        self.generator_config().validate()
        self.discriminator_config().validate()

    def generator_config(self):
        return GeneratorConfig(self.input_mode, self.levels, self.filters, 2,
                               self.crop_size, self.norm)

    def discriminator_config(self):
        return DiscriminatorConfig(self.disc_strides, self.disc_filters, (16, 16, 16),
                                   self.conditioned, self.input_mode, self.norm)

    def to_dict(self):
        d = asdict(self)
        d["input_mode"] = self.input_mode.value
        d["loss_mode"] = self.loss_mode.value
        for k in ("crop_size", "filters", "disc_filters", "disc_strides", "subjects"):
            d[k] = list(d[k])
        return d


# -- data ---------------------------------------------------------------------

@dataclass
class Corpus:
    """Normalised channel arrays, (4, X, Y, Z) ordered ip, op, fat, water."""

    ids: list
    arrays: list
    scales: list

    def __len__(self):
        return len(self.ids)

    def subset(self, keep):
        keep = set(keep)
        rows = [(i, a, s) for i, a, s in zip(self.ids, self.arrays, self.scales) if i in keep]
        return Corpus([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])

    @classmethod
    def from_studies(cls, studies, dtype=np.float32):
        ids, arrays, scales = [], [], []
        for s in studies:
            ns, scale = normalize_study(s)
            ids.append(s.subject_id)
            arrays.append(np.stack([ns.ip.data, ns.op.data, ns.fat.data, ns.water.data])
                          .astype(dtype))
            scales.append(scale)
        return cls(ids, arrays, scales)

    @classmethod
    def from_manifest(cls, manifest, ids=None, swap_free=True, which="scanner",
                      dtype=np.float32):
        entries = [e for e in manifest["subjects"]
                   if (not swap_free or not e["swapped"]) and (ids is None or e["subject_id"] in ids)]
        return cls.from_studies([load_subject(manifest, e, which) for e in entries], dtype)


@dataclass
class Batch:
    inputs: np.ndarray   # (B, 1|2, ...) ip[, op]
    ip: np.ndarray       # (B, 1, ...)
    op: np.ndarray       # (B, 1, ...)
    labels: np.ndarray   # (B, 2, ...) fat, water; real pair for the discriminator
    subjects: list
    origins: list


def sample_batch(corpus, crop_size, rng, batch_size=2, input_mode=InputMode.DUAL_IP_OP):
    """Random subject and random crop origin per batch element."""
    if len(corpus) == 0:
        raise ConfigError("empty corpus")
    crop_size = (crop_size,) * 3 if isinstance(crop_size, int) else tuple(crop_size)
    for a in corpus.arrays:
        if any(c > n for c, n in zip(crop_size, a.shape[1:])):
            raise ConfigError(f"crop {crop_size} larger than subject volume {a.shape[1:]}")
    picks, origins, crops = [], [], []
    for _ in range(batch_size):
        i = int(rng.integers(len(corpus)))
        a = corpus.arrays[i]
        o = tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(a.shape[1:], crop_size))
        sl = tuple(slice(s, s + c) for s, c in zip(o, crop_size))
        crops.append(a[(slice(None),) + sl])
        picks.append(corpus.ids[i])
        origins.append(o)
    x = np.stack(crops)
    n_in = InputMode(input_mode).channels
    return Batch(inputs=np.ascontiguousarray(x[:, :n_in]), ip=x[:, 0:1], op=x[:, 1:2],
                 labels=np.ascontiguousarray(x[:, 2:4]), subjects=picks, origins=origins)


# -- training ------------------------------------------------------------------------

@dataclass
class Models:
    generator: object
    discriminator: object
    g_state: AdamState
    d_state: AdamState
    config: TrainConfig
    step: int = 0


def init_models(cfg: TrainConfig):
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    g = build_generator(cfg.generator_config(), cfg.seed, dtype)
    d = build_discriminator(cfg.discriminator_config(), cfg.seed, dtype)
    return Models(g, d, AdamState(lr=cfg.lr, beta1=cfg.beta1),
                  AdamState(lr=cfg.lr, beta1=cfg.beta1), cfg)


def train_step(models: Models, batch: Batch, cfg: TrainConfig, update_generator=True,
               update_discriminator=True) -> LossBundle:
    """One discriminator update on (real, generated) pairs, then one generator
    update on adv_g + lam * recon."""
    G, D = models.generator, models.discriminator
    dtype = G.dtype
    cond = ad.Tensor(batch.inputs.astype(dtype))
    real = ad.Tensor(batch.labels.astype(dtype))
    models.step += 1

    G.set_trainable(update_generator)
    fake = G(cond)

    D.set_trainable(True)
    d_real = D.judge(cond, real)
    d_fake = D.judge(cond, fake.detach())
    adv_d, _ = adversarial_losses(d_real, d_fake)
    if not np.isfinite(adv_d.values):
        raise DivergenceError(models.step, "non-finite discriminator loss")
    if update_discriminator:
        D.zero_grad()
        adv_d.backward()
        adam_step(D.params, models.d_state)

    D.set_trainable(False)
    d_fake_g = D.judge(cond, fake)
    if cfg.loss_mode is LossMode.L1:
        total, adv_g, recon = generator_objective(d_fake_g, fake, LossMode.L1, cfg.lam,
                                                  labels=real, input_mode=cfg.input_mode)
    else:
        total, adv_g, recon = generator_objective(
            d_fake_g, fake, LossMode.DIXON, cfg.lam, ip=batch.ip.astype(dtype),
            op=batch.op.astype(dtype), input_mode=cfg.input_mode, dixon_norm=cfg.dixon_norm)
    if not np.isfinite(total.values):
        raise DivergenceError(models.step, "non-finite generator loss")
    if update_generator:
        G.zero_grad()
        total.backward()
        adam_step(G.params, models.g_state)
    D.set_trainable(True)
    G.set_trainable(True)
    return LossBundle(adv_g.item(), adv_d.item(), recon.item(), total.item(), cfg.lam)


@dataclass
class TrainRecord:
    history: list = field(default_factory=list)       # LossBundle per step
    validation: list = field(default_factory=list)    # (epoch, mean ssim, mean psnr)
    epoch_seconds: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "adv_d", "adv_g", "recon", "total_g"))
            for i, b in enumerate(self.history, start=1):
                w.writerow([i] + [f"{v:.8g}" for v in (b.adv_d, b.adv_g, b.recon, b.total_g)])


def checkpoint_config(models: Models):
    cfg = models.config
    train = cfg.to_dict()
    del train["out_dir"]  # keeps checkpoints of identical runs byte-identical
    return model_config_dict(cfg.generator_config(), cfg.discriminator_config(),
                             train=train, step=models.step)


def save_models(models: Models, path):
    params = {**models.generator.params, **models.discriminator.params}
    save_checkpoint(path, checkpoint_config(models), params,
                    {"G": models.g_state, "D": models.d_state})


def load_generator(path, dtype=np.float32):
    config, params, _ = load_checkpoint(path)
    gcfg, _ = configs_from_dict(config)
    g = build_generator(gcfg, 0, dtype)
    g.load_arrays(params)
    return g, config


def steps_per_epoch(cfg, corpus):
    return cfg.steps_per_epoch or max(1, len(corpus) // cfg.batch_size)


def run_training(cfg: TrainConfig, corpus=None, val_corpus=None, progress=None, models=None):
    """Train for ``epochs * steps_per_epoch`` steps, checkpointing each epoch.

    Passing ``models`` continues their training (optimizer state included)
    instead of starting from a fresh initialisation.

    Returns (checkpoint path, TrainRecord, Models). On divergence the
    previous epoch's checkpoint is left in place and DivergenceError is raised.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        manifest = load_manifest(cfg.corpus_manifest)
        ids = set(cfg.subjects) if cfg.subjects else None
        corpus = Corpus.from_manifest(manifest, ids)
        if val_corpus is None and cfg.val_subjects:
            rest = [e["subject_id"] for e in manifest["subjects"]
                    if not e["swapped"] and e["subject_id"] not in corpus.ids]
            if rest:
                val_corpus = Corpus.from_manifest(manifest, set(rest[:cfg.val_subjects]))
    if models is None:
        models = init_models(cfg)
        rng = np.random.default_rng([cfg.seed, 0xBA7C])
    else:
        models.config = cfg
        rng = np.random.default_rng([cfg.seed, 0xBA7C, models.step])
    spe = steps_per_epoch(cfg, corpus)
    record = TrainRecord()
    ckpt = out / "checkpoint.dckp"
    with thread_limit():
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            for _ in range(spe):
                batch = sample_batch(corpus, cfg.crop_size, rng, cfg.batch_size, cfg.input_mode)
                try:
                    bundle = train_step(models, batch, cfg)
                except DivergenceError:
                    record.write_csv(out / "train_record.csv")
                    raise
                record.history.append(bundle)
                if progress:
                    progress(models.step, bundle)
            save_models(models, ckpt)
            if val_corpus is not None and len(val_corpus):
                rep = evaluate_corpus(models.generator, val_corpus, cfg.crop_size)
                s = rep.summary()
                record.validation.append((epoch + 1, rep.mean_ssim(),
                                          0.5 * (s["psnr_w"][0] + s["psnr_f"][0])))
            record.epoch_seconds.append(time.perf_counter() - t0)
            log.info("epoch %d/%d done: %s", epoch + 1, cfg.epochs, record.history[-1])
    record.write_csv(out / "train_record.csv")
    return ckpt, record, models


def evaluate_corpus(generator, corpus: Corpus, tile):
    """SSIM/PSNR of full-volume predictions against the corpus fat/water."""
    from .volume import Channel, DixonStudy, Provenance, Volume
    report = MetricsReport()
    for sid, a in zip(corpus.ids, corpus.arrays):
        vols = [Volume(a[k], channel=t) for k, t in
                enumerate((Channel.IP, Channel.OP, Channel.F, Channel.W))]
        study = DixonStudy(*vols, Provenance.SIMULATED_SCANNER, sid)
        pf, pw = predict_full(generator, study, tile)
        report.add(subject_metrics(sid, pf, pw, vols[2], vols[3]))
    return report


# -- cross-validation --------------------------------------------------------------------

def fold_partition(ids, folds, seed):
    """Seeded shuffle, then ``folds`` contiguous chunks; the remainder goes to
    the last fold."""
    ids = list(ids)
    if len(ids) < folds:
        raise ConfigError(f"{len(ids)} subjects cannot fill {folds} folds")
    order = [ids[i] for i in np.random.default_rng([seed, 0xF01D]).permutation(len(ids))]
    size = len(ids) // folds
    parts = [order[k * size:(k + 1) * size] for k in range(folds - 1)]
    parts.append(order[(folds - 1) * size:])
    return parts


@dataclass
class FoldResult:
    fold: int
    train_ids: list
    test_ids: list
    report: MetricsReport


def run_cross_validation(cfg: TrainConfig, folds=4, progress=None):
    manifest = load_manifest(cfg.corpus_manifest)
    full = Corpus.from_manifest(manifest)
    parts = fold_partition(full.ids, folds, cfg.seed)
    results = []
    for k, test_ids in enumerate(parts):
        train_ids = [i for i in full.ids if i not in test_ids]
        train_c, test_c = full.subset(train_ids), full.subset(test_ids)
        fold_cfg = replace(cfg, out_dir=str(Path(cfg.out_dir) / f"fold{k + 1}"),
                           subjects=tuple(train_ids))
        _, _, models = run_training(fold_cfg, corpus=train_c, progress=progress)
        report = evaluate_corpus(models.generator, test_c, cfg.crop_size)
        results.append(FoldResult(k + 1, train_ids, list(test_ids), report))
    return results


def format_cv_table(results, label=""):
    """One line per fold plus a pooled line over every test subject."""
    lines = [f"{label} fold {r.fold}: " + r.report.table_line() for r in results]
    pooled = MetricsReport()
    for r in results:
        for row in r.report.rows:
            pooled.add(row)
    lines.append(f"{label} all folds: " + pooled.table_line())
    return "\n".join(lines)
