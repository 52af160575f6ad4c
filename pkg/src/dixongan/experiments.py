"""Desk-scale experiments on synthetic corpora: model ordering and
end-to-end swap correction. Shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sim
from .metrics import DEFAULT_MIN_CLUSTER, DEFAULT_THRESHOLD, predict_full, swap_label_map
from .model import InputMode, LossMode
from .train import Corpus, TrainConfig, evaluate_corpus, init_models, run_training
from .volume import DixonStudy, normalize_study

# toy model shared by the ordering and swap-correction runs; lr sits inside
# the swept range but above the full-scale default, which barely moves a
# model this small within a few thousand steps
TOY = dict(crop_size=24, levels=3, filters=(8, 16, 32), disc_filters=(8, 16), batch_size=2,
           lr=1e-3)
ORDERING_STEPS = 1000
SWAP_EXTRA_STEPS = 3000

MODELS = {
    "SINGLE/L1": (InputMode.SINGLE_IP, LossMode.L1),
    "DUAL/L1": (InputMode.DUAL_IP_OP, LossMode.L1),
    "DUAL/DIXON": (InputMode.DUAL_IP_OP, LossMode.DIXON),
}


def swap_free_studies(n, seed, dims=(48, 48, 48), noise_sigma=0.01, first_index=0):
    """Scanner-side studies of ``n`` jittered swap-free subjects."""
    base = sim.default_spec(dims, seed, noise_sigma)
    out = []
    for i in range(first_index, first_index + n):
        _, scanner = sim.make_study(sim.subject_spec(base, i, seed), f"sub{i:04d}")
        out.append(scanner)
    return out


def toy_config(input_mode, loss_mode, seed, steps, out_dir, **overrides):
    kw = dict(TOY)
    kw.update(overrides)
    epochs = max(1, steps // 100)
    return TrainConfig(input_mode=input_mode, loss_mode=loss_mode, seed=seed, epochs=epochs,
                       steps_per_epoch=-(-steps // epochs), out_dir=str(out_dir), **kw)


@dataclass
class OrderingResult:
    ssim: dict = field(default_factory=dict)   # model -> [mean ssim per seed]
    psnr: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)  # (model, seed) -> train.Models
    seconds: float = 0.0
    corpus_seed: int = 2024
    steps: int = 0

    def median(self, model):
        return statistics.median(self.ssim[model])

    def gaps(self):
        return (self.median("DUAL/L1") - self.median("DUAL/DIXON"),
                self.median("DUAL/DIXON") - self.median("SINGLE/L1"))

    def holds(self, min_gap=0.005):
        return all(g >= min_gap for g in self.gaps())

    def lines(self):
        out = []
        for m in MODELS:
            vals = ", ".join(f"{v:.4f}" for v in self.ssim[m])
            out.append(f"{m:<11} median SSIM {self.median(m):.4f}  per seed [{vals}]  "
                       f"median PSNR {statistics.median(self.psnr[m]):.2f} dB")
        return out


def ordering_experiment(out_dir, seeds=(0, 1, 2), steps=ORDERING_STEPS, n_train=18, n_test=6,
                        corpus_seed=2024, progress=None):
    """Train the three toy models per seed on ``n_train`` swap-free studies
    and score SSIM on ``n_test`` held-out ones."""
    t0 = time.perf_counter()
    studies = swap_free_studies(n_train + n_test, corpus_seed)
    train_c = Corpus.from_studies(studies[:n_train])
    test_c = Corpus.from_studies(studies[n_train:])
    result = OrderingResult(corpus_seed=corpus_seed, steps=steps)
    for name, (im, lm) in MODELS.items():
        result.ssim[name], result.psnr[name] = [], []
        for seed in seeds:
            tag = name.replace("/", "_").lower()
            cfg = toy_config(im, lm, seed, steps, Path(out_dir) / f"{tag}_seed{seed}")
            _, _, models = run_training(cfg, corpus=train_c)
            rep = evaluate_corpus(models.generator, test_c, cfg.crop_size)
            s = rep.summary()
            result.ssim[name].append(rep.mean_ssim())
            result.psnr[name].append(0.5 * (s["psnr_w"][0] + s["psnr_f"][0]))
            result.models[(name, seed)] = models
            if progress:
                progress(name, seed, result.ssim[name][-1])
    result.seconds = time.perf_counter() - t0
    return result


# -- swap correction ---------------------------------------------------------------------

def bladder_swap(spec, kind):
    """A FULL_SLAB through the bladder or a BLOB centred on it. The two are
    never combined: overlapping exchanges cancel."""
    bladder = next(b for b in spec.bodies if b.name == "bladder")
    kind = sim.SwapKind(kind)
    if kind is sim.SwapKind.FULL_SLAB:
        cz, rz = bladder.center[2], bladder.radii[2]
        z0, z1 = int(np.floor(cz - rz)) - 1, int(np.ceil(cz + rz)) + 2
        return sim.SwapDirective(kind, {"z_range": [max(z0, 0), z1]})
    if kind is sim.SwapKind.BLOB:
        return sim.SwapDirective(kind, {"center": [round(c) for c in bladder.center],
                                        "radius": float(max(bladder.radii) + 1.0)})
    raise ValueError(f"unsupported swap kind {kind.value}")


@dataclass
class SwapCase:
    study: DixonStudy       # normalised scanner study, swaps induced
    truth_mask: np.ndarray  # voxels left exchanged by the directives
    qualifying: np.ndarray  # truth_mask restricted to |W - F| > threshold * scale


def swap_cases(n, seed, induce=True, dims=(48, 48, 48), noise_sigma=0.01, first_index=1000,
               threshold=DEFAULT_THRESHOLD):
    """Held-out scanner studies, normalised, with (or without) an induced
    bladder swap, alternating FULL_SLAB and BLOB."""
    base = sim.default_spec(dims, seed, noise_sigma)
    cases = []
    for i in range(first_index, first_index + n):
        spec = sim.subject_spec(base, i, seed)
        kind = (sim.SwapKind.FULL_SLAB, sim.SwapKind.BLOB)[(i - first_index) % 2]
        swaps = [bladder_swap(spec, kind)] if induce else []
        truth, scanner = sim.make_study(replace(spec, swaps=swaps), f"sub{i:04d}")
        ns, scale = normalize_study(scanner)
        mask = sim.swap_mask(swaps, dims)
        diff = np.abs(truth.water.data - truth.fat.data) > threshold * scale
        cases.append(SwapCase(ns, mask, mask & diff))
    return cases


@dataclass
class SwapCorrectionResult:
    recovered: int
    qualifying: int
    fp_clusters: list  # clusters per swap-free study

    @property
    def recovery(self):
        return self.recovered / self.qualifying if self.qualifying else float("nan")


def swap_correction(generator, swapped, clean, tile,
                    threshold=DEFAULT_THRESHOLD, min_cluster=DEFAULT_MIN_CLUSTER):
    recovered = qualifying = 0
    for case in swapped:
        pf, pw = predict_full(generator, case.study, tile)
        lm = swap_label_map(case.study.fat, case.study.water, pf, pw, threshold, min_cluster)
        hit = lm.mask.data > 0
        recovered += int(np.sum(hit & case.qualifying))
        qualifying += int(np.sum(case.qualifying))
    fp = []
    for case in clean:
        pf, pw = predict_full(generator, case.study, tile)
        lm = swap_label_map(case.study.fat, case.study.water, pf, pw, threshold, min_cluster)
        fp.append(len(lm.clusters))
    return SwapCorrectionResult(recovered, qualifying, fp)



@dataclass
class SwapExperiment:
    result: SwapCorrectionResult
    steps: int          # total generator updates behind the evaluated model
    seconds: float      # time spent in this experiment, reused training excluded


def swap_correction_experiment(out_dir, ordering=None, seed=0, extra_steps=SWAP_EXTRA_STEPS,
                               n=10, corpus_seed=2024, n_train=18, progress=None):
    """Continue training the ordering run's DUAL/L1 model (or a fresh one)
    on swap-free studies, then score swap label maps on ``n`` held-out
    studies with an induced bladder swap and ``n`` swap-free ones."""
    t0 = time.perf_counter()
    if ordering is not None:
        corpus_seed = ordering.corpus_seed
    train_c = Corpus.from_studies(swap_free_studies(n_train, corpus_seed))
    im, lm = MODELS["DUAL/L1"]
    models = ordering.models.get(("DUAL/L1", seed)) if ordering is not None else None
    if extra_steps > 0:
        cfg = toy_config(im, lm, seed, extra_steps, Path(out_dir) / f"dual_l1_seed{seed}")
        _, _, models = run_training(cfg, corpus=train_c, models=models, progress=progress)
    elif models is None:
        models = init_models(toy_config(im, lm, seed, 1, out_dir))
    swapped = swap_cases(n, corpus_seed, induce=True)
    clean = swap_cases(n, corpus_seed, induce=False, first_index=2000)
    res = swap_correction(models.generator, swapped, clean, models.config.crop_size)
    return SwapExperiment(res, models.step, time.perf_counter() - t0)
