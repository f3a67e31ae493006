"""Desk-scale cross-material experiment: pretrained initialization vs training from scratch."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import metrics
from .datagen import SyntheticSpec, load_samples, make_protocol_split, synthesize
from .models import BackboneConfig, build_extractor, score_in_batches
from .training import FinetuneConfig, PretrainConfig, finetune, pretrain_state_run


@dataclass
class ArmResult:
    seed: int
    auc: float
    eer: float
    tdr: float


@dataclass
class DeskExperimentResult:
    ifom: List[ArmResult] = field(default_factory=list)
    scratch: List[ArmResult] = field(default_factory=list)
    lr_reduction: List[float] = field(default_factory=list)
    seconds: float = 0.0

    def mean_auc(self, arm: str) -> float:
        return float(np.mean([r.auc for r in getattr(self, arm)]))

    def summary(self) -> Dict[str, float]:
        return {
            "ifom_auc": self.mean_auc("ifom"),
            "scratch_auc": self.mean_auc("scratch"),
            "min_lr_reduction": float(min(self.lr_reduction)),
            "seconds": self.seconds,
        }


def reconstruction_reduction(l_r: np.ndarray, steps_per_epoch: int) -> float:
    """Fractional drop of L_r from the first step to the mean over the final epoch."""
    return float(1.0 - np.mean(l_r[-steps_per_epoch:]) / l_r[0])


def cross_material_data(n_per_class: int = 500, size: int = 32,
                        train_regime: str = "woodglue-analog", holdout_regime: str = "gelatine-analog",
                        seed: int = 0):
    """Two fingerprint regimes; attacks of ``holdout_regime`` only appear at test time."""
    specs = [SyntheticSpec("fingerprint", (size, size), n_per_class, r, 0.03, seed)
             for r in (train_regime, holdout_regime)]
    samples, manifest = synthesize(specs)
    split = make_protocol_split(manifest, "cross_material", holdout_regime)
    by_id = dict(zip(manifest.ids(), samples))
    train = [by_id[i] for i in split.train.ids()]
    test = [by_id[i] for i in split.test.ids()]
    return train, test


def _evaluate(det, test) -> Tuple[float, float, float]:
    scores = score_in_batches(det, test)
    s = metrics.ScoreSet.from_labels(scores, [t.label == "attack" for t in test])
    return metrics.auc(s), metrics.eer(s), metrics.tdr_at_fdr(s, 0.01)


def run_desk_experiment(seeds: Sequence[int] = (0, 1, 2, 3, 4), n_per_class: int = 500,
                        pretrain_epochs: int = 10, finetune_epochs: int = 5,
                        pretrain_cfg: PretrainConfig = None, finetune_cfg: FinetuneConfig = None,
                        verbose: bool = False) -> DeskExperimentResult:
    t0 = time.perf_counter()
    train, test = cross_material_data(n_per_class)
    backbone = BackboneConfig("tiny", tuple(train[0].shape), 32)
    res = DeskExperimentResult()
    for seed in seeds:
        pcfg = pretrain_cfg or PretrainConfig(epochs=pretrain_epochs)
        pcfg = PretrainConfig.from_dict(dict(pcfg.to_dict(), seed=seed, epochs=pretrain_epochs))
        fcfg = finetune_cfg or FinetuneConfig(epochs=finetune_epochs)
        fcfg = FinetuneConfig.from_dict(dict(fcfg.to_dict(), seed=seed, epochs=finetune_epochs))

        state = pretrain_state_run(train, pcfg, backbone)
        steps = len(train) // pcfg.batch_size
        res.lr_reduction.append(reconstruction_reduction(state.history.values("L_r"), steps))
        det, _ = finetune(state.bundle.extractor, train, fcfg)
        res.ifom.append(ArmResult(seed, *_evaluate(det, test)))

        scratch = build_extractor(backbone, seed)
        det0, _ = finetune(scratch, train, fcfg)
        res.scratch.append(ArmResult(seed, *_evaluate(det0, test)))
        if verbose:
            print(f"seed {seed}: IF-OM auc={res.ifom[-1].auc:.4f} scratch auc={res.scratch[-1].auc:.4f} "
                  f"L_r drop={res.lr_reduction[-1]:.3f}")
    res.seconds = time.perf_counter() - t0
    return res
