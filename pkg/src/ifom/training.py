"""Joint De-Folding / De-Mixing pretraining and supervised PAD fine-tuning.

Randomness is organized so that runs are exactly reproducible and resumable:
model initialization uses the config seed, and every epoch draws its shuffle,
fold specs, mixing weights and noise from ``default_rng([seed, phase, epoch])``.
Resuming from an epoch checkpoint therefore replays the same stream as an
uninterrupted run.
"""

from __future__ import annotations

import contextlib
import functools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import IncompatibleCheckpointError, InvalidInputError
from .losses import (
    NoiseSpec,
    combined_pretrain_loss,
    loss_adversarial,
    loss_crossentropy,
    loss_reconstruction,
    loss_topological,
)
from .models import (
    CHECKPOINT_FORMAT_VERSION,
    BackboneConfig,
    Detector,
    Extractor,
    ModelBundle,
    build_bundle,
    clip_parameters,
    init_detector_from_extractor,
    load_module_arrays,
    module_arrays,
    read_archive,
    write_archive,
)
from .transforms import MODALITIES, fold_array, sample_fold_spec

PRETRAIN_PHASE = 0
FINETUNE_PHASE = 1


def _strict_kwargs(cls, d: Mapping) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise InvalidInputError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(d)


@dataclass(frozen=True)
class PretrainConfig:
    """Pretraining hyper-parameters.

    Defaults are the desk-scale settings used with the tiny backbone; the
    ``paper_*`` constructors return the full-scale settings.  The desk
    learning rate is 1000x the full-scale one, and keeping lr * decay at the
    full-scale value leaves a weight decay indistinguishable from zero.
    Leaving 5e-4 in place instead lets coupled L2 decay dominate the tiny
    scale-invariant (GroupNorm) gradients and collapses the embedding.
    """

    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 12
    epochs: int = 10
    critic_clip: float = 0.01
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    modality: str = "fingerprint"
    squared_reconstruction: bool = False

    def __post_init__(self):
        if isinstance(self.noise, Mapping):
            object.__setattr__(self, "noise", NoiseSpec(**self.noise))
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise InvalidInputError("learning_rate must be non-negative")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2 to form mixing pairs")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"unknown modality {self.modality!r}")

    @classmethod
    def paper_fingerprint(cls, **kw) -> "PretrainConfig":
        return cls(**dict(dict(learning_rate=1e-6, weight_decay=5e-4, batch_size=12, modality="fingerprint"), **kw))

    @classmethod
    def paper_face(cls, **kw) -> "PretrainConfig":
        return cls(**dict(dict(learning_rate=1e-4, weight_decay=5e-4, batch_size=32, modality="face"), **kw))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PretrainConfig":
        return cls(**_strict_kwargs(cls, d))


@dataclass(frozen=True)
class FinetuneConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise InvalidInputError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")

    @classmethod
    def paper_fingerprint(cls, **kw) -> "FinetuneConfig":
        return cls(**dict(dict(optimizer="adam", learning_rate=1e-4, weight_decay=5e-4, batch_size=128), **kw))

    @classmethod
    def paper_face(cls, **kw) -> "FinetuneConfig":
        return cls(**dict(dict(optimizer="sgd", learning_rate=1e-2, momentum=0.9, weight_decay=5e-4), **kw))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FinetuneConfig":
        return cls(**_strict_kwargs(cls, d))


HISTORY_KEYS = ("phase", "epoch", "step")


@dataclass
class TrainingHistory:
    seed: int
    records: List[Dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, record: Mapping) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("history steps must increase")
        self.records.append(dict(record))

    def __len__(self):
        return len(self.records)

    def values(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_ndjson(self) -> str:
        """One line per (phase, epoch, step, loss, value); floats keep full precision."""
        lines = []
        for r in self.records:
            head = {k: r[k] for k in HISTORY_KEYS if k in r}
            for name, value in r.items():
                if name not in HISTORY_KEYS:
                    lines.append(json.dumps(dict(head, loss=name, value=value)) + "\n")
        return "".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ndjson())

    @staticmethod
    def read(path) -> List[Dict]:
        """Regroup the lines of a history file into one record per step."""
        records: List[Dict] = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            key = tuple(row.get(k) for k in HISTORY_KEYS)
            if not records or tuple(records[-1].get(k) for k in HISTORY_KEYS) != key:
                records.append({k: row[k] for k in HISTORY_KEYS if k in row})
            records[-1][row["loss"]] = row["value"]
        return records


def make_optimizer(params, name: str, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, momentum: float = 0.9) -> torch.optim.Optimizer:
    params = list(params)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(beta1, beta2), weight_decay=weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def _opt(params, cfg) -> torch.optim.Optimizer:
    return make_optimizer(params, cfg.optimizer, cfg.learning_rate, cfg.weight_decay,
                          cfg.beta1, cfg.beta2, cfg.momentum)


@dataclass
class PretrainState:
    """Everything needed to continue pretraining: networks, optimizers, progress."""

    bundle: ModelBundle
    opt_recon: torch.optim.Optimizer
    opt_critic: torch.optim.Optimizer
    opt_topo: torch.optim.Optimizer
    history: TrainingHistory
    epoch: int = 0
    step: int = 0


def new_pretrain_state(backbone: BackboneConfig, cfg: PretrainConfig) -> PretrainState:
    bundle = build_bundle(backbone, cfg.seed, cfg.critic_clip)
    D, G, F = bundle.extractor, bundle.generator, bundle.critic
    # separate optimizer for the topological update so its moments are not
    # shared with (and do not nudge) the generator
    return PretrainState(
        bundle,
        _opt(list(D.parameters()) + list(G.parameters()), cfg),
        _opt(F.parameters(), cfg),
        _opt(D.parameters(), cfg),
        TrainingHistory(cfg.seed),
    )


def pair_permutation(n: int, rng: np.random.Generator, tries: int = 10) -> np.ndarray:
    """A random derangement of range(n); falls back to a shift by one."""
    for _ in range(tries):
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm
    return np.roll(np.arange(n), -1)


def fold_batch(x: torch.Tensor, modality: str, rng: np.random.Generator) -> torch.Tensor:
    arr = x.detach().cpu().numpy()
    out = np.stack([fold_array(a, sample_fold_spec(rng, modality)) for a in arr])
    return torch.from_numpy(out).to(x.dtype)


def pretrain_step(state: PretrainState, x_i: torch.Tensor, x_j: torch.Tensor,
                  cfg: PretrainConfig, rng: np.random.Generator) -> Dict[str, float]:
    """One iteration: (G, D) on reconstruction + adversarial, then F, then D on topology."""
    if x_i.shape[0] < 2:
        raise InvalidInputError("a pretraining step needs at least 2 images")
    if x_i.shape != x_j.shape:
        raise InvalidInputError("x_i and x_j batches must have the same shape")
    D, G, F = state.bundle.extractor, state.bundle.generator, state.bundle.critic
    for m in (D, G, F):
        m.train()

    # De-Folding: both halves of each pair are folded and reconstructed
    x = torch.cat([x_i, x_j])
    f = fold_batch(x, cfg.modality, rng)
    z, feats = D.forward_features(f)
    y = G(z, feats if G.use_skips else None)
    rec = loss_reconstruction(y, x, squared=cfg.squared_reconstruction)
    g_loss, _ = loss_adversarial(F, x, y)
    state.opt_recon.zero_grad()
    (rec.value + g_loss.value).backward()
    state.opt_recon.step()

    _, f_loss = loss_adversarial(F, x, y.detach())
    state.opt_critic.zero_grad()
    f_loss.backward()
    state.opt_critic.step()
    clip_parameters(F, cfg.critic_clip)

    # De-Mixing
    n = x_i.shape[0]
    eps = torch.from_numpy(rng.uniform(0.0, 1.0, size=n)).to(x_i.dtype)
    e = eps.view(-1, 1, 1, 1)
    mixed = e * x_i + (1 - e) * x_j
    noise_gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 63 - 1)))
    topo = loss_topological(D(mixed), D(x_i), D(x_j), eps, cfg.noise, noise_gen)
    state.opt_topo.zero_grad()
    topo.backward()
    state.opt_topo.step()

    total = combined_pretrain_loss({"reconstruction": rec, "adversarial": g_loss, "topological": topo})
    state.step += 1
    return {
        "step": state.step,
        "L_r": rec.components["L_r"],
        "L_g": g_loss.components["L_g"],
        "L_t": topo.components["L_t"],
        "total": float(total),
        "g_loss": g_loss.components["g_loss"],
        "f_loss": f_loss.components["f_loss"],
    }


def stack_pixels(dataset: Sequence) -> torch.Tensor:
    """Stack ``.pixels`` of every item; labels are never touched."""
    arrays = [np.asarray(item.pixels, dtype=np.float32) for item in dataset]
    if not arrays:
        raise InvalidInputError("dataset is empty")
    return torch.from_numpy(np.stack(arrays))


def epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, epoch])


# --- pretraining checkpoints ----------------------------------------------

def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> Tuple[Dict[str, np.ndarray], list]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            if val is None:
                continue
            arrays[f"{prefix}/{idx}/{key}"] = (val.detach().cpu().numpy().copy() if torch.is_tensor(val)
                                               else np.asarray(val))
    return arrays, sd["param_groups"]


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: Mapping[str, np.ndarray], groups: list) -> None:
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.rsplit("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_pretrain_checkpoint(path, state: PretrainState, cfg: PretrainConfig) -> None:
    b = state.bundle
    arrays = {}
    arrays.update(module_arrays("extractor", b.extractor))
    arrays.update(module_arrays("generator", b.generator))
    arrays.update(module_arrays("critic", b.critic))
    groups = {}
    for name in ("recon", "critic", "topo"):
        arr, groups[name] = _optimizer_arrays(f"optim/{name}", getattr(state, f"opt_{name}"))
        arrays.update(arr)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "pretrain",
        "backbone": b.config.to_dict(),
        "pretrain": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": state.epoch,
        "step": state.step,
        "param_groups": groups,
        "history": state.history.records,
    }
    write_archive(path, arrays, meta)


def load_pretrain_checkpoint(path, cfg: Optional[PretrainConfig] = None) -> Tuple[PretrainState, dict]:
    """Rebuild a :class:`PretrainState`.  ``cfg`` (when given) replaces the stored config for the optimizers."""
    arrays, meta = read_archive(path)
    if meta.get("kind") != "pretrain":
        raise IncompatibleCheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a pretrain one")
    stored = PretrainConfig.from_dict(meta["pretrain"])
    cfg = cfg or stored
    if cfg.seed != stored.seed:
        raise IncompatibleCheckpointError("resume seed differs from the checkpoint seed")
    backbone = BackboneConfig.from_dict(meta["backbone"])
    state = new_pretrain_state(backbone, cfg)
    b = state.bundle
    load_module_arrays("extractor", b.extractor, arrays)
    load_module_arrays("generator", b.generator, arrays)
    load_module_arrays("critic", b.critic, arrays)
    for name in ("recon", "critic", "topo"):
        _load_optimizer(f"optim/{name}", getattr(state, f"opt_{name}"), arrays, meta["param_groups"][name])
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.history = TrainingHistory(meta["seed"], [dict(r) for r in meta["history"]])
    return state, meta


def load_extractor(path) -> Tuple[Extractor, dict]:
    """The feature extractor from a pretrain checkpoint."""
    arrays, meta = read_archive(path)
    if meta.get("kind") != "pretrain":
        raise IncompatibleCheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a pretrain one")
    ext = Extractor(BackboneConfig.from_dict(meta["backbone"]))
    load_module_arrays("extractor", ext, arrays)
    return ext, meta


@contextlib.contextmanager
def flush_denormals():
    """Treat subnormal floats as zero while training.

    Weight clipping and decaying optimizer moments drive many values into the
    subnormal range, where CPU arithmetic is several times slower.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def _with_flushed_denormals(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with flush_denormals():
            return fn(*args, **kwargs)
    return wrapper


@_with_flushed_denormals
def pretrain_state_run(dataset: Sequence, cfg: PretrainConfig, backbone: Optional[BackboneConfig] = None,
                       out_dir=None, resume_from=None, state: Optional[PretrainState] = None) -> PretrainState:
    """Pretraining loop returning the full state (networks, optimizers, history)."""
    X = stack_pixels(dataset)
    n = X.shape[0]
    if n < 2:
        raise InvalidInputError("pretraining needs at least 2 images")
    if state is None:
        if resume_from is not None:
            state, _ = load_pretrain_checkpoint(resume_from, cfg)
        else:
            backbone = backbone or BackboneConfig("tiny", tuple(X.shape[1:]))
            state = new_pretrain_state(backbone, cfg)
    if tuple(X.shape[1:]) != state.bundle.config.input_shape:
        raise InvalidInputError(f"images are {tuple(X.shape[1:])}, backbone expects {state.bundle.config.input_shape}")
    bs = cfg.batch_size
    if n < bs:
        raise InvalidInputError(f"{n} images cannot fill a batch of {bs}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for epoch in range(state.epoch, cfg.epochs):
        rng = epoch_rng(cfg.seed, PRETRAIN_PHASE, epoch)
        order = rng.permutation(n)
        for b in range(n // bs):
            idx = torch.from_numpy(order[b * bs:(b + 1) * bs])
            x_i = X[idx]
            x_j = x_i[torch.from_numpy(pair_permutation(bs, rng))]
            record = pretrain_step(state, x_i, x_j, cfg, rng)
            state.history.append(dict({"phase": "pretrain", "epoch": epoch}, **record))
        state.epoch = epoch + 1
        if out_dir is not None:
            save_pretrain_checkpoint(out_dir / f"pretrain_epoch{state.epoch:03d}.npz", state, cfg)
    state.history.wall_clock += time.perf_counter() - t0
    if out_dir is not None:
        save_pretrain_checkpoint(out_dir / "pretrain_final.npz", state, cfg)
    return state


def pretrain(dataset: Sequence, cfg: PretrainConfig, backbone: Optional[BackboneConfig] = None,
             out_dir=None, resume_from=None) -> Tuple[Extractor, TrainingHistory]:
    """Run pretraining for ``cfg.epochs`` epochs; return the extractor and the history.

    With ``out_dir`` a checkpoint is written after every epoch and at the end;
    ``resume_from`` continues from one of those checkpoints.
    """
    state = pretrain_state_run(dataset, cfg, backbone, out_dir, resume_from)
    return state.bundle.extractor, state.history


# --- fine-tuning -----------------------------------------------------------

LABEL_CODES = {"bona_fide": 0.0, "attack": 1.0}


def labels_of(dataset: Sequence) -> np.ndarray:
    u = []
    for item in dataset:
        if item.label not in LABEL_CODES:
            raise InvalidInputError(f"fine-tuning needs bona_fide/attack labels, got {item.label!r}")
        u.append(LABEL_CODES[item.label])
    return np.asarray(u, dtype=np.float32)


@_with_flushed_denormals
def finetune(extractor: Extractor, dataset: Sequence, cfg: FinetuneConfig) -> Tuple[Detector, TrainingHistory]:
    """Initialize H from ``extractor`` and minimize cross-entropy on the labeled data."""
    u_all = torch.from_numpy(labels_of(dataset))
    X = stack_pixels(dataset)
    det = init_detector_from_extractor(extractor, seed=cfg.seed)
    det.train()
    opt = _opt(det.parameters(), cfg)
    history = TrainingHistory(cfg.seed)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, FINETUNE_PHASE, epoch)
        order = torch.from_numpy(rng.permutation(n))
        for b in range(math.ceil(n / bs)):
            idx = order[b * bs:(b + 1) * bs]
            x = X[idx].to(det.head.weight.dtype)
            v = torch.sigmoid(det(x))
            lc = loss_crossentropy(v, u_all[idx].to(v.dtype))
            opt.zero_grad()
            lc.backward()
            opt.step()
            step += 1
            history.append({"phase": "finetune", "epoch": epoch, "step": step, "L_c": lc.components["L_c"]})
    history.wall_clock = time.perf_counter() - t0
    det.eval()
    return det, history
