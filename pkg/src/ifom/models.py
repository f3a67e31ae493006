"""Feature extractor, generator, critic and detector networks.

All four networks are built from a single :class:`BackboneConfig`.  The
extractor is a sequence of convolutional stages followed by global average
pooling and a linear projection to the embedding.  The generator mirrors the
stage shapes of the extractor in reverse; full-scale configs feed it the
extractor's stage outputs as U-Net style skips, the tiny config decodes from
the embedding alone.
"""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IncompatibleCheckpointError, InvalidInputError
from .transforms import ImageSample

ARCH_IDS = ("paper_fingerprint", "paper_face", "tiny")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    arch_id: str = "tiny"
    input_shape: Tuple[int, int, int] = (1, 32, 32)
    embedding_dim: int = 32
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise InvalidInputError(f"unknown arch_id {self.arch_id!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3:
            raise InvalidInputError("input_shape must be (channels, height, width)")
        if self.embedding_dim < 8:
            raise InvalidInputError("embedding_dim must be >= 8")
        if self.width_multiplier <= 0:
            raise InvalidInputError("width_multiplier must be positive")

    @property
    def use_skips(self) -> bool:
        return self.arch_id != "tiny"

    @classmethod
    def paper_fingerprint(cls) -> "BackboneConfig":
        return cls("paper_fingerprint", (1, 224, 224), 1280, 1.0)

    @classmethod
    def paper_face(cls) -> "BackboneConfig":
        return cls("paper_face", (3, 256, 256), 512, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(d["arch_id"], tuple(d["input_shape"]), int(d["embedding_dim"]), float(d["width_multiplier"]))


def _tiny_stages(cfg: BackboneConfig) -> nn.ModuleList:
    # SiLU keeps the tiny nets smooth, which the finite-difference checks rely on;
    # GroupNorm is per-sample, so batch composition never changes an embedding
    widths = [max(4, int(round(w * cfg.width_multiplier))) for w in (8, 16, 32, 32)]
    stages = []
    c_in = cfg.input_shape[0]
    for k, c_out in enumerate(widths):
        stride = 1 if k == 0 else 2
        stages.append(nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride, 1), nn.GroupNorm(4, c_out), nn.SiLU()))
        c_in = c_out
    return nn.ModuleList(stages)


def _resnet18_stages(cfg: BackboneConfig) -> nn.ModuleList:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if cfg.input_shape[0] != 3:
        net.conv1 = nn.Conv2d(cfg.input_shape[0], 64, 7, 2, 3, bias=False)
    return nn.ModuleList([
        nn.Sequential(net.conv1, net.bn1, net.relu),
        nn.Sequential(net.maxpool, net.layer1),
        net.layer2,
        net.layer3,
        net.layer4,
    ])


def _mobilenet_v2_stages(cfg: BackboneConfig) -> nn.ModuleList:
    from torchvision.models import mobilenet_v2

    feats = mobilenet_v2(weights=None, width_mult=cfg.width_multiplier).features
    if cfg.input_shape[0] != 3:
        first = feats[0][0]
        feats[0][0] = nn.Conv2d(cfg.input_shape[0], first.out_channels, 3, 2, 1, bias=False)
    # split where the spatial resolution halves
    bounds = [(0, 2), (2, 4), (4, 7), (7, 14), (14, 19)]
    return nn.ModuleList([nn.Sequential(*feats[a:b]) for a, b in bounds])


def _build_stages(cfg: BackboneConfig) -> nn.ModuleList:
    if cfg.arch_id == "tiny":
        return _tiny_stages(cfg)
    if cfg.arch_id == "paper_face":
        return _resnet18_stages(cfg)
    return _mobilenet_v2_stages(cfg)


class Extractor(nn.Module):
    """Feature extractor: image batch -> embedding batch."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.stages = _build_stages(config)
        with torch.no_grad():
            probe = torch.zeros((1,) + config.input_shape)
            shapes = []
            for stage in self.stages:
                probe = stage(probe)
                shapes.append(tuple(probe.shape[1:]))
        self.stage_shapes: List[Tuple[int, int, int]] = shapes
        self.proj = nn.Linear(shapes[-1][0], config.embedding_dim)

    def forward_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        z = self.proj(x.mean(dim=(2, 3)))
        return z, feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)[0]


class Generator(nn.Module):
    """Decoder from an embedding (plus optional skips) back to image space."""

    def __init__(self, config: BackboneConfig, stage_shapes: Sequence[Tuple[int, int, int]]):
        super().__init__()
        self.config = config
        self.use_skips = config.use_skips
        self.stage_shapes = [tuple(s) for s in stage_shapes]
        c_last, h_last, w_last = self.stage_shapes[-1]
        self.fc = nn.Linear(config.embedding_dim, c_last * h_last * w_last)
        blocks = []
        n = len(self.stage_shapes)
        for k in range(n - 1, -1, -1):
            c_k = self.stage_shapes[k][0]
            c_in = 2 * c_k if self.use_skips else c_k
            c_out = self.stage_shapes[k - 1][0] if k > 0 else max(8, c_k // 2)
            blocks.append(nn.Sequential(nn.Conv2d(c_in, c_out, 3, 1, 1), nn.SiLU()))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(blocks[-1][0].out_channels, config.input_shape[0], 3, 1, 1)

    def forward(self, z: torch.Tensor, skips: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.config.embedding_dim:
            raise InvalidInputError(f"expected embeddings of dim {self.config.embedding_dim}, got {tuple(z.shape)}")
        if self.use_skips and skips is None:
            raise InvalidInputError("this generator needs extractor skip features")
        c, h, w = self.stage_shapes[-1]
        x = self.fc(z).view(z.shape[0], c, h, w)
        n = len(self.stage_shapes)
        for i, block in enumerate(self.blocks):
            k = n - 1 - i
            if self.use_skips:
                x = torch.cat([x, skips[k]], dim=1)
            x = block(x)
            target = self.stage_shapes[k - 1][1:] if k > 0 else self.config.input_shape[1:]
            if tuple(x.shape[2:]) != tuple(target):
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=True)
        return torch.sigmoid(self.head(x))


class Critic(nn.Module):
    """Wasserstein critic with the extractor's architecture and a scalar head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.trunk = Extractor(config)
        self.head = nn.Linear(config.embedding_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x)).squeeze(1)


class Detector(nn.Module):
    """PAD detector: extractor trunk plus a one-unit head; forward returns logits."""

    def __init__(self, trunk: Extractor):
        super().__init__()
        self.config = trunk.config
        self.trunk = trunk
        self.head = nn.Linear(trunk.config.embedding_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x)).squeeze(1)


@dataclass
class ModelBundle:
    extractor: Extractor
    generator: Generator
    critic: Critic
    config: BackboneConfig
    detector: Optional[Detector] = None


def clip_parameters(module: nn.Module, c: float) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.clamp_(-c, c)


def build_extractor(config: BackboneConfig, seed: int) -> Extractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Extractor(config)


def build_bundle(config: BackboneConfig, seed: int, critic_clip: Optional[float] = 0.01) -> ModelBundle:
    """Initialize D, G and F from one seed.

    The critic starts inside the clipping box so that a zero-learning-rate step
    leaves every parameter untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        extractor = Extractor(config)
        generator = Generator(config, extractor.stage_shapes)
        critic = Critic(config)
    if critic_clip is not None:
        clip_parameters(critic, critic_clip)
    return ModelBundle(extractor, generator, critic, config)


def init_detector_from_extractor(extractor: Extractor, seed: int = 0, head_std: float = 0.01) -> Detector:
    """Copy the extractor into a new detector and attach a fresh head.

    Head weights are drawn from N(0, head_std**2) with a dedicated generator,
    bias starts at zero.
    """
    trunk = copy.deepcopy(extractor)
    det = Detector(trunk)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        w = torch.randn(det.head.weight.shape, generator=gen, dtype=torch.float64) * head_std
        det.head.weight.copy_(w.to(det.head.weight.dtype))
        det.head.bias.zero_()
    return det


def _module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def as_batch(images, config: BackboneConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack ImageSamples / arrays / tensors into an (N, C, H, W) tensor and check its shape."""
    if isinstance(images, ImageSample):
        images = [images]
    if isinstance(images, torch.Tensor):
        batch = images.to(dtype)
    elif isinstance(images, np.ndarray):
        batch = torch.from_numpy(np.asarray(images)).to(dtype)
    else:
        arrays = [im.pixels if isinstance(im, ImageSample) else np.asarray(im) for im in images]
        if not arrays:
            raise InvalidInputError("empty image batch")
        batch = torch.from_numpy(np.stack(arrays)).to(dtype)
    if batch.ndim == 3:
        batch = batch.unsqueeze(0)
    if tuple(batch.shape[1:]) != tuple(config.input_shape):
        raise InvalidInputError(f"expected images of shape {config.input_shape}, got {tuple(batch.shape[1:])}")
    return batch


class _eval_mode:
    def __init__(self, module: nn.Module):
        self.module = module

    def __enter__(self):
        self.was_training = self.module.training
        self.module.eval()
        return self.module

    def __exit__(self, *exc):
        self.module.train(self.was_training)


def embed(extractor: Extractor, images) -> torch.Tensor:
    """Embeddings of one image or a batch, in evaluation mode, as an (N, d) tensor."""
    batch = as_batch(images, extractor.config, _module_dtype(extractor))
    with _eval_mode(extractor), torch.no_grad():
        return extractor(batch)


def generate(generator: Generator, z: torch.Tensor, skips=None) -> torch.Tensor:
    with torch.no_grad():
        return generator(z, skips)


def discriminate(critic: Critic, images) -> torch.Tensor:
    batch = as_batch(images, critic.config, _module_dtype(critic))
    with _eval_mode(critic), torch.no_grad():
        return critic(batch)


def score(detector: Detector, images) -> np.ndarray:
    """Spoofness scores in (0, 1); higher means more likely an attack."""
    batch = as_batch(images, detector.config, _module_dtype(detector))
    with _eval_mode(detector), torch.no_grad():
        return torch.sigmoid(detector(batch)).cpu().numpy()


def score_in_batches(detector: Detector, images, batch_size: int = 256) -> np.ndarray:
    out = [score(detector, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# --- checkpoints -----------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def write_archive(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write an .npz-compatible zip with fixed timestamps so reruns are byte-identical."""
    entries = dict(arrays)
    entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, _npy_bytes(np.ascontiguousarray(entries[name])))


def read_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format version {meta.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}"
        )
    return arrays, meta


def module_arrays(prefix: str, module: nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(prefix: str, module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = {}
    for key in module.state_dict():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise IncompatibleCheckpointError(f"checkpoint lacks parameter {name}")
        state[key] = torch.from_numpy(np.array(arrays[name]))
    module.load_state_dict(state)


def save_detector(path, detector: Detector, seed: int, extra_meta: Optional[Mapping] = None) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "detector",
        "backbone": detector.config.to_dict(),
        "seed": seed,
    }
    meta.update(extra_meta or {})
    write_archive(path, module_arrays("detector", detector), meta)


def load_detector(path) -> Tuple[Detector, dict]:
    arrays, meta = read_archive(path)
    if meta.get("kind") != "detector":
        raise IncompatibleCheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a detector")
    cfg = BackboneConfig.from_dict(meta["backbone"])
    det = Detector(Extractor(cfg))
    load_module_arrays("detector", det, arrays)
    return det, meta


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
