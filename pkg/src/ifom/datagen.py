"""Synthetic fingerprint/face data, manifests and evaluation protocol splits.

Each generator regime stands in for one capture condition (spoof material,
sensor or dataset).  A regime fixes the ridge frequency band (fingerprints)
or illumination and replay grating (faces), and the artifact family used for
the attack class.
"""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError, InvalidSpecError
from .transforms import ImageSample, MODALITIES

MANIFEST_SCHEMA_VERSION = 1
PROTOCOLS = ("cross_material", "cross_sensor", "cross_dataset")
PROTOCOL_KEYS = {"cross_material": "material", "cross_sensor": "sensor", "cross_dataset": "dataset"}


@dataclass(frozen=True)
class Regime:
    modality: str
    material: str
    sensor: str
    dataset: str
    # fingerprint: ridge frequency band in cycles/pixel at 32 px, attack frequency factor
    freq_band: Tuple[float, float] = (0.15, 0.19)
    attack_freq_factor: float = 1.15
    # attack artifact strength (blotches for fingerprints, grating for faces)
    artifact: float = 0.04
    contrast_drop: float = 0.1
    # face only: grating period in pixels at 32 px and RGB illumination cast
    grating_period: float = 3.0
    cast: Tuple[float, float, float] = (1.0, 1.0, 1.0)


REGIMES: Dict[str, Regime] = {
    # training-side fingerprint materials
    "woodglue-analog": Regime("fingerprint", "woodglue-analog", "greenbit-analog", "livdet-analog",
                              freq_band=(0.14, 0.18), attack_freq_factor=1.12, artifact=0.045, contrast_drop=0.125),
    "ecoflex-analog": Regime("fingerprint", "ecoflex-analog", "greenbit-analog", "livdet-analog",
                             freq_band=(0.17, 0.21), attack_freq_factor=0.90, artifact=0.0375, contrast_drop=0.1),
    "bodydouble-analog": Regime("fingerprint", "bodydouble-analog", "orcanthus-analog", "livdet-analog",
                                freq_band=(0.15, 0.19), attack_freq_factor=1.10, artifact=0.0525, contrast_drop=0.075),
    # held-out fingerprint materials
    "gelatine-analog": Regime("fingerprint", "gelatine-analog", "greenbit-analog", "livdet-analog",
                              freq_band=(0.22, 0.26), attack_freq_factor=0.88, artifact=0.0375, contrast_drop=0.125),
    "latex-analog": Regime("fingerprint", "latex-analog", "digitalpersona-analog", "livdet-analog",
                           freq_band=(0.20, 0.24), attack_freq_factor=1.12, artifact=0.045, contrast_drop=0.1),
    "liquidecoflex-analog": Regime("fingerprint", "liquidecoflex-analog", "orcanthus-analog", "livdet-analog",
                                   freq_band=(0.12, 0.16), attack_freq_factor=1.15, artifact=0.03, contrast_drop=0.15),
    # face datasets
    "O-analog": Regime("face", "replay", "smartphone", "O", artifact=0.10, grating_period=3.0, cast=(1.0, 0.95, 0.9)),
    "C-analog": Regime("face", "print", "webcam", "C", artifact=0.12, grating_period=4.0, cast=(0.9, 0.95, 1.0)),
    "I-analog": Regime("face", "replay", "laptop", "I", artifact=0.09, grating_period=2.5, cast=(1.0, 1.0, 0.85)),
    "M-analog": Regime("face", "print", "laptop-phone", "M", artifact=0.11, grating_period=3.5, cast=(0.95, 0.9, 1.0)),
}


@dataclass(frozen=True)
class SyntheticSpec:
    modality: str = "fingerprint"
    image_size: Tuple[int, int] = (32, 32)
    n_per_class: int = 10
    generator_regime: str = "woodglue-analog"
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.modality not in MODALITIES:
            raise InvalidSpecError(f"unknown modality {self.modality!r}")
        if len(self.image_size) != 2 or min(self.image_size) < 16:
            raise InvalidSpecError("image_size must be (h, w) with both >= 16")
        if self.n_per_class < 2:
            raise InvalidSpecError("n_per_class must be >= 2")
        if self.generator_regime not in REGIMES:
            raise InvalidSpecError(f"unknown generator regime {self.generator_regime!r}")
        if REGIMES[self.generator_regime].modality != self.modality:
            raise InvalidSpecError(f"regime {self.generator_regime!r} is not a {self.modality} regime")
        if self.noise_std < 0:
            raise InvalidSpecError("noise_std must be non-negative")


def sample_rng(spec: SyntheticSpec, label: str, index: int) -> np.random.Generator:
    """Per-sample generator; the seed space is partitioned by (regime, class, index)."""
    key = [spec.seed, zlib.crc32(spec.generator_regime.encode()), 1 if label == "attack" else 0, index]
    return np.random.default_rng(key)


def _grid(h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy - (h - 1) / 2.0, xx - (w - 1) / 2.0


def _blobs(rng, h, w, count, sigma_range, signed=True) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(*sigma_range) * min(h, w)
        sign = rng.choice([-1.0, 1.0]) if signed else 1.0
        out += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


def _meta(regime: Regime, label: str) -> Dict[str, str]:
    return {
        "material": regime.material if label == "attack" else "live",
        "sensor": regime.sensor,
        "dataset": regime.dataset,
    }


def _check_label(label: str) -> None:
    if label not in ("bona_fide", "attack"):
        raise InvalidSpecError(f"synthetic samples are bona_fide or attack, got {label!r}")


def gen_fingerprint(spec: SyntheticSpec, label: str, rng: np.random.Generator) -> ImageSample:
    """Oriented sinusoidal ridges inside a soft elliptical finger mask on a white background.

    Attacks shift the ridge frequency by the regime's factor, lower ridge
    contrast and add smooth blotches.
    """
    if spec.modality != "fingerprint":
        raise InvalidSpecError("gen_fingerprint needs a fingerprint spec")
    _check_label(label)
    regime = REGIMES[spec.generator_regime]
    h, w = spec.image_size
    scale = 32.0 / min(h, w)
    y, x = _grid(h, w)
    u, v = x / (w / 2.0), y / (h / 2.0)

    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    rx, ry = rng.uniform(0.55, 0.75), rng.uniform(0.7, 0.9)
    r = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    mask = 1.0 / (1.0 + np.exp(-(1.0 - r) / 0.06))

    freq = rng.uniform(*regime.freq_band) * scale
    contrast = rng.uniform(0.45, 0.6)
    if label == "attack":
        freq *= regime.attack_freq_factor
        contrast *= 1.0 - regime.contrast_drop
    theta = rng.uniform(0, np.pi)
    curl = rng.uniform(-1.5, 1.5)
    phase0 = rng.uniform(0, 2 * np.pi)
    along = x * np.cos(theta) + y * np.sin(theta)
    across = -x * np.sin(theta) + y * np.cos(theta)
    phase = 2 * np.pi * freq * along + curl * (across / (h / 2.0)) ** 2 + phase0
    ink = 0.5 + 0.5 * np.cos(phase)

    img = 1.0 - mask * (0.15 + contrast * ink)
    if label == "attack":
        img = img + regime.artifact * mask * _blobs(rng, h, w, int(rng.integers(1, 4)), (0.12, 0.25), signed=False)
    img = img + rng.normal(0.0, spec.noise_std, size=(h, w))
    return ImageSample(np.clip(img, 0.0, 1.0)[None], "fingerprint", label, _meta(regime, label))


def gen_face(spec: SyntheticSpec, label: str, rng: np.random.Generator) -> ImageSample:
    """Roughly mirror-symmetric blob face (head, eyes, nose, mouth) in RGB.

    Attacks overlay a regime-specific periodic grating (replay moire) and a
    slight loss of contrast.
    """
    if spec.modality != "face":
        raise InvalidSpecError("gen_face needs a face spec")
    _check_label(label)
    regime = REGIMES[spec.generator_regime]
    h, w = spec.image_size
    y, x = _grid(h, w)
    u, v = x / (w / 2.0), y / (h / 2.0)

    def blob(cu, cv, su, sv):
        return np.exp(-(((u - cu) / su) ** 2 + ((v - cv) / sv) ** 2) / 2.0)

    head = blob(0.0, rng.uniform(-0.05, 0.05), rng.uniform(0.45, 0.6), rng.uniform(0.6, 0.75))
    eye_u, eye_v = rng.uniform(0.2, 0.35), rng.uniform(-0.3, -0.15)
    eye_s = rng.uniform(0.06, 0.1)
    eyes = blob(-eye_u, eye_v, eye_s, eye_s) + blob(eye_u, eye_v, eye_s, eye_s)
    nose = blob(0.0, rng.uniform(0.0, 0.1), 0.05, rng.uniform(0.1, 0.15))
    mouth = blob(0.0, rng.uniform(0.3, 0.45), rng.uniform(0.15, 0.25), 0.05)
    skin = np.array(regime.cast) * rng.uniform(0.55, 0.8)
    shade = 0.6 * head - 0.35 * eyes - 0.1 * nose - 0.25 * mouth
    img = 0.2 + skin[:, None, None] * shade[None]
    # break exact symmetry slightly
    img = img + 0.03 * _blobs(rng, h, w, 2, (0.1, 0.2))[None]
    if label == "attack":
        period = regime.grating_period * min(h, w) / 32.0
        ang = rng.uniform(-0.3, 0.3)
        grating = np.sin(2 * np.pi * (x * np.cos(ang) + y * np.sin(ang)) / period + rng.uniform(0, 2 * np.pi))
        img = 0.5 + (img - 0.5) * 0.95 + regime.artifact * grating[None]
    img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return ImageSample(np.clip(img, 0.0, 1.0), "face", label, _meta(regime, label))


def generate(spec: SyntheticSpec, label: str, index: int) -> ImageSample:
    rng = sample_rng(spec, label, index)
    if spec.modality == "fingerprint":
        return gen_fingerprint(spec, label, rng)
    return gen_face(spec, label, rng)


# --- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    label: str
    meta: Mapping[str, str] = field(default_factory=dict)
    path: Optional[str] = None
    inline: Optional[Mapping] = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "label": self.label, "meta": dict(self.meta)}
        if self.path is not None:
            d["path"] = self.path
        if self.inline is not None:
            d["inline"] = dict(self.inline)
        return d


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __len__(self):
        return len(self.records)

    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest([r for r in self.records if r.id in keep], self.schema_version)

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": self.schema_version, "records": [r.to_dict() for r in self.records]},
            indent=1, sort_keys=True,
        ) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        if "schema_version" not in d:
            raise InvalidInputError("manifest lacks schema_version")
        if d["schema_version"] != MANIFEST_SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported manifest schema_version {d['schema_version']}")
        records = []
        for r in d["records"]:
            if r["label"] not in ("bona_fide", "attack", "unlabeled"):
                raise InvalidInputError(f"record {r['id']}: bad label {r['label']!r}")
            if ("path" in r) == ("inline" in r):
                raise InvalidInputError(f"record {r['id']}: exactly one of path/inline is required")
            records.append(ManifestRecord(r["id"], r["label"], dict(r.get("meta", {})), r.get("path"), r.get("inline")))
        return cls(records, d["schema_version"])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _inline_spec(spec: SyntheticSpec, label: str, index: int) -> dict:
    d = asdict(spec)
    d["image_size"] = list(spec.image_size)
    d.update(label=label, index=index)
    return d


def synthesize(specs: Sequence[SyntheticSpec], test_fraction: float = 0.5) -> Tuple[List[ImageSample], DatasetManifest]:
    """Generate ``n_per_class`` bona fide and attack samples for each spec.

    Bona fide samples get a ``partition`` meta entry (train/test) so that
    cross-material splits keep live images on both sides.
    """
    samples, records = [], []
    for spec in specs:
        n_test = int(round(spec.n_per_class * test_fraction))
        for label in ("bona_fide", "attack"):
            for i in range(spec.n_per_class):
                s = generate(spec, label, i)
                meta = dict(s.meta)
                meta["regime"] = spec.generator_regime
                if label == "bona_fide":
                    meta["partition"] = "test" if i >= spec.n_per_class - n_test else "train"
                sid = f"{spec.generator_regime}/{label}/{spec.seed}/{i:05d}"
                samples.append(ImageSample(s.pixels, s.modality, label, meta))
                records.append(ManifestRecord(sid, label, meta, inline=_inline_spec(spec, label, i)))
    return samples, DatasetManifest(records)


# --- image files -----------------------------------------------------------

def save_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(np.clip(pixels, 0, 1) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB")
    img.save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.transpose(arr[..., :3], (2, 0, 1))
    return arr.astype(np.float32) / 255.0


def write_dataset(out_dir, samples: Sequence[ImageSample], manifest: DatasetManifest) -> DatasetManifest:
    """Write PNGs under ``out_dir/images`` and return a path-based manifest (paths relative to out_dir)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for sample, rec in zip(samples, manifest.records):
        rel = "images/" + rec.id.replace("/", "_") + ".png"
        save_image(out_dir / rel, sample.pixels)
        records.append(ManifestRecord(rec.id, rec.label, rec.meta, path=rel))
    return DatasetManifest(records)


def _load_record(rec: ManifestRecord, root: Path, modality: Optional[str]) -> ImageSample:
    if rec.inline is not None:
        d = dict(rec.inline)
        label, index = d.pop("label"), d.pop("index")
        spec = SyntheticSpec(**d)
        s = generate(spec, label, index)
        return ImageSample(s.pixels.astype(np.float32), s.modality, rec.label, rec.meta)
    pixels = load_image(root / rec.path)
    mod = rec.meta.get("modality") or modality or ("fingerprint" if pixels.shape[0] == 1 else "face")
    return ImageSample(pixels, mod, rec.label, rec.meta)


def load_samples(manifest: DatasetManifest, root=".", num_workers: Optional[int] = None,
                 modality: Optional[str] = None) -> List[ImageSample]:
    """Materialize every record in order.  ``num_workers`` defaults to IFOM_NUM_WORKERS or 1."""
    if num_workers is None:
        num_workers = int(os.environ.get("IFOM_NUM_WORKERS", "1"))
    root = Path(root)
    if num_workers <= 1:
        return [_load_record(r, root, modality) for r in manifest.records]
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        return list(pool.map(lambda r: _load_record(r, root, modality), manifest.records))


# --- protocol splits -------------------------------------------------------

@dataclass
class ProtocolSplit:
    name: str
    train: DatasetManifest
    test: DatasetManifest


def make_protocol_split(manifest: DatasetManifest, protocol: str,
                        holdout: Union[str, Iterable[str]]) -> ProtocolSplit:
    """Partition a manifest for a generalization protocol.

    cross_material: attacks whose material is held out go to test, other
    attacks to train; bona fide samples follow their ``partition`` meta entry
    (train when absent).  cross_sensor / cross_dataset: every sample whose
    sensor / dataset is held out goes to test, everything else to train.
    """
    if protocol not in PROTOCOLS:
        raise InvalidInputError(f"unknown protocol {protocol!r}")
    key = PROTOCOL_KEYS[protocol]
    held = {holdout} if isinstance(holdout, str) else set(holdout)
    train, test = [], []
    for rec in manifest.records:
        if key not in rec.meta:
            raise InvalidInputError(f"record {rec.id} has no {key!r} meta entry")
        if protocol == "cross_material":
            if rec.label == "attack":
                to_test = rec.meta[key] in held
            else:
                to_test = rec.meta.get("partition") == "test"
        else:
            to_test = rec.meta[key] in held
        (test if to_test else train).append(rec)
    v = manifest.schema_version
    return ProtocolSplit(protocol, DatasetManifest(train, v), DatasetManifest(test, v))


def dominant_frequency(pixels: np.ndarray, min_freq: float = 0.08) -> float:
    """Radial frequency (cycles/pixel) of the strongest spectral peak above ``min_freq``.

    The cutoff skips the finger-mask / illumination energy near DC.
    """
    img = pixels.mean(axis=0) if pixels.ndim == 3 else pixels
    img = img - img.mean()
    spec = np.abs(np.fft.fft2(img))
    radial = np.hypot(np.fft.fftfreq(img.shape[0])[:, None], np.fft.fftfreq(img.shape[1])[None, :])
    spec[radial < min_freq] = 0.0
    return float(radial.flat[np.argmax(spec)])
