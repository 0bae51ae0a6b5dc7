"""Corpus manifest, synthetic corpus generation, and view sampling.

A corpus is a directory of bag files indexed by ``manifest.json``:

    <corpus>/<extractor>/<mag>/<patient>__<slide>.bag   patch-embedding bags
    <corpus>/tiles/<mag>/<patient>__<slide>.json        tile grid + signal mask
    <corpus>/manifest.json

The synthetic generator stands in for frozen foundation models. Every tile
lives in a shared 64-dim latent space; each synthetic extractor is a fixed
full-rank linear map of that latent space, so cross-extractor alignment is
learnable by construction. Class structure is planted: a configurable
fraction of each bag's tiles carries the class centroid plus a persistent
per-patient offset, the rest is background noise. Bags for the same
(patient, slide, magnification) are tile-aligned across extractors: they
are images of the same latent rows under different extractor maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bags import ExtractorSpec, PatchBag, read_bag, write_bag
from .errors import MissingArtifactError

LATENT_DIM = 64
TILE_SIZE_PX = 224

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "cobra-lite-corpus/1"


def mag_key(mpp: float) -> str:
    """Canonical, path-safe string for a magnification (round-trips floats)."""
    return repr(float(mpp))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class PatientRecord:
    patient_id: str
    class_label: int
    slide_ids: list[str]


@dataclass
class CorpusManifest:
    """Index of every bag in a corpus plus the declared axes."""

    root: Path
    extractors: list[ExtractorSpec]
    magnifications: list[float]
    patients: list[PatientRecord]
    # index[patient_id][extractor_id][mag_key] -> list of bag paths, slide order
    index: dict[str, dict[str, dict[str, list[str]]]]
    # tile_meta[patient_id][mag_key] -> list of sidecar paths, slide order
    tile_meta: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    seed: int | None = None
    config: dict | None = None

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def extractor_ids(self) -> list[str]:
        return [e.id for e in self.extractors]

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(f"unknown patient {patient_id!r}")

    def labels(self) -> np.ndarray:
        return np.array([p.class_label for p in self.patients], dtype=np.int64)

    def bag_paths(self, patient_id: str, extractor_id: str, mpp: float) -> list[Path]:
        try:
            rels = self.index[patient_id][extractor_id][mag_key(mpp)]
        except KeyError as exc:
            raise KeyError(
                f"no bags for ({patient_id!r}, {extractor_id!r}, {mpp})"
            ) from exc
        return [self.root / rel for rel in rels]

    def load_bags(self, patient_id: str, extractor_id: str, mpp: float) -> list[PatchBag]:
        return [read_bag(p) for p in self.bag_paths(patient_id, extractor_id, mpp)]

    def pooled_features(self, patient_id: str, extractor_id: str, mpp: float) -> np.ndarray:
        """All tiles of a patient at (extractor, mag), concatenated in slide order."""
        bags = self.load_bags(patient_id, extractor_id, mpp)
        return np.concatenate([b.features for b in bags], axis=0)

    def tile_meta_paths(self, patient_id: str, mpp: float) -> list[Path]:
        try:
            rels = self.tile_meta[patient_id][mag_key(mpp)]
        except KeyError as exc:
            raise KeyError(f"no tile metadata for ({patient_id!r}, {mpp})") from exc
        return [self.root / rel for rel in rels]

    def load_tile_meta(self, patient_id: str, mpp: float) -> list[dict]:
        out = []
        for p in self.tile_meta_paths(patient_id, mpp):
            with open(p, "r", encoding="utf-8") as fh:
                out.append(json.load(fh))
        return out

    def validate(self) -> None:
        """Check manifest closure: every indexed file exists, coverage complete."""
        ids = [e.id for e in self.extractors]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate extractor ids: {ids}")
        for p in self.patients:
            for eid in ids:
                for mpp in self.magnifications:
                    paths = self.index.get(p.patient_id, {}).get(eid, {}).get(mag_key(mpp))
                    if not paths:
                        raise MissingArtifactError(
                            f"patient {p.patient_id!r} has no bag for "
                            f"({eid!r}, {mpp})"
                        )
                    for rel in paths:
                        if not (self.root / rel).exists():
                            raise MissingArtifactError(
                                f"manifest references missing file {rel!r}"
                            )

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "seed": self.seed,
            "config": self.config,
            "extractors": [
                {"id": e.id, "dim": e.dim, "seed": e.seed} for e in self.extractors
            ],
            "magnifications": [float(m) for m in self.magnifications],
            "patients": [
                {
                    "patient_id": p.patient_id,
                    "class_label": p.class_label,
                    "slide_ids": p.slide_ids,
                }
                for p in self.patients
            ],
            "index": self.index,
            "tile_meta": self.tile_meta,
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
        return path


def load_manifest(corpus_dir: str | Path) -> CorpusManifest:
    corpus_dir = Path(corpus_dir)
    path = corpus_dir / MANIFEST_NAME
    if not path.exists():
        raise MissingArtifactError(f"no {MANIFEST_NAME} in {corpus_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != MANIFEST_FORMAT:
        raise MissingArtifactError(
            f"{path}: unsupported manifest format {d.get('format')!r}"
        )
    return CorpusManifest(
        root=corpus_dir,
        extractors=[ExtractorSpec(**e) for e in d["extractors"]],
        magnifications=[float(m) for m in d["magnifications"]],
        patients=[PatientRecord(**p) for p in d["patients"]],
        index=d["index"],
        tile_meta=d.get("tile_meta", {}),
        seed=d.get("seed"),
        config=d.get("config"),
    )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticGenConfig:
    """Knobs for the planted-structure synthetic corpus."""

    n_classes: int = 3
    patients_per_class: int = 10
    tiles_per_bag: tuple[int, int] = (64, 128)
    signal_tile_fraction: float = 0.25
    class_separation: float = 4.0
    noise_scale: float = 1.0
    mixing_seed: int = 0  # seeds the per-extractor latent->feature maps
    seed: int = 0  # seeds centroids, patients, tiles
    slides_per_patient: int = 1

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.patients_per_class < 1:
            raise ValueError(
                f"patients_per_class must be >= 1, got {self.patients_per_class}"
            )
        lo, hi = self.tiles_per_bag
        if not (1 <= lo <= hi):
            raise ValueError(
                f"tiles_per_bag must satisfy 1 <= lo <= hi, got {self.tiles_per_bag}"
            )
        if not 0.0 <= self.signal_tile_fraction <= 1.0:
            raise ValueError(
                "signal_tile_fraction must be in [0, 1], "
                f"got {self.signal_tile_fraction}"
            )
        if self.class_separation < 0:
            raise ValueError(
                f"class_separation must be >= 0, got {self.class_separation}"
            )
        if self.noise_scale <= 0:
            raise ValueError(f"noise_scale must be > 0, got {self.noise_scale}")
        if self.slides_per_patient < 1:
            raise ValueError(
                f"slides_per_patient must be >= 1, got {self.slides_per_patient}"
            )


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def extractor_map(spec: ExtractorSpec, mixing_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed full-rank linear map (weight, bias) from latent space to feature space."""
    rng = _rng(mixing_seed, spec.seed, 11)
    w = rng.standard_normal((LATENT_DIM, spec.dim)) / np.sqrt(LATENT_DIM)
    b = 0.1 * rng.standard_normal(spec.dim)
    return w, b


def _mag_tile_factor(mpp: float) -> float:
    # coarser magnification sees fewer tiles per slide
    return float((0.5 / mpp) ** 0.5)


def _mag_noise_factor(mpp: float) -> float:
    # coarser magnification is slightly noisier
    return float((mpp / 0.5) ** 0.25)


def _grid_coords(n: int) -> list[list[int]]:
    w = int(np.ceil(np.sqrt(n)))
    return [[i % w, i // w] for i in range(n)]


def generate_corpus(
    cfg: SyntheticGenConfig,
    extractors: list[ExtractorSpec],
    mags: list[float],
    out_dir: str | Path,
) -> CorpusManifest:
    """Write a synthetic corpus with planted class structure.

    Regeneration with the same seeds is byte-identical. For each
    (patient, slide, magnification) the latent tile rows are drawn once and
    mapped through every extractor, so bags are tile-aligned across
    extractors. Signal tiles carry ``centroid + patient offset + tile
    noise``; background tiles are pure noise. The patient offset persists
    across slides and magnifications, which is what makes the patient
    re-identifiable across views.
    """
    cfg.validate()
    for e in extractors:
        e.validate()
    ids = [e.id for e in extractors]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate extractor ids: {ids}")
    if not mags:
        raise ValueError("at least one magnification required")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sep_scale = cfg.class_separation
    centroid_rng = _rng(cfg.seed, 101)
    dirs = centroid_rng.standard_normal((cfg.n_classes, LATENT_DIM))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centroids = sep_scale * dirs

    maps = {e.id: extractor_map(e, cfg.mixing_seed) for e in extractors}

    # patient-level offset and tile-level noise split the latent noise
    # variance in half; the offset is the patient's persistent identity
    sigma_patient = cfg.noise_scale / np.sqrt(2.0)
    sigma_tile = cfg.noise_scale / np.sqrt(2.0)

    patients: list[PatientRecord] = []
    index: dict[str, dict[str, dict[str, list[str]]]] = {}
    tile_meta: dict[str, dict[str, list[str]]] = {}

    lo, hi = cfg.tiles_per_bag
    for c in range(cfg.n_classes):
        for i in range(cfg.patients_per_class):
            pidx = c * cfg.patients_per_class + i
            pid = f"pt{c:02d}{i:03d}"
            slide_ids = [f"{pid}_s{j}" for j in range(cfg.slides_per_patient)]
            patients.append(PatientRecord(pid, c, slide_ids))
            offset = sigma_patient * _rng(cfg.seed, 202, pidx).standard_normal(LATENT_DIM)

            index[pid] = {e.id: {} for e in extractors}
            tile_meta[pid] = {}

            for j, sid in enumerate(slide_ids):
                for mi, mpp in enumerate(mags):
                    rng = _rng(cfg.seed, 303, pidx, j, mi)
                    n_base = int(rng.integers(lo, hi + 1))
                    n = max(1, round(n_base * _mag_tile_factor(mpp)))
                    n_sig = round(cfg.signal_tile_fraction * n)
                    sig_idx = np.sort(rng.choice(n, size=n_sig, replace=False))
                    mask = np.zeros(n, dtype=bool)
                    mask[sig_idx] = True

                    noise_mult = _mag_noise_factor(mpp)
                    latents = (cfg.noise_scale * noise_mult) * rng.standard_normal(
                        (n, LATENT_DIM)
                    )
                    latents[mask] = (
                        centroids[c]
                        + offset
                        + (sigma_tile * noise_mult)
                        * rng.standard_normal((n_sig, LATENT_DIM))
                    )

                    mk = mag_key(mpp)
                    for e in extractors:
                        w, b = maps[e.id]
                        feats = (latents @ w + b).astype(np.float32)
                        rel = f"{e.id}/{mk}/{pid}__{sid}.bag"
                        path = out_dir / rel
                        path.parent.mkdir(parents=True, exist_ok=True)
                        write_bag(
                            PatchBag(pid, sid, e.id, float(mpp), feats), path
                        )
                        index[pid][e.id].setdefault(mk, []).append(rel)

                    meta = {
                        "patient_id": pid,
                        "slide_id": sid,
                        "magnification_mpp": float(mpp),
                        "tile_size": TILE_SIZE_PX,
                        "coords": _grid_coords(n),
                        "signal": mask.astype(int).tolist(),
                    }
                    rel = f"tiles/{mk}/{pid}__{sid}.json"
                    path = out_dir / rel
                    path.parent.mkdir(parents=True, exist_ok=True)
                    with open(path, "w", encoding="utf-8") as fh:
                        json.dump(meta, fh)
                        fh.write("\n")
                    tile_meta[pid].setdefault(mk, []).append(rel)

    manifest = CorpusManifest(
        root=out_dir,
        extractors=list(extractors),
        magnifications=[float(m) for m in mags],
        patients=patients,
        index=index,
        tile_meta=tile_meta,
        seed=cfg.seed,
        config={
            "n_classes": cfg.n_classes,
            "patients_per_class": cfg.patients_per_class,
            "tiles_per_bag": list(cfg.tiles_per_bag),
            "signal_tile_fraction": cfg.signal_tile_fraction,
            "class_separation": cfg.class_separation,
            "noise_scale": cfg.noise_scale,
            "mixing_seed": cfg.mixing_seed,
            "seed": cfg.seed,
            "slides_per_patient": cfg.slides_per_patient,
        },
    )
    manifest.save()
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# View sampling
# ---------------------------------------------------------------------------


@dataclass
class View:
    """One sampled (extractor, magnification, tile subset) realization of a patient."""

    patient_id: str
    extractor_id: str
    magnification_mpp: float
    features: np.ndarray  # (n, dim) float32, rows in source order
    tile_indices: np.ndarray  # indices into the patient's pooled tile rows
    n_total: int  # pooled tile count before subsampling

    @property
    def n_tiles(self) -> int:
        return int(self.features.shape[0])


def sample_view(
    manifest: CorpusManifest,
    patient_id: str,
    rng: np.random.Generator,
    max_tiles: int = 768,
) -> View:
    """Sample a view: uniform extractor, uniform magnification, tile subset.

    Tiles are pooled across the patient's slides at the sampled
    (extractor, magnification), then at most ``max_tiles`` rows are drawn
    without replacement; row order follows the source order.
    """
    record = manifest.patient(patient_id)  # raises KeyError for unknown patient
    eid = manifest.extractor_ids[int(rng.integers(len(manifest.extractors)))]
    mpp = manifest.magnifications[int(rng.integers(len(manifest.magnifications)))]

    feats = manifest.pooled_features(record.patient_id, eid, mpp)
    n_total = feats.shape[0]
    if n_total > max_tiles:
        idx = np.sort(rng.choice(n_total, size=max_tiles, replace=False))
    else:
        idx = np.arange(n_total)
    return View(
        patient_id=patient_id,
        extractor_id=eid,
        magnification_mpp=float(mpp),
        features=feats[idx],
        tile_indices=idx,
        n_total=int(n_total),
    )
