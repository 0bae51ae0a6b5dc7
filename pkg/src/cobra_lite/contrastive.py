"""Momentum contrastive pretraining over patient views.

Each step pairs two independently sampled views of the same patient
(extractor, magnification and tile subset drawn per view). The query
encoder embeds one view, the key encoder (an exponential moving average of
the query encoder) embeds the other, and the InfoNCE loss pulls the pair
together against in-batch negatives. No memory queue: negatives are the
other patients in the batch.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import code_version, save_checkpoint
from .corpus import CorpusManifest, View, sample_view
from .encoder import EncoderConfig, SlideEncoder
from .errors import TrainingDivergedError

METRICS_HEADER = "epoch,step,loss,alignment,uniformity,lr"


@dataclass
class TrainConfig:
    """Pretraining hyperparameters (defaults are the full-scale settings)."""

    batch_size: int = 1024
    epochs: int = 2000
    lr: float = 5e-4
    weight_decay: float = 0.1
    warmup_epochs: int = 50
    momentum: float = 0.99
    temperature: float = 0.2
    max_tiles_per_view: int = 768
    seed: int = 0
    symmetric: bool = True
    proj_hidden: int = 512
    proj_dim: int = 256
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    dtype: str = "float32"
    key_init: str = "copy"  # "copy" bootstraps the EMA; "random" for controls
    freeze_keys: bool = False  # control runs: key tower never updated
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.lr < 0:
            # lr = 0 is allowed for no-update diagnostics
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.key_init not in ("copy", "random"):
            raise ValueError(f"key_init must be copy or random, got {self.key_init!r}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch_size must be >= 2 (need at least one negative), "
                f"got {self.batch_size}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        self.encoder.validate()

    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64


class ProjectionHead(nn.Module):
    """d -> hidden -> out MLP whose output is scaled to unit length."""

    def __init__(self, d_in: int, hidden: int = 512, out: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, out)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=-1)


class PredictionHead(nn.Module):
    """out -> hidden -> out MLP on the query side only."""

    def __init__(self, dim: int, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _check_unit(name: str, v: torch.Tensor, tol: float = 1e-3) -> None:
    norms = v.norm(dim=-1)
    dev = (norms - 1.0).abs().max().item()
    if dev > tol:
        raise ValueError(f"{name} not unit-normalized (max deviation {dev:.2e})")


def info_nce(q: torch.Tensor | np.ndarray, keys: torch.Tensor | np.ndarray,
             pos_index: int, tau: float) -> float:
    """InfoNCE for one query against a key set containing its positive.

    loss = -log( exp(q.k+ / tau) / sum_i exp(q.k_i / tau) ), computed via
    logsumexp (max-subtracted). All vectors must be unit length.
    """
    q = torch.as_tensor(np.asarray(q, dtype=np.float64)) if isinstance(q, np.ndarray) else q
    keys = torch.as_tensor(np.asarray(keys, dtype=np.float64)) if isinstance(keys, np.ndarray) else keys
    if not 0 <= pos_index < keys.shape[0]:
        raise ValueError(f"pos_index {pos_index} out of range for {keys.shape[0]} keys")
    _check_unit("query", q)
    _check_unit("keys", keys)
    sims = keys @ q / tau
    loss = torch.logsumexp(sims, dim=0) - sims[pos_index]
    return float(loss)


def info_nce_batch(q: torch.Tensor, k: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean InfoNCE with in-batch negatives; positives on the diagonal."""
    logits = q @ k.T / tau  # (B, B)
    log_norm = torch.logsumexp(logits, dim=1)
    return (log_norm - logits.diagonal()).mean()


def alignment_metric(q: torch.Tensor, k: torch.Tensor) -> float:
    """Mean cosine between positives (rows already unit length)."""
    return float((q * k).sum(dim=1).mean())


def uniformity_metric(x: torch.Tensor, t: float = 2.0) -> float:
    """log mean exp(-t * squared pairwise distance); lower is more uniform."""
    d2 = torch.pdist(x).pow(2)
    return float(torch.logsumexp(-t * d2, dim=0) - math.log(d2.numel()))


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


@torch.no_grad()
def momentum_update(key_module: nn.Module, query_module: nn.Module, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise over the tree."""
    q_params = dict(query_module.named_parameters())
    k_params = dict(key_module.named_parameters())
    if q_params.keys() != k_params.keys():
        raise ValueError(
            "parameter tree mismatch between key and query modules: "
            f"{sorted(set(q_params) ^ set(k_params))}"
        )
    for name, kp in k_params.items():
        qp = q_params[name]
        if kp.shape != qp.shape:
            raise ValueError(f"shape mismatch for {name!r}: {kp.shape} vs {qp.shape}")
        kp.mul_(m).add_(qp, alpha=1.0 - m)


def make_pair(manifest: CorpusManifest, patient_id: str,
              rng: np.random.Generator, max_tiles: int = 768) -> tuple[View, View]:
    """Two independent views of the same patient (query view, key view)."""
    return (
        sample_view(manifest, patient_id, rng, max_tiles=max_tiles),
        sample_view(manifest, patient_id, rng, max_tiles=max_tiles),
    )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over warmup_epochs, then cosine decay to 0."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    t = (epoch - cfg.warmup_epochs) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class ContrastiveModel(nn.Module):
    """Query-side tower: slide encoder + projection + prediction heads."""

    def __init__(self, registry: dict[str, int], enc_cfg: EncoderConfig,
                 proj_hidden: int, proj_dim: int):
        super().__init__()
        self.encoder = SlideEncoder(registry, enc_cfg)
        self.projection = ProjectionHead(enc_cfg.d_model, proj_hidden, proj_dim)
        self.prediction = PredictionHead(proj_dim, proj_hidden)

    def queries(self, views: list[View]) -> torch.Tensor:
        z = self.encoder.forward_batch(
            [v.features for v in views], [v.extractor_id for v in views]
        )
        return F.normalize(self.prediction(self.projection(z)), dim=-1)

    def keys(self, views: list[View]) -> torch.Tensor:
        z = self.encoder.forward_batch(
            [v.features for v in views], [v.extractor_id for v in views]
        )
        return self.projection(z)


def _encode_keys(key_encoder: SlideEncoder, key_projection: ProjectionHead,
                 views: list[View]) -> torch.Tensor:
    z = key_encoder.forward_batch(
        [v.features for v in views], [v.extractor_id for v in views]
    )
    return key_projection(z)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    epochs: int
    first_epoch_loss: float
    final_epoch_loss: float


def _fmt(x: float) -> str:
    return repr(float(x))


def train(manifest: CorpusManifest, cfg: TrainConfig, out_dir: str | Path,
          step_callback=None) -> TrainResult:
    """Run momentum contrastive pretraining and write checkpoint + metrics.

    Per step: sample a batch of distinct patients, draw a view pair per
    patient, encode queries with the trainable tower and keys with the EMA
    tower (no grad), take the symmetrized InfoNCE, step AdamW, then update
    the key tower. Metrics (mean loss, alignment, uniformity, lr) are
    appended per epoch to ``metrics.csv``. ``step_callback(step, model,
    key_encoder, key_projection)`` runs after each EMA update.
    """
    cfg.validate()
    if len(manifest.patients) < 2:
        raise ValueError("corpus must contain at least 2 patients")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = cfg.torch_dtype()

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    registry = {e.id: e.dim for e in manifest.extractors}
    model = ContrastiveModel(registry, cfg.encoder, cfg.proj_hidden, cfg.proj_dim).to(dtype)

    if cfg.key_init == "random":
        key_encoder = SlideEncoder(registry, cfg.encoder).to(dtype)
        key_projection = ProjectionHead(
            cfg.encoder.d_model, cfg.proj_hidden, cfg.proj_dim
        ).to(dtype)
    else:
        key_encoder = copy.deepcopy(model.encoder)
        key_projection = copy.deepcopy(model.projection)
    for p in key_encoder.parameters():
        p.requires_grad_(False)
    for p in key_projection.parameters():
        p.requires_grad_(False)
    key_encoder.eval()
    key_projection.eval()

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)

    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.slenc"
    patient_ids = list(manifest.patient_ids)

    def save(epoch: int, path: Path) -> None:
        state = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
        state.update({f"projection.{k}": v for k, v in model.projection.state_dict().items()})
        state.update({f"prediction.{k}": v for k, v in model.prediction.state_dict().items()})
        save_checkpoint(path, state, {
            "hyperparams": {
                "encoder": cfg.encoder.to_dict(),
                "proj_hidden": cfg.proj_hidden,
                "proj_dim": cfg.proj_dim,
            },
            "extractors": [{"id": e.id, "dim": e.dim, "seed": e.seed}
                           for e in manifest.extractors],
            "seed": cfg.seed,
            "epoch": epoch,
            "version": code_version(),
        })

    first_epoch_loss = math.nan
    final_epoch_loss = math.nan
    global_step = 0

    with open(metrics_path, "w", encoding="utf-8") as log:
        log.write(METRICS_HEADER + "\n")
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr

            order = rng.permutation(len(patient_ids))
            losses, aligns, unifs = [], [], []
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                if len(chunk) < 2:
                    continue
                pairs = [
                    make_pair(manifest, patient_ids[i], rng, cfg.max_tiles_per_view)
                    for i in chunk
                ]
                v1 = [p[0] for p in pairs]
                v2 = [p[1] for p in pairs]

                model.train()
                n = len(pairs)
                # one padded batch over both views per tower: the scan loop
                # runs once per call, so merging halves its dispatch cost
                if cfg.symmetric:
                    q_all = model.queries(v1 + v2)
                    q1, q2 = q_all[:n], q_all[n:]
                    with torch.no_grad():
                        k_all = _encode_keys(key_encoder, key_projection, v1 + v2)
                        k1, k2 = k_all[:n], k_all[n:]
                    loss = 0.5 * (info_nce_batch(q1, k2, cfg.temperature)
                                  + info_nce_batch(q2, k1, cfg.temperature))
                else:
                    q1 = model.queries(v1)
                    with torch.no_grad():
                        k2 = _encode_keys(key_encoder, key_projection, v2)
                    loss = info_nce_batch(q1, k2, cfg.temperature)

                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became non-finite at epoch {epoch} step {global_step}"
                    )

                opt.zero_grad()
                loss.backward()
                opt.step()
                if not cfg.freeze_keys:
                    momentum_update(key_encoder, model.encoder, cfg.momentum)
                    momentum_update(key_projection, model.projection, cfg.momentum)
                global_step += 1
                if step_callback is not None:
                    step_callback(global_step, model, key_encoder, key_projection)

                with torch.no_grad():
                    align = alignment_metric(q1, k2)
                    if cfg.symmetric:
                        align = 0.5 * (align + alignment_metric(q2, k1))
                    losses.append(float(loss))
                    aligns.append(align)
                    unifs.append(uniformity_metric(k2))

            if not losses:
                raise ValueError("no usable batches (need >= 2 patients per batch)")
            epoch_loss = float(np.mean(losses))
            if epoch == 0:
                first_epoch_loss = epoch_loss
            final_epoch_loss = epoch_loss
            log.write(",".join([
                str(epoch), str(global_step), _fmt(epoch_loss),
                _fmt(float(np.mean(aligns))), _fmt(float(np.mean(unifs))), _fmt(lr),
            ]) + "\n")
            log.flush()

            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save(epoch, out_dir / f"checkpoint_ep{epoch + 1:05d}.slenc")

        save(cfg.epochs - 1, ckpt_path)

    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        epochs=cfg.epochs,
        first_epoch_loss=first_epoch_loss,
        final_epoch_loss=final_epoch_loss,
    )


def load_model(ckpt_path: str | Path) -> tuple[ContrastiveModel, dict]:
    """Rebuild the query tower from a checkpoint."""
    from .checkpoint import load_checkpoint

    header, state = load_checkpoint(ckpt_path)
    hp = header["hyperparams"]
    enc_cfg = EncoderConfig(**hp["encoder"])
    registry = {e["id"]: e["dim"] for e in header["extractors"]}
    model = ContrastiveModel(registry, enc_cfg, hp["proj_hidden"], hp["proj_dim"])
    sd = {}
    for name, tensor in state.items():
        sd[name] = tensor
    model.load_state_dict(sd)
    model.eval()
    return model, header
