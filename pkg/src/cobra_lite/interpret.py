"""Attention-weight export for heatmaps and embedding dumps for projection.

The pooling weights double as an unsupervised tile-importance map: each
tile receives one softmax-normalized value. Export goes through the exact
aggregation code path, so the CSV weights are bit-equal to the weights the
encoder used, and the optional grayscale raster is a pure function of the
CSV rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import CorpusManifest
from .encoder import SlideEncoder
from .evaluation import write_dataset_tsv as export_embeddings  # noqa: F401

PGM_COMMENT = "# cobra-lite attention raster v1"


@dataclass
class TileAttention:
    """Per-tile grid position and pooling weight for one patient view."""

    tile_index: np.ndarray  # (N,) int
    x: np.ndarray  # (N,) int grid column
    y: np.ndarray  # (N,) int grid row (slides stacked vertically)
    weight: np.ndarray  # (N,) float, sums to 1
    signal: np.ndarray | None = None  # planted-signal mask when available


def compute_attention(manifest: CorpusManifest, encoder: SlideEncoder,
                      patient_id: str, extractor_id: str,
                      magnification: float) -> TileAttention:
    """Pooling weights over a patient's pooled tiles, plus grid coordinates.

    Weights come from the same forward used for aggregation (encoded rows
    drive the attention; the payload never does). Multi-slide patients are
    stacked vertically in grid space.
    """
    feats = manifest.pooled_features(patient_id, extractor_id, magnification)
    encoder.eval()
    with torch.no_grad():
        _, weights = encoder.single_fm(feats, extractor_id)
    w = weights.a.detach().cpu().numpy()

    metas = manifest.load_tile_meta(patient_id, magnification)
    xs, ys, sig = [], [], []
    y_offset = 0
    for meta in metas:
        coords = np.array(meta["coords"], dtype=np.int64)
        xs.append(coords[:, 0])
        ys.append(coords[:, 1] + y_offset)
        sig.append(np.array(meta["signal"], dtype=bool))
        y_offset += int(coords[:, 1].max()) + 1 if len(coords) else 0
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    signal = np.concatenate(sig)
    if len(x) != len(w):
        raise ValueError(
            f"tile metadata covers {len(x)} tiles but bag has {len(w)}"
        )
    return TileAttention(
        tile_index=np.arange(len(w)), x=x, y=y, weight=w, signal=signal
    )


def write_attention_csv(att: TileAttention, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tile_index,x,y,weight\n")
        for i in range(len(att.weight)):
            fh.write(
                f"{int(att.tile_index[i])},{int(att.x[i])},{int(att.y[i])},"
                f"{repr(float(att.weight[i]))}\n"
            )


def read_attention_csv(path: str | Path) -> TileAttention:
    idx, xs, ys, ws = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "tile_index,x,y,weight":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            a, b, c, d = line.strip().split(",")
            idx.append(int(a))
            xs.append(int(b))
            ys.append(int(c))
            ws.append(float(d))
    return TileAttention(
        tile_index=np.array(idx), x=np.array(xs), y=np.array(ys),
        weight=np.array(ws, dtype=np.float64),
    )


def render_pgm(att: TileAttention) -> str:
    """Plain (P2) PGM raster, intensity min-max normalized over the tiles.

    Grid cells without a tile are 0. A weight field whose relative range is
    below 1e-3 renders flat: stretching sub-visual differences (e.g. the
    causal scan's position transient on identical tiles) to full contrast
    would be a quantization artifact, not signal.
    """
    width = int(att.x.max()) + 1
    height = int(att.y.max()) + 1
    grid = np.zeros((height, width), dtype=np.int64)
    lo, hi = float(att.weight.min()), float(att.weight.max())
    if hi - lo > 1e-3 * max(abs(hi), abs(lo), 1e-12):
        vals = np.rint(255.0 * (att.weight - lo) / (hi - lo)).astype(np.int64)
    else:
        vals = np.zeros(len(att.weight), dtype=np.int64)
    grid[att.y, att.x] = vals
    lines = ["P2", PGM_COMMENT, f"{width} {height}", "255"]
    for row in grid:
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def render_pgm_from_csv(csv_path: str | Path) -> str:
    return render_pgm(read_attention_csv(csv_path))


def export_attention(manifest: CorpusManifest, encoder: SlideEncoder,
                     patient_id: str, extractor_id: str, magnification: float,
                     out_csv: str | Path,
                     out_pgm: str | Path | None = None) -> TileAttention:
    """Write the attention CSV (and optional PGM raster) for one patient."""
    att = compute_attention(manifest, encoder, patient_id, extractor_id,
                            magnification)
    write_attention_csv(att, out_csv)
    if out_pgm is not None:
        pgm = render_pgm_from_csv(out_csv)
        out_pgm = Path(out_pgm)
        out_pgm.parent.mkdir(parents=True, exist_ok=True)
        out_pgm.write_text(pgm, encoding="utf-8")
    return att
