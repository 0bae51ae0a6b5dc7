import numpy as np
import pytest
import torch

from cobra_lite.bags import ExtractorSpec
from cobra_lite.corpus import SyntheticGenConfig, generate_corpus
from cobra_lite.encoder import EncoderConfig

TINY_ENC = dict(d_model=16, attn_heads=2, attn_hidden=6, ssd_heads=2, d_state=4)


@pytest.fixture()
def tiny_encoder_config():
    return EncoderConfig(**TINY_ENC, dropout=0.0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """2 classes x 5 patients, 2 small extractors, 2 magnifications."""
    out = tmp_path_factory.mktemp("small_corpus")
    cfg = SyntheticGenConfig(
        n_classes=2, patients_per_class=5, tiles_per_bag=(10, 16),
        signal_tile_fraction=0.3, class_separation=5.0, noise_scale=1.0,
        seed=7, mixing_seed=3,
    )
    extractors = [ExtractorSpec("fma", 24, seed=1), ExtractorSpec("fmb", 40, seed=2)]
    return generate_corpus(cfg, extractors, [0.5, 2.0], out)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
