import pytest

from ganmel.dataio import StftConfig, generate_synthetic_corpus
from ganmel.generator import GeneratorConfig


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Tiny 2-speaker, 4-utterance corpus with narrow mel for fast training tests."""
    out = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(
        seed=5, n_speakers=2, n_utts=4, cfg=StftConfig(mel_bins=20), out_dir=out
    )


@pytest.fixture(scope="session")
def tiny_gen_cfg():
    """Architecture knobs only; vocab/speakers/bins/stats come from the manifest."""
    return GeneratorConfig(
        vocab_size=40,
        n_speakers=2,
        hidden_dim=16,
        n_blocks_enc=1,
        n_blocks_dec=1,
        n_heads=2,
        conv_filter_dim=24,
        speaker_dim=8,
        var_filter_dim=12,
        n_variance_bins=16,
    )
