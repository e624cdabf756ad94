import pytest
import torch

torch.set_num_threads(1)

from resmark.core import Corpus
from resmark.models import ArchConfig, init_model
from resmark.synthetic import make_synthetic_corpus, synthetic_image

TOY = ArchConfig(
    base_channels=8,
    encoder_scales=2,
    decoder_blocks=2,
    window=4,
    message_length=8,
    image_size=(16, 16),
)


@pytest.fixture(scope="session")
def toy_cfg() -> ArchConfig:
    return TOY


@pytest.fixture(scope="session")
def toy_bundle():
    return init_model(TOY, seed=0)


@pytest.fixture(scope="session")
def toy_images():
    return torch.stack([synthetic_image((16, 16), i) for i in range(16)])


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return make_synthetic_corpus(root, count=24, size=(16, 16), seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return Corpus.from_dir(small_corpus_dir, (16, 16), seed=0)
