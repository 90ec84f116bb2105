import numpy as np
import pytest
import torch

from facecloak.config import EmbedderSpec, SyntheticConfig, TrainSettings
from facecloak.dataset import LabeledImage, generate_synthetic_identities, prepare_face, split_dataset
from facecloak.embedder import calibrate_threshold, train_embedder


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_faces():
    cfg = SyntheticConfig(num_identities=10, images_per_identity=6, image_size=32, seed=3)
    scenes = generate_synthetic_identities(cfg)
    faces = [LabeledImage(prepare_face(d, 32), d.identity_id, d.image_id, d.boxes) for d in scenes]
    train, val, test = split_dataset(faces, (0.6, 0.2, 0.2), seed=1)
    return {"train": train, "val": val, "test": test}


@pytest.fixture(scope="session")
def tiny_spec():
    return EmbedderSpec(widths=(8, 16, 16, 16), strides=(1, 2, 2, 2), embedding_dim=8,
                        train=TrainSettings(epochs=3, batch_size=16, seed=5))


@pytest.fixture(scope="session")
def tiny_embedder(tiny_faces, tiny_spec):
    return train_embedder(tiny_faces["train"], tiny_spec)


@pytest.fixture(scope="session")
def tiny_threshold(tiny_embedder, tiny_faces):
    return calibrate_threshold(tiny_embedder, tiny_faces["val"])
