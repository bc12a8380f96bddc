import json

import numpy as np
import pytest
import torch

from volclip.corpus import AbnormalityVocab
from volclip.encoders import PatchConfig, TextConfig, build_model
from volclip.tokenizer import WordTokenizer
from volclip.volume import TargetGeometry

DESK_SHAPE = (48, 48, 24)
DESK_SPACING = (1.5, 1.5, 3.0)
DESK_PATCH = (12, 12, 6)


@pytest.fixture(scope="session")
def desk_geometry():
    return TargetGeometry(spacing_mm=DESK_SPACING, shape=DESK_SHAPE)


def make_tiny_model(vocab_size=32, seed=0, shape=DESK_SHAPE, shared_dim=64,
                    embed_dim=32, depth=1, max_len=64, patch=DESK_PATCH):
    patch_cfg = PatchConfig(patch_xyz=patch, embed_dim=embed_dim,
                            depth_spatial=depth, depth_temporal=depth, heads=4)
    text_cfg = TextConfig(vocab_size=vocab_size, max_len=max_len,
                          embed_dim=embed_dim, depth=depth, heads=4)
    return build_model(shape, patch_cfg, text_cfg, shared_dim=shared_dim, seed=seed)


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def simple_tokenizer():
    texts = ["no consolidation seen today", "there is a large lesion",
             "sphere sign in zone one two three", "band checker rim signs absent"]
    return WordTokenizer.train(texts)


def write_manifest_rows(path, rows):
    with open(path, "w") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    return path


def manifest_row(study_id, patient_id="P1", split="train", labels="", findings="Normal chest.",
                 impression="No findings.", volume_path="/nonexistent.vol"):
    return {
        "study_id": study_id,
        "patient_id": patient_id,
        "volume_path": volume_path,
        "findings": findings,
        "impression": impression,
        "clinical_information": "",
        "technique": "",
        "labels": labels,
        "split": split,
    }


@pytest.fixture
def vocab4():
    return AbnormalityVocab(("sphere sign", "band sign", "checker sign", "rim sign"))


@pytest.fixture
def vocab18():
    from importlib import resources

    names = [
        line.strip()
        for line in resources.files("volclip.data").joinpath("vocab18.txt")
        .read_text().splitlines() if line.strip()
    ]
    return AbnormalityVocab(tuple(names))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)
