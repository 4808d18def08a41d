import numpy as np
import pytest

from pfseg.dataset import LabeledFramePair
from pfseg.models import ModelSpec

# narrow widths keep model tests fast; the topology is the full one
TINY = dict(encoder_widths=(4, 4, 8, 8), decoder_widths=(8, 4, 4, 4), backbone_kernel=3)


def tiny_spec(variant: str, **kw) -> ModelSpec:
    return ModelSpec(variant, **{**TINY, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pair(rng, h=16, w=16, classes=11, void_frac=0.0) -> LabeledFramePair:
    labels = rng.integers(0, classes, (h, w)).astype(np.uint8)
    if void_frac:
        labels[rng.random((h, w)) < void_frac] = 255
    return LabeledFramePair(
        rng.random((3, h, w), dtype=np.float32), rng.random((3, h, w), dtype=np.float32), labels, {"source": "rand"}
    )
