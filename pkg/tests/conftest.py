import json
from pathlib import Path

import numpy as np
import pytest

from protohead import load_feature_map, load_prototype_bank, load_proposals

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def planted_scene():
    """Checked-in synthetic scene: feature map, bank, proposals, metadata."""
    meta = json.loads((FIXTURES / "planted_meta.json").read_text())
    return {
        "fm": load_feature_map(FIXTURES / "planted.phf1"),
        "bank": load_prototype_bank(FIXTURES / "planted_bank.phb1"),
        "proposals": load_proposals(FIXTURES / "planted_proposals.txt"),
        "meta": meta,
        "paths": {
            "features": FIXTURES / "planted.phf1",
            "bank": FIXTURES / "planted_bank.phb1",
            "proposals": FIXTURES / "planted_proposals.txt",
            "cls_weights": FIXTURES / "planted_cls.phw1",
            "loc_weights": FIXTURES / "planted_loc.phw1",
        },
    }


def similarity_logit_oracle(threshold=0.5, gain=100.0):
    """Propagator stand-in: saturated logits from the target-class channel."""

    def inject(initial, sim):
        return np.where(sim[:, :, 0] > threshold, gain / 2.0, -gain / 2.0)

    return inject
