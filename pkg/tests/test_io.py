import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drafteu import io
from drafteu.errors import InvalidInputError
from drafteu.models import LINEAR_SOFTMAX, TABULAR, VocabSpec, init_model, make_target_family, LowRankNoiseSpec


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=12, max_size=12))
def test_checkpoint_roundtrip_is_value_exact(values):
    m = init_model(LINEAR_SOFTMAX, VocabSpec(3), 1, 2).with_params(np.array(values))
    back = io.model_from_json(io.model_to_json(m))
    np.testing.assert_array_equal(back.params, m.params)


def test_checkpoint_fields(tmp_path):
    m = init_model(TABULAR, VocabSpec(3, 0, 2), 2, 0, 0.5, seed=4, provenance="draft")
    path = io.save_model(m, tmp_path / "m.json")
    doc = json.loads(path.read_text())
    for key in ("format_version", "backend", "V", "n", "H", "bos_id", "eos_id", "params", "provenance", "seed_lineage"):
        assert key in doc
    back = io.load_model(path)
    assert back.backend == TABULAR and back.vocab == m.vocab and back.provenance == "draft"
    assert back.seed_lineage == m.seed_lineage


def test_family_roundtrip(tmp_path):
    base = init_model(LINEAR_SOFTMAX, VocabSpec(4), 2, 3, 0.5, 1)
    fam = make_target_family(base, 3, LowRankNoiseSpec(1, 0.4), 2)
    io.save_family(fam, tmp_path / "fam")
    back = io.load_family(tmp_path / "fam", fam.provenance)
    assert len(back) == 3
    for a, b in zip(fam, back):
        np.testing.assert_array_equal(a.params, b.params)


def test_bad_checkpoint():
    with pytest.raises(InvalidInputError):
        io.format_float(float("inf"))
    good = json.loads(io.model_to_json(init_model(TABULAR, VocabSpec(2), 1)))
    good["format_version"] = 99
    with pytest.raises(InvalidInputError):
        io.model_from_json(json.dumps(good))
