"""File formats: JSON model checkpoints and line-delimited JSON records.

Checkpoint parameters are written with 17 significant digits, which makes
the round trip exact for every finite double. Record files put one JSON
object per line with keys in a fixed order so diffs stay readable.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, List, Mapping

import numpy as np

from drafteu.errors import InvalidInputError
from drafteu.models import AutoregressiveModel, ModelFamily, VocabSpec

CHECKPOINT_FORMAT_VERSION = 1


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise InvalidInputError(f"cannot serialize non-finite value {x!r}")
    return format(float(x), ".17g")


def model_to_json(model: AutoregressiveModel) -> str:
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backend": model.backend,
        "V": model.vocab.size,
        "n": model.context_window,
        "H": model.hidden_width,
        "bos_id": model.vocab.bos_id,
        "eos_id": model.vocab.eos_id,
        "provenance": model.provenance,
        "seed_lineage": [str(s) for s in model.seed_lineage],
    }
    body = json.dumps(header, indent=1)[:-2]
    params = ", ".join(format_float(x) for x in model.params)
    return f'{body},\n "params": [{params}]\n}}\n'


def model_from_json(text: str) -> AutoregressiveModel:
    doc = json.loads(text)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    vocab = VocabSpec(doc["V"], doc["bos_id"], doc["eos_id"])
    return AutoregressiveModel(
        backend=doc["backend"],
        context_window=doc["n"],
        params=np.array(doc["params"], dtype=np.float64),
        vocab=vocab,
        hidden_width=doc["H"],
        provenance=doc.get("provenance", ""),
        seed_lineage=tuple(int(s) for s in doc.get("seed_lineage", [])),
    )


def save_model(model: AutoregressiveModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model))
    return path


def load_model(path) -> AutoregressiveModel:
    return model_from_json(Path(path).read_text())


def save_family(family: ModelFamily, directory, prefix: str = "member") -> List[Path]:
    directory = Path(directory)
    return [save_model(m, directory / f"{prefix}_{i:03d}.json") for i, m in enumerate(family)]


def load_family(directory, provenance: str, prefix: str = "member") -> ModelFamily:
    paths = sorted(Path(directory).glob(f"{prefix}_*.json"))
    if not paths:
        raise InvalidInputError(f"no {prefix}_*.json checkpoints in {directory}")
    return ModelFamily(tuple(load_model(p) for p in paths), provenance)


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps_record(record: Mapping) -> str:
    return json.dumps(record, default=_default, separators=(", ", ": "), allow_nan=False)


def write_jsonl(path, records: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")
    return path


def read_jsonl(path) -> List[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, default=_default, indent=2, allow_nan=False) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
