"""File formats: CSV datasets, JSON model checkpoints, concept-name sidecars.

Floats are written with Python's shortest round-trip repr, so every file
round-trips bit-identically: load(save(x)) reproduces x's exact float64
bits, and save(load(text)) reproduces the same bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .model import ConceptPredictor, Dataset, DenseLayer, LabelPredictor


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Datasets: header x0..x{d-1}, c0..c{k-1}, y
# ---------------------------------------------------------------------------


def dataset_to_csv(D: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ([f"x{i}" for i in range(D.d_in)]
              + [f"c{j}" for j in range(D.k)] + ["y"])
    writer.writerow(header)
    for i in range(D.n):
        row = [_fmt(v) for v in D.inputs[i]] + [_fmt(v) for v in D.concepts[i]]
        row.append(str(int(D.labels[i])))
        writer.writerow(row)
    return buf.getvalue()


def dataset_from_csv(text: str, num_classes: int | None = None,
                     names: list[str] | None = None) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DimensionError("empty CSV") from None
    d_in = sum(1 for h in header if h.startswith("x"))
    k = sum(1 for h in header if h.startswith("c"))
    expected = [f"x{i}" for i in range(d_in)] + [f"c{j}" for j in range(k)] + ["y"]
    if header != expected:
        raise DimensionError(f"unexpected CSV header {header!r}")
    inputs, concepts, labels = [], [], []
    for row in reader:
        if not row:
            continue
        values = [float(v) for v in row[:d_in + k]]
        inputs.append(values[:d_in])
        concepts.append(values[d_in:])
        labels.append(int(row[d_in + k]))
    if num_classes is None:
        num_classes = max(labels) + 1 if labels else 2
        num_classes = max(num_classes, 2)
    return Dataset(np.asarray(inputs), np.asarray(concepts),
                   np.asarray(labels, dtype=np.intp), num_classes, names)


def save_dataset(path: str | Path, D: Dataset) -> None:
    Path(path).write_text(dataset_to_csv(D), encoding="utf-8")
    if D.names is not None:
        sidecar = Path(path).with_suffix(".names.json")
        sidecar.write_text(json.dumps({"names": list(D.names)}, sort_keys=True),
                           encoding="utf-8")


def load_dataset(path: str | Path, num_classes: int | None = None) -> Dataset:
    path = Path(path)
    names = None
    sidecar = path.with_suffix(".names.json")
    if sidecar.exists():
        names = json.loads(sidecar.read_text(encoding="utf-8"))["names"]
    return dataset_from_csv(path.read_text(encoding="utf-8"), num_classes, names)


# ---------------------------------------------------------------------------
# Checkpoints: {"layers": [{"w", "b", "act"}...], "link", "label": {"w", "b"}}
# ---------------------------------------------------------------------------


def checkpoint_to_json(g: ConceptPredictor, f: LabelPredictor) -> str:
    # json emits floats with repr (shortest round-trip form), so the decimal
    # text preserves the exact float64 bits.
    payload = {
        "layers": [{"w": [[float(v) for v in row] for row in layer.weights],
                    "b": [float(v) for v in layer.bias],
                    "act": layer.activation}
                   for layer in g.layers],
        "link": g.concept_link,
        "label": {"w": [[float(v) for v in row] for row in f.weights],
                  "b": ([float(v) for v in f.bias]
                        if f.bias is not None else None)},
    }
    return json.dumps(payload, sort_keys=True)


def checkpoint_from_json(text: str) -> tuple[ConceptPredictor, LabelPredictor]:
    try:
        payload = json.loads(text)
        layers = [DenseLayer(np.array([[float(v) for v in row]
                                       for row in entry["w"]]),
                             np.array([float(v) for v in entry["b"]]),
                             entry["act"])
                  for entry in payload["layers"]]
        g = ConceptPredictor(layers, payload["link"])
        lbl = payload["label"]
        bias = (np.array([float(v) for v in lbl["b"]])
                if lbl["b"] is not None else None)
        f = LabelPredictor(np.array([[float(v) for v in row] for row in lbl["w"]]),
                           bias)
        return g, f
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(path: str | Path, g: ConceptPredictor,
                    f: LabelPredictor) -> None:
    Path(path).write_text(checkpoint_to_json(g, f), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ConceptPredictor, LabelPredictor]:
    return checkpoint_from_json(Path(path).read_text(encoding="utf-8"))
