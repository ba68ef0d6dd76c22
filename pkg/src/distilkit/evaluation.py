"""Dataset splits, accuracy, and the teacher prediction-variance diagnostic."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError


@dataclass(frozen=True)
class Instance:
    instance_id: str
    text: str
    label: int | None = None


@dataclass
class Corpus:
    """Labeled set D_l plus unlabeled transfer set D_u."""

    labeled: list
    unlabeled: list
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for inst in self.labeled:
            if inst.label is None or not 0 <= inst.label < self.num_classes:
                raise ContractError(
                    f"labeled instance {inst.instance_id} has bad label {inst.label}"
                )


def derive_split(pool, test_size: int, num_classes: int, seed: int) -> Corpus:
    """Sample test_size/num_classes instances per class into D_l; strip labels
    from everything else to form D_u."""
    return low_resource_split(pool, test_size // num_classes, num_classes, seed)


def low_resource_split(pool, k_per_class: int, num_classes: int,
                       seed: int) -> Corpus:
    """Uniform, seeded, without-replacement split of k instances per class."""
    by_class = {c: [] for c in range(num_classes)}
    for inst in pool:
        if inst.label is None or not 0 <= inst.label < num_classes:
            raise ContractError(
                f"pool instance {inst.instance_id} has bad label {inst.label}"
            )
        by_class[inst.label].append(inst)
    rng = np.random.default_rng(seed)
    chosen = set()
    for c in range(num_classes):
        if len(by_class[c]) < k_per_class:
            raise ContractError(
                f"class {c} has {len(by_class[c])} instances, need {k_per_class}"
            )
        picked = rng.choice(len(by_class[c]), size=k_per_class, replace=False)
        chosen.update(by_class[c][i].instance_id for i in picked)
    labeled = [inst for inst in pool if inst.instance_id in chosen]
    unlabeled = [
        Instance(inst.instance_id, inst.text, None)
        for inst in pool
        if inst.instance_id not in chosen
    ]
    provenance = {
        "seed": seed,
        "per_class": k_per_class,
        "labeled": len(labeled),
        "unlabeled": len(unlabeled),
    }
    return Corpus(labeled=labeled, unlabeled=unlabeled,
                  num_classes=num_classes, provenance=provenance)


def accuracy(predictions, gold) -> float:
    predictions = list(predictions)
    gold = list(gold)
    if len(predictions) != len(gold):
        raise ContractError(
            f"length mismatch: {len(predictions)} predictions, {len(gold)} gold"
        )
    if not predictions:
        raise ContractError("accuracy of an empty set is undefined")
    correct = sum(1 for p, g in zip(predictions, gold) if p == g)
    return correct / len(predictions)


def prediction_variance(records) -> float:
    """Mean over instances of the population variance of each probability row.

    Maximized at (C-1)/C^2 when the teacher emits one-hot predictions."""
    records = list(records)
    if not records:
        raise ContractError("prediction_variance requires at least one record")
    num_classes = records[0].num_classes
    total = 0.0
    for rec in records:
        probs = np.asarray(rec.probs)
        if len(probs) != num_classes:
            raise ContractError(
                f"record {rec.instance_id} has {len(probs)} classes, "
                f"expected {num_classes}"
            )
        total += probs.var()  # population variance (divide by C)
    return total / len(records)


def max_variance(num_classes: int) -> float:
    """Variance of a one-hot probability vector: (C-1)/C^2."""
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    return (num_classes - 1) / num_classes**2


# -- corpus file: header record then one instance per line ----------------


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({
            "type": "header",
            "num_classes": corpus.num_classes,
            "provenance": corpus.provenance,
        }, sort_keys=True))
        f.write("\n")
        for inst in list(corpus.labeled) + list(corpus.unlabeled):
            f.write(json.dumps({
                "id": inst.instance_id,
                "text": inst.text,
                "label": inst.label,
            }))
            f.write("\n")


def load_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:1: bad header: {exc}") from exc
        if header.get("type") != "header" or "num_classes" not in header:
            raise FormatError(f"{path}:1: missing corpus header record")
        labeled, unlabeled = [], []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                inst = Instance(str(obj["id"]), obj["text"], obj["label"])
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed instance: {exc}") from exc
            (unlabeled if inst.label is None else labeled).append(inst)
    return Corpus(labeled=labeled, unlabeled=unlabeled,
                  num_classes=int(header["num_classes"]),
                  provenance=header.get("provenance", {}))
