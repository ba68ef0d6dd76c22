"""Exported teacher artifacts: records, the logit transform, a synthetic oracle.

The real teacher is consumed only through per-instance records (class
probabilities, elementwise log-odds, last-layer hidden vector, hard label).
``OracleTeacher`` stands in for it at desk scale: a hashed bag-of-pieces
linear scorer whose temperature controls how confident the predictions are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .tokenizer import Encoded

DEFAULT_CLAMP_EPS = 1e-7

# Knuth multiplicative hash keeps the piece->feature mapping stable across runs.
_HASH_MULTIPLIER = 2654435761


def logit_transform(p, eps: float = DEFAULT_CLAMP_EPS):
    """Elementwise log(p/(1-p)) with p clamped into [eps, 1-eps]."""
    if not 0.0 < eps < 0.5:
        raise ContractError(f"clamp eps must be in (0, 0.5), got {eps}")
    p = np.asarray(p, dtype=np.float64)
    clamped = np.clip(p, eps, 1.0 - eps)
    return np.log(clamped / (1.0 - clamped))


def hard_label(p) -> int:
    """Argmax class index; ties break to the lowest index."""
    return int(np.argmax(np.asarray(p)))


@dataclass(frozen=True)
class TeacherRecord:
    """One transfer-set instance's exported teacher outputs."""

    instance_id: str
    text: str
    probs: tuple
    logits: tuple
    hidden: tuple
    hard_label: int

    def validate(self, eps: float = DEFAULT_CLAMP_EPS) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) < 2:
            raise FormatError(f"record {self.instance_id}: bad probs shape")
        if (probs <= 0).any():
            raise FormatError(f"record {self.instance_id}: non-positive probability")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise FormatError(
                f"record {self.instance_id}: probs sum to {probs.sum():.8f}, not 1"
            )
        expected = logit_transform(probs, eps)
        if np.abs(np.asarray(self.logits) - expected).max() > 1e-6:
            raise FormatError(
                f"record {self.instance_id}: logits inconsistent with probs"
            )
        if self.hard_label != hard_label(probs):
            raise FormatError(
                f"record {self.instance_id}: hard_label {self.hard_label} "
                f"!= argmax(probs) {hard_label(probs)}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.probs)

    @property
    def hidden_dim(self) -> int:
        return len(self.hidden)


def make_record(instance_id, text, probs, hidden,
                eps: float = DEFAULT_CLAMP_EPS) -> TeacherRecord:
    """Build a record with logits and hard label derived from probs."""
    probs = np.asarray(probs, dtype=np.float64)
    return TeacherRecord(
        instance_id=str(instance_id),
        text=text,
        probs=tuple(probs.tolist()),
        logits=tuple(logit_transform(probs, eps).tolist()),
        hidden=tuple(np.asarray(hidden, dtype=np.float64).tolist()),
        hard_label=hard_label(probs),
    )


class OracleTeacher:
    """Deterministic synthetic teacher over hashed bag-of-pieces features.

    probs = softmax((features . weights) / tau); hidden = tanh(features .
    projector).  tau -> 0 approaches one-hot predictions, large tau gives
    near-uniform soft targets.
    """

    def __init__(self, weights, projector, tau: float = 1.0, seed: int = 0):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.projector = np.asarray(projector, dtype=np.float64)
        if tau <= 0:
            raise ContractError(f"temperature must be positive, got {tau}")
        if self.weights.shape[0] != self.projector.shape[0]:
            raise ContractError(
                f"weights feature dim {self.weights.shape[0]} != "
                f"projector feature dim {self.projector.shape[0]}"
            )
        self.tau = tau
        self.seed = seed

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.projector.shape[1]

    @classmethod
    def random(cls, feature_dim, num_classes, hidden_dim,
               tau: float = 1.0, seed: int = 0) -> "OracleTeacher":
        rng = np.random.default_rng(seed)
        return cls(
            weights=rng.standard_normal((feature_dim, num_classes)),
            projector=rng.standard_normal((feature_dim, hidden_dim)) * 0.5,
            tau=tau,
            seed=seed,
        )

    @classmethod
    def fit_centroids(cls, encoded_batch, labels, num_classes, feature_dim,
                      hidden_dim, tau: float = 1.0, seed: int = 0,
                      score_scale: float = 20.0) -> "OracleTeacher":
        """Nearest-centroid oracle: class columns are mean feature vectors.

        Gives the synthetic teacher high accuracy on tasks where classes are
        separable in bag-of-pieces space; score_scale widens the logit gaps
        so predictions stay informative at tau=1.
        """
        rng = np.random.default_rng(seed)
        centroids = np.zeros((feature_dim, num_classes))
        counts = np.zeros(num_classes)
        for enc, label in zip(encoded_batch, labels):
            centroids[:, label] += _hashed_features(enc, feature_dim)
            counts[label] += 1
        if (counts == 0).any():
            raise ContractError("every class needs at least one fitting instance")
        centroids /= counts
        return cls(
            weights=centroids * score_scale,
            projector=rng.standard_normal((feature_dim, hidden_dim)) * 0.5,
            tau=tau,
            seed=seed,
        )

    def predict(self, encoded: Encoded, instance_id: str, text: str) -> TeacherRecord:
        features = _hashed_features(encoded, self.feature_dim)
        scores = (features @ self.weights) / self.tau
        scores = scores - scores.max()
        e = np.exp(scores)
        probs = e / e.sum()
        hidden = np.tanh(features @ self.projector)
        return make_record(instance_id, text, probs, hidden)


def _hashed_features(encoded: Encoded, feature_dim: int):
    """L2-normalized hashed counts of the inner (non-[CLS]/[SEP]) pieces."""
    counts = np.zeros(feature_dim)
    inner = encoded.ids[1 : encoded.length - 1]
    for token_id in inner:
        counts[(token_id * _HASH_MULTIPLIER) % feature_dim] += 1.0
    norm = np.linalg.norm(counts)
    if norm > 0:
        counts /= norm
    return counts


# -- artifact file: one flat JSON object per line ------------------------


def export_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({
                "id": rec.instance_id,
                "text": rec.text,
                "probs": list(rec.probs),
                "logits": list(rec.logits),
                "hidden": list(rec.hidden),
                "hard_label": rec.hard_label,
            }))
            f.write("\n")


def import_records(path):
    """Load and validate a teacher artifact file.

    Rejects malformed lines, invariant violations, and records whose class
    count or hidden width disagree with the first record.
    """
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = TeacherRecord(
                    instance_id=str(obj["id"]),
                    text=obj["text"],
                    probs=tuple(obj["probs"]),
                    logits=tuple(obj["logits"]),
                    hidden=tuple(obj["hidden"]),
                    hard_label=int(obj["hard_label"]),
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
            rec.validate()
            if records:
                if rec.num_classes != records[0].num_classes:
                    raise FormatError(
                        f"{path}:{lineno}: class count {rec.num_classes} != "
                        f"{records[0].num_classes} of first record"
                    )
                if rec.hidden_dim != records[0].hidden_dim:
                    raise FormatError(
                        f"{path}:{lineno}: hidden width {rec.hidden_dim} != "
                        f"{records[0].hidden_dim} of first record"
                    )
            records.append(rec)
    return records
