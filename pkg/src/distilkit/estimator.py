"""scikit-learn estimator wrapper around the distillation engine.

``DistilledBiLSTMClassifier`` follows the fit/predict contract so the
trained student composes with sklearn pipelines and model selection.  The
teacher signal (transfer texts plus teacher records, or a synthetic oracle)
is supplied as constructor parameters; ``fit(X, y)`` consumes the labeled
texts.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .errors import ContractError
from .evaluation import Corpus, Instance
from .losses import LossWeights
from .student import StudentConfig, predict_proba
from .tokenizer import Vocab, basic_split
from .training import (
    TrainConfig,
    run_distil_then_finetune,
    run_joint,
    run_stagewise_rl_first,
)


def _check_texts(X):
    texts = list(X)
    if not texts:
        raise ContractError("X must contain at least one text")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise ContractError(f"X[{i}] is {type(t).__name__}, expected str")
    return texts


class DistilledBiLSTMClassifier(ClassifierMixin, BaseEstimator):
    """BiLSTM text classifier optionally distilled from teacher records.

    Parameters mirror the engine configuration; with ``transfer_texts`` and
    ``teacher_records`` unset (and alpha-only weights) this degrades to the
    plain supervised student.
    """

    def __init__(self, embed_dim=300, lstm_hidden=600, max_len=128,
                 dropout_rate=0.4, recurrent_dropout_rate=0.2,
                 alpha=10.0, beta=10.0, gamma=1.0,
                 regimen="joint", batch_size=64, max_epochs=50, patience=3,
                 seed=0, vocab=None, transfer_texts=None, teacher_records=None):
        self.embed_dim = embed_dim
        self.lstm_hidden = lstm_hidden
        self.max_len = max_len
        self.dropout_rate = dropout_rate
        self.recurrent_dropout_rate = recurrent_dropout_rate
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.regimen = regimen
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.vocab = vocab
        self.transfer_texts = transfer_texts
        self.teacher_records = teacher_records

    def fit(self, X, y):
        texts = _check_texts(X)
        y = np.asarray(y)
        if len(y) != len(texts):
            raise ContractError(f"X has {len(texts)} texts but y has {len(y)} labels")
        self.classes_ = np.unique(y)
        class_index = {c: i for i, c in enumerate(self.classes_)}
        labels = np.array([class_index[v] for v in y])

        vocab = self.vocab
        if vocab is None:
            tokens = []
            for text in texts:
                tokens.extend(basic_split(text))
            for text in self.transfer_texts or ():
                tokens.extend(basic_split(text))
            vocab = Vocab.from_tokens(tokens)
        self.vocab_ = vocab

        records = list(self.teacher_records or ())
        labeled = [Instance(f"l{i}", t, int(lab))
                   for i, (t, lab) in enumerate(zip(texts, labels))]
        if records:
            unlabeled = [Instance(r.instance_id, r.text, None) for r in records]
            teacher_hidden = records[0].hidden_dim
        else:
            unlabeled = [Instance(f"u{i}", t, None)
                         for i, t in enumerate(self.transfer_texts or texts)]
            teacher_hidden = 1
        corpus = Corpus(labeled, unlabeled, num_classes=len(self.classes_))

        student_cfg = StudentConfig(
            vocab_size=len(vocab),
            num_classes=len(self.classes_),
            embed_dim=self.embed_dim,
            lstm_hidden=self.lstm_hidden,
            teacher_hidden=teacher_hidden,
            max_len=self.max_len,
            dropout_rate=self.dropout_rate,
            recurrent_dropout_rate=self.recurrent_dropout_rate,
        )
        weights = LossWeights(
            alpha=self.alpha,
            beta=self.beta if records else 0.0,
            gamma=self.gamma if records else 0.0,
        )
        cfg = TrainConfig(
            student=student_cfg, vocab=vocab,
            batch_size=min(self.batch_size, len(unlabeled)),
            max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
        )
        if self.regimen == "joint":
            self.params_, self.metrics_ = run_joint(corpus, records, weights, cfg)
        elif self.regimen == "stagewise_rl_first":
            self.params_, self.metrics_ = run_stagewise_rl_first(
                corpus, records, weights, cfg)
        elif self.regimen == "distil_then_finetune":
            self.params_, self.metrics_, _ = run_distil_then_finetune(
                corpus, records, weights, cfg)
        else:
            raise ContractError(f"unknown regimen {self.regimen!r}")
        return self

    def _encode(self, texts):
        from .tokenizer import encode
        return [encode(t, self.vocab_, self.max_len) for t in texts]

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit the classifier before predicting")
        texts = _check_texts(X)
        return predict_proba(self.params_, self._encode(texts), self.batch_size)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]
