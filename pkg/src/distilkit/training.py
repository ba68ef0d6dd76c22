"""Training engine: Adadelta, dual labeled/unlabeled batching, early stopping,
and the three distillation schedules (joint, stagewise with gradual
unfreezing, distil-once-fine-tune-forever)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import student as S
from .errors import ContractError, ShapeMismatchError
from .evaluation import Corpus, Instance, accuracy
from .losses import LossWeights
from .student import StudentConfig, StudentParams
from .tokenizer import Vocab, encode as encode_text

REGIMENS = ("joint", "stagewise_rl_first", "distil_then_finetune")

# Gradual unfreezing order: heads first, then the encoder, then embeddings.
UNFREEZE_PHASES = (
    ("heads", frozenset({S.GROUP_EMBEDDINGS, S.GROUP_BILSTM})),
    ("heads+bilstm", frozenset({S.GROUP_EMBEDDINGS})),
    ("all", frozenset()),
)


@dataclass
class TrainConfig:
    student: StudentConfig
    vocab: Vocab
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    val_fraction: float = 0.1
    metrics_path: str | None = None
    on_step: object = None  # callback(params, info) after every optimizer step


# -- Adadelta ------------------------------------------------------------


class AdadeltaState:
    """Per-parameter decayed accumulators of squared grads and updates."""

    def __init__(self, rho: float = 0.95, eps: float = 1e-6):
        if not 0.0 <= rho < 1.0:
            raise ContractError(f"rho must be in [0, 1), got {rho}")
        if eps <= 0:
            raise ContractError(f"eps must be positive, got {eps}")
        self.rho = rho
        self.eps = eps
        self.acc = {}  # name -> [E[g^2], E[dx^2]]


def adadelta_step(params: StudentParams, state: AdadeltaState) -> None:
    """One Adadelta update over every unfrozen parameter; frozen tensors and
    their accumulators are untouched.  Unfrozen tensors without a gradient
    are treated as zero-gradient (accumulators decay, value unchanged)."""
    rho, eps = state.rho, state.eps
    for name, t in params.tensors.items():
        if not t.requires_grad:
            continue
        if name not in state.acc:
            state.acc[name] = [np.zeros_like(t.data), np.zeros_like(t.data)]
        eg2, edx2 = state.acc[name]
        if eg2.shape != t.data.shape:
            raise ShapeMismatchError(
                f"optimizer state for {name} has shape {eg2.shape}, "
                f"parameter has {t.data.shape}"
            )
        if t.grad is None:
            eg2 *= rho
            edx2 *= rho
            continue
        g = t.grad
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        t.data = t.data + dx


# -- batching ------------------------------------------------------------


@dataclass
class DualBatch:
    labeled: list  # Instances with gold labels
    labels: np.ndarray
    unlabeled: list  # Instances
    records: list  # matching TeacherRecords (may be empty for CE-only use)


def steps_per_epoch(num_unlabeled: int, batch_size: int) -> int:
    return num_unlabeled // batch_size


def _cycler(items, rng):
    """Yield items forever in reshuffled full permutations, so appearance
    counts across any window differ by at most one."""
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def dual_batch_stream(corpus: Corpus, records_by_id, batch_size: int, seed: int):
    """Endless stream of DualBatch; every floor(|D_u|/B) batches is one epoch
    (a full pass over D_u).  The labeled pool reshuffles and cycles."""
    if not corpus.labeled or not corpus.unlabeled:
        raise ContractError("dual_batch_stream needs non-empty D_l and D_u")
    if len(corpus.unlabeled) < batch_size:
        raise ContractError(
            f"D_u has {len(corpus.unlabeled)} instances, need >= batch size "
            f"{batch_size}"
        )
    rng = np.random.default_rng(seed)
    labeled_iter = _cycler(corpus.labeled, rng)
    while True:
        order = rng.permutation(len(corpus.unlabeled))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            unlabeled = [corpus.unlabeled[i] for i in order[start:start + batch_size]]
            records = [_record_for(records_by_id, inst) for inst in unlabeled]
            labeled = [next(labeled_iter) for _ in range(batch_size)]
            yield DualBatch(
                labeled=labeled,
                labels=np.array([inst.label for inst in labeled]),
                unlabeled=unlabeled,
                records=records,
            )


def unlabeled_batch_stream(unlabeled, records_by_id, batch_size: int, seed: int):
    """Endless label-free stream over D_u; used by the distillation stages
    that never read gold labels."""
    if len(unlabeled) < batch_size:
        raise ContractError(
            f"D_u has {len(unlabeled)} instances, need >= batch size {batch_size}"
        )
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(unlabeled))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            chunk = [unlabeled[i] for i in order[start:start + batch_size]]
            yield DualBatch(
                labeled=[],
                labels=np.array([], dtype=int),
                unlabeled=chunk,
                records=[_record_for(records_by_id, inst) for inst in chunk],
            )


def _record_for(records_by_id, inst):
    if records_by_id is None:
        return None
    try:
        return records_by_id[inst.instance_id]
    except KeyError:
        raise ContractError(
            f"no teacher record for unlabeled instance {inst.instance_id}"
        ) from None


def labeled_batch_stream(instances, batch_size: int, seed: int):
    """Endless labeled-only stream; one epoch = ceil-free pass over the pool."""
    if not instances:
        raise ContractError("labeled_batch_stream needs a non-empty pool")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(instances))
        for start in range(0, len(order), batch_size):
            chunk = [instances[i] for i in order[start:start + batch_size]]
            yield DualBatch(
                labeled=chunk,
                labels=np.array([inst.label for inst in chunk]),
                unlabeled=[],
                records=[],
            )


# -- early stopping ------------------------------------------------------


def early_stop(history, patience: int) -> bool:
    """True when the last `patience` epochs all failed to improve the best
    validation loss seen so far."""
    if patience < 1:
        raise ContractError(f"patience must be >= 1, got {patience}")
    best = None
    bad = 0
    for loss in history:
        if best is None or loss < best:
            best = loss
            bad = 0
        else:
            bad += 1
    return bad >= patience


# -- metrics -------------------------------------------------------------


@dataclass
class RunMetrics:
    stage_history: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # per-epoch records
    total_steps: int = 0
    best_val_loss: float = float("inf")
    best_val_accuracy: float | None = None
    flags: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "stage_history": list(self.stage_history),
            "total_steps": self.total_steps,
            "best_val_loss": self.best_val_loss,
            "best_val_accuracy": self.best_val_accuracy,
            "epochs": len(self.epochs),
            "flags": list(self.flags),
        }


class _MetricsLog:
    def __init__(self, path):
        self.file = open(path, "a", encoding="utf-8") if path else None

    def write(self, record):
        if self.file is not None:
            self.file.write(json.dumps(record))
            self.file.write("\n")
            self.file.flush()

    def close(self):
        if self.file is not None:
            self.file.close()


# -- shared training machinery ------------------------------------------


class _Engine:
    def __init__(self, params: StudentParams, cfg: TrainConfig,
                 metrics: RunMetrics, log: _MetricsLog):
        self.params = params
        self.cfg = cfg
        self.metrics = metrics
        self.log = log
        self.opt = AdadeltaState(rho=cfg.rho, eps=cfg.eps)
        self.dropout_rng = np.random.default_rng((cfg.seed, 1))
        self._encoded = {}

    def enc(self, inst: Instance):
        cached = self._encoded.get(inst.instance_id)
        if cached is None:
            cached = encode_text(inst.text, self.cfg.vocab,
                                 self.cfg.student.max_len)
            self._encoded[inst.instance_id] = cached
        return cached

    def enc_batch(self, instances):
        return [self.enc(inst) for inst in instances]

    def _step(self, batch: DualBatch, weights: LossWeights,
              use_ce: bool, use_rl: bool, use_ll: bool):
        """Forward both sub-batches, backpropagate the weighted sum once,
        apply one Adadelta step."""
        p = self.params
        ce = rl = ll = None
        if use_ce and weights.alpha > 0 and batch.labeled:
            z = S.encode(p, self.enc_batch(batch.labeled), training=True,
                         rng=self.dropout_rng)
            ce = L.cross_entropy(S.classify(p, z), batch.labels)
        if (use_rl or use_ll) and batch.unlabeled:
            z_u = S.encode(p, self.enc_batch(batch.unlabeled), training=True,
                           rng=self.dropout_rng)
            if use_rl and weights.beta > 0:
                targets = np.array([r.hidden for r in batch.records])
                rl = L.representation_loss(S.project(p, z_u), targets)
            if use_ll and weights.gamma > 0:
                targets = np.array([r.logits for r in batch.records])
                ll = L.logit_loss(S.regress_logits(p, z_u), targets)
        total = L.joint_loss(weights, ce=ce, rl=rl, ll=ll)
        p.zero_grads()
        total.backward()
        adadelta_step(p, self.opt)
        self.metrics.total_steps += 1
        info = {
            "ce": None if ce is None else float(ce.data),
            "rl": None if rl is None else float(rl.data),
            "ll": None if ll is None else float(ll.data),
            "joint": float(total.data),
        }
        if self.cfg.on_step is not None:
            self.cfg.on_step(p, info)
        return info

    def run_phase(self, stage: str, phase: str, frozen, batches, spe: int,
                  weights: LossWeights, use_ce: bool, use_rl: bool,
                  use_ll: bool, val_fn):
        """Train one phase to early stop and restore its best parameters."""
        cfg = self.cfg
        self.params.set_frozen(frozen)
        self.metrics.stage_history.append(phase)
        history = []
        best = float("inf")
        best_params = None
        best_acc = None
        for epoch in range(cfg.max_epochs):
            last = None
            for _ in range(spe):
                last = self._step(next(batches), weights, use_ce, use_rl, use_ll)
            val_loss, val_acc = val_fn()
            history.append(val_loss)
            record = {
                "step": self.metrics.total_steps,
                "stage": stage,
                "phase": phase,
                "epoch": epoch,
                **(last or {}),
                "val_loss": val_loss,
                "val_accuracy": val_acc,
                "wall_time": time.time(),
            }
            self.metrics.epochs.append(
                {k: v for k, v in record.items() if k != "wall_time"})
            self.log.write(record)
            if val_loss < best:
                best = val_loss
                best_acc = val_acc
                best_params = self.params.copy()
            if early_stop(history, cfg.patience):
                break
        if best_params is not None:
            for name, t in self.params.tensors.items():
                t.data = best_params[name].data.copy()
        # The run's reported best tracks the last phase, whose restored
        # parameters are the ones returned.
        self.metrics.best_val_loss = best
        self.metrics.best_val_accuracy = best_acc

    # -- validation helpers ---------------------------------------------

    def eval_ce(self, instances, labels):
        """CE loss and accuracy on a labeled set, in eval mode."""
        p = self.params
        total = 0.0
        preds = []
        n = len(instances)
        for start in range(0, n, self.cfg.batch_size):
            chunk = instances[start:start + self.cfg.batch_size]
            z = S.encode(p, self.enc_batch(chunk), training=False)
            probs = S.classify(p, z)
            ce = L.cross_entropy(probs, labels[start:start + len(chunk)])
            total += float(ce.data) * len(chunk)
            preds.extend(np.argmax(probs.data, axis=1).tolist())
        return total / n, accuracy(preds, labels.tolist())

    def eval_distil(self, instances, records, weights: LossWeights,
                    use_rl: bool, use_ll: bool):
        """Weighted RL/LL loss on an unlabeled set, in eval mode."""
        p = self.params
        total = 0.0
        n = len(instances)
        for start in range(0, n, self.cfg.batch_size):
            chunk = instances[start:start + self.cfg.batch_size]
            recs = records[start:start + len(chunk)]
            z = S.encode(p, self.enc_batch(chunk), training=False)
            loss = 0.0
            if use_rl and weights.beta > 0:
                rl = L.representation_loss(
                    S.project(p, z), np.array([r.hidden for r in recs]))
                loss += weights.beta * float(rl.data)
            if use_ll and weights.gamma > 0:
                ll = L.logit_loss(
                    S.regress_logits(p, z), np.array([r.logits for r in recs]))
                loss += weights.gamma * float(ll.data)
            total += loss * len(chunk)
        return total / n, None


# -- splits and record lookup --------------------------------------------


def stratified_val_split(labeled, frac: float, num_classes: int, seed: int):
    """Hold out ~frac of D_l per class for validation.  Falls back to
    validating on the training set when the pool is too small to split."""
    rng = np.random.default_rng((seed, 2))
    by_class = {c: [] for c in range(num_classes)}
    for inst in labeled:
        by_class[inst.label].append(inst)
    train, val = [], []
    for c in range(num_classes):
        group = list(by_class[c])
        order = rng.permutation(len(group))
        n_val = int(len(group) * frac)
        if n_val >= len(group):
            n_val = len(group) - 1
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    if not val:
        val = list(train)
    return train, val


def _unlabeled_val_split(unlabeled, frac: float, seed: int):
    rng = np.random.default_rng((seed, 3))
    order = rng.permutation(len(unlabeled))
    n_val = max(1, int(len(unlabeled) * frac))
    if n_val >= len(unlabeled):
        n_val = len(unlabeled) - 1 if len(unlabeled) > 1 else 0
    val = [unlabeled[i] for i in order[:n_val]]
    train = [unlabeled[i] for i in order[n_val:]]
    return train, val


def records_by_id(records):
    return {r.instance_id: r for r in records}


def hard_distilled_corpus(corpus: Corpus, records) -> Corpus:
    """Move D_u into D_l using the teacher's hard labels as gold (hard
    distillation); the original labeled set is kept."""
    by_id = records_by_id(records)
    relabeled = [
        Instance(inst.instance_id, inst.text,
                 _record_for(by_id, inst).hard_label)
        for inst in corpus.unlabeled
    ]
    return Corpus(
        labeled=list(corpus.labeled) + relabeled,
        unlabeled=list(corpus.unlabeled),
        num_classes=corpus.num_classes,
        provenance=dict(corpus.provenance, hard_distilled=True),
    )


# -- the three schedules -------------------------------------------------


def run_joint(corpus: Corpus, records, weights: LossWeights, cfg: TrainConfig,
              init: StudentParams | None = None):
    """Every step backpropagates alpha*CE on a labeled sub-batch plus
    beta*RL + gamma*LL on an unlabeled sub-batch; all groups stay unfrozen."""
    metrics = RunMetrics()
    log = _MetricsLog(cfg.metrics_path)
    try:
        params = init.copy() if init is not None else S.init_params(cfg.student, cfg.seed)
        engine = _Engine(params, cfg, metrics, log)
        train_l, val_l = stratified_val_split(
            corpus.labeled, cfg.val_fraction, corpus.num_classes, cfg.seed)
        val_labels = np.array([i.label for i in val_l])
        train_corpus = Corpus(train_l, corpus.unlabeled, corpus.num_classes)
        by_id = records_by_id(records) if records else None
        use_distil = weights.beta > 0 or weights.gamma > 0
        if use_distil and by_id is None:
            raise ContractError(
                "joint training with beta/gamma > 0 requires teacher records"
            )
        if use_distil:
            # Validate on the full weighted objective: CE alone bottoms out
            # long before the distillation terms converge and would stop the
            # run (and select a snapshot) far too early.
            du_train, du_val = _unlabeled_val_split(
                corpus.unlabeled, cfg.val_fraction, cfg.seed)
            du_val_records = [_record_for(by_id, i) for i in du_val]
            train_corpus = Corpus(train_l, du_train, corpus.num_classes)

            def val_fn():
                ce, acc = engine.eval_ce(val_l, val_labels)
                distil, _ = engine.eval_distil(
                    du_val, du_val_records, weights, use_rl=True, use_ll=True)
                return weights.alpha * ce + distil, acc
        else:
            metrics.flags.append("no-distillation")
            du_train = corpus.unlabeled

            def val_fn():
                return engine.eval_ce(val_l, val_labels)

        batches = dual_batch_stream(train_corpus, by_id, cfg.batch_size, cfg.seed)
        spe = steps_per_epoch(len(du_train), cfg.batch_size)
        engine.run_phase(
            stage="joint", phase="joint", frozen=(),
            batches=batches, spe=spe, weights=weights,
            use_ce=True, use_rl=use_distil, use_ll=use_distil,
            val_fn=val_fn,
        )
        return params, metrics
    finally:
        log.close()


def run_stagewise_rl_first(corpus: Corpus, records, weights: LossWeights,
                           cfg: TrainConfig, init: StudentParams | None = None):
    """Stage 1 trains the representation loss alone on D_u; stage 2 trains
    alpha*CE + gamma*LL with gradual unfreezing (heads, heads+bilstm, all)."""
    metrics = RunMetrics()
    log = _MetricsLog(cfg.metrics_path)
    try:
        params = init.copy() if init is not None else S.init_params(cfg.student, cfg.seed)
        engine = _Engine(params, cfg, metrics, log)
        by_id = records_by_id(records)
        du_train, du_val = _unlabeled_val_split(
            corpus.unlabeled, cfg.val_fraction, cfg.seed)
        du_val_records = [_record_for(by_id, i) for i in du_val]
        train_l, val_l = stratified_val_split(
            corpus.labeled, cfg.val_fraction, corpus.num_classes, cfg.seed)
        val_labels = np.array([i.label for i in val_l])
        train_corpus = Corpus(train_l, du_train, corpus.num_classes)
        spe = steps_per_epoch(len(du_train), cfg.batch_size)
        rl_weights = LossWeights(alpha=0.0, beta=1.0, gamma=0.0)

        engine.run_phase(
            stage="rl", phase="rl", frozen=(),
            batches=unlabeled_batch_stream(du_train, by_id, cfg.batch_size, cfg.seed),
            spe=spe, weights=rl_weights,
            use_ce=False, use_rl=True, use_ll=False,
            val_fn=lambda: engine.eval_distil(
                du_val, du_val_records, rl_weights, use_rl=True, use_ll=False),
        )
        for phase, frozen in UNFREEZE_PHASES:
            engine.run_phase(
                stage="ce+ll", phase=phase, frozen=frozen,
                batches=dual_batch_stream(
                    train_corpus, by_id, cfg.batch_size, cfg.seed),
                spe=spe, weights=weights,
                use_ce=True, use_rl=False, use_ll=True,
                val_fn=lambda: engine.eval_ce(val_l, val_labels),
            )
        return params, metrics
    finally:
        log.close()


def run_distil_then_finetune(corpus: Corpus, records, weights: LossWeights,
                             cfg: TrainConfig,
                             init: StudentParams | None = None):
    """Stage 1 jointly optimizes beta*RL + gamma*LL on D_u without reading any
    gold labels and yields a distilled checkpoint; stage 2 fine-tunes CE on
    D_l with gradual unfreezing.  Returns (params, metrics, distilled_params)
    so stage 2 can be re-run later on fresh labeled data via finetune_from."""
    metrics = RunMetrics()
    log = _MetricsLog(cfg.metrics_path)
    try:
        params = init.copy() if init is not None else S.init_params(cfg.student, cfg.seed)
        engine = _Engine(params, cfg, metrics, log)
        by_id = records_by_id(records)
        du_train, du_val = _unlabeled_val_split(
            corpus.unlabeled, cfg.val_fraction, cfg.seed)
        du_val_records = [_record_for(by_id, i) for i in du_val]
        spe = steps_per_epoch(len(du_train), cfg.batch_size)
        # Stage 1 is label-free: the batch stream is built over D_u alone.
        engine.run_phase(
            stage="rl+ll", phase="rl+ll", frozen=(),
            batches=unlabeled_batch_stream(
                du_train, by_id, cfg.batch_size, cfg.seed),
            spe=spe, weights=weights,
            use_ce=False, use_rl=True, use_ll=True,
            val_fn=lambda: engine.eval_distil(
                du_val, du_val_records, weights, use_rl=True, use_ll=True),
        )
        distilled = params.copy()
    finally:
        log.close()
    if corpus.labeled:
        params, ft_metrics = finetune_from(distilled, corpus, weights, cfg)
        metrics.stage_history.extend(ft_metrics.stage_history)
        metrics.epochs.extend(ft_metrics.epochs)
        metrics.total_steps += ft_metrics.total_steps
        metrics.best_val_loss = ft_metrics.best_val_loss
        metrics.best_val_accuracy = ft_metrics.best_val_accuracy
    return params, metrics, distilled


def finetune_from(distilled: StudentParams, corpus: Corpus,
                  weights: LossWeights, cfg: TrainConfig):
    """Fine-tune a distilled checkpoint on labeled data with gradual
    unfreezing; re-runnable on new labeled sets from the same checkpoint."""
    if not corpus.labeled:
        raise ContractError("finetune_from needs a non-empty labeled set")
    metrics = RunMetrics()
    log = _MetricsLog(cfg.metrics_path)
    try:
        params = distilled.copy()
        engine = _Engine(params, cfg, metrics, log)
        train_l, val_l = stratified_val_split(
            corpus.labeled, cfg.val_fraction, corpus.num_classes, cfg.seed)
        val_labels = np.array([i.label for i in val_l])
        spe = max(1, len(train_l) // cfg.batch_size)
        for phase, frozen in UNFREEZE_PHASES:
            engine.run_phase(
                stage="finetune", phase=phase, frozen=frozen,
                batches=labeled_batch_stream(train_l, cfg.batch_size, cfg.seed),
                spe=spe, weights=weights,
                use_ce=True, use_rl=False, use_ll=False,
                val_fn=lambda: engine.eval_ce(val_l, val_labels),
            )
        return params, metrics
    finally:
        log.close()
