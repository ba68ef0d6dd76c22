"""The student network: embeddings, BiLSTM with temporal max pooling, and
three heads (softmax classifier, logit regressor, GELU projector)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError

GROUP_EMBEDDINGS = "embeddings"
GROUP_BILSTM = "bilstm"
GROUP_HEADS = "heads"
GROUPS = (GROUP_EMBEDDINGS, GROUP_BILSTM, GROUP_HEADS)

_GATES = ("input", "forget", "output", "cell")
_CHECKPOINT_MAGIC = b"DKCKPT1\n"


@dataclass(frozen=True)
class StudentConfig:
    vocab_size: int
    num_classes: int
    embed_dim: int = 300
    lstm_hidden: int = 600  # per direction
    teacher_hidden: int = 768
    max_len: int = 128
    dropout_rate: float = 0.4
    recurrent_dropout_rate: float = 0.2

    def __post_init__(self):
        for name in ("vocab_size", "num_classes", "embed_dim", "lstm_hidden",
                     "teacher_hidden", "max_len"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("dropout_rate", "recurrent_dropout_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractError(f"{name} must be in [0, 1)")

    @property
    def pooled_dim(self) -> int:
        return 2 * self.lstm_hidden


@dataclass
class StudentParams:
    """All trainable tensors plus their freeze-group assignment."""

    config: StudentConfig
    tensors: dict  # name -> Tensor, insertion-ordered
    groups: dict  # name -> group
    frozen: set = field(default_factory=set)  # frozen group names

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def group_of(self, name) -> str:
        return self.groups[name]

    def in_group(self, group):
        return [n for n, g in self.groups.items() if g == group]

    def set_frozen(self, frozen_groups) -> None:
        unknown = set(frozen_groups) - set(GROUPS)
        if unknown:
            raise ContractError(f"unknown freeze groups {sorted(unknown)}")
        self.frozen = set(frozen_groups)
        for name, tensor in self.tensors.items():
            tensor.requires_grad = self.groups[name] not in self.frozen

    def trainable(self):
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "StudentParams":
        clone = StudentParams(
            config=self.config,
            tensors={n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                     for n, t in self.tensors.items()},
            groups=dict(self.groups),
            frozen=set(self.frozen),
        )
        return clone


def init_params(config: StudentConfig, seed: int) -> StudentParams:
    """All weights U(-0.1, 0.1); forget-gate biases start at 1.0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    groups = {}

    def param(name, shape, group, init=None):
        data = rng.uniform(-0.1, 0.1, shape) if init is None else init
        tensors[name] = Tensor(data, requires_grad=True)
        groups[name] = group

    cfg = config
    param("embedding", (cfg.vocab_size, cfg.embed_dim), GROUP_EMBEDDINGS)
    for direction in ("fwd", "bwd"):
        for gate in _GATES:
            param(f"lstm_{direction}_{gate}_w", (cfg.embed_dim, cfg.lstm_hidden),
                  GROUP_BILSTM)
            param(f"lstm_{direction}_{gate}_u", (cfg.lstm_hidden, cfg.lstm_hidden),
                  GROUP_BILSTM)
            bias_init = np.ones(cfg.lstm_hidden) if gate == "forget" else None
            param(f"lstm_{direction}_{gate}_b", (cfg.lstm_hidden,), GROUP_BILSTM,
                  init=bias_init)
    param("classifier_w", (cfg.pooled_dim, cfg.num_classes), GROUP_HEADS)
    param("regressor_w", (cfg.num_classes, cfg.pooled_dim), GROUP_HEADS)
    param("regressor_b", (cfg.num_classes,), GROUP_HEADS)
    param("projector_w", (cfg.teacher_hidden, cfg.pooled_dim), GROUP_HEADS)
    param("projector_b", (cfg.teacher_hidden,), GROUP_HEADS)
    return StudentParams(config=config, tensors=tensors, groups=groups)


def load_pretrained_embeddings(params: StudentParams, table) -> None:
    """Optional hook: overwrite the embedding table with pretrained vectors."""
    table = np.asarray(table, dtype=float)
    if table.shape != params["embedding"].data.shape:
        raise ContractError(
            f"pretrained table shape {table.shape} != "
            f"{params['embedding'].data.shape}"
        )
    params.tensors["embedding"] = Tensor(
        table, requires_grad=params["embedding"].requires_grad
    )


def _lstm_direction(params, direction, x_steps, valid, rec_mask):
    """Run one LSTM direction over precomputed per-step inputs.

    x_steps are [B x K] tensors in processing order; valid is the matching
    [B x T] mask (already reversed for the backward direction).  Hidden and
    cell states freeze on padded steps so padding never leaks.
    """
    p = params
    cfg = params.config
    batch = x_steps[0].data.shape[0]
    h = Tensor(np.zeros((batch, cfg.lstm_hidden)))
    c = Tensor(np.zeros((batch, cfg.lstm_hidden)))
    outputs = []
    w = {g: p[f"lstm_{direction}_{g}_w"] for g in _GATES}
    u = {g: p[f"lstm_{direction}_{g}_u"] for g in _GATES}
    b = {g: p[f"lstm_{direction}_{g}_b"] for g in _GATES}
    for t, x in enumerate(x_steps):
        h_in = ad.mul(h, rec_mask) if rec_mask is not None else h

        def gate(g, act):
            return act(ad.add(ad.add(ad.matmul(x, w[g]), ad.matmul(h_in, u[g])),
                              b[g]))

        i = gate("input", ad.sigmoid)
        f = gate("forget", ad.sigmoid)
        o = gate("output", ad.sigmoid)
        g_ = gate("cell", ad.tanh)
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g_))
        h_new = ad.mul(o, ad.tanh(c_new))
        step_valid = valid[:, t]
        c = ad.where_rows(step_valid, c_new, c)
        h = ad.where_rows(step_valid, h_new, h)
        outputs.append(h)
    return outputs


def encode(params: StudentParams, batch, training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """BiLSTM-encode a batch of Encoded sequences into pooled [B x 2L].

    Forward and backward hidden states are concatenated per timestep and
    max-pooled channel-wise over the valid (non-pad) positions only.
    """
    if not batch:
        raise ContractError("encode requires a non-empty batch")
    cfg = params.config
    max_len = batch[0].max_len
    if any(e.max_len != max_len for e in batch):
        raise ContractError("all sequences in a batch must share max_len")
    if training and rng is None:
        raise ContractError("training mode requires an rng")

    ids = np.array([e.ids for e in batch], dtype=np.intp)  # B x T
    lengths = np.array([e.length for e in batch])
    valid = np.arange(max_len)[None, :] < lengths[:, None]  # B x T
    horizon = int(lengths.max())
    b = len(batch)

    x_steps = []
    for t in range(horizon):
        x = ad.take_rows(params["embedding"], ids[:, t])
        if training:
            x = ad.dropout(x, cfg.dropout_rate, training, rng)
        x_steps.append(x)

    def rec_mask():
        if not training or cfg.recurrent_dropout_rate == 0.0:
            return None
        rate = cfg.recurrent_dropout_rate
        mask = (rng.random((b, cfg.lstm_hidden)) >= rate) / (1.0 - rate)
        return Tensor(mask)

    fwd = _lstm_direction(params, "fwd", x_steps, valid[:, :horizon], rec_mask())
    bwd = _lstm_direction(params, "bwd", x_steps[::-1],
                          valid[:, :horizon][:, ::-1], rec_mask())
    bwd = bwd[::-1]

    joined = [ad.concat_cols([f, r]) for f, r in zip(fwd, bwd)]
    pooled = ad.masked_max_over_time(joined, valid[:, :horizon])
    if training:
        pooled = ad.dropout(pooled, cfg.dropout_rate, training, rng)
    return pooled


def classify(params: StudentParams, z_s: Tensor) -> Tensor:
    """softmax(z . W_s): [B x C] probability rows."""
    return ad.softmax(ad.matmul(z_s, params["classifier_w"]))


def regress_logits(params: StudentParams, z_s: Tensor) -> Tensor:
    """Affine scores W_r . z + b_r: unconstrained [B x C]."""
    return ad.add(ad.matmul(z_s, ad.transpose(params["regressor_w"])),
                  params["regressor_b"])


def project(params: StudentParams, z_s: Tensor) -> Tensor:
    """gelu(W_f . z + b_f): [B x H_t] aligned with the teacher hidden width."""
    return ad.gelu(ad.add(ad.matmul(z_s, ad.transpose(params["projector_w"])),
                          params["projector_b"]))


def predict_proba(params: StudentParams, encoded_batch, batch_size: int = 64):
    """Class probabilities for a list of Encoded, batched, in eval mode."""
    chunks = []
    for start in range(0, len(encoded_batch), batch_size):
        z = encode(params, encoded_batch[start:start + batch_size], training=False)
        chunks.append(classify(params, z).data)
    return np.concatenate(chunks, axis=0)


def predict_labels(params: StudentParams, encoded_batch, batch_size: int = 64):
    return np.argmax(predict_proba(params, encoded_batch, batch_size), axis=1)


# -- checkpoint file -----------------------------------------------------
# Layout: magic line, one JSON header line (config + tensor manifest), then
# the raw little-endian float64 payload of every tensor in manifest order.
# Byte-deterministic, so identical params always produce identical files.


def save_checkpoint(params: StudentParams, path) -> None:
    header = {
        "version": 1,
        "config": asdict(params.config),
        "frozen": sorted(params.frozen),
        "tensors": [
            {"name": n, "group": params.groups[n], "shape": list(t.data.shape)}
            for n, t in params.tensors.items()
        ],
    }
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for t in params.tensors.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> StudentParams:
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a distilkit checkpoint")
        header = json.loads(f.readline().decode("utf-8"))
        config = StudentConfig(**header["config"])
        tensors = {}
        groups = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"{path}: truncated tensor {entry['name']}")
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            tensors[entry["name"]] = Tensor(data, requires_grad=True)
            groups[entry["name"]] = entry["group"]
    params = StudentParams(config=config, tensors=tensors, groups=groups)
    params.set_frozen(header.get("frozen", []))
    return params
