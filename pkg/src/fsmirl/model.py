"""Two-layer sampled-neighbourhood mean encoder, trained with weighted CE + Adam."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .graph import Graph, SplitAssignment
from .hsic import WeightConfig, optimize_weights
from .sampler import AttentionProjection, ProfileTable, build_profiles, sample_table, uniform_profiles

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EVAL_EPOCH = 1_000_000  # sampling stream reserved for inference
BLOCKS = ("W1", "b1", "W2", "b2", "W3", "b3")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 20
    learning_rate: float = 0.01
    l2: float = 1e-3
    hidden: int = 128
    sample_size: int = 10
    weight_period: int = 100
    seed: int = 0
    use_ca_sampling: bool = True
    use_hsic_weights: bool = True
    hsic_steps: int = 20
    hsic_learning_rate: float = 0.1
    hsic_pairs: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.batch_size < 1 or self.hidden < 1 or self.weight_period < 1:
            raise ValueError("batch_size, hidden and weight_period must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    attention: AttentionProjection | None = None

    def blocks(self) -> dict:
        return {k: getattr(self, k) for k in BLOCKS}

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(getattr(self, k).copy() for k in BLOCKS), attention=self.attention)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(*(np.zeros_like(getattr(self, k)) for k in BLOCKS))

    @property
    def dims(self) -> tuple:
        return self.W1.shape[0] // 2, self.W1.shape[1], self.W3.shape[1]

    def sq_norm(self) -> float:
        return float(sum(np.sum(getattr(self, k) ** 2) for k in BLOCKS))


def init_params(d_in: int, h: int, C: int, seed: int) -> EncoderParams:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)); biases within 1/sqrt(fan_in)."""
    if min(d_in, h, C) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng([seed, 0xE7C])
    out = []
    for fan_in, fan_out in ((2 * d_in, h), (2 * h, h), (h, C)):
        bound = np.sqrt(6.0 / fan_in)
        out.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        out.append(rng.uniform(-1.0, 1.0, size=fan_out) / np.sqrt(fan_in))
    return EncoderParams(*out, attention=AttentionProjection.init(d_in, seed))


# -- forward / backward ------------------------------------------------------

def _mean_aggregator(samples: np.ndarray, cols: np.ndarray, n_cols: int) -> sp.csr_matrix:
    """Row r averages the sampled columns of row r; isolated rows stay zero."""
    m, s = samples.shape
    valid = samples >= 0
    rows = np.repeat(np.arange(m), s)[valid.ravel()]
    data = np.full(rows.size, 1.0 / s) if s else np.zeros(0)
    return sp.csr_matrix((data, (rows, cols.ravel()[valid.ravel()])), shape=(m, n_cols))


@dataclass
class _Cache:
    A1: sp.csr_matrix
    A2: sp.csr_matrix
    self1: np.ndarray
    self2: np.ndarray
    H1_in: np.ndarray
    Z1: np.ndarray
    H1: np.ndarray
    H2_in: np.ndarray
    Z2: np.ndarray
    H2: np.ndarray
    logits: np.ndarray = field(default=None)


def _forward(g: Graph, batch, params: EncoderParams, table: ProfileTable, s: int,
             seed: int, epoch: int) -> _Cache:
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("batch must be non-empty")
    d, h, _ = params.dims
    if g.num_features != d:
        raise ValueError(f"layer 1: graph has {g.num_features} features, params expect {d}")

    S2 = sample_table(g, table, batch, s, seed, epoch, layer=2)
    nodes1, inv = np.unique(np.concatenate([batch, S2[S2 >= 0]]), return_inverse=True)
    self2 = inv[:batch.size]
    cols2 = np.zeros(S2.shape, dtype=np.int64)
    cols2[S2 >= 0] = inv[batch.size:]
    A2 = _mean_aggregator(S2, cols2, nodes1.size)

    S1 = sample_table(g, table, nodes1, s, seed, epoch, layer=1)
    nodes0, inv0 = np.unique(np.concatenate([nodes1, S1[S1 >= 0]]), return_inverse=True)
    self1 = inv0[:nodes1.size]
    cols1 = np.zeros(S1.shape, dtype=np.int64)
    cols1[S1 >= 0] = inv0[nodes1.size:]
    A1 = _mean_aggregator(S1, cols1, nodes0.size)

    X0 = g.features[nodes0]
    H1_in = np.concatenate([X0[self1], A1 @ X0], axis=1)
    Z1 = H1_in @ params.W1 + params.b1
    H1 = np.maximum(Z1, 0.0)
    if H1.shape[1] != h:
        raise ValueError("layer 1 output width does not match layer 2 input")
    H2_in = np.concatenate([H1[self2], A2 @ H1], axis=1)
    Z2 = H2_in @ params.W2 + params.b2
    H2 = np.maximum(Z2, 0.0)
    c = _Cache(A1, A2, self1, self2, H1_in, Z1, H1, H2_in, Z2, H2)
    c.logits = H2 @ params.W3 + params.b3
    return c


def forward(g: Graph, batch, params: EncoderParams, table: ProfileTable, s: int = 10,
            seed: int = 0, epoch: int = 0):
    """Returns (logits, embeddings) for ``batch``; embeddings are layer-2 outputs."""
    c = _forward(g, batch, params, table, s, seed, epoch)
    return c.logits, c.H2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grads(g: Graph, batch, labels, params: EncoderParams, w2, config: TrainConfig,
                   table: ProfileTable, epoch: int = 0):
    """(1/B) sum w2_k CE_k + l2 ||params||^2 and its exact gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    w2 = np.asarray(w2, dtype=np.float64)
    c = _forward(g, batch, params, table, config.sample_size, config.seed, epoch)
    B = labels.size
    logp = _log_softmax(c.logits)
    ce = -logp[np.arange(B), labels]
    loss = float(w2 @ ce / B + config.l2 * params.sq_norm())
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss on batch {list(np.asarray(batch)[:8])}...")

    h = params.W2.shape[1]
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits *= (w2 / B)[:, None]
    gr = EncoderParams(
        W3=c.H2.T @ dlogits, b3=dlogits.sum(axis=0),
        W2=None, b2=None, W1=None, b1=None)
    dZ2 = (dlogits @ params.W3.T) * (c.Z2 > 0)
    gr.W2 = c.H2_in.T @ dZ2
    gr.b2 = dZ2.sum(axis=0)
    dH2_in = dZ2 @ params.W2.T
    dH1 = c.A2.T @ dH2_in[:, h:]
    np.add.at(dH1, c.self2, dH2_in[:, :h])
    dZ1 = dH1 * (c.Z1 > 0)
    gr.W1 = c.H1_in.T @ dZ1
    gr.b1 = dZ1.sum(axis=0)
    if config.l2:
        for k in BLOCKS:
            setattr(gr, k, getattr(gr, k) + 2.0 * config.l2 * getattr(params, k))
    return loss, gr


class Adam:
    def __init__(self, params: EncoderParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: EncoderParams, grads: EncoderParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in BLOCKS:
            g = getattr(grads, k)
            m = getattr(self.m, k)
            v = getattr(self.v, k)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = getattr(params, k)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- metrics -----------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    precision: dict
    recall: dict

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(y_true, y_pred) -> Metrics:
    """Macro-F1 averages over classes seen in either labels or predictions;
    a class with no true positives scores F1 = 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot compute metrics on an empty node set")
    classes = np.union1d(y_true, y_pred)
    precision, recall, f1 = {}, {}, []
    for c in classes:
        tp = np.count_nonzero((y_pred == c) & (y_true == c))
        fp = np.count_nonzero((y_pred == c) & (y_true != c))
        fn = np.count_nonzero((y_pred != c) & (y_true == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision[int(c)], recall[int(c)] = p, r
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return Metrics(float(np.mean(y_true == y_pred)), float(np.mean(f1)), precision, recall)


def inference_table(g: Graph, params: EncoderParams, use_ca: bool) -> ProfileTable:
    """Label-free profiles: attention branch only, or uniform."""
    if use_ca:
        return build_profiles(g, np.full(g.num_nodes, -1, dtype=np.int64), params.attention)
    return uniform_profiles(g)


def predict(params: EncoderParams, g: Graph, nodes, config: TrainConfig,
            table: ProfileTable | None = None) -> np.ndarray:
    if table is None:
        table = inference_table(g, params, config.use_ca_sampling)
    logits, _ = forward(g, nodes, params, table, config.sample_size, config.seed, EVAL_EPOCH)
    return logits.argmax(axis=1)


def evaluate(params: EncoderParams, g: Graph, nodes, labels, config: TrainConfig | None = None,
             table: ProfileTable | None = None) -> Metrics:
    """Predictions never touch ``g.labels``; ``labels`` is read only after the forward pass."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("evaluate needs a non-empty node set")
    config = config or TrainConfig()
    pred = predict(params, g, nodes, config, table)
    return compute_metrics(np.asarray(labels), pred)


# -- training ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_macro_f1: float


def train(g: Graph, splits: SplitAssignment, config: TrainConfig):
    """Returns (validation-best params, per-epoch history)."""
    train_nodes = splits.train
    if train_nodes.size == 0:
        raise ValueError("training split is empty")
    params = init_params(g.num_features, config.hidden, g.num_classes, config.seed)
    history: list[EpochRecord] = []
    if config.epochs == 0:
        return params, history

    known = splits.known_labels(g.labels)
    if config.use_ca_sampling:
        table = build_profiles(g, known, params.attention)
    else:
        table = uniform_profiles(g)
    infer = inference_table(g, params, config.use_ca_sampling)
    val_nodes = splits.validation
    val_labels = g.labels[val_nodes]
    y_train = g.labels[train_nodes]

    opt = Adam(params, config.learning_rate)
    order_rng = np.random.default_rng([config.seed, 0x5EED])
    w2 = np.ones(train_nodes.size)
    slot = {int(v): k for k, v in enumerate(train_nodes)}
    best = (-np.inf, params.copy())
    for epoch in range(config.epochs):
        if config.use_hsic_weights and epoch % config.weight_period == 0:
            w2 = _hsic_weights(g, train_nodes, params, table, config, epoch)
        perm = train_nodes[order_rng.permutation(train_nodes.size)]
        total, count = 0.0, 0
        for start in range(0, perm.size, config.batch_size):
            batch = perm[start:start + config.batch_size]
            idx = np.fromiter((slot[int(v)] for v in batch), dtype=np.int64, count=batch.size)
            try:
                loss, grads = loss_and_grads(g, batch, y_train[idx], params, w2[idx],
                                             config, table, epoch)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(str(err), history) from None
            opt.step(params, grads)
            total += loss * batch.size
            count += batch.size
        if val_nodes.size:
            m = evaluate(params, g, val_nodes, val_labels, config, infer)
            rec = EpochRecord(epoch, total / count, m.accuracy, m.macro_f1)
            score = m.accuracy
        else:
            rec = EpochRecord(epoch, total / count, float("nan"), float("nan"))
            score = float(epoch)
        history.append(rec)
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch, rec.train_loss, rec.val_acc)
        if score > best[0]:
            best = (score, params.copy())
    return best[1], history


def _hsic_weights(g, train_nodes, params, table, config, epoch) -> np.ndarray:
    _, emb = forward(g, train_nodes, params, table, config.sample_size, config.seed, epoch)
    wc = WeightConfig(steps=config.hsic_steps, learning_rate=config.hsic_learning_rate,
                      pairs_per_step=config.hsic_pairs, heldout_pairs=config.hsic_pairs,
                      seed=config.seed + epoch, gradient="analytic")
    return optimize_weights(emb, wc).weights


# -- persistence -------------------------------------------------------------

def save_checkpoint(path, params: EncoderParams, config: TrainConfig) -> None:
    d, h, C = params.dims
    body = {
        "version": CHECKPOINT_VERSION,
        "dims": {"d_in": d, "hidden": h, "classes": C},
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "params": {k: getattr(params, k).tolist() for k in BLOCKS},
        "attention": params.attention.vector.tolist() if params.attention is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        body = json.load(fh)
    if body.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {body.get('version')!r}")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in body["params"].items()}
    att = body.get("attention")
    params = EncoderParams(**arrays,
                           attention=AttentionProjection(np.asarray(att)) if att is not None else None)
    return params, TrainConfig.from_dict(body["config"])


def write_history(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_acc", "val_macro_f1"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_acc:.4f}", f"{r.val_macro_f1:.4f}"])
