"""
Neural n-gram models: feed-forward, vanilla RNN and LSTM context encoders
trained on fixed-length windows, plus the minibatch training loop.

Every prediction is a pure function of the parameters and the n-1 context ids;
no state survives between windows.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models

from .corpus import BoundaryMode, CorpusStream, Vocabulary
from .exceptions import ConfigValidationError, EmptyCorpusError, ShapeError, TargetError
from .ngram_stats import TargetRecord, TargetRegime
from .nn_core import (
    DropoutMode,
    DropoutSpec,
    OptimizerConfig,
    ParameterStore,
    affine_backward,
    affine_forward,
    build_optimizer,
    clip_store_gradients,
    dropout_backward,
    dropout_forward,
    float_dtype,
    init_lstm_stack,
    load_checkpoint,
    log_softmax,
    lstm_stack_backward,
    lstm_stack_forward,
    rnn_step_backward,
    rnn_step_forward,
    save_checkpoint,
    softmax_xent,
    sparse_softmax_xent,
    tanh_backward,
    tanh_forward,
    truncated_normal,
    zero_states,
)

logger = logging.getLogger(__name__)


class ModelFamily(models.TextChoices):
    FEED_FORWARD = "ff", "Feed-forward"
    VANILLA_RNN = "rnn", "Vanilla RNN"
    LSTM = "lstm", "LSTM"


class EncodingVariant(models.TextChoices):
    FORWARD = "forward", "Forward"
    REVERSE = "reverse", "Reverse"
    STACKED_FORWARD = "stacked_forward", "Stacked forward"
    STACKED_REVERSE = "stacked_reverse", "Stacked reverse"
    BIDIRECTIONAL = "bidirectional", "Bidirectional"
    INCREMENTAL_DECAY = "incremental_decay", "Incremental loss with decay"


REVERSED_VARIANTS = {EncodingVariant.REVERSE, EncodingVariant.STACKED_REVERSE}
STACKED_VARIANTS = {EncodingVariant.STACKED_FORWARD, EncodingVariant.STACKED_REVERSE}


@dataclass(frozen=True)
class NGramModelConfig:
    family: str = ModelFamily.LSTM
    order: int = 5
    dim_embed: int = 128
    dim_state: int = 128
    layers: int = 1
    dim_proj: Optional[int] = None
    keep_prob: float = 1.0
    variant: str = EncodingVariant.FORWARD
    decay: float = 0.0
    regime: str = TargetRegime.ONE_HOT
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init_stddev: float = 0.1
    epochs: int = 1
    batch_size: int = 64
    eval_batch_size: int = 512
    boundary_mode: str = BoundaryMode.SENTENCE_INDEPENDENT
    seed: int = 1234
    float_width: int = 64

    def __post_init__(self):
        errors: Dict[str, List[str]] = {}
        if self.family not in ModelFamily.values:
            errors["family"] = [f"unknown family '{self.family}'"]
        if self.variant not in EncodingVariant.values:
            errors["variant"] = [f"unknown variant '{self.variant}'"]
        if self.regime not in TargetRegime.values:
            errors["regime"] = [f"unknown regime '{self.regime}'"]
        if self.order < 2:
            errors["order"] = ["neural n-gram models need order >= 2"]
        for name in ("dim_embed", "dim_state", "layers", "epochs", "batch_size", "eval_batch_size"):
            if getattr(self, name) < 1:
                errors[name] = ["must be positive"]
        if self.dim_proj is not None and self.dim_proj < 1:
            errors["dim_proj"] = ["must be positive"]
        if not 0.0 < self.keep_prob <= 1.0:
            errors["keep_prob"] = ["must be in (0, 1]"]
        if not (math.isfinite(self.decay) and self.decay >= 0):
            errors["decay"] = ["must be finite and non-negative"]
        if self.init_stddev <= 0:
            errors["init_stddev"] = ["must be positive"]
        if self.float_width not in (32, 64):
            errors["float_width"] = ["must be 32 or 64"]
        if not errors:
            if self.family != ModelFamily.LSTM and self.variant != EncodingVariant.FORWARD:
                errors["variant"] = [f"{self.family} supports the forward variant only"]
            if self.family != ModelFamily.LSTM and self.dim_proj is not None:
                errors["dim_proj"] = ["projection is only available for lstm"]
            if self.family == ModelFamily.VANILLA_RNN and self.layers != 1:
                errors["layers"] = ["vanilla rnn has a single layer"]
            if self.variant == EncodingVariant.INCREMENTAL_DECAY and self.regime != TargetRegime.ONE_HOT:
                errors["regime"] = ["incremental_decay is restricted to one-hot targets"]
        if errors:
            raise ConfigValidationError("Invalid neural n-gram configuration", errors)

    @property
    def context_length(self) -> int:
        return self.order - 1

    @property
    def dim_top(self) -> int:
        """Width of one encoder output (projection width when present)."""
        if self.family == ModelFamily.FEED_FORWARD:
            return self.dim_state
        return self.dim_proj or self.dim_state

    @property
    def output_width(self) -> int:
        if self.variant in STACKED_VARIANTS:
            return self.context_length * self.dim_top
        if self.variant == EncodingVariant.BIDIRECTIONAL:
            return 2 * self.dim_top
        return self.dim_top

    @property
    def descriptor(self) -> str:
        return (
            f"{ModelFamily(self.family).label} {self.order}-gram "
            f"({EncodingVariant(self.variant).value}, {TargetRegime(self.regime).value}, "
            f"d={self.dim_embed}, s={self.dim_state}, layers={self.layers})"
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "NGramModelConfig":
        data = dict(data)
        data["optimizer"] = OptimizerConfig(**data.get("optimizer", {}))
        return cls(**data)


@dataclass
class TargetBatch:
    """Minibatch of contexts with sparse (id) or dense (pmf) targets."""

    contexts: np.ndarray
    weights: np.ndarray
    target_ids: Optional[np.ndarray] = None
    target_dense: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.contexts)

    @classmethod
    def from_records(
        cls, records: Sequence[TargetRecord], vocab_size: int
    ) -> "TargetBatch":
        contexts = np.array([record.context for record in records], dtype=np.int64)
        weights = np.array([record.weight for record in records], dtype=np.float64)
        if all(record.regime == TargetRegime.ONE_HOT for record in records):
            return cls(contexts, weights, target_ids=np.array([record.payload[0][0] for record in records]))
        dense = np.zeros((len(records), vocab_size), dtype=np.float64)
        for row, record in enumerate(records):
            for word, prob in record.payload:
                dense[row, word] = prob
        return cls(contexts, weights, target_dense=dense)

    @classmethod
    def from_windows(cls, contexts: np.ndarray, targets: np.ndarray) -> "TargetBatch":
        return cls(np.asarray(contexts, dtype=np.int64), np.ones(len(targets)), np.asarray(targets))


class NGramNetwork:
    """
    A neural n-gram model over a ParameterStore.

    Parameter names: E (d x V), H/H_bias for the feed-forward hidden layer,
    R/R_bias for the vanilla RNN cell, W{l}/b{l} (and bw_W{l}/bw_b{l} for the
    backward direction) for LSTM layers, P for the optional projection and
    O/O_bias for the output layer.
    """

    def __init__(self, config: NGramModelConfig, vocab_size: int, store: Optional[ParameterStore] = None):
        self.config = config
        self.vocab_size = vocab_size
        if store is None:
            store = self._initialize(np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0]))
        self.store = store
        self._check_store()

    @property
    def order(self) -> int:
        return self.config.order

    @property
    def descriptor(self) -> str:
        return self.config.descriptor

    @property
    def directions(self) -> List[str]:
        if self.config.variant == EncodingVariant.BIDIRECTIONAL:
            return ["", "bw_"]
        return [""]

    def _initialize(self, rng: np.random.Generator) -> ParameterStore:
        config = self.config
        sigma = config.init_stddev
        d, s, V = config.dim_embed, config.dim_state, self.vocab_size
        store = ParameterStore(float_dtype(config.float_width))
        store.add("E", truncated_normal(rng, (d, V), sigma), sparse=True)
        if config.family == ModelFamily.FEED_FORWARD:
            store.add("H", truncated_normal(rng, (s, config.context_length * d), sigma))
            store.add("H_bias", np.zeros(s))
        elif config.family == ModelFamily.VANILLA_RNN:
            store.add("R", truncated_normal(rng, (2 * s, s + d), sigma))
            store.add("R_bias", np.zeros(2 * s))
        else:
            for prefix in self.directions:
                init_lstm_stack(store, prefix, config.layers, d, s, sigma, rng)
                if config.dim_proj:
                    store.add(f"{prefix}P", truncated_normal(rng, (config.dim_proj, s), sigma))
        store.add("O", truncated_normal(rng, (V, config.output_width), sigma))
        store.add("O_bias", np.zeros(V))
        return store

    def _check_store(self) -> None:
        O = self.store["O"]
        if O.shape != (self.vocab_size, self.config.output_width):
            raise ShapeError(
                f"Output layer {O.shape} does not match V={self.vocab_size}, "
                f"width={self.config.output_width}"
            )

    # Encoding

    def _embed(self, ids: np.ndarray, dropout: DropoutSpec) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        return dropout_forward(self.store["E"][:, ids].T, dropout)

    def _encode_sequence(self, prefix: str, sequence: List[np.ndarray], dropout: DropoutSpec):
        """Run one recurrent direction over id columns; returns per-step outputs and cache."""
        config = self.config
        embedded = [self._embed(ids, dropout) for ids in sequence]
        inputs = [x for x, _ in embedded]
        batch = len(sequence[0])
        dtype = self.store.dtype

        if config.family == ModelFamily.VANILLA_RNN:
            state = np.zeros((batch, config.dim_state), dtype=dtype)
            outputs, recurrent = [], []
            for x in inputs:
                state, output, step_cache = rnn_step_forward(self.store["R"], self.store["R_bias"], state, x)
                outputs.append(output)
                recurrent.append(step_cache)
            hidden = outputs
        else:
            states = zero_states(config.layers, batch, config.dim_state, dtype)
            hidden, _, recurrent = lstm_stack_forward(
                self.store, prefix, config.layers, inputs, states, dropout
            )
            outputs = hidden
            if config.dim_proj:
                P = self.store[f"{prefix}P"]
                outputs = [h @ P.T for h in hidden]
        return outputs, (prefix, sequence, [mask for _, mask in embedded], recurrent, hidden)

    def _backprop_sequence(self, cache, d_outputs: List[Optional[np.ndarray]]) -> None:
        prefix, sequence, masks, recurrent, hidden = cache
        config = self.config
        batch = len(sequence[0])
        dtype = self.store.dtype

        if config.dim_proj:
            P = self.store[f"{prefix}P"]
            projected = []
            for h, d_out in zip(hidden, d_outputs):
                if d_out is None:
                    projected.append(None)
                    continue
                self.store.accumulate(f"{prefix}P", d_out.T @ h)
                projected.append(d_out @ P)
            d_outputs = projected

        if config.family == ModelFamily.VANILLA_RNN:
            R = self.store["R"]
            d_state = np.zeros((batch, config.dim_state), dtype=dtype)
            d_inputs: List[np.ndarray] = [None] * len(sequence)
            for t in range(len(sequence) - 1, -1, -1):
                d_out = d_outputs[t] if d_outputs[t] is not None else np.zeros_like(d_state)
                dR, db, d_state, dx = rnn_step_backward(R, recurrent[t], d_state, d_out)
                self.store.accumulate("R", dR)
                self.store.accumulate("R_bias", db)
                d_inputs[t] = dx
        else:
            d_inputs, _ = lstm_stack_backward(self.store, prefix, config.layers, recurrent, d_outputs)

        for ids, mask, dx in zip(sequence, masks, d_inputs):
            self.store.accumulate_columns("E", ids, dropout_backward(mask, dx))

    def _encode(self, contexts: np.ndarray, dropout: DropoutSpec):
        """
        Context features scored by the output layer, with their loss weights.

        The incremental-decay variant scores every step output; all other
        variants produce a single feature with weight 1.
        """
        config = self.config
        contexts = np.asarray(contexts, dtype=np.int64)
        if contexts.ndim != 2 or contexts.shape[1] != config.context_length:
            raise ShapeError(f"Expected contexts of length {config.context_length}, got shape {contexts.shape}")
        columns = [contexts[:, j] for j in range(config.context_length)]

        if config.family == ModelFamily.FEED_FORWARD:
            embedded = self.store["E"][:, contexts.reshape(-1)].T.reshape(len(contexts), -1)
            x, mask = dropout_forward(embedded, dropout)
            y = tanh_forward(affine_forward(self.store["H"], self.store["H_bias"], x))
            return [y], [1.0], ("ff", contexts, x, mask, y)

        variant = EncodingVariant(config.variant)
        if variant == EncodingVariant.BIDIRECTIONAL:
            forward_out, forward_cache = self._encode_sequence("", columns, dropout)
            backward_out, backward_cache = self._encode_sequence("bw_", columns[::-1], dropout)
            feature = np.concatenate([forward_out[-1], backward_out[-1]], axis=1)
            return [feature], [1.0], ("bidirectional", forward_cache, backward_cache)

        sequence = columns[::-1] if variant in REVERSED_VARIANTS else columns
        outputs, cache = self._encode_sequence("", sequence, dropout)
        if variant in STACKED_VARIANTS:
            return [np.concatenate(outputs, axis=1)], [1.0], ("stacked", cache)
        if variant == EncodingVariant.INCREMENTAL_DECAY:
            n = config.order
            weights = [math.exp(-config.decay * (n - 1 - l)) for l in range(1, n)]
            return outputs, weights, ("incremental", cache)
        return [outputs[-1]], [1.0], ("last", cache)

    def _backprop_encoding(self, cache, d_features: List[Optional[np.ndarray]]) -> None:
        kind = cache[0]
        top = self.config.dim_top
        if kind == "ff":
            _, contexts, x, mask, y = cache
            dz = tanh_backward(y, d_features[0])
            dH, db, dx = affine_backward(self.store["H"], x, dz)
            self.store.accumulate("H", dH)
            self.store.accumulate("H_bias", db)
            dx = dropout_backward(mask, dx).reshape(len(contexts) * self.config.context_length, -1)
            self.store.accumulate_columns("E", contexts.reshape(-1), dx)
        elif kind == "bidirectional":
            _, forward_cache, backward_cache = cache
            steps = self.config.context_length
            d_feature = d_features[0]
            self._backprop_sequence(forward_cache, [None] * (steps - 1) + [d_feature[:, :top]])
            self._backprop_sequence(backward_cache, [None] * (steps - 1) + [d_feature[:, top:]])
        elif kind == "stacked":
            d_feature = d_features[0]
            steps = self.config.context_length
            self._backprop_sequence(cache[1], [d_feature[:, t * top : (t + 1) * top] for t in range(steps)])
        elif kind == "incremental":
            self._backprop_sequence(cache[1], d_features)
        else:
            steps = self.config.context_length
            self._backprop_sequence(cache[1], [None] * (steps - 1) + [d_features[0]])

    # Losses

    def loss(self, batch: TargetBatch, dropout: Optional[DropoutSpec] = None, backward: bool = False) -> float:
        """
        Mean weighted cross-entropy over the batch: sum(weight * xent) / B.

        With backward=True the gradient of that value is accumulated in the store.
        """
        dropout = dropout or DropoutSpec(self.config.keep_prob, DropoutMode.EVAL)
        if batch.target_dense is not None and self.config.variant == EncodingVariant.INCREMENTAL_DECAY:
            raise TargetError("incremental_decay training accepts one-hot targets only")

        features, step_weights, cache = self._encode(batch.contexts, dropout)
        scale = 1.0 / len(batch)
        total = 0.0
        d_features: List[Optional[np.ndarray]] = []
        for feature, step_weight in zip(features, step_weights):
            if step_weight == 0.0:
                d_features.append(None)
                continue
            dropped, mask = dropout_forward(feature, dropout)
            logits = affine_forward(self.store["O"], self.store["O_bias"], dropped)
            if batch.target_ids is not None:
                step_loss, d_logits = sparse_softmax_xent(logits, batch.target_ids, batch.weights)
            else:
                step_loss, d_logits = softmax_xent(logits, batch.target_dense, batch.weights)
            total += step_weight * step_loss
            if backward:
                d_logits = d_logits * (step_weight * scale)
                dO, db, d_dropped = affine_backward(self.store["O"], dropped, d_logits)
                self.store.accumulate("O", dO)
                self.store.accumulate("O_bias", db)
                d_features.append(dropout_backward(mask, d_dropped))

        if backward:
            self._backprop_encoding(cache, d_features)
        return total * scale

    def incremental_loss(self, contexts: np.ndarray, targets: np.ndarray) -> float:
        """Sum over context prefixes of exp(-decay * (n-1-l)) * xent, averaged over the batch."""
        if self.config.variant != EncodingVariant.INCREMENTAL_DECAY:
            raise ConfigValidationError("incremental_loss needs the incremental_decay variant")
        return self.loss(TargetBatch.from_windows(contexts, targets))

    # Prediction

    def log_prob_matrix(self, contexts: np.ndarray) -> np.ndarray:
        """(B, V) natural-log pmfs in eval mode; incremental models predict from the last step."""
        dropout = DropoutSpec(self.config.keep_prob, DropoutMode.EVAL)
        features, _, _ = self._encode(contexts, dropout)
        logits = affine_forward(self.store["O"], self.store["O_bias"], features[-1])
        return log_softmax(logits.astype(np.float64))

    def predict(self, history: Sequence[int]) -> np.ndarray:
        """pmf over V for one context of n-1 ids."""
        history = tuple(history)
        if len(history) != self.config.context_length:
            raise ShapeError(f"Expected {self.config.context_length} context ids, got {len(history)}")
        return np.exp(self.log_prob_matrix(np.array([history])))[0]

    def log_probs(self, contexts: np.ndarray, targets: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        result = np.empty(len(targets), dtype=np.float64)
        step = self.config.eval_batch_size
        for start in range(0, len(targets), step):
            stop = start + step
            matrix = self.log_prob_matrix(contexts[start:stop])
            result[start:stop] = matrix[np.arange(len(matrix)), targets[start:stop]]
        return result

    # Persistence

    def save(self, path, metadata: Optional[Dict] = None) -> None:
        sidecar = {
            "kind": "neural_ngram",
            "config": self.config.to_dict(),
            "vocab_size": self.vocab_size,
        }
        sidecar.update(metadata or {})
        save_checkpoint(self.store, path, sidecar)

    @classmethod
    def load(cls, path) -> "NGramNetwork":
        store, metadata = load_checkpoint(path)
        if metadata.get("kind") != "neural_ngram":
            raise ConfigValidationError(f"{path} is not a neural n-gram checkpoint")
        config = NGramModelConfig.from_dict(metadata["config"])
        return cls(config, metadata["vocab_size"], store)


@dataclass
class EpochLog:
    epoch: int
    train_xent: float
    dev_ppl: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainingResult:
    model: object
    history: List[EpochLog]
    best_epoch: int
    best_dev_ppl: float


def write_training_log(path, history: List[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in history:
            handle.write(record.to_json() + "\n")


def train(
    config: NGramModelConfig,
    vocab: Vocabulary,
    train_records: Sequence[TargetRecord],
    dev_corpus: CorpusStream,
    log_path=None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainingResult:
    """
    Train a neural n-gram model and keep the parameters of the best dev epoch.

    Args:
        config: Model and optimizer configuration
        vocab: Vocabulary the records were encoded with
        train_records: TargetRecords of the configured regime and order
        dev_corpus: Development corpus evaluated after every epoch
        log_path: Optional JSON-lines training log
        on_epoch: Optional callback receiving each EpochLog

    Returns:
        TrainingResult with the best-dev model snapshot

    Raises:
        EmptyCorpusError: If there are no training records or no dev tokens
        ShapeError: If record contexts do not match the order
        ConfigValidationError: If records use another target regime
    """
    from .evaluation import perplexity

    if not train_records:
        raise EmptyCorpusError("No training records")
    if dev_corpus.token_count == 0:
        raise EmptyCorpusError("Development corpus has no tokens")
    lengths = {len(record.context) for record in train_records}
    if lengths != {config.context_length}:
        raise ShapeError(f"Records have context lengths {sorted(lengths)}, expected {config.context_length}")
    regimes = {str(record.regime) for record in train_records}
    if regimes != {str(config.regime)}:
        raise ConfigValidationError(
            f"Records use regimes {sorted(regimes)} but the model trains with {config.regime}",
            {"regime": [f"Records must all use the {config.regime} regime."]},
        )

    shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(3)[1:]
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout = DropoutSpec(config.keep_prob, DropoutMode.TRAIN, np.random.default_rng(dropout_seed))

    model = NGramNetwork(config, vocab.size)
    optimizer = build_optimizer(config.optimizer)
    dev_corpus = dev_corpus.with_mode(config.boundary_mode)
    records = list(train_records)

    history: List[EpochLog] = []
    best_ppl, best_epoch, best_values = math.inf, 0, model.store.snapshot()
    logger.info(f"Training {config.descriptor} on {len(records)} records, V={vocab.size}")

    for epoch in range(1, config.epochs + 1):
        permutation = shuffle_rng.permutation(len(records))
        loss_sum = 0.0
        weight_sum = 0.0
        for start in range(0, len(records), config.batch_size):
            chunk = [records[index] for index in permutation[start : start + config.batch_size]]
            batch = TargetBatch.from_records(chunk, vocab.size)
            loss = model.loss(batch, dropout, backward=True)
            clip_store_gradients(model.store, config.optimizer.clip_norm)
            optimizer.step(model.store, epoch)
            model.store.zero_grad()
            model.store.check_finite()
            loss_sum += loss * len(batch)
            weight_sum += float(batch.weights.sum())
            logger.debug(f"epoch {epoch} batch {start // config.batch_size}: loss {loss:.4f}")

        dev_ppl = perplexity(model, dev_corpus).perplexity
        record = EpochLog(epoch, loss_sum / weight_sum, dev_ppl, optimizer.learning_rate(epoch))
        history.append(record)
        logger.info(
            f"Epoch {epoch}/{config.epochs}: train xent {record.train_xent:.4f}, "
            f"dev PPL {dev_ppl:.3f}, lr {record.lr:.4g}"
        )
        if on_epoch is not None:
            on_epoch(record)
        if dev_ppl < best_ppl:
            best_ppl, best_epoch, best_values = dev_ppl, epoch, model.store.snapshot()

    model.store.restore(best_values)
    if log_path is not None:
        write_training_log(log_path, history)
    logger.info(f"Best dev PPL {best_ppl:.3f} at epoch {best_epoch}")
    return TrainingResult(model, history, best_epoch, best_ppl)


def with_variant(config: NGramModelConfig, variant: str, **changes) -> NGramModelConfig:
    """Copy of a configuration with another encoding variant."""
    return replace(config, variant=variant, **changes)
