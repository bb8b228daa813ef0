"""
Fully recurrent LSTM baseline trained with segmented (truncated) BPTT.

The corpus is laid out as B parallel streams cut into length-L segments.
Gradients stop at each segment's left edge while the state values are carried
into the next segment.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from django.db import models

from .corpus import EOS_ID, CorpusStream, Vocabulary
from .exceptions import ConfigValidationError, EmptyCorpusError, ShapeError
from .neural_ngram import EpochLog, TrainingResult, write_training_log
from .nn_core import (
    DropoutMode,
    DropoutSpec,
    LayerState,
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
    save_checkpoint,
    sparse_softmax_xent,
    truncated_normal,
    zero_states,
)

logger = logging.getLogger(__name__)


class StatePolicy(models.TextChoices):
    CARRY_FOREVER = "carry_forever", "Carry state forever"
    RESET_AT_SENTENCE_START = "reset_at_sentence_start", "Reset state at sentence start"


@dataclass(frozen=True)
class RecurrentConfig:
    dim_embed: int = 128
    dim_state: int = 128
    layers: int = 1
    dim_proj: Optional[int] = None
    keep_prob: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init_stddev: float = 0.1
    epochs: int = 1
    segment_length: int = 35
    batch_size: int = 20
    policy: str = StatePolicy.CARRY_FOREVER
    seed: int = 1234
    float_width: int = 64

    def __post_init__(self):
        errors: Dict[str, List[str]] = {}
        for name in ("dim_embed", "dim_state", "layers", "epochs", "segment_length", "batch_size"):
            if getattr(self, name) < 1:
                errors[name] = ["must be positive"]
        if self.dim_proj is not None and self.dim_proj < 1:
            errors["dim_proj"] = ["must be positive"]
        if not 0.0 < self.keep_prob <= 1.0:
            errors["keep_prob"] = ["must be in (0, 1]"]
        if self.policy not in StatePolicy.values:
            errors["policy"] = [f"unknown state policy '{self.policy}'"]
        if self.init_stddev <= 0:
            errors["init_stddev"] = ["must be positive"]
        if self.float_width not in (32, 64):
            errors["float_width"] = ["must be 32 or 64"]
        if errors:
            raise ConfigValidationError("Invalid recurrent configuration", errors)

    @property
    def dim_top(self) -> int:
        return self.dim_proj or self.dim_state

    @property
    def descriptor(self) -> str:
        return (
            f"Recurrent LSTM (L={self.segment_length}, B={self.batch_size}, "
            f"{StatePolicy(self.policy).value}, d={self.dim_embed}, s={self.dim_state}, "
            f"layers={self.layers})"
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "RecurrentConfig":
        data = dict(data)
        data["optimizer"] = OptimizerConfig(**data.get("optimizer", {}))
        return cls(**data)


@dataclass
class SegmentPlan:
    """
    B row-major streams of (input, target) ids.

    The input at position t is the token at t-1; the first stream starts from
    a virtual </s>.
    """

    segment_length: int
    batch_size: int
    inputs: np.ndarray
    targets: np.ndarray
    dropped: int = 0

    @property
    def stream_length(self) -> int:
        return self.targets.shape[1]

    @property
    def num_segments(self) -> int:
        return math.ceil(self.stream_length / self.segment_length)

    def segments(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for start in range(0, self.stream_length, self.segment_length):
            stop = start + self.segment_length
            yield self.inputs[:, start:stop], self.targets[:, start:stop]


def shifted_inputs(tokens: np.ndarray) -> np.ndarray:
    return np.concatenate([[EOS_ID], tokens[:-1]]).astype(np.int64)


def plan_segments(corpus: CorpusStream, segment_length: int, batch_size: int) -> SegmentPlan:
    """
    Lay a corpus out as batch_size streams cut into length segment_length pieces.

    Raises:
        ConfigValidationError: If the segment length or batch size is below 1
        EmptyCorpusError: If the corpus has fewer tokens than streams
    """
    errors = {}
    if segment_length < 1:
        errors["segment_length"] = ["must be at least 1"]
    if batch_size < 1:
        errors["batch"] = ["must be at least 1"]
    if errors:
        raise ConfigValidationError("Invalid segment plan", errors)

    tokens = np.array(corpus.tokens(), dtype=np.int64)
    if len(tokens) < batch_size:
        raise EmptyCorpusError(f"Corpus has {len(tokens)} tokens, fewer than {batch_size} streams")

    stream_length = len(tokens) // batch_size
    used = stream_length * batch_size
    dropped = len(tokens) - used
    if dropped:
        logger.warning(f"Segment plan drops the trailing {dropped} tokens")
    inputs = shifted_inputs(tokens)[:used].reshape(batch_size, stream_length)
    targets = tokens[:used].reshape(batch_size, stream_length)
    return SegmentPlan(segment_length, batch_size, inputs, targets, dropped)


@dataclass
class StepResult:
    loss: float
    states: List[LayerState]
    token_count: int


class RecurrentNetwork:
    """
    Multilayer LSTM language model with parameters E, W{l}/b{l}, optional P and O/O_bias.
    """

    def __init__(self, config: RecurrentConfig, vocab_size: int, store: Optional[ParameterStore] = None):
        self.config = config
        self.vocab_size = vocab_size
        if store is None:
            store = self._initialize(np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0]))
        self.store = store
        if self.store["O"].shape != (vocab_size, config.dim_top):
            raise ShapeError(f"Output layer {self.store['O'].shape} does not match V={vocab_size}")

    @property
    def descriptor(self) -> str:
        return self.config.descriptor

    def _initialize(self, rng: np.random.Generator) -> ParameterStore:
        config = self.config
        sigma = config.init_stddev
        store = ParameterStore(float_dtype(config.float_width))
        store.add("E", truncated_normal(rng, (config.dim_embed, self.vocab_size), sigma), sparse=True)
        init_lstm_stack(store, "", config.layers, config.dim_embed, config.dim_state, sigma, rng)
        if config.dim_proj:
            store.add("P", truncated_normal(rng, (config.dim_proj, config.dim_state), sigma))
        store.add("O", truncated_normal(rng, (self.vocab_size, config.dim_top), sigma))
        store.add("O_bias", np.zeros(self.vocab_size))
        return store

    def initial_states(self, batch: int) -> List[LayerState]:
        return zero_states(self.config.layers, batch, self.config.dim_state, self.store.dtype)

    def _resets(self, inputs: np.ndarray, policy: str) -> Optional[List[np.ndarray]]:
        if policy != StatePolicy.RESET_AT_SENTENCE_START:
            return None
        return [inputs[:, t] == EOS_ID for t in range(inputs.shape[1])]

    def _forward(self, inputs: np.ndarray, states: List[LayerState], dropout: DropoutSpec, policy: str):
        config = self.config
        if len(states) != config.layers or states[0][0].shape != (inputs.shape[0], config.dim_state):
            raise ShapeError(
                f"States must be {config.layers} layers of ({inputs.shape[0]}, {config.dim_state})"
            )
        embedded = [dropout_forward(self.store["E"][:, inputs[:, t]].T, dropout) for t in range(inputs.shape[1])]
        hidden, final_states, stack_cache = lstm_stack_forward(
            self.store, "", config.layers, [x for x, _ in embedded], states, dropout, self._resets(inputs, policy)
        )
        outputs = [h @ self.store["P"].T for h in hidden] if config.dim_proj else hidden
        top = np.concatenate(outputs, axis=0)
        dropped, out_mask = dropout_forward(top, dropout)
        logits = affine_forward(self.store["O"], self.store["O_bias"], dropped)
        cache = (inputs, embedded, hidden, stack_cache, dropped, out_mask)
        return logits, final_states, cache

    def bptt_train_step(
        self,
        inputs: np.ndarray,
        targets: np.ndarray,
        states: List[LayerState],
        dropout: Optional[DropoutSpec] = None,
    ) -> StepResult:
        """
        Forward one segment, accumulate truncated gradients, and return the mean
        loss with copies of the final states.

        The gradient with respect to the incoming states is discarded.
        """
        config = self.config
        dropout = dropout or DropoutSpec(config.keep_prob, DropoutMode.EVAL)
        batch, steps = inputs.shape
        if targets.shape != inputs.shape:
            raise ShapeError(f"targets {targets.shape} do not match inputs {inputs.shape}")

        logits, final_states, cache = self._forward(inputs, states, dropout, config.policy)
        # Rows of the stacked logits are time-major: step t occupies rows t*B..(t+1)*B.
        flat_targets = targets.T.reshape(-1)
        loss_sum, d_logits = sparse_softmax_xent(logits, flat_targets)
        count = batch * steps
        d_logits /= count

        inputs, embedded, hidden, stack_cache, dropped, out_mask = cache
        dO, db, d_dropped = affine_backward(self.store["O"], dropped, d_logits)
        self.store.accumulate("O", dO)
        self.store.accumulate("O_bias", db)
        d_top = dropout_backward(out_mask, d_dropped)
        d_outputs = [d_top[t * batch : (t + 1) * batch] for t in range(steps)]
        if config.dim_proj:
            P = self.store["P"]
            self.store.accumulate("P", sum(d.T @ h for d, h in zip(d_outputs, hidden)))
            d_outputs = [d @ P for d in d_outputs]
        d_inputs, _ = lstm_stack_backward(self.store, "", config.layers, stack_cache, d_outputs)
        for t, (dx, (_, mask)) in enumerate(zip(d_inputs, embedded)):
            self.store.accumulate_columns("E", inputs[:, t], dropout_backward(mask, dx))

        carried = [(cell.copy(), hidden_state.copy()) for cell, hidden_state in final_states]
        return StepResult(loss_sum / count, carried, count)

    def segment_loss(self, inputs: np.ndarray, targets: np.ndarray, states: List[LayerState]) -> float:
        """Mean loss of one segment without touching gradients."""
        logits, _, _ = self._forward(inputs, states, DropoutSpec(self.config.keep_prob), self.config.policy)
        loss_sum, _ = sparse_softmax_xent(logits, targets.T.reshape(-1))
        return loss_sum / inputs.size

    def token_log_probs(
        self, tokens: np.ndarray, policy: Optional[str] = None, chunk_length: Optional[int] = None
    ) -> np.ndarray:
        """
        Single-stream left-to-right natural-log probabilities of every token.

        The state is carried across chunks, so the result does not depend on
        chunk_length.
        """
        policy = policy or self.config.policy
        tokens = np.asarray(tokens, dtype=np.int64)
        inputs = shifted_inputs(tokens)
        chunk_length = chunk_length or self.config.segment_length
        states = self.initial_states(1)
        dropout = DropoutSpec(self.config.keep_prob, DropoutMode.EVAL)
        result = np.empty(len(tokens), dtype=np.float64)
        for start in range(0, len(tokens), chunk_length):
            stop = start + chunk_length
            logits, states, _ = self._forward(inputs[None, start:stop], states, dropout, policy)
            log_probs = log_softmax(logits.astype(np.float64))
            result[start:stop] = log_probs[np.arange(len(log_probs)), tokens[start:stop]]
        return result

    def save(self, path, metadata: Optional[Dict] = None) -> None:
        sidecar = {"kind": "recurrent", "config": self.config.to_dict(), "vocab_size": self.vocab_size}
        sidecar.update(metadata or {})
        save_checkpoint(self.store, path, sidecar)

    @classmethod
    def load(cls, path) -> "RecurrentNetwork":
        store, metadata = load_checkpoint(path)
        if metadata.get("kind") != "recurrent":
            raise ConfigValidationError(f"{path} is not a recurrent checkpoint")
        return cls(RecurrentConfig.from_dict(metadata["config"]), metadata["vocab_size"], store)


def evaluate_recurrent(model: RecurrentNetwork, corpus: CorpusStream, policy: Optional[str] = None):
    """
    Perplexity of a recurrent model with the state carried or reset per policy.

    Raises:
        EmptyCorpusError: If the corpus has no tokens
    """
    from .evaluation import report_from_log_probs

    if corpus.token_count == 0:
        raise EmptyCorpusError("Cannot evaluate an empty corpus")
    policy = StatePolicy(policy or model.config.policy)
    log_probs = model.token_log_probs(np.array(corpus.tokens()), policy)
    return report_from_log_probs(
        log_probs,
        corpus,
        f"{model.descriptor}, evaluated with {policy.value}",
    )


def train_recurrent(
    config: RecurrentConfig,
    vocab: Vocabulary,
    train_corpus: CorpusStream,
    dev_corpus: CorpusStream,
    log_path=None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainingResult:
    """
    Segmented-BPTT training that keeps the best dev-perplexity epoch.

    Raises:
        EmptyCorpusError: If either corpus is empty
    """
    if dev_corpus.token_count == 0:
        raise EmptyCorpusError("Development corpus has no tokens")
    plan = plan_segments(train_corpus, config.segment_length, config.batch_size)
    _, dropout_seed = np.random.SeedSequence(config.seed).spawn(2)
    dropout = DropoutSpec(config.keep_prob, DropoutMode.TRAIN, np.random.default_rng(dropout_seed))

    model = RecurrentNetwork(config, vocab.size)
    optimizer = build_optimizer(config.optimizer)
    history: List[EpochLog] = []
    best_ppl, best_epoch, best_values = math.inf, 0, model.store.snapshot()
    logger.info(
        f"Training {config.descriptor}: {plan.num_segments} segments per epoch, "
        f"{plan.dropped} tokens dropped"
    )

    for epoch in range(1, config.epochs + 1):
        states = model.initial_states(config.batch_size)
        loss_sum = 0.0
        token_sum = 0
        for index, (inputs, targets) in enumerate(plan.segments()):
            step = model.bptt_train_step(inputs, targets, states, dropout)
            clip_store_gradients(model.store, config.optimizer.clip_norm)
            optimizer.step(model.store, epoch)
            model.store.zero_grad()
            model.store.check_finite()
            states = step.states
            loss_sum += step.loss * step.token_count
            token_sum += step.token_count
            logger.debug(f"epoch {epoch} segment {index}: loss {step.loss:.4f}")

        dev_ppl = evaluate_recurrent(model, dev_corpus).perplexity
        record = EpochLog(epoch, loss_sum / token_sum, dev_ppl, optimizer.learning_rate(epoch))
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
    return TrainingResult(model, history, best_epoch, best_ppl)
