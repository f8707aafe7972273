"""
Pretraining and adaptation loops: warm-up plus linear decay, token-weighted
gradient accumulation, epoch caps, early stopping and best-validation restore.
"""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.core.config import settings
from app.core.exceptions import AdapterError, NumericError, TrainingError
from app.models.parameters import Parameters
from app.models.vocab import Vocab
from app.schemas.adapter import AdapterKind, LoraConfig, PrefixConfig
from app.schemas.training import RunHistory, SpanCorruptionConfig, TrainConfig
from app.services import numerics, tokenizer, transformer

logger = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-6


@dataclass(frozen=True)
class Example:
    """One encoded (source, target) pair; the target ends with eos unless clipped."""
    source: Tuple[int, ...]
    target: Tuple[int, ...]


def early_stop_check(val_losses: Sequence[float], patience: int) -> bool:
    """
    True iff none of the last `patience` losses improves on the best loss seen
    before them by more than IMPROVEMENT_THRESHOLD.
    """
    if patience < 1:
        raise ValueError("patience must be at least 1")
    if len(val_losses) <= patience:
        return False
    best_before = min(val_losses[:-patience])
    return not any(loss < best_before - IMPROVEMENT_THRESHOLD for loss in val_losses[-patience:])


def encode_example(source_text: str, target_text: str, vocab: Vocab, max_source_len: int, max_target_len: int) -> Example:
    source = tokenizer.encode(source_text, vocab)[: max_source_len - 1] + [vocab.eos_id]
    target = (tokenizer.encode(target_text, vocab) + [vocab.eos_id])[:max_target_len]
    return Example(source=tuple(source), target=tuple(target))


def span_corruption(
    ids: Sequence[int],
    vocab: Vocab,
    rng: np.random.Generator,
    config: Optional[SpanCorruptionConfig] = None,
    max_target_len: Optional[int] = None,
) -> Example:
    """
    Replace random contiguous spans of `ids` with sentinels.

    The source keeps the uncorrupted tokens with one sentinel per dropped span; the
    target lists each sentinel followed by the tokens it replaced.
    """
    config = config or SpanCorruptionConfig()
    n = len(ids)
    if n < 2:
        raise TrainingError("span corruption needs sequences of at least two tokens")
    if vocab.n_sentinels < 1:
        raise TrainingError("span corruption needs a vocabulary with sentinel tokens")
    n_noise = min(n - 1, max(1, int(round(n * config.noise_density))))
    n_spans = int(round(n_noise / config.mean_span_length))
    n_spans = max(1, min(n_spans, n_noise, n - n_noise, vocab.n_sentinels))

    def segment(total: int) -> List[int]:
        cuts = np.sort(rng.choice(np.arange(1, total), size=n_spans - 1, replace=False)) if n_spans > 1 else []
        bounds = [0, *[int(c) for c in cuts], total]
        return [b - a for a, b in zip(bounds, bounds[1:])]

    noise_lengths = segment(n_noise)
    keep_lengths = segment(n - n_noise)
    source: List[int] = []
    target: List[int] = []
    position = 0
    for span, (keep, noise) in enumerate(zip(keep_lengths, noise_lengths)):
        source.extend(ids[position : position + keep])
        position += keep
        sentinel_id = vocab.sentinel_id(span)
        source.append(sentinel_id)
        target.append(sentinel_id)
        target.extend(ids[position : position + noise])
        position += noise
    source.append(vocab.eos_id)
    target.append(vocab.eos_id)
    if max_target_len is not None:
        target = target[:max_target_len]
    return Example(source=tuple(source), target=tuple(target))


def make_batches(n_examples: int, micro_batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index arrays of at most `micro_batch_size` examples."""
    order = rng.permutation(n_examples)
    return [order[i : i + micro_batch_size] for i in range(0, n_examples, micro_batch_size)]


def _arrays(examples: Sequence[Example], indices) -> Tuple[np.ndarray, np.ndarray]:
    chosen = [examples[i] for i in indices]
    return (
        transformer.pad_batch([e.source for e in chosen]),
        transformer.pad_batch([e.target for e in chosen]),
    )


class Trainer:
    """
    Owns one parameter set and its optimizer state for the length of a run.
    """

    def __init__(self, params: Parameters, config: TrainConfig, stage: str = "train", progress: Optional[bool] = None):
        self.params = params
        self.config = config
        self.stage = stage
        self.progress = settings.PROGRESS_BARS if progress is None else progress
        self.state = numerics.AdamState()
        self.step = 0

    def evaluate(self, examples: Sequence[Example]) -> float:
        """
        Token-mean loss over `examples`, batched in input order.
        """
        total_loss = 0.0
        total_tokens = 0
        size = self.config.micro_batch_size
        for start in range(0, len(examples), size):
            source, target = _arrays(examples, range(start, min(start + size, len(examples))))
            mask = target != transformer.PAD_ID
            n_tokens = int(mask.sum())
            total_loss += transformer.loss(self.params, source, target) * n_tokens
            total_tokens += n_tokens
        if total_tokens == 0:
            raise TrainingError("validation set has no target tokens")
        return total_loss / total_tokens

    def _accumulate(self, examples: Sequence[Example], group: Sequence[np.ndarray]) -> Tuple[float, int, Dict[str, np.ndarray]]:
        # gradients weighted by token count so accumulation equals one large batch
        summed: Dict[str, np.ndarray] = {}
        weighted_loss = 0.0
        total_tokens = 0
        for indices in group:
            source, target = _arrays(examples, indices)
            loss, grads, n_tokens = transformer.loss_and_gradients(self.params, source, target)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {self.step + 1} of {self.stage}")
            weighted_loss += loss * n_tokens
            total_tokens += n_tokens
            for name, grad in grads.items():
                if name in summed:
                    summed[name] += grad * n_tokens
                else:
                    summed[name] = grad * n_tokens
        grads = {name: g / total_tokens for name, g in summed.items()}
        return weighted_loss, total_tokens, grads

    def train_epoch(self, examples: Sequence[Example], rng: np.random.Generator, schedule, history: RunHistory, epoch: int) -> float:
        batches = make_batches(len(examples), self.config.micro_batch_size, rng)
        acc = self.config.accumulation_steps
        groups = [batches[i : i + acc] for i in range(0, len(batches), acc)]
        epoch_loss = []
        epoch_tokens = 0
        for group in tqdm(groups, desc=f"{self.stage} epoch {epoch}", disable=not self.progress, leave=False):
            weighted_loss, n_tokens, grads = self._accumulate(examples, group)
            lr = numerics.lr_at(self.step + 1, schedule)
            numerics.adam_step(self.params.tensors, grads, self.state, lr, self.params.trainable)
            self.step += 1
            history.lr_log.append(lr)
            epoch_loss.append(weighted_loss)
            epoch_tokens += n_tokens
            for name in grads:
                if not np.all(np.isfinite(self.params.tensors[name])):
                    raise NumericError(f"non-finite values in '{name}' after step {self.step} of {self.stage}")
        return math.fsum(epoch_loss) / epoch_tokens

    def fit(self, train: Sequence[Example], val: Optional[Sequence[Example]] = None) -> RunHistory:
        """
        Train for up to `max_epochs`; with a validation set, stop early per the
        patience rule and restore the best-validation trainable tensors.
        """
        if not train:
            raise TrainingError("training set is empty")
        config = self.config
        schedule = config.schedule_for(len(train))
        rng = np.random.default_rng(config.seed)
        history = RunHistory()
        best_loss = math.inf
        best_tensors: Optional[Dict[str, np.ndarray]] = None
        trainable = self.params.trainable_names()
        logger.info(
            f"Starting {self.stage}: {len(train)} examples, {schedule.total_steps} optimizer steps, "
            f"{len(trainable)} trainable tensors",
            extra={"stage": self.stage},
        )

        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            train_loss = self.train_epoch(train, rng, schedule, history, epoch)
            history.train_loss.append(train_loss)
            if val:
                val_loss = self.evaluate(val)
                if not math.isfinite(val_loss):
                    raise NumericError(f"non-finite validation loss in epoch {epoch} of {self.stage}")
                history.val_loss.append(val_loss)
                if val_loss < best_loss - IMPROVEMENT_THRESHOLD:
                    best_loss = val_loss
                    history.best_epoch = epoch
                    best_tensors = {name: self.params.tensors[name].copy() for name in trainable}
            else:
                history.best_epoch = epoch
            elapsed = time.perf_counter() - started
            history.epoch_seconds.append(elapsed)
            logger.info(
                f"{self.stage} epoch {epoch}: train loss {train_loss:.4f}"
                + (f", val loss {history.val_loss[-1]:.4f}" if val else ""),
                extra={"stage": self.stage, "epoch": epoch, "loss": train_loss, "lr": history.lr_log[-1], "elapsed": elapsed},
            )
            if val and config.patience is not None and early_stop_check(history.val_loss, config.patience):
                history.stopped_early = True
                logger.info(f"{self.stage}: early stop after epoch {epoch}", extra={"stage": self.stage, "epoch": epoch})
                break

        if best_tensors is not None:
            for name, value in best_tensors.items():
                self.params.tensors[name][...] = value
        return history


def pack_sequences(sequences: Sequence[Sequence[int]], budget: int) -> List[List[int]]:
    """
    Consecutive sequences joined greedily while the total stays within `budget`.

    A sequence is never split. Only runs of two or more sequences are returned.
    """
    packed: List[List[int]] = []
    current: List[int] = []
    count = 0
    for ids in sequences:
        if current and len(current) + len(ids) > budget:
            if count > 1:
                packed.append(current)
            current, count = [], 0
        current = current + list(ids)
        count += 1
    if count > 1:
        packed.append(current)
    return packed


def pretrain(
    params: Parameters,
    texts: Sequence[str],
    vocab: Vocab,
    config: TrainConfig,
    span_config: Optional[SpanCorruptionConfig] = None,
    progress: Optional[bool] = None,
) -> Tuple[Parameters, RunHistory]:
    """
    Span-corruption pretraining. Corruptions are drawn once per text from
    `config.seed`, so every epoch sees the same inputs. With `span_config.pack`
    the runs of consecutive texts from `pack_sequences` are corrupted as well.
    """
    if not texts:
        raise TrainingError("pretraining corpus is empty")
    if len(texts) < config.micro_batch_size:
        raise TrainingError(
            f"pretraining corpus has {len(texts)} texts, fewer than one micro-batch ({config.micro_batch_size})"
        )
    model = params.config
    limit = model.max_source_len - vocab.n_sentinels - 1
    rng = np.random.default_rng(config.seed)
    sequences = [ids for ids in (tokenizer.encode(text, vocab)[:limit] for text in texts) if len(ids) >= 2]
    if span_config is not None and span_config.pack:
        sequences += pack_sequences(sequences, limit)
    examples = [
        span_corruption(ids, vocab, rng, span_config, max_target_len=model.max_target_len) for ids in sequences
    ]
    if not examples:
        raise TrainingError("no pretraining text is long enough to corrupt")
    history = Trainer(params, config, stage="pretrain", progress=progress).fit(examples)
    return params, history


def _check_attached(params: Parameters, kind: AdapterKind) -> None:
    if kind == AdapterKind.LORA and not isinstance(params.adapter, LoraConfig):
        raise AdapterError("fine_tune(kind=lora) needs parameters with an attached LoRA adapter")
    if kind == AdapterKind.PREFIX and not isinstance(params.adapter, PrefixConfig):
        raise AdapterError("fine_tune(kind=prefix_tuning) needs parameters with an attached prefix adapter")
    if kind == AdapterKind.FULL and params.adapter is not None:
        raise AdapterError("full fine-tuning runs on bare base parameters")
    if not params.trainable_names():
        raise AdapterError(f"no trainable tensors for {kind.value}")


def fine_tune(
    params: Parameters,
    kind: AdapterKind,
    train: Sequence[Example],
    val: Sequence[Example],
    config: TrainConfig,
    progress: Optional[bool] = None,
) -> Tuple[Parameters, RunHistory]:
    """
    Adapt `params` on encoded (prompt, impression) pairs; returns the
    best-validation parameters and the run history.
    """
    if not train:
        raise TrainingError("training set is empty")
    _check_attached(params, kind)
    history = Trainer(params, config, stage=f"adapt-{kind.value}", progress=progress).fit(train, val or None)
    return params, history


def history_to_csv(history: RunHistory, directory: Path) -> None:
    """
    `history.csv` (one row per epoch) and `lr_log.csv` (one row per optimizer step).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = history.epochs_completed
    frame = pd.DataFrame(
        {
            "epoch": range(1, n + 1),
            "train_loss": history.train_loss,
            "val_loss": history.val_loss + [None] * (n - len(history.val_loss)),
            "epoch_seconds": history.epoch_seconds,
        }
    )
    frame.to_csv(directory / "history.csv", index=False)
    pd.DataFrame({"step": range(1, len(history.lr_log) + 1), "lr": history.lr_log}).to_csv(
        directory / "lr_log.csv", index=False
    )
