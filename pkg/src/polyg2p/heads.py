"""Disambiguation classifiers over frozen encoder features.

Each head shares one trunk across all polyphonic characters and owns one
output layer per character, sized to that character's candidate list, so a
prediction can only ever be one of the queried character's pronunciations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import PolyphoneInventory
from .encoder import EncoderModel, Vocabulary
from .layers import BLSTM, Linear, TransformerBlock, uniform_init
from .optim import Adam, noam_lr
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("fc", "lstm", "transformer")

# rng stream tags
_INIT_STREAM, _TRAIN_STREAM, _REGISTER_STREAM = 0x4EAD, 0x7A1, 0x0E6


class HeadError(ValueError):
    pass


@dataclass
class HeadConfig:
    arch: str
    feature_dim: int
    trunk_width: int = 128
    dropout: float = 0.5
    lstm_layers: int = 2
    tf_blocks: int = 2
    tf_heads: int = 4

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise HeadError(f"unknown head architecture {self.arch!r}")
        if self.trunk_width <= 0 or self.feature_dim <= 0:
            raise HeadError("widths must be positive")


class _FcTrunk:
    """One shared dense layer reading only the target position's feature."""

    def __init__(self, config: HeadConfig, rng):
        self.config = config
        self.fc = Linear(config.feature_dim, config.trunk_width, "trunk.fc", rng)
        self.out_width = config.trunk_width

    def at_position(self, rows: Tensor, train: bool, rng) -> Tensor:
        # rows: (batch, feature_dim) already gathered at the target positions
        return T.dropout(T.tanh(self.fc(rows)), self.config.dropout, train, rng)

    def parameters(self):
        return self.fc.parameters()


class _LstmTrunk:
    def __init__(self, config: HeadConfig, rng):
        self.blstm = BLSTM(config.feature_dim, config.trunk_width,
                           config.lstm_layers, "trunk.blstm", rng)
        self.out_width = self.blstm.out_width

    def sequence(self, feats: Tensor, train: bool, rng) -> Tensor:
        return self.blstm(feats)

    def parameters(self):
        return self.blstm.parameters()


class _TransformerTrunk:
    def __init__(self, config: HeadConfig, rng):
        self.proj = Linear(config.feature_dim, config.trunk_width, "trunk.proj", rng)
        self.blocks = [TransformerBlock(config.trunk_width, config.tf_heads,
                                        4 * config.trunk_width, f"trunk.block{i}",
                                        rng, dropout=0.1)
                       for i in range(config.tf_blocks)]
        self.out_width = config.trunk_width
        self.last_attention: list[np.ndarray] = []

    def sequence(self, feats: Tensor, train: bool, rng) -> Tensor:
        x = self.proj(feats)
        self.last_attention = []
        for block in self.blocks:
            x, weights = block(x, None, train, rng)
            self.last_attention.append(weights.data)
        return x

    def parameters(self):
        params = self.proj.parameters()
        for block in self.blocks:
            params += block.parameters()
        return params


_TRUNKS = {"fc": _FcTrunk, "lstm": _LstmTrunk, "transformer": _TransformerTrunk}


class HeadRegistry:
    """Shared trunk plus one output layer per registered polyphone."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        self.config = config
        self._rng = np.random.default_rng([seed, _REGISTER_STREAM])
        self.trunk = _TRUNKS[config.arch](config, np.random.default_rng([seed, _INIT_STREAM]))
        self.out_layers: dict[str, tuple[Parameter, Parameter]] = {}
        self.candidates: dict[str, list[str]] = {}

    def register(self, char: str, candidates) -> None:
        """Add a freshly initialized output layer; existing parameters are
        untouched."""
        if char in self.out_layers:
            raise HeadError(f"character {char!r} already registered")
        candidates = list(candidates)
        if len(candidates) < 2:
            raise HeadError(f"character {char!r} needs at least 2 candidates")
        w = self.trunk.out_width
        weight = Parameter(uniform_init(self._rng, (w, len(candidates)), w),
                           f"out.{char}.W")
        bias = Parameter(np.zeros(len(candidates)), f"out.{char}.b")
        self.out_layers[char] = (weight, bias)
        self.candidates[char] = candidates

    @classmethod
    def from_inventory(cls, config: HeadConfig, inventory: PolyphoneInventory,
                       seed: int = 0) -> "HeadRegistry":
        registry = cls(config, seed)
        for char in inventory.candidates:
            registry.register(char, inventory.candidates[char])
        return registry

    def parameters(self) -> list[Parameter]:
        params = list(self.trunk.parameters())
        for char in self.candidates:
            params += list(self.out_layers[char])
        return params

    def _require(self, char: str):
        if char not in self.out_layers:
            raise HeadError(f"character {char!r} is not registered")

    def _trunk_rows(self, features: Tensor, positions: np.ndarray,
                    train: bool, rng) -> Tensor:
        """Trunk output rows (batch, out_width) at the given positions."""
        batch = features.data.shape[0]
        rows = np.arange(batch)
        if self.config.arch == "fc":
            return self.trunk.at_position(features[rows, positions], train, rng)
        seq = self.trunk.sequence(features, train, rng)
        return seq[rows, positions]

    def probabilities(self, features: np.ndarray, position: int, char: str,
                      train: bool = False, rng=None) -> np.ndarray:
        """Probability vector over the candidates of ``char`` for one
        feature sequence (length, feature_dim)."""
        self._require(char)
        if not 0 <= position < features.shape[0]:
            raise HeadError(f"position {position} out of range for {features.shape[0]} rows")
        trunk_rows = self._trunk_rows(Tensor(features[None, :, :]),
                                      np.array([position]), train, rng)
        weight, bias = self.out_layers[char]
        logits = T.matmul(trunk_rows, weight) + bias
        return T.softmax(logits, axis=-1).data[0]

    def first_block_attention(self, features: np.ndarray) -> np.ndarray:
        """Attention weights (heads, length, length) of the first trunk block."""
        if self.config.arch != "transformer":
            raise HeadError("attention analysis requires the transformer head")
        self.trunk.sequence(Tensor(features[None, :, :]), False, None)
        return self.trunk.last_attention[0][0]


@dataclass
class TrainInstance:
    sentence: str
    position: int
    char: str
    label: str


@dataclass
class HeadTrainConfig:
    lr: float = 3e-3   # the paper-scale preset overrides this to 5e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    warmup: int = 400  # noam schedule, transformer trunk only

    def optimizer_for(self, registry: HeadRegistry) -> Adam:
        if registry.config.arch == "transformer":
            width = registry.config.trunk_width
            return Adam(registry.parameters(),
                        schedule=lambda t: noam_lr(t, width, self.warmup))
        return Adam(registry.parameters(), lr=self.lr)


class FeatureCache:
    """Frozen-encoder features per sentence; feature row i+1 holds sentence
    position i (leading [CLS])."""

    def __init__(self, encoder: EncoderModel, vocab: Vocabulary, batch_size: int = 64):
        self.encoder = encoder
        self.vocab = vocab
        self.batch_size = batch_size
        self._table: dict[str, np.ndarray] = {}

    def warm(self, sentences) -> None:
        todo = sorted({s for s in sentences if s not in self._table})
        by_len: dict[int, list[str]] = {}
        for s in todo:
            by_len.setdefault(len(s), []).append(s)
        for length, group in sorted(by_len.items()):
            for start in range(0, len(group), self.batch_size):
                chunk = group[start:start + self.batch_size]
                tokens = np.stack([self.vocab.encode(s, wrap=True) for s in chunk])
                feats = self.encoder.encode(tokens).data
                for s, f in zip(chunk, feats):
                    self._table[s] = f

    def __getitem__(self, sentence: str) -> np.ndarray:
        if sentence not in self._table:
            self.warm([sentence])
        return self._table[sentence]


def _check_instances(registry: HeadRegistry, instances) -> None:
    for inst in instances:
        if inst.char not in registry.candidates:
            raise HeadError(f"training instance for unregistered character {inst.char!r}")
        if inst.label not in registry.candidates[inst.char]:
            raise HeadError(
                f"label {inst.label!r} outside the candidate set of {inst.char!r}")


def _batch_loss(registry: HeadRegistry, cache: FeatureCache, instances,
                train: bool, rng) -> tuple[Tensor, int]:
    """Mean cross-entropy over one batch of same-length sentences."""
    feats = Tensor(np.stack([cache[i.sentence] for i in instances]))
    positions = np.array([i.position + 1 for i in instances])  # CLS offset
    trunk_rows = registry._trunk_rows(feats, positions, train, rng)
    by_char: dict[str, list[int]] = {}
    for row, inst in enumerate(instances):
        by_char.setdefault(inst.char, []).append(row)
    total = None
    for char in sorted(by_char):
        rows = by_char[char]
        weight, bias = registry.out_layers[char]
        logits = T.matmul(trunk_rows[np.array(rows)], weight) + bias
        labels = np.array([registry.candidates[char].index(instances[r].label)
                           for r in rows])
        loss = T.softmax_cross_entropy(logits, labels) * float(len(rows))
        total = loss if total is None else total + loss
    return total * (1.0 / len(instances)), len(instances)


def _length_batches(instances, batch_size: int, rng=None):
    """Group instances by sentence length, then chunk; optionally shuffled."""
    by_len: dict[int, list[int]] = {}
    for idx, inst in enumerate(instances):
        by_len.setdefault(len(inst.sentence), []).append(idx)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        if rng is not None:
            group = [group[j] for j in rng.permutation(len(group))]
        for start in range(0, len(group), batch_size):
            batches.append([instances[i] for i in group[start:start + batch_size]])
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def evaluate_head(registry: HeadRegistry, cache: FeatureCache, instances,
                  batch_size: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) in inference mode."""
    loss_sum = 0.0
    correct = 0
    for batch in _length_batches(instances, batch_size):
        feats = Tensor(np.stack([cache[i.sentence] for i in batch]))
        positions = np.array([i.position + 1 for i in batch])
        trunk_rows = registry._trunk_rows(feats, positions, False, None)
        by_char: dict[str, list[int]] = {}
        for row, inst in enumerate(batch):
            by_char.setdefault(inst.char, []).append(row)
        for char, rows in sorted(by_char.items()):
            weight, bias = registry.out_layers[char]
            logits = T.matmul(trunk_rows[np.array(rows)], weight) + bias
            labels = np.array([registry.candidates[char].index(batch[r].label)
                               for r in rows])
            loss_sum += T.softmax_cross_entropy(logits, labels).item() * len(rows)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    n = len(instances)
    return loss_sum / n, correct / n


def train_head(registry: HeadRegistry, encoder: EncoderModel, vocab: Vocabulary,
               train_set, dev_set, config: HeadTrainConfig, seed: int = 0,
               cache: FeatureCache | None = None):
    """Train the registry on frozen encoder features with early stopping.

    Returns per-epoch metric rows (epoch, train_loss, dev_acc); epoch 0 is
    the untrained state.  The best dev-accuracy parameters are restored
    before returning.
    """
    if not encoder.frozen:
        raise HeadError("encoder must be frozen before head training")
    train_set, dev_set = list(train_set), list(dev_set)
    _check_instances(registry, train_set)
    _check_instances(registry, dev_set)
    if cache is None:
        cache = FeatureCache(encoder, vocab)
    cache.warm([i.sentence for i in train_set + dev_set])

    opt = config.optimizer_for(registry)
    history = []
    best = {"acc": -1.0, "epoch": 0, "params": None}

    def record(epoch, train_loss=None):
        if train_loss is None:
            train_loss, _ = evaluate_head(registry, cache, train_set)
        _, dev_acc = evaluate_head(registry, cache, dev_set)
        history.append({"epoch": epoch, "train_loss": train_loss, "dev_acc": dev_acc})
        log.info("head[%s] epoch %d: train loss %.4f dev acc %.4f",
                 registry.config.arch, epoch, train_loss, dev_acc)
        if dev_acc > best["acc"]:
            best.update(acc=dev_acc, epoch=epoch,
                        params={p.name: p.data.copy() for p in registry.parameters()})
        return dev_acc

    record(0)
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([seed, _TRAIN_STREAM, epoch])
        loss_sum = 0.0
        n_seen = 0
        for batch in _length_batches(train_set, config.batch_size, rng):
            loss, n = _batch_loss(registry, cache, batch, True, rng)
            loss.backward()
            active = set(registry.trunk.parameters())
            for inst in batch:
                active.update(registry.out_layers[inst.char])
            opt.step(active=sorted(active, key=lambda p: p.name))
            loss_sum += loss.item() * n
            n_seen += n
        record(epoch, train_loss=loss_sum / n_seen)
        if epoch - best["epoch"] >= config.patience:
            break
    if best["params"] is not None:
        for p in registry.parameters():
            p.data = best["params"][p.name].copy()
    return history


def predict(registry: HeadRegistry, encoder: EncoderModel, vocab: Vocabulary,
            sentence: str, position: int) -> tuple[str, np.ndarray]:
    """Predicted label and its probability vector for one sentence position."""
    char = sentence[position]
    registry._require(char)
    features = encoder.features_for(vocab, sentence)
    probs = registry.probabilities(features, position + 1, char)
    return registry.candidates[char][int(np.argmax(probs))], probs


def make_predictor(registry: HeadRegistry, encoder: EncoderModel,
                   vocab: Vocabulary, cache: FeatureCache | None = None):
    """Pronunciation callback suitable for dictionary routing."""
    if cache is None:
        cache = FeatureCache(encoder, vocab)

    def predictor(sentence: str, position: int, char: str) -> str:
        probs = registry.probabilities(cache[sentence], position + 1, char)
        return registry.candidates[char][int(np.argmax(probs))]

    return predictor
