"""Sequence-labeling comparison system: BLSTM over character embeddings
concatenated with contextual part-of-speech embeddings, with one softmax
layer shared by every polyphone.

The shared output layer ranges over the union of all pronunciations, so a
prediction can land on another character's pronunciation; the per-character
heads exclude this by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import PolyphoneInventory
from .layers import BLSTM, Linear, uniform_init
from .optim import Adam
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

NOT_POLYPHONE = "<not-polyphone>"
PAD_TAG = "<pad>"
UNK_TAG = "UNK"

_INIT_STREAM, _TRAIN_STREAM = 0xBA5E, 0x7BA1


@dataclass
class TaggedSentence:
    """Words with POS tags plus the character-to-word alignment."""

    words: list[tuple[str, str]]
    char_word_index: list[int]

    @property
    def chars(self) -> str:
        return "".join(surface for surface, _ in self.words)


def tokenize_and_tag(sentence: str, lexicon: dict[str, str]) -> TaggedSentence:
    """Greedy longest-match tokenization; unknown characters become
    single-character words tagged UNK."""
    words: list[tuple[str, str]] = []
    alignment: list[int] = []
    max_word = max((len(w) for w in lexicon), default=1)
    pos = 0
    while pos < len(sentence):
        match = None
        for width in range(min(max_word, len(sentence) - pos), 0, -1):
            cand = sentence[pos:pos + width]
            if cand in lexicon:
                match = (cand, lexicon[cand])
                break
        if match is None:
            match = (sentence[pos], UNK_TAG)
        alignment += [len(words)] * len(match[0])
        words.append(match)
        pos += len(match[0])
    return TaggedSentence(words, alignment)


def parse_lexicon(lines) -> dict[str, str]:
    lexicon: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0]:
            raise ValueError(f"lexicon line {lineno}: expected 'word<TAB>tag'")
        lexicon[fields[0]] = fields[1]
    return lexicon


def serialize_lexicon(lexicon: dict[str, str]) -> str:
    return "".join(f"{word}\t{tag}\n" for word, tag in lexicon.items())


@dataclass
class BaselineConfig:
    labels: list[str]                 # union of pronunciations + NOT_POLYPHONE
    char_width: int = 64
    pos_width: int = 64
    context: int = 1                  # neighbor words each side
    hidden: int = 128
    layers: int = 2

    def __post_init__(self):
        if self.context < 0:
            raise ValueError("context must be >= 0")
        if NOT_POLYPHONE not in self.labels:
            raise ValueError("label vocabulary must include the non-polyphone tag")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")

    @property
    def input_width(self) -> int:
        return self.char_width + (2 * self.context + 1) * self.pos_width

    @classmethod
    def for_inventory(cls, inventory: PolyphoneInventory, **kwargs) -> "BaselineConfig":
        union = sorted({label for cands in inventory.candidates.values() for label in cands})
        return cls(labels=union + [NOT_POLYPHONE], **kwargs)


class BaselineModel:
    """Character/POS embeddings, BLSTM stack, shared softmax output."""

    def __init__(self, config: BaselineConfig, chars, lexicon: dict[str, str] | None = None,
                 seed: int = 0):
        self.config = config
        self.lexicon = dict(lexicon or {})
        rng = np.random.default_rng([seed, _INIT_STREAM])
        self.char_vocab = {"<pad>": 0, "<unk>": 1}
        for ch in sorted(set(chars)):
            self.char_vocab[ch] = len(self.char_vocab)
        self.tag_vocab = {PAD_TAG: 0, UNK_TAG: 1}
        for tag in sorted(set(self.lexicon.values())):
            if tag not in self.tag_vocab:
                self.tag_vocab[tag] = len(self.tag_vocab)
        self.char_emb = Parameter(
            uniform_init(rng, (len(self.char_vocab), config.char_width), config.char_width),
            "char_emb")
        self.pos_emb = Parameter(
            uniform_init(rng, (len(self.tag_vocab), config.pos_width), config.pos_width),
            "pos_emb")
        self.blstm = BLSTM(config.input_width, config.hidden, config.layers, "blstm", rng)
        self.out = Linear(2 * config.hidden, len(config.labels), "out", rng)
        self.label_index = {lb: i for i, lb in enumerate(config.labels)}
        self._ids_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def parameters(self) -> list[Parameter]:
        return ([self.char_emb, self.pos_emb] + self.blstm.parameters()
                + self.out.parameters())

    def _ids_for(self, sentence: str) -> tuple[np.ndarray, np.ndarray]:
        cached = self._ids_cache.get(sentence)
        if cached is not None:
            return cached
        tagged = tokenize_and_tag(sentence, self.lexicon)
        char_ids = np.array([self.char_vocab.get(ch, 1) for ch in sentence], dtype=np.int64)
        w = self.config.context
        n_words = len(tagged.words)
        word_tags = [self.tag_vocab.get(tag, 1) for _, tag in tagged.words]
        pos_ids = np.zeros((len(sentence), 2 * w + 1), dtype=np.int64)
        for t, widx in enumerate(tagged.char_word_index):
            for k, neighbor in enumerate(range(widx - w, widx + w + 1)):
                pos_ids[t, k] = word_tags[neighbor] if 0 <= neighbor < n_words else 0
        self._ids_cache[sentence] = (char_ids, pos_ids)
        return char_ids, pos_ids

    def build_input(self, sentence: str) -> Tensor:
        """Embedding sequence (length, char_width + (2w+1) * pos_width)."""
        char_ids, pos_ids = self._ids_for(sentence)
        return self._embed_batch(char_ids[None, :], pos_ids[None, :, :])[0]

    def _embed_batch(self, char_ids: np.ndarray, pos_ids: np.ndarray) -> Tensor:
        batch, length, ctx = pos_ids.shape
        char_part = self.char_emb[char_ids]
        pos_part = T.reshape(self.pos_emb[pos_ids],
                             (batch, length, ctx * self.config.pos_width))
        return T.concat([char_part, pos_part], axis=2)

    def _logits(self, sentences) -> Tensor:
        char_ids = np.stack([self._ids_for(s)[0] for s in sentences])
        pos_ids = np.stack([self._ids_for(s)[1] for s in sentences])
        x = self._embed_batch(char_ids, pos_ids)
        return self.out(self.blstm(x))

    def forward(self, sentences) -> Tensor:
        """Label probabilities (batch, length, n_labels); sentences must share
        one length."""
        return T.softmax(self._logits(sentences), axis=-1)

    def predict_label(self, sentence: str, position: int) -> str:
        probs = self.forward([sentence]).data[0]
        return self.config.labels[int(np.argmax(probs[position]))]


@dataclass
class BaselineTrainConfig:
    lr: float = 3e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5


def _grouped_batches(items, key, batch_size, rng=None):
    by_key: dict = {}
    for idx, item in enumerate(items):
        by_key.setdefault(key(item), []).append(idx)
    batches = []
    for k in sorted(by_key):
        group = by_key[k]
        if rng is not None:
            group = [group[j] for j in rng.permutation(len(group))]
        for start in range(0, len(group), batch_size):
            batches.append([items[i] for i in group[start:start + batch_size]])
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _instance_loss(model: BaselineModel, batch):
    """Cross-entropy at the annotated positions only; other positions do not
    contribute."""
    logits = model._logits([s for s, _, _ in batch])
    rows = np.arange(len(batch))
    positions = np.array([pos for _, pos, _ in batch])
    labels = np.array([model.label_index[lb] for _, _, lb in batch])
    picked = logits[rows, positions]
    return T.softmax_cross_entropy(picked, labels), picked


def evaluate_baseline(model: BaselineModel, instances, batch_size: int = 64):
    """(mean loss, accuracy) at annotated positions."""
    loss_sum = 0.0
    correct = 0
    for batch in _grouped_batches(instances, lambda it: len(it[0]), batch_size):
        loss, picked = _instance_loss(model, batch)
        loss_sum += loss.item() * len(batch)
        labels = np.array([model.label_index[lb] for _, _, lb in batch])
        correct += int((np.argmax(picked.data, axis=1) == labels).sum())
    return loss_sum / len(instances), correct / len(instances)


def train_baseline(model: BaselineModel, train_set, dev_set,
                   config: BaselineTrainConfig, seed: int = 0):
    """Instances are (sentence, position, label) triples.

    Returns per-epoch rows (epoch, train_loss, dev_acc) with epoch 0 the
    untrained state; restores the best dev-accuracy parameters.
    """
    train_set, dev_set = list(train_set), list(dev_set)
    for _, _, label in train_set + dev_set:
        if label not in model.label_index:
            raise ValueError(f"label {label!r} missing from the baseline label vocabulary")
    opt = Adam(model.parameters(), lr=config.lr)
    history = []
    best = {"acc": -1.0, "epoch": 0, "params": None}

    def record(epoch, train_loss=None):
        if train_loss is None:
            train_loss, _ = evaluate_baseline(model, train_set)
        _, dev_acc = evaluate_baseline(model, dev_set)
        history.append({"epoch": epoch, "train_loss": train_loss, "dev_acc": dev_acc})
        log.info("baseline epoch %d: train loss %.4f dev acc %.4f", epoch, train_loss, dev_acc)
        if dev_acc > best["acc"]:
            best.update(acc=dev_acc, epoch=epoch,
                        params={p.name: p.data.copy() for p in model.parameters()})

    record(0)
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([seed, _TRAIN_STREAM, epoch])
        loss_sum = 0.0
        for batch in _grouped_batches(train_set, lambda it: len(it[0]),
                                      config.batch_size, rng):
            loss, _ = _instance_loss(model, batch)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(batch)
        record(epoch, train_loss=loss_sum / len(train_set))
        if epoch - best["epoch"] >= config.patience:
            break
    if best["params"] is not None:
        for p in model.parameters():
            p.data = best["params"][p.name].copy()
    return history
