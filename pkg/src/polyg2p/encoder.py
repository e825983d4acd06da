"""Character-level transformer encoder with masked-character and
next-sentence pretraining; used frozen as a semantic feature extractor."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, TransformerBlock, normal_init
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = {"<pad>": PAD, "<unk>": UNK, "<cls>": CLS, "<sep>": SEP, "<mask>": MASK}
N_RESERVED = 5

# rng stream tags so independent consumers never share a sequence
_INIT_STREAM, _TRAIN_STREAM, _EVAL_STREAM = 0xE0C, 0xBE27, 0xE7A


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Character to token-id map with reserved ids 0-4."""

    def __init__(self, chars):
        self.char_to_id: dict[str, int] = {}
        for ch in chars:
            if len(ch) != 1:
                raise VocabularyError(f"vocabulary entry {ch!r} is not a single character")
            if ch in self.char_to_id:
                raise VocabularyError(f"duplicate vocabulary character {ch!r}")
            self.char_to_id[ch] = N_RESERVED + len(self.char_to_id)
        self.id_to_char = {i: c for c, i in self.char_to_id.items()}

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        return cls(sorted({ch for text in texts for ch in text}))

    @property
    def size(self) -> int:
        return N_RESERVED + len(self.char_to_id)

    def encode(self, text: str, wrap: bool = False) -> np.ndarray:
        ids = [self.char_to_id.get(ch, UNK) for ch in text]
        if wrap:
            ids = [CLS] + ids + [SEP]
        return np.array(ids, dtype=np.int64)

    def encode_pair(self, a: str, b: str) -> np.ndarray:
        return np.concatenate([[CLS], self.encode(a), [SEP], self.encode(b), [SEP]]).astype(np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# character vocabulary; ids 0-4 are reserved:\n")
            fh.write("# 0=<pad> 1=<unk> 2=<cls> 3=<sep> 4=<mask>\n")
            for ch, i in self.char_to_id.items():
                fh.write(f"{ch}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise VocabularyError(f"{path}:{lineno}: expected 'char<TAB>id'")
                pairs.append((fields[0], int(fields[1])))
        pairs.sort(key=lambda p: p[1])
        if [i for _, i in pairs] != list(range(N_RESERVED, N_RESERVED + len(pairs))):
            raise VocabularyError(f"{path}: ids must be contiguous starting at {N_RESERVED}")
        return cls([ch for ch, _ in pairs])


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ff_width: int = 256
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.vocab_size <= N_RESERVED:
            raise ValueError("vocabulary has no real characters")


class EncoderModel:
    """Character + positional embeddings feeding a transformer stack, plus
    masked-character and next-sentence prediction heads."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, _INIT_STREAM])
        d = config.d_model
        self.char_emb = Parameter(normal_init(rng, (config.vocab_size, d)), "char_emb")
        self.pos_emb = Parameter(normal_init(rng, (config.max_len, d)), "pos_emb")
        self.blocks = [TransformerBlock(d, config.n_heads, config.ff_width,
                                        f"block{i}", rng, config.dropout, init="normal")
                       for i in range(config.n_blocks)]
        self.mlm_proj = Linear(d, config.vocab_size, "mlm", rng, init="normal")
        self.nsp_proj = Linear(d, 2, "nsp", rng, init="normal")

    def parameters(self) -> list[Parameter]:
        params = [self.char_emb, self.pos_emb]
        for block in self.blocks:
            params += block.parameters()
        return params + self.mlm_proj.parameters() + self.nsp_proj.parameters()

    def encoder_parameters(self) -> list[Parameter]:
        """Parameters of the feature extractor (excludes pretraining heads)."""
        params = [self.char_emb, self.pos_emb]
        for block in self.blocks:
            params += block.parameters()
        return params

    def freeze(self) -> "EncoderModel":
        for p in self.parameters():
            p.freeze()
        return self

    @property
    def frozen(self) -> bool:
        return all(not p.trainable for p in self.encoder_parameters())

    def _check_tokens(self, tokens: np.ndarray):
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range for vocabulary of {self.config.vocab_size}")
        return tokens

    def embed(self, tokens: np.ndarray) -> Tensor:
        """Per position: character embedding plus positional embedding."""
        tokens = self._check_tokens(np.asarray(tokens))
        length = tokens.shape[1]
        return self.char_emb[tokens] + self.pos_emb[:length]

    def encode(self, tokens: np.ndarray, valid: np.ndarray | None = None,
               train: bool = False, rng=None, collect_attention: bool = False):
        """Token ids (batch, length) to semantic features (batch, length, d)."""
        tokens = self._check_tokens(np.asarray(tokens))
        x = T.dropout(self.embed(tokens), self.config.dropout, train, rng)
        attention = []
        for block in self.blocks:
            x, weights = block(x, valid, train, rng)
            if collect_attention:
                attention.append(weights)
        if collect_attention:
            return x, attention
        return x

    def features_for(self, vocab: Vocabulary, sentence: str) -> np.ndarray:
        """Inference features for one sentence wrapped in [CLS] .. [SEP].

        A sentence position i corresponds to feature row i + 1.
        """
        tokens = vocab.encode(sentence, wrap=True)
        return self.encode(tokens[None, :]).data[0]


def freeze(model: EncoderModel) -> EncoderModel:
    return model.freeze()


def mask_for_mlm(tokens: np.ndarray, vocab_size: int, mask_rate: float,
                 rng: np.random.Generator):
    """Corrupt a token sequence for masked-character prediction.

    Non-special positions are selected independently at ``mask_rate``; at
    least one position is always selected.  Selected positions become
    ``<mask>`` 80% of the time, a random character 10%, unchanged 10%.
    Returns (corrupted, positions, original ids).
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = np.nonzero(tokens >= N_RESERVED)[0]
    if maskable.size == 0:
        raise ValueError("sequence has no maskable positions")
    selected = maskable[rng.random(maskable.size) < mask_rate]
    if selected.size == 0:
        selected = maskable[[int(rng.integers(maskable.size))]]
    corrupted = tokens.copy()
    originals = tokens[selected].copy()
    roll = rng.random(selected.size)
    for pos, r in zip(selected, roll):
        if r < 0.8:
            corrupted[pos] = MASK
        elif r < 0.9:
            corrupted[pos] = int(rng.integers(N_RESERVED, vocab_size))
    return corrupted, selected, originals


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    mask_rate: float = 0.15
    eval_fraction: float = 0.1
    max_pairs: int | None = None


def build_sentence_pairs(sentences) -> list[tuple[str, str]]:
    """Consecutive pairs from an ordered sentence stream."""
    return [(a, b) for a, b in zip(sentences, sentences[1:])]


def _prepare_examples(vocab: Vocabulary, pairs, rng: np.random.Generator):
    """Tokenize pairs; half get their second sentence replaced at random."""
    pool = [b for _, b in pairs]
    examples = []
    negative = rng.random(len(pairs)) < 0.5
    for idx, (a, b) in enumerate(pairs):
        if negative[idx]:
            swap = int(rng.integers(len(pool)))
            if pool[swap] == b and len(pool) > 1:
                swap = (swap + 1) % len(pool)
            b = pool[swap]
        examples.append((vocab.encode_pair(a, b), int(not negative[idx])))
    return examples


def _batched(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _mlm_nsp_batch(model, vocab_size, examples, idx_batch, mask_rate, rng, train):
    """Assemble one padded batch and return its loss graph and counts."""
    chosen = [examples[i] for i in idx_batch]
    max_len = max(len(tokens) for tokens, _ in chosen)
    batch = np.full((len(chosen), max_len), PAD, dtype=np.int64)
    valid = np.zeros((len(chosen), max_len), dtype=bool)
    rows, cols, targets = [], [], []
    nsp_labels = np.empty(len(chosen), dtype=np.int64)
    for r, (tokens, is_next) in enumerate(chosen):
        corrupted, positions, originals = mask_for_mlm(tokens, vocab_size, mask_rate, rng)
        batch[r, :len(tokens)] = corrupted
        valid[r, :len(tokens)] = True
        rows += [r] * len(positions)
        cols += list(positions)
        targets += list(originals)
        nsp_labels[r] = is_next
    features = model.encode(batch, valid=valid, train=train, rng=rng)
    mlm_logits = model.mlm_proj(features[np.array(rows), np.array(cols)])
    mlm_loss = T.softmax_cross_entropy(mlm_logits, np.array(targets))
    nsp_logits = model.nsp_proj(features[:, 0, :])
    nsp_loss = T.softmax_cross_entropy(nsp_logits, nsp_labels)
    nsp_correct = int((np.argmax(nsp_logits.data, axis=1) == nsp_labels).sum())
    return mlm_loss, nsp_loss, len(targets), len(chosen), nsp_correct


def evaluate_pretrain(model: EncoderModel, vocab: Vocabulary, examples,
                      mask_rate: float, seed: int, batch_size: int = 64):
    """Inference-mode MLM/NSP losses and NSP accuracy over fixed examples."""
    rng = np.random.default_rng([seed, _EVAL_STREAM])
    mlm_sum = nsp_sum = 0.0
    n_mlm = n_nsp = n_correct = 0
    for idx_batch in _batched(list(range(len(examples))), batch_size):
        mlm, nsp, k_mlm, k_nsp, correct = _mlm_nsp_batch(
            model, vocab.size, examples, idx_batch, mask_rate, rng, train=False)
        mlm_sum += mlm.item() * k_mlm
        nsp_sum += nsp.item() * k_nsp
        n_mlm += k_mlm
        n_nsp += k_nsp
        n_correct += correct
    return mlm_sum / n_mlm, nsp_sum / n_nsp, n_correct / n_nsp


def pretrain(model: EncoderModel, vocab: Vocabulary, pairs,
             config: PretrainConfig, seed: int):
    """Train masked-character and next-sentence objectives jointly.

    Returns per-epoch history rows (epoch, mlm_loss, nsp_loss, nsp_accuracy)
    evaluated on a held-out slice of the pairs; epoch 0 is the untrained
    model.
    """
    from .optim import Adam

    if not pairs:
        raise ValueError("no sentence pairs to pretrain on")
    rng = np.random.default_rng([seed, _TRAIN_STREAM])
    if config.max_pairs is not None and len(pairs) > config.max_pairs:
        pick = rng.choice(len(pairs), size=config.max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    examples = _prepare_examples(vocab, pairs, rng)
    n_eval = max(1, int(len(examples) * config.eval_fraction))
    eval_examples = examples[-n_eval:]
    train_examples = examples[:-n_eval] or examples

    opt = Adam(model.parameters(), lr=config.lr)
    history = []

    def record(epoch):
        mlm, nsp, acc = evaluate_pretrain(model, vocab, eval_examples,
                                          config.mask_rate, seed=seed + epoch)
        history.append({"epoch": epoch, "mlm_loss": mlm, "nsp_loss": nsp,
                        "nsp_accuracy": acc})
        log.info("pretrain epoch %d: mlm %.4f nsp %.4f acc %.3f", epoch, mlm, nsp, acc)

    record(0)
    order = np.arange(len(train_examples))
    for epoch in range(1, config.epochs + 1):
        epoch_rng = np.random.default_rng([seed, _TRAIN_STREAM, epoch])
        epoch_rng.shuffle(order)
        for idx_batch in _batched(order, config.batch_size):
            mlm, nsp, *_ = _mlm_nsp_batch(model, vocab.size, train_examples,
                                          idx_batch, config.mask_rate,
                                          epoch_rng, train=True)
            loss = mlm + nsp
            loss.backward()
            opt.step()
        record(epoch)
    return history
