"""Synthetic multimodal tasks whose labels require fusing text and image.

Two tasks share one 64-token vocabulary and one family of 8x8 stripe images:

* entity tagging: each sequence carries 1-2 spans opened by an ambiguous
  trigger token; the span's entity type (X vs Y) equals the image stripe
  orientation, so text alone decides the type at coin-flip accuracy.
* sentiment: one cue token c in {0,1,2} plus stripe orientation p in {0,1}
  give label (c + p) mod 3; text alone caps at 1/2, image alone at 1/3.

Every example draws from its own counter-based stream keyed by
(seed, split, index), so splits are disjoint and generation order free.
"""

import dataclasses
import json

import numpy as np

from muse.heads import LabelScheme
from muse.tensor import ConfigError, ShapeError

SEQ_LEN = 12
VOCAB_SIZE = 64
GRID_SIZE = 8
NUM_SENTIMENT_CLASSES = 3

# vocabulary layout: 0 is the decoder's BOS and never appears in sequences
BOS_ID = 0
CUE_BASE = 1          # ids 1..3 encode sentiment cue c = id - 1
TRIGGER_BASE = 4      # ids 4..7 open entity spans, type decided by the image
CONTINUATION_BASE = 8  # ids 8..11 continue spans
BACKGROUND_BASE = 12   # ids 12..63 are filler

NUM_CUES = 3
NUM_TRIGGERS = 4
NUM_CONTINUATIONS = 4

STRIPE_HI = 0.9
STRIPE_LO = 0.1

MNER_LABELS = ["O", "B-X", "I-X", "B-Y", "I-Y"]

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def mner_scheme():
    return LabelScheme(list(MNER_LABELS))


@dataclasses.dataclass
class SynthExample:
    tokens: list
    image: np.ndarray
    mner_labels: list = None
    msa_label: int = None
    meta: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class TaskConfig:
    task: str
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 500
    seed: int = 0
    noise_pixels: int = 4

    def validate(self):
        if self.task not in ("mner", "msa"):
            raise ConfigError("task must be 'mner' or 'msa', got %r" % (self.task,))
        for field in ("train_size", "val_size", "test_size"):
            if getattr(self, field) < 1:
                raise ConfigError("%s must be >= 1, got %d" % (field, getattr(self, field)))
        if not 0 <= self.noise_pixels <= GRID_SIZE * GRID_SIZE:
            raise ConfigError("noise_pixels must be in [0, 64], got %d" % self.noise_pixels)
        return self


@dataclasses.dataclass
class DatasetSplits:
    train: list
    val: list
    test: list

    def split(self, name):
        if name not in SPLIT_IDS:
            raise ConfigError("unknown split %r" % (name,))
        return getattr(self, name)


def example_rng(seed, split_id, index):
    """Counter-based stream so each example is independent of all others."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, split_id, index])))


def stripe_grid(pattern):
    """Orientation 0: rows alternate hi/lo.  Orientation 1: columns."""
    grid = np.empty((GRID_SIZE, GRID_SIZE))
    for i in range(GRID_SIZE):
        value = STRIPE_HI if i % 2 == 0 else STRIPE_LO
        if pattern == 0:
            grid[i, :] = value
        else:
            grid[:, i] = value
    return grid


def apply_pixel_noise(grid, noise_pixels, rng):
    """Swap hi<->lo at distinct cells by replacement, not arithmetic, so the
    stored values stay exactly the two stripe literals."""
    if noise_pixels == 0:
        return grid
    cells = rng.choice(GRID_SIZE * GRID_SIZE, size=noise_pixels, replace=False)
    flat = grid.reshape(-1)
    for cell in cells:
        flat[cell] = STRIPE_LO if flat[cell] == STRIPE_HI else STRIPE_HI
    return grid


def _background_token(rng):
    return BACKGROUND_BASE + int(rng.integers(0, VOCAB_SIZE - BACKGROUND_BASE))


def _make_mner_example(rng, noise_pixels):
    pattern = int(rng.integers(0, 2))
    num_spans = 1 + int(rng.integers(0, 2))
    lengths = [1 + int(rng.integers(0, 3)) for _ in range(num_spans)]

    tokens = [0] * SEQ_LEN
    labels = [0] * SEQ_LEN
    begin_id = 1 + 2 * pattern
    inside_id = 2 + 2 * pattern

    # place spans left to right, spending slack between them
    slack = SEQ_LEN - sum(lengths)
    cursor = 0
    trigger_positions = []
    for length in lengths:
        gap = int(rng.integers(0, slack + 1))
        slack -= gap
        cursor += gap
        trigger_positions.append(cursor)
        tokens[cursor] = TRIGGER_BASE + int(rng.integers(0, NUM_TRIGGERS))
        labels[cursor] = begin_id
        for offset in range(1, length):
            tokens[cursor + offset] = CONTINUATION_BASE + int(rng.integers(0, NUM_CONTINUATIONS))
            labels[cursor + offset] = inside_id
        cursor += length
    for pos in range(SEQ_LEN):
        if tokens[pos] == 0:
            tokens[pos] = _background_token(rng)

    image = apply_pixel_noise(stripe_grid(pattern), noise_pixels, rng)
    meta = {"pattern": pattern, "trigger_positions": trigger_positions}
    return SynthExample(tokens=tokens, image=image, mner_labels=labels, meta=meta)


def _make_msa_example(rng, noise_pixels):
    pattern = int(rng.integers(0, 2))
    cue = int(rng.integers(0, NUM_CUES))
    cue_position = int(rng.integers(0, SEQ_LEN))

    tokens = [_background_token(rng) for _ in range(SEQ_LEN)]
    tokens[cue_position] = CUE_BASE + cue
    label = (cue + pattern) % NUM_SENTIMENT_CLASSES

    image = apply_pixel_noise(stripe_grid(pattern), noise_pixels, rng)
    meta = {"pattern": pattern, "cue_position": cue_position}
    return SynthExample(tokens=tokens, image=image, msa_label=label, meta=meta)


def generate_example(task, seed, split_id, index, noise_pixels):
    rng = example_rng(seed, split_id, index)
    if task == "mner":
        return _make_mner_example(rng, noise_pixels)
    return _make_msa_example(rng, noise_pixels)


def generate_task(cfg):
    """Build all three splits for one task; deterministic given cfg.seed."""
    cfg.validate()
    splits = {}
    sizes = {"train": cfg.train_size, "val": cfg.val_size, "test": cfg.test_size}
    for name, split_id in SPLIT_IDS.items():
        splits[name] = [
            generate_example(cfg.task, cfg.seed, split_id, index, cfg.noise_pixels)
            for index in range(sizes[name])
        ]
    return DatasetSplits(train=splits["train"], val=splits["val"], test=splits["test"])


# ---------------------------------------------------------------------------
# JSON-lines persistence


def example_to_dict(example, task):
    record = {"tokens": list(example.tokens), "image": example.image.tolist()}
    if task == "mner":
        record["labels"] = list(example.mner_labels)
    else:
        record["label"] = int(example.msa_label)
    return record


def _derive_meta(task, tokens, labels_or_label):
    scheme = mner_scheme()
    if task == "mner":
        positions = [i for i, y in enumerate(labels_or_label) if scheme.is_begin(y)]
        pattern = 0 if scheme.entity_type(labels_or_label[positions[0]]) == "X" else 1
        return {"pattern": pattern, "trigger_positions": positions}
    cue_position = next(i for i, t in enumerate(tokens) if CUE_BASE <= t < CUE_BASE + NUM_CUES)
    cue = tokens[cue_position] - CUE_BASE
    pattern = (labels_or_label - cue) % NUM_SENTIMENT_CLASSES
    return {"pattern": pattern, "cue_position": cue_position}


def example_from_dict(record, task):
    required = "labels" if task == "mner" else "label"
    for key in ("tokens", "image", required):
        if key not in record:
            raise ConfigError("record for task %r is missing %r" % (task, key))
    tokens = [int(t) for t in record["tokens"]]
    if len(tokens) != SEQ_LEN:
        raise ShapeError("expected %d tokens, got %d" % (SEQ_LEN, len(tokens)))
    if any(not 1 <= t < VOCAB_SIZE for t in tokens):
        raise ConfigError("token ids must be in [1, %d)" % VOCAB_SIZE)
    image = np.array(record["image"], dtype=np.float64)
    if image.shape != (GRID_SIZE, GRID_SIZE):
        raise ShapeError("image must be %dx%d, got %r" % (GRID_SIZE, GRID_SIZE, image.shape))
    if task == "mner":
        labels = [int(y) for y in record["labels"]]
        if len(labels) != SEQ_LEN:
            raise ShapeError("expected %d labels, got %d" % (SEQ_LEN, len(labels)))
        return SynthExample(
            tokens=tokens, image=image, mner_labels=labels,
            meta=_derive_meta(task, tokens, labels),
        )
    label = int(record["label"])
    if not 0 <= label < NUM_SENTIMENT_CLASSES:
        raise ConfigError("label must be in [0, %d), got %d" % (NUM_SENTIMENT_CLASSES, label))
    return SynthExample(
        tokens=tokens, image=image, msa_label=label,
        meta=_derive_meta(task, tokens, label),
    )


def save_jsonl(examples, path, task):
    with open(path, "w") as handle:
        for example in examples:
            handle.write(json.dumps(example_to_dict(example, task)) + "\n")


def load_jsonl(path, task):
    examples = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                examples.append(example_from_dict(json.loads(line), task))
    return examples


# ---------------------------------------------------------------------------
# batching


def make_batches(dataset, batch_size, rng):
    """Shuffled batches; the last one keeps the remainder."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1, got %d" % batch_size)
    order = rng.permutation(len(dataset))
    return [
        [dataset[i] for i in order[start:start + batch_size]]
        for start in range(0, len(dataset), batch_size)
    ]


# ---------------------------------------------------------------------------
# metrics


def extract_spans(labels, scheme):
    """Exact spans as (start, end_exclusive, type) sets.

    An I- tag without a live span of the same type opens a new span, so
    malformed predictions still yield a deterministic span set.
    """
    spans = []
    start = None
    current = None
    for pos, label_id in enumerate(labels):
        kind = scheme.entity_type(label_id)
        begins = scheme.is_begin(label_id)
        if current is not None and (kind != current or begins):
            spans.append((start, pos, current))
            current = None
        if kind is not None and current is None:
            start, current = pos, kind
    if current is not None:
        spans.append((start, len(labels), current))
    return set(spans)


def span_f1(pred_labels, gold_labels, scheme):
    if len(pred_labels) != len(gold_labels):
        raise ShapeError(
            "label lengths differ: %d vs %d" % (len(pred_labels), len(gold_labels))
        )
    pred = extract_spans(pred_labels, scheme)
    gold = extract_spans(gold_labels, scheme)
    return _prf(len(pred & gold), len(pred), len(gold))


def corpus_span_f1(pred_seqs, gold_seqs, scheme):
    """Micro-averaged P/R/F1 over many sequences."""
    if len(pred_seqs) != len(gold_seqs):
        raise ShapeError("sequence counts differ: %d vs %d" % (len(pred_seqs), len(gold_seqs)))
    correct = predicted = golden = 0
    for pred_labels, gold_labels in zip(pred_seqs, gold_seqs):
        if len(pred_labels) != len(gold_labels):
            raise ShapeError(
                "label lengths differ: %d vs %d" % (len(pred_labels), len(gold_labels))
            )
        pred = extract_spans(pred_labels, scheme)
        gold = extract_spans(gold_labels, scheme)
        correct += len(pred & gold)
        predicted += len(pred)
        golden += len(gold)
    return _prf(correct, predicted, golden)


def _prf(correct, predicted, golden):
    precision = correct / predicted if predicted else 0.0
    recall = correct / golden if golden else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def trigger_type_accuracy(pred_seqs, gold_seqs, scheme):
    """Of the gold span-opening positions, how often the predicted label
    carries the right entity type (O at a trigger counts as wrong)."""
    hits = total = 0
    for pred_labels, gold_labels in zip(pred_seqs, gold_seqs):
        for pos, gold_id in enumerate(gold_labels):
            if scheme.is_begin(gold_id):
                total += 1
                if scheme.entity_type(pred_labels[pos]) == scheme.entity_type(gold_id):
                    hits += 1
    return hits / total if total else 0.0
