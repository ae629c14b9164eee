"""Seeded generators for the benchmark tasks.

Every generator is a pure function of (seed, config): the same seed gives
a bit-identical batch. Batches carry per-step difficulty annotations
matching what the difficulty figures plot (bits for parity, gates per
vector for logic, digits per vector for addition, sequence length for
sort). Worker seeds should be derived with `derive_seeds`, never by
offsetting the root seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

# Gate ids 1..10, row order (P,Q) = (T,T), (T,F), (F,T), (F,F).
TRUTH_TABLES: dict[str, tuple[int, int, int, int]] = {
    "NOR":     (0, 0, 0, 1),
    "Xq":      (0, 0, 1, 0),
    "ABJ":     (0, 1, 0, 0),
    "XOR":     (0, 1, 1, 0),
    "NAND":    (0, 1, 1, 1),
    "AND":     (1, 0, 0, 0),
    "XNOR":    (1, 0, 0, 1),
    "if/then": (1, 0, 1, 1),
    "then/if": (1, 1, 0, 1),
    "OR":      (1, 1, 1, 0),
}

GATE_NAMES = list(TRUTH_TABLES)
_GATE_ARRAY = np.array([TRUTH_TABLES[name] for name in GATE_NAMES], dtype=np.int64)


def apply_gate(gate_id: int, p: int, q: int) -> int:
    """Evaluate gate `gate_id` (1-based) on (P, Q)."""
    if not 1 <= gate_id <= 10:
        raise ContractError(f"gate id must be in 1..10, got {gate_id}")
    row = (1 - int(p)) * 2 + (1 - int(q))
    return int(_GATE_ARRAY[gate_id - 1, row])


def derive_seeds(root_seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds for workers or replicas (splitmix-style spawn)."""
    return np.random.SeedSequence(root_seed).spawn(count)


@dataclass
class TaskBatch:
    """One minibatch: inputs, class targets, loss mask, difficulty labels."""

    task: str
    inputs: np.ndarray        # (batch, T, input_size) float64
    targets: np.ndarray       # (batch, T, groups) int64 class ids
    target_mask: np.ndarray   # (batch, T) bool; True where loss applies
    difficulty: np.ndarray    # (batch, T) int64; 0 past the sequence end
    lengths: np.ndarray       # (batch,) int64 true sequence lengths

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    def validate(self) -> "TaskBatch":
        b, t, _ = self.inputs.shape
        assert self.targets.shape[:2] == (b, t)
        assert self.target_mask.shape == (b, t)
        assert self.difficulty.shape == (b, t)
        assert self.lengths.shape == (b,)
        # A masked-in position must carry a valid class encoding.
        assert np.all(self.targets[self.target_mask] >= 0)
        return self


@dataclass(frozen=True)
class TaskSpec:
    """Shapes and head layout for one task, with the reference defaults."""

    name: str
    input_size: int
    output_size: int
    head: str                 # "bce" | "softmax"
    groups: int               # simultaneous classifications per step
    classes: int              # classes per group (2 for bce)
    default_batch: int
    default_cell: str
    default_hidden: int
    default_max_steps: int

    def decode(self, outputs: np.ndarray) -> np.ndarray:
        """Argmax / threshold decoding of raw readouts to class ids."""
        if self.head == "bce":
            return (outputs > 0.0).astype(np.int64)      # sigmoid(y) > 0.5
        b, t, _ = outputs.shape
        grouped = outputs.reshape(b, t, self.groups, self.classes)
        return grouped.argmax(axis=3)


TASKS: dict[str, TaskSpec] = {
    "parity":   TaskSpec("parity", 64, 1, "bce", 1, 2, 128, "rnn", 128, 100),
    "logic":    TaskSpec("logic", 102, 1, "bce", 1, 2, 16, "lstm", 128, 100),
    "addition": TaskSpec("addition", 50, 66, "softmax", 6, 11, 32, "lstm", 512, 20),
    "sort":     TaskSpec("sort", 2, 15, "softmax", 1, 15, 16, "lstm", 512, 100),
    "text":     TaskSpec("text", 256, 256, "softmax", 1, 256, 8, "lstm", 1500, 100),
}

ADDITION_SUM_DIGITS = 6
ADDITION_BLANK = 10          # the "beyond the end of the number" class


def task_spec(name: str, **overrides) -> TaskSpec:
    if name not in TASKS:
        raise ContractError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")
    spec = TASKS[name]
    if overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    return spec


def gen_parity(seed, n_bits: int = 64, batch: int = 128,
               count_all_nonzero: bool = False) -> TaskBatch:
    """Static parity vectors: k of n_bits entries set to +/-1, rest zero.

    The target is the parity of the number of +1 entries; with
    `count_all_nonzero` it counts every nonzero entry instead.
    """
    if n_bits < 1:
        raise ContractError(f"n_bits must be >= 1, got {n_bits}")
    rng = np.random.default_rng(seed)
    inputs = np.zeros((batch, 1, n_bits))
    targets = np.zeros((batch, 1, 1), dtype=np.int64)
    difficulty = np.zeros((batch, 1), dtype=np.int64)
    for e in range(batch):
        k = int(rng.integers(1, n_bits + 1))
        positions = rng.choice(n_bits, size=k, replace=False)
        signs = rng.integers(0, 2, size=k) * 2 - 1
        inputs[e, 0, positions] = signs
        ones = int(np.count_nonzero(signs != 0)) if count_all_nonzero \
            else int(np.count_nonzero(signs == 1))
        targets[e, 0, 0] = ones % 2
        difficulty[e, 0] = k
    return TaskBatch("parity", inputs, targets,
                     np.ones((batch, 1), dtype=bool), difficulty,
                     np.ones(batch, dtype=np.int64)).validate()


def gen_logic(seed, batch: int = 16, min_len: int = 1, max_len: int = 10,
              min_gates: int = 1, max_gates: int = 10) -> TaskBatch:
    """Chained binary logic: each vector holds two operand bits and up to
    ten one-hot gate ids; the target is the result of applying the gates
    recursively, carrying the previous vector's target as the hidden
    first operand."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=batch)
    t_max = int(lengths.max())
    inputs = np.zeros((batch, t_max, 102))
    targets = np.zeros((batch, t_max, 1), dtype=np.int64)
    mask = np.zeros((batch, t_max), dtype=bool)
    difficulty = np.zeros((batch, t_max), dtype=np.int64)
    for e in range(batch):
        b0 = int(rng.integers(0, 2))
        for t in range(int(lengths[e])):
            b1 = int(rng.integers(0, 2))
            n_gates = int(rng.integers(min_gates, max_gates + 1))
            gates = rng.integers(1, 11, size=n_gates)
            vec = inputs[e, t]
            if t == 0:
                vec[0] = b0          # hidden on later steps: carried, not shown
            vec[1] = b1
            for i, g in enumerate(gates):
                vec[2 + 10 * i + (int(g) - 1)] = 1.0
            prev2, prev1 = b0, b1
            for g in gates:
                prev2, prev1 = prev1, apply_gate(int(g), prev1, prev2)
            targets[e, t, 0] = prev1
            difficulty[e, t] = n_gates
            mask[e, t] = True
            b0 = prev1               # next vector's implicit first operand
    return TaskBatch("logic", inputs, targets, mask, difficulty,
                     lengths.astype(np.int64)).validate()


def gen_addition(seed, batch: int = 32, min_len: int = 1, max_len: int = 5,
                 min_digits: int = 1, max_digits: int = 5) -> TaskBatch:
    """Cumulative decimal addition.

    Each vector one-hot encodes a D-digit number, least-significant digit
    first; the target from the second step on is the running sum as six
    simultaneous digit classifications, class 10 marking positions past
    the end of the sum. The first step carries no target.
    """
    if max_digits > 5:
        raise ContractError("input vectors hold at most 5 digits")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=batch)
    t_max = int(lengths.max())
    inputs = np.zeros((batch, t_max, 50))
    targets = np.zeros((batch, t_max, ADDITION_SUM_DIGITS), dtype=np.int64)
    mask = np.zeros((batch, t_max), dtype=bool)
    difficulty = np.zeros((batch, t_max), dtype=np.int64)
    for e in range(batch):
        total = 0
        for t in range(int(lengths[e])):
            n_digits = int(rng.integers(min_digits, max_digits + 1))
            digits = rng.integers(0, 10, size=n_digits)    # LSD first
            value = int(sum(int(d) * 10 ** i for i, d in enumerate(digits)))
            for i, d in enumerate(digits):
                inputs[e, t, 10 * i + int(d)] = 1.0
            total += value
            difficulty[e, t] = n_digits
            if t >= 1:
                sum_digits = [int(c) for c in reversed(str(total))]
                row = targets[e, t]
                row[:] = ADDITION_BLANK
                row[:len(sum_digits)] = sum_digits
                mask[e, t] = True
    return TaskBatch("addition", inputs, targets, mask, difficulty,
                     lengths.astype(np.int64)).validate()


def gen_sort(seed, batch: int = 16, min_len: int = 2, max_len: int = 15,
             min_separation: float = 1e-6) -> TaskBatch:
    """Sort standard-normal draws: values arrive one per step with an
    end-of-sequence flag, then the network emits the ascending order as
    index classifications during an equally long output phase.

    Values closer than `min_separation` are redrawn so targets stay
    well defined.
    """
    if not 2 <= min_len <= max_len <= 15:
        raise ContractError("sort lengths must satisfy 2 <= min <= max <= 15")
    rng = np.random.default_rng(seed)
    sort_lens = rng.integers(min_len, max_len + 1, size=batch)
    t_max = 2 * int(sort_lens.max())
    inputs = np.zeros((batch, t_max, 2))
    targets = np.zeros((batch, t_max, 1), dtype=np.int64)
    mask = np.zeros((batch, t_max), dtype=bool)
    difficulty = np.zeros((batch, t_max), dtype=np.int64)
    for e in range(batch):
        n = int(sort_lens[e])
        while True:
            values = rng.standard_normal(n)
            gaps = np.diff(np.sort(values))
            if n == 1 or np.all(gaps >= min_separation):
                break
        inputs[e, :n, 0] = values
        inputs[e, n - 1, 1] = 1.0
        order = np.argsort(values, kind="stable")
        targets[e, n:2 * n, 0] = order
        mask[e, n:2 * n] = True
        difficulty[e, :2 * n] = n
    return TaskBatch("sort", inputs, targets, mask, difficulty,
                     (2 * sort_lens).astype(np.int64)).validate()


def gen_text(corpus: bytes, seed, seq_len: int = 500, batch: int = 8) -> TaskBatch:
    """Next-byte prediction over random windows of a byte corpus."""
    if len(corpus) < seq_len + 1:
        raise ContractError(
            f"corpus of {len(corpus)} bytes is too short for seq_len {seq_len}")
    rng = np.random.default_rng(seed)
    data = np.frombuffer(corpus, dtype=np.uint8)
    offsets = rng.integers(0, len(corpus) - seq_len - 1, size=batch, endpoint=True)
    inputs = np.zeros((batch, seq_len, 256))
    targets = np.zeros((batch, seq_len, 1), dtype=np.int64)
    rows = np.arange(seq_len)
    for e, off in enumerate(offsets):
        window = data[off:off + seq_len + 1].astype(np.int64)
        inputs[e, rows, window[:-1]] = 1.0
        targets[e, :, 0] = window[1:]
    return TaskBatch("text", inputs, targets,
                     np.ones((batch, seq_len), dtype=bool),
                     np.zeros((batch, seq_len), dtype=np.int64),
                     np.full(batch, seq_len, dtype=np.int64)).validate()


_CONSONANTS = "bcdfghjklmnpqrstvwz"
_VOWELS = "aeiou"


def synth_corpus(seed, size: int = 1 << 20, vocab_size: int = 600) -> bytes:
    """Deterministic pseudo-English corpus for the text task.

    Words come from a fixed seeded vocabulary drawn with a 1/rank bias,
    separated by spaces, grouped into comma- and period-delimited
    sentences and paragraph breaks. It exists so the text task has a
    self-contained fixture with word and punctuation structure; point the
    config at any real byte file for actual language data.
    """
    rng = np.random.default_rng(seed)
    words = []
    for _ in range(vocab_size):
        n_syll = int(rng.integers(1, 4))
        word = "".join(
            _CONSONANTS[rng.integers(0, len(_CONSONANTS))]
            + _VOWELS[rng.integers(0, len(_VOWELS))]
            + (_CONSONANTS[rng.integers(0, len(_CONSONANTS))]
               if rng.random() < 0.3 else "")
            for _ in range(n_syll))
        words.append(word)
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    probs = (1.0 / ranks) / (1.0 / ranks).sum()

    chunks: list[str] = []
    total = 0
    sentences_in_paragraph = 0
    while total < size:
        n_words = int(rng.integers(4, 13))
        picks = rng.choice(vocab_size, size=n_words, p=probs)
        tokens = [words[i] for i in picks]
        tokens[0] = tokens[0].capitalize()
        sentence = tokens[0]
        for tok in tokens[1:]:
            sentence += ("," if rng.random() < 0.12 else "") + " " + tok
        sentence += ". "
        sentences_in_paragraph += 1
        if sentences_in_paragraph >= int(rng.integers(4, 9)):
            sentence += "\n\n"
            sentences_in_paragraph = 0
        chunks.append(sentence)
        total += len(sentence)
    return "".join(chunks).encode("ascii")[:size]


GENERATORS = {
    "parity": gen_parity,
    "logic": gen_logic,
    "addition": gen_addition,
    "sort": gen_sort,
    "text": gen_text,
}


BATCH_CSV_SCHEMA = "task-batch-1"


def write_batch_csv(batch: TaskBatch, out) -> None:
    """Golden-fixture serialization: one row per (example, step).

    Columns: example, t, length, mask, difficulty, then `target_g*` for
    each classification group, then `in_*` for the flattened input vector.
    """
    import csv
    close = False
    if isinstance(out, (str, bytes)):
        out = open(out, "w", newline="")
        close = True
    try:
        out.write(f"# schema: {BATCH_CSV_SCHEMA} task: {batch.task}\n")
        writer = csv.writer(out, lineterminator="\n")
        groups = batch.targets.shape[2]
        width = batch.inputs.shape[2]
        writer.writerow(["example", "t", "length", "mask", "difficulty"]
                        + [f"target_g{g}" for g in range(groups)]
                        + [f"in_{i}" for i in range(width)])
        for e in range(batch.batch_size):
            for t in range(batch.inputs.shape[1]):
                writer.writerow(
                    [e, t, int(batch.lengths[e]), int(batch.target_mask[e, t]),
                     int(batch.difficulty[e, t])]
                    + [int(v) for v in batch.targets[e, t]]
                    + [repr(float(v)) for v in batch.inputs[e, t]])
    finally:
        if close:
            out.close()
