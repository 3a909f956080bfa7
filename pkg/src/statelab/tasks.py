"""Data generators and evaluators: synthetic copying, passkey retrieval, and
byte-level text ingestion.

Every generator is a pure function of (rng, config). Evaluators take a
stateful `step_fn(tokens, state) -> (logits, state)` so they work both with
trained models (via model.make_step_fn) and with hand-written oracles in
tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

Array = np.ndarray

# byte-level vocabulary: raw bytes then specials
N_BYTES = 256
BOS = 256
SEP = 257
EOS = 258
BYTE_VOCAB_SIZE = 259


@dataclass
class TaskSample:
    tokens: Array          # int token ids
    loss_mask: Array       # bool, same length; True = token contributes to loss
    answer_span: tuple[int, int]  # [start, end) of the span scored at eval


@dataclass
class Batch:
    tokens: Array    # [batch, T] inputs
    targets: Array   # [batch, T] next-token targets
    mask: Array      # [batch, T] loss mask over targets
    doc_start: Array | None = None  # [batch] True where the carried state must reset


def sample_to_batch_row(sample: TaskSample, width: int, pad_id: int):
    """Pad a sample to `width + 1` tokens and shift into (input, target, mask)."""
    toks = sample.tokens
    mask = sample.loss_mask
    if len(toks) < width + 1:
        pad = width + 1 - len(toks)
        toks = np.concatenate([toks, np.full(pad, pad_id, dtype=toks.dtype)])
        mask = np.concatenate([mask, np.zeros(pad, dtype=bool)])
    return toks[:width], toks[1:width + 1], mask[1:width + 1]


def samples_to_batch(samples: list[TaskSample], pad_id: int) -> Batch:
    width = max(len(s.tokens) for s in samples) - 1
    rows = [sample_to_batch_row(s, width, pad_id) for s in samples]
    return Batch(
        tokens=np.stack([r[0] for r in rows]),
        targets=np.stack([r[1] for r in rows]),
        mask=np.stack([r[2] for r in rows]),
    )


def export_jsonl(samples: list[TaskSample], path: str | Path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps({
                "tokens": s.tokens.tolist(),
                "mask": s.loss_mask.astype(int).tolist(),
                "answer_span": list(s.answer_span),
            }) + "\n")


# --- synthetic copying ----------------------------------------------------------


@dataclass
class CopyTaskConfig:
    train_len_range: tuple[int, int] = (50, 100)
    eval_len: int = 300
    alphabet_size: int = 26

    @property
    def bos(self) -> int:
        return self.alphabet_size

    @property
    def sep(self) -> int:
        return self.alphabet_size + 1

    @property
    def eos(self) -> int:
        return self.alphabet_size + 2

    @property
    def vocab_size(self) -> int:
        return self.alphabet_size + 3


def copy_generate(rng: np.random.Generator, config: CopyTaskConfig,
                  split: str = "train") -> TaskSample:
    """BOS payload SEP payload EOS, loss only on the second copy and EOS."""
    if split == "train":
        lo, hi = config.train_len_range
        length = int(rng.integers(lo, hi + 1))
    elif split == "eval":
        length = config.eval_len
    else:
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    payload = rng.integers(0, config.alphabet_size, size=length)
    tokens = np.concatenate([
        [config.bos], payload, [config.sep], payload, [config.eos]
    ]).astype(np.int64)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[length + 2:] = True  # second copy + EOS
    return TaskSample(tokens=tokens, loss_mask=mask,
                      answer_span=(length + 2, 2 * length + 2))


def copy_train_stream(config: CopyTaskConfig, batch_size: int, seed: int):
    rng = substream(seed, "data")
    while True:
        samples = [copy_generate(rng, config, "train") for _ in range(batch_size)]
        yield samples_to_batch(samples, pad_id=config.eos)


def copy_eval(step_fn, config: CopyTaskConfig, n_samples: int, seed: int,
              batch_size: int = 32) -> float:
    """Greedy decode after SEP; fraction of payload positions reproduced."""
    rng = substream(seed, "eval")
    L = config.eval_len
    correct = 0
    total = 0
    done = 0
    while done < n_samples:
        b = min(batch_size, n_samples - done)
        samples = [copy_generate(rng, config, "eval") for _ in range(b)]
        tokens = np.stack([s.tokens for s in samples])  # uniform length: 2L+3
        prefix = tokens[:, :L + 2]  # BOS payload SEP
        target = tokens[:, L + 2:2 * L + 2]
        logits, state = step_fn(prefix, None)
        nxt = logits[:, -1].argmax(axis=-1)
        decoded = [nxt]
        for _ in range(L - 1):
            logits, state = step_fn(nxt[:, None], state)
            nxt = logits[:, -1].argmax(axis=-1)
            decoded.append(nxt)
        decoded = np.stack(decoded, axis=1)  # [b, L]
        correct += int((decoded == target).sum())
        total += target.size
        done += b
    return correct / total


# --- passkey retrieval ------------------------------------------------------------

PREAMBLE = ("There is an important info hidden inside a lot of irrelevant text. "
            "Find it and memorize them. I will quiz you about the important "
            "information there.\n")
FILLER = ("The grass is green. The sky is blue. The sun is yellow. Here we go. "
          "There and back again. ")
REVEAL_TEMPLATE = "The pass key is {key}. Remember it. {key} is the pass key.\n"
QUESTION = "What is the pass key? The pass key is "


@dataclass
class PasskeyConfig:
    context_len: int = 512
    depth: float = 0.5
    passkey_digits: int = 5
    preamble: str = PREAMBLE
    filler: str = FILLER
    reveal_template: str = REVEAL_TEMPLATE
    question: str = QUESTION

    def validate(self) -> None:
        if not (0.0 <= self.depth <= 1.0):
            raise ValueError(f"depth must be in [0, 1], got {self.depth}")
        if self.passkey_digits < 1:
            raise ValueError("passkey_digits must be >= 1")


def _filler_bytes(filler: str, n: int, align_end: bool) -> bytes:
    """n bytes of repeated filler; align_end trims from the front (text can
    start mid-sentence, which is also how rendered samples look)."""
    if n == 0:
        return b""
    reps = (n // len(filler)) + 2
    full = (filler * reps).encode("utf-8")
    return full[-n:] if align_end else full[:n]


def passkey_generate(rng: np.random.Generator, config: PasskeyConfig) -> TaskSample:
    """Byte tokens of preamble/filler/reveal/filler/question/answer, trimmed to
    exactly context_len; loss mask true only on the answer digits and period."""
    config.validate()
    key = "".join(str(rng.integers(0, 10)) for _ in range(config.passkey_digits))
    pre = config.preamble.encode("utf-8")
    reveal = config.reveal_template.format(key=key).encode("utf-8")
    question = config.question.encode("utf-8")
    answer = (key + ".").encode("utf-8")
    budget = config.context_len - len(pre) - len(reveal) - len(question) - len(answer)
    if budget < 0:
        raise ValueError(
            f"context_len {config.context_len} too small for template "
            f"(needs >= {config.context_len - budget})"
        )
    k1 = int(round(config.depth * budget))
    k2 = budget - k1
    text = (pre + _filler_bytes(config.filler, k1, align_end=True) + reveal
            + _filler_bytes(config.filler, k2, align_end=False) + question + answer)
    tokens = np.frombuffer(text, dtype=np.uint8).astype(np.int64)
    assert len(tokens) == config.context_len
    mask = np.zeros(len(tokens), dtype=bool)
    start = config.context_len - len(answer)
    mask[start:] = True
    return TaskSample(tokens=tokens, loss_mask=mask,
                      answer_span=(start, config.context_len))


def passkey_reveal_position(sample: TaskSample, config: PasskeyConfig) -> int:
    """Byte index where the reveal sentence starts (for depth checks)."""
    text = bytes(sample.tokens.astype(np.uint8))
    return text.index(b"The pass key is", len(config.preamble))


def passkey_train_stream(config: PasskeyConfig, batch_size: int, seed: int):
    """Finetuning stream: a fresh passkey and uniform depth per sample."""
    rng = substream(seed, "data")
    while True:
        samples = []
        for _ in range(batch_size):
            depth = float(rng.uniform(0.0, 1.0))
            cfg = PasskeyConfig(
                context_len=config.context_len, depth=depth,
                passkey_digits=config.passkey_digits, preamble=config.preamble,
                filler=config.filler, reveal_template=config.reveal_template,
                question=config.question,
            )
            samples.append(passkey_generate(rng, cfg))
        yield samples_to_batch(samples, pad_id=0)


def passkey_eval(step_fn, lengths: list[int], depths: list[float], n_per_cell: int,
                 config: PasskeyConfig, seed: int) -> dict[tuple[int, float], float]:
    """Accuracy grid; a sample is correct iff every greedy digit matches."""
    grid: dict[tuple[int, float], float] = {}
    for li, length in enumerate(lengths):
        for di, depth in enumerate(depths):
            rng = substream(seed, "eval", li, di)
            cfg = PasskeyConfig(
                context_len=length, depth=depth,
                passkey_digits=config.passkey_digits, preamble=config.preamble,
                filler=config.filler, reveal_template=config.reveal_template,
                question=config.question,
            )
            samples = [passkey_generate(rng, cfg) for _ in range(n_per_cell)]
            tokens = np.stack([s.tokens for s in samples])
            start = samples[0].answer_span[0]
            digits = cfg.passkey_digits
            prefix = tokens[:, :start]
            target = tokens[:, start:start + digits]
            logits, state = step_fn(prefix, None)
            nxt = logits[:, -1].argmax(axis=-1)
            decoded = [nxt]
            for _ in range(digits - 1):
                logits, state = step_fn(nxt[:, None], state)
                nxt = logits[:, -1].argmax(axis=-1)
                decoded.append(nxt)
            decoded = np.stack(decoded, axis=1)
            grid[(length, depth)] = float((decoded == target).all(axis=1).mean())
    return grid


# --- byte-level text --------------------------------------------------------------


def encode_bytes(text: str | bytes) -> Array:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def decode_bytes(tokens: Array) -> bytes:
    if np.any(tokens >= N_BYTES) or np.any(tokens < 0):
        raise ValueError("decode_bytes: non-byte token id present")
    return bytes(tokens.astype(np.uint8))


class TextCorpus:
    """Byte-level corpus: documents split on blank lines, seeded train/eval split."""

    def __init__(self, path: str | Path, context_len: int, split_frac: float = 0.9,
                 seed: int = 0):
        raw = Path(path).read_text(encoding="utf-8")
        docs = [d.strip() for d in raw.split("\n\n") if d.strip()]
        if not docs:
            raise ValueError(f"{path}: empty corpus")
        self.context_len = context_len
        self.vocab_size = BYTE_VOCAB_SIZE
        order = substream(seed, "data", 0).permutation(len(docs))
        docs = [encode_bytes(docs[i]) for i in order]
        n_train = max(1, int(round(split_frac * len(docs))))
        if n_train >= len(docs):
            n_train = len(docs) - 1
        self.train_docs = docs[:n_train]
        self.eval_docs = docs[n_train:]
        self.seed = seed

    def train_stream(self, batch_size: int, context_len: int | None = None):
        """Infinite stream of random fixed-length windows from train documents."""
        T = context_len or self.context_len
        rng = substream(self.seed, "data", 1)
        eligible = [d for d in self.train_docs if len(d) >= T + 1]
        if not eligible:
            raise ValueError(f"no train document has >= {T + 1} bytes")
        while True:
            rows = np.empty((batch_size, T + 1), dtype=np.int64)
            for b in range(batch_size):
                doc = eligible[int(rng.integers(len(eligible)))]
                start = int(rng.integers(0, len(doc) - T))
                rows[b] = doc[start:start + T + 1]
            yield Batch(tokens=rows[:, :-1], targets=rows[:, 1:],
                        mask=np.ones((batch_size, T), dtype=bool))

    def tbtt_stream(self, batch_size: int, chunk_len: int):
        """In-order document chunks in `batch_size` parallel lanes; the first
        chunk of each document is flagged so the carried state resets there."""
        rng = substream(self.seed, "data", 2)
        eligible = [d for d in self.train_docs if len(d) >= chunk_len + 1]
        if not eligible:
            raise ValueError(f"no train document has >= {chunk_len + 1} bytes")
        order = rng.permutation(len(eligible))

        def lane(start_idx):
            i = start_idx
            while True:
                doc = eligible[order[i % len(order)]]
                n_chunks = (len(doc) - 1) // chunk_len
                for k in range(n_chunks):
                    lo = k * chunk_len
                    yield doc[lo:lo + chunk_len], doc[lo + 1:lo + chunk_len + 1], k == 0
                i += batch_size

        lanes = [lane(b) for b in range(batch_size)]
        while True:
            parts = [next(l) for l in lanes]
            yield Batch(
                tokens=np.stack([p[0] for p in parts]),
                targets=np.stack([p[1] for p in parts]),
                mask=np.ones((batch_size, chunk_len), dtype=bool),
                doc_start=np.array([p[2] for p in parts]),
            )

    def eval_windows(self, n: int, T_eval: int) -> Array:
        """[n, T_eval+1] leading windows of eval documents."""
        rows = []
        for doc in self.eval_docs:
            if len(doc) >= T_eval + 1:
                rows.append(doc[:T_eval + 1])
            if len(rows) == n:
                break
        if not rows:
            raise ValueError(f"no eval document has >= {T_eval + 1} bytes")
        return np.stack(rows)


def text_ingest(path: str | Path, context_len: int, split_frac: float = 0.9,
                seed: int = 0) -> TextCorpus:
    return TextCorpus(path, context_len, split_frac, seed)
