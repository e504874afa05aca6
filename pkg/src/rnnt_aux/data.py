"""Synthetic transducer task with frame alignments and context-dependent state labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TYINGS = ("center-only", "left-center", "triple")
FORMAT = "rnnt-aux-dataset"


class DatasetFormatError(ValueError):
    pass


@dataclass
class SyntheticTaskSpec:
    base_symbols: int = 8
    feature_dim: int = 16
    dur_min: int = 1
    dur_max: int = 3
    noise_std: float = 0.3
    u_min: int = 2
    u_max: int = 10
    seed: int = 0
    context_tying: str = "left-center"

    def __post_init__(self):
        if self.base_symbols < 2:
            raise ValueError("base_symbols must be >= 2")
        if self.dur_min < 1 or self.dur_max < self.dur_min:
            raise ValueError("need 1 <= dur_min <= dur_max")
        if self.u_min < 1 or self.u_max < self.u_min:
            raise ValueError("need 1 <= u_min <= u_max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.context_tying not in TYINGS:
            raise ValueError(f"context_tying must be one of {TYINGS}")

    @property
    def vocab_size(self) -> int:
        return self.base_symbols + 1

    @property
    def state_vocab_size(self) -> int:
        return StateVocabulary(self.base_symbols, self.context_tying).size


@dataclass(frozen=True)
class StateVocabulary:
    """Index arithmetic over (left, center, right) symbol contexts.

    Context symbols range over 0..G-1 plus the boundary sentinel G.
    """
    base_symbols: int
    tying: str

    @property
    def size(self) -> int:
        G = self.base_symbols
        return {"center-only": G, "left-center": G * (G + 1), "triple": (G + 1) * G * (G + 1)}[self.tying]

    def index(self, left: int, center: int, right: int) -> int:
        G = self.base_symbols
        if self.tying == "center-only":
            return center
        if self.tying == "left-center":
            return left * G + center
        return (left * G + center) * (G + 1) + right

    def center(self, state):
        G = self.base_symbols
        state = np.asarray(state)
        if self.tying == "center-only":
            return state
        if self.tying == "left-center":
            return state % G
        return (state // (G + 1)) % G


@dataclass
class Utterance:
    id: str
    features: np.ndarray          # (T, d)
    labels: np.ndarray            # (U,), 1-based symbols
    frame_states: np.ndarray      # (T,)

    def __eq__(self, other):
        return (isinstance(other, Utterance) and self.id == other.id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.frame_states, other.frame_states))


@dataclass
class Dataset:
    utterances: list[Utterance]
    vocab_size: int
    state_vocab_size: int
    spec: SyntheticTaskSpec | None = None
    prototypes: np.ndarray | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.utterances)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.utterances[i] for i in indices], self.vocab_size,
                       self.state_vocab_size, self.spec, self.prototypes)


def generate_dataset(spec: SyntheticTaskSpec, n_utterances: int) -> Dataset:
    """Draw ``n_utterances`` utterances; features are normalised over the whole draw.

    Adjacent symbols in a transcript always differ, otherwise repeated
    symbols would be acoustically indistinguishable from longer durations.
    """
    if n_utterances <= 0:
        raise ValueError("n_utterances must be positive")
    rng = np.random.default_rng(spec.seed)
    G, d = spec.base_symbols, spec.feature_dim
    vocab = StateVocabulary(G, spec.context_tying)
    prototypes = rng.standard_normal((G, d))
    raw = []
    for n in range(n_utterances):
        U = int(rng.integers(spec.u_min, spec.u_max + 1))
        symbols = []
        for _ in range(U):
            choices = [g for g in range(G) if not symbols or g != symbols[-1]]
            symbols.append(int(rng.choice(choices)))
        durs = rng.integers(spec.dur_min, spec.dur_max + 1, size=U)
        frame_sym, states = [], []
        for i, (g, k) in enumerate(zip(symbols, durs)):
            left = symbols[i - 1] if i > 0 else G
            right = symbols[i + 1] if i + 1 < U else G
            frame_sym += [g] * int(k)
            states += [vocab.index(left, g, right)] * int(k)
        feats = prototypes[frame_sym]
        feats = feats + spec.noise_std * rng.standard_normal(feats.shape)
        raw.append((f"utt{n:05d}", feats, np.array(symbols, dtype=np.int64) + 1,
                    np.array(states, dtype=np.int64)))
    all_frames = np.concatenate([r[1] for r in raw])
    mu = all_frames.mean(axis=0)
    sd = all_frames.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    utts = [Utterance(i, (f - mu) / sd, y, s) for i, f, y, s in raw]
    return Dataset(utts, spec.vocab_size, vocab.size, spec, (prototypes - mu) / sd)


def split_dataset(ds: Dataset, sizes: dict[str, int]) -> dict[str, Dataset]:
    out, start = {}, 0
    for name, n in sizes.items():
        out[name] = ds.subset(range(start, start + n))
        start += n
    return out


def spec_augment_mask(x, freq_masks: int, max_freq_width: int, time_masks: int, max_time_width: int,
                      seed=None) -> np.ndarray:
    """Zero random channel bands and time bands of a (T, d) copy of ``x``.

    Widths are uniform on 0..max_width; masked entries take the normalised
    mean, 0.  ``seed`` may be an int or a numpy Generator.
    """
    x = np.array(x, dtype=np.float64)
    T, d = x.shape
    if max_freq_width > d or max_time_width > T:
        raise ValueError("mask width exceeds the feature dimension or frame count")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(freq_masks):
        w = int(rng.integers(0, max_freq_width + 1))
        f0 = int(rng.integers(0, d - w + 1))
        x[:, f0:f0 + w] = 0.0
    for _ in range(time_masks):
        w = int(rng.integers(0, max_time_width + 1))
        t0 = int(rng.integers(0, T - w + 1))
        x[t0:t0 + w, :] = 0.0
    return x


# -- file I/O ------------------------------------------------------------------------------------

def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": 1,
        "vocab_size": ds.vocab_size,
        "state_vocab_size": ds.state_vocab_size,
        "num_utterances": len(ds),
        "spec": asdict(ds.spec) if ds.spec is not None else None,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for u in ds.utterances:
            fh.write(json.dumps({
                "id": u.id,
                "features": u.features.tolist(),
                "labels": u.labels.tolist(),
                "frame_states": u.frame_states.tolist(),
            }) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: line 1: malformed header ({e.msg})") from None
    if header.get("format") != FORMAT:
        raise DatasetFormatError(f"{path}: line 1: not a {FORMAT} file")
    V, S = int(header["vocab_size"]), int(header["state_vocab_size"])
    utts = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            feats = np.array(rec["features"], dtype=np.float64)
            labels = np.array(rec["labels"], dtype=np.int64).reshape(-1)
            states = np.array(rec["frame_states"], dtype=np.int64).reshape(-1)
            uid = str(rec["id"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed utterance ({e})") from None
        if feats.ndim != 2 or feats.shape[0] != states.shape[0]:
            raise DatasetFormatError(f"{path}: line {lineno}: features/frame_states length mismatch")
        if labels.size and (labels.min() < 1 or labels.max() >= V):
            raise DatasetFormatError(f"{path}: line {lineno}: label outside vocab_size {V}")
        if states.size and (states.min() < 0 or states.max() >= S):
            raise DatasetFormatError(f"{path}: line {lineno}: frame state outside state_vocab_size {S}")
        utts.append(Utterance(uid, feats, labels, states))
    if "num_utterances" in header and header["num_utterances"] != len(utts):
        raise DatasetFormatError(
            f"{path}: line {len(lines) + 1}: header promises {header['num_utterances']} utterances, found {len(utts)}")
    spec = SyntheticTaskSpec(**header["spec"]) if header.get("spec") else None
    return Dataset(utts, V, S, spec)


# -- batching --------------------------------------------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray          # (B, T, d), zero padded
    frame_lengths: np.ndarray     # (B,)
    labels: list[np.ndarray]
    label_lengths: np.ndarray     # (B,)
    states: np.ndarray | None     # (B, T), zero padded

    def prefixes(self) -> np.ndarray:
        """(B, U_max+1) blank-started label prefixes, zero padded."""
        out = np.zeros((len(self.labels), int(self.label_lengths.max(initial=0)) + 1), dtype=np.int64)
        for b, y in enumerate(self.labels):
            out[b, 1:len(y) + 1] = y
        return out


def collate(utts: list[Utterance], features: list[np.ndarray] | None = None) -> Batch:
    feats = features if features is not None else [u.features for u in utts]
    B = len(utts)
    T = max(f.shape[0] for f in feats)
    d = feats[0].shape[1]
    x = np.zeros((B, T, d))
    s = np.zeros((B, T), dtype=np.int64)
    for b, (u, f) in enumerate(zip(utts, feats)):
        x[b, :f.shape[0]] = f
        s[b, :f.shape[0]] = u.frame_states
    return Batch([u.id for u in utts], x, np.array([f.shape[0] for f in feats]),
                 [u.labels for u in utts], np.array([len(u.labels) for u in utts]), s)
