"""Synthetic data generation: a templated topic-grammar corpus, synthetic
brain responses with controllable informativeness, PCA reduction, sample
construction under both regimes (sliding-window and sentence-thirds), and
frame-level 3:1:1 splitting.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .adapter import BrainRecording
from .errors import DataError
from .linalg import as_matrix, load_matrix, save_matrix

# ---- topic grammar ----

TOPICS = {
    "harbor": {
        "noun": ["sailor", "boat", "harbor", "wave", "gull", "net", "tide", "anchor", "dock", "fog"],
        "verb": ["watched", "rocked", "drifted", "moored", "circled", "rose", "fell", "creaked"],
        "adj": ["grey", "salty", "old", "quiet", "cold", "wet", "heavy", "distant"],
        "place": ["pier", "bay", "shore", "lighthouse", "channel", "marina"],
    },
    "kitchen": {
        "noun": ["cook", "pot", "bread", "soup", "knife", "onion", "oven", "spoon", "table", "flame"],
        "verb": ["stirred", "simmered", "chopped", "baked", "tasted", "poured", "warmed", "sliced"],
        "adj": ["hot", "fresh", "sweet", "bitter", "golden", "soft", "spicy", "warm"],
        "place": ["stove", "pantry", "counter", "market", "cellar", "garden"],
    },
    "forest": {
        "noun": ["deer", "owl", "pine", "trail", "stream", "moss", "fox", "branch", "leaf", "stone"],
        "verb": ["wandered", "rustled", "slept", "hunted", "flowed", "climbed", "hid", "fell"],
        "adj": ["dark", "green", "silent", "damp", "tall", "wild", "thick", "pale"],
        "place": ["clearing", "ridge", "hollow", "grove", "valley", "thicket"],
    },
    "city": {
        "noun": ["driver", "train", "street", "crowd", "lamp", "window", "tower", "bridge", "engine", "clock"],
        "verb": ["hurried", "waited", "rumbled", "flickered", "crossed", "stopped", "turned", "echoed"],
        "adj": ["busy", "loud", "bright", "narrow", "late", "crowded", "empty", "modern"],
        "place": ["station", "square", "avenue", "subway", "plaza", "corner"],
    },
    "desert": {
        "noun": ["camel", "dune", "sun", "wind", "rock", "lizard", "cactus", "sand", "rider", "star"],
        "verb": ["crossed", "burned", "shifted", "rested", "glowed", "crawled", "blew", "faded"],
        "adj": ["dry", "vast", "red", "endless", "harsh", "bare", "ancient", "still"],
        "place": ["oasis", "canyon", "mesa", "basin", "plateau", "horizon"],
    },
    "library": {
        "noun": ["scholar", "book", "page", "shelf", "candle", "ink", "letter", "map", "scroll", "desk"],
        "verb": ["studied", "copied", "opened", "searched", "whispered", "collected", "translated", "marked"],
        "adj": ["dusty", "rare", "faded", "careful", "worn", "learned", "curious", "patient"],
        "place": ["archive", "hall", "attic", "study", "vault", "gallery"],
    },
}

TEMPLATES = [
    ("the", "adj", "noun", "verb"),
    ("the", "noun", "verb", "slowly"),
    ("a", "adj", "noun", "verb", "near", "the", "place"),
    ("the", "noun", "verb", "by", "the", "place"),
    ("the", "adj", "noun", "verb", "the", "adj", "noun"),
    ("a", "noun", "verb", "while", "the", "noun", "verb"),
    ("the", "adj", "noun", "verb", "in", "the", "adj", "place"),
    ("every", "noun", "verb", "when", "the", "adj", "noun", "verb"),
    ("the", "noun", "and", "the", "noun", "verb", "near", "the", "place"),
    ("one", "adj", "noun", "verb", "as", "the", "noun", "verb", "again"),
]

SLOT_KEYS = ("noun", "verb", "adj", "place")


def synth_sentence(topic: dict, rng: np.random.Generator) -> list[str]:
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    words = []
    for slot in template:
        if slot in SLOT_KEYS:
            pool = topic[slot]
            words.append(pool[rng.integers(len(pool))])
        else:
            words.append(slot)
    return words


def synth_corpus(grammar_seed: int, n_stories: int, story_len: int) -> list[list[list[str]]]:
    """Stories as lists of frames; each frame is a 3-10 word sentence from a
    single topic's vocabulary, so stories are topically coherent."""
    if n_stories < 1:
        raise DataError("n_stories must be >= 1")
    rng = np.random.default_rng(grammar_seed)
    names = sorted(TOPICS)
    stories = []
    for s in range(n_stories):
        topic = TOPICS[names[rng.integers(len(names))]]
        stories.append([synth_sentence(topic, rng) for _ in range(story_len)])
    return stories


def all_corpus_words(stories) -> list[str]:
    return [w for story in stories for frame in story for w in frame]


# ---- synthetic encoder ----

@dataclass
class EncoderSpec:
    """Synthetic stand-in for a BOLD response: a fixed linear projection of a
    semantic vector, smeared over t frames by non-negative weights h summing
    to 1, plus Gaussian noise."""

    projection: np.ndarray  # (c_raw, d)
    h: np.ndarray  # (t,)
    noise_sigma: float
    seed: int

    def __post_init__(self):
        self.projection = as_matrix(self.projection)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if np.any(self.h < 0) or abs(self.h.sum() - 1.0) > 1e-9:
            raise DataError("h entries must be >= 0 and sum to 1")

    @property
    def t(self) -> int:
        return self.h.size

    @property
    def c_raw(self) -> int:
        return self.projection.shape[0]


DEFAULT_H = (0.1, 0.4, 0.4, 0.1)


def semantic_vector(continuation_ids, lm) -> np.ndarray:
    """Mean LM embedding of the continuation tokens (order-free)."""
    rows = lm.embed_tokens(continuation_ids)
    return rows.mean(axis=0)


def make_encoder_spec(
    lm,
    calibration_continuations,
    c_raw: int,
    noise_sigma: float,
    seed: int,
    h=DEFAULT_H,
    signal_scale: float = 1.0,
) -> EncoderSpec:
    """Calibrate the projection so signal components have unit variance at
    signal_scale=1; signal_scale=0 yields the null-information control."""
    rng = np.random.default_rng(seed)
    d = lm.cfg.d
    G = rng.normal(0.0, 1.0, size=(c_raw, d))
    norms = [np.linalg.norm(semantic_vector(m, lm)) for m in calibration_continuations]
    rms = float(np.sqrt(np.mean(np.square(norms)))) or 1.0
    return EncoderSpec(projection=G * (signal_scale / rms), h=np.asarray(h), noise_sigma=noise_sigma, seed=seed)


def synth_brain_encode(continuation_ids, spec: EncoderSpec, lm, frame_id: int) -> np.ndarray:
    """Raw t x c_raw features for one frame; deterministic under (seed, frame_id)."""
    if len(continuation_ids) < 1:
        raise DataError("empty continuation")
    sem = semantic_vector(continuation_ids, lm)
    signal = spec.projection @ sem  # (c_raw,)
    rng = np.random.default_rng([spec.seed, frame_id])
    noise = rng.normal(0.0, spec.noise_sigma, size=(spec.t, spec.c_raw)) if spec.noise_sigma > 0 else 0.0
    return spec.h[:, None] * signal[None, :] + noise


# ---- PCA ----

@dataclass
class PCABasis:
    mean: np.ndarray  # (1, c_raw)
    components: np.ndarray  # (c_raw, c), columns are eigenvectors
    eigenvalues: np.ndarray  # (c,), non-increasing

    def project(self, raw: np.ndarray) -> np.ndarray:
        return (as_matrix(raw) - self.mean) @ self.components


def fit_pca(train_rows: np.ndarray, c: int) -> PCABasis:
    """Eigendecomposition of the training covariance; top-c components."""
    X = as_matrix(train_rows)
    n, c_raw = X.shape
    if c > min(n, c_raw):
        raise DataError(f"c={c} exceeds min(n={n}, c_raw={c_raw})")
    mean = X.mean(axis=0, keepdims=True)
    Xc = X - mean
    cov = Xc.T @ Xc / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:c]
    comps = vecs[:, order]
    # fix signs for cross-run determinism: largest-|.| entry positive
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return PCABasis(mean=mean, components=comps, eigenvalues=vals[order])


def pca_reduce(raw: np.ndarray, c: int, basis: PCABasis | None = None):
    """Project rows onto the top-c principal axes; fit on the given rows if no
    basis is supplied (callers fit on training rows only)."""
    if basis is None:
        basis = fit_pca(raw, c)
    return basis.project(raw), basis


# ---- samples ----

@dataclass
class DataSample:
    prompt_ids: list[int]
    continuation_ids: list[int]
    recording: BrainRecording
    frame_id: int

    def __post_init__(self):
        if not self.continuation_ids:
            raise DataError("continuation must be non-empty")

    @property
    def tr_budget(self) -> int:
        return len(self.continuation_ids)


def build_samples_continuous(stories, vocab, recordings: dict[int, BrainRecording]):
    """Sliding-window regime: per frame, the frame content is the continuation
    and the 1..3 preceding frames give up to three prompts (fewer at story
    start; the first frame yields one empty-prompt sample)."""
    samples = []
    frame_id = 0
    for story in stories:
        frame_ids = list(range(frame_id, frame_id + len(story)))
        for i, frame in enumerate(story):
            cont = [vocab.index.get(w, 2) for w in frame]
            rec = recordings[frame_ids[i]]
            n_windows = min(3, i) if i > 0 else 0
            if n_windows == 0:
                samples.append(DataSample([], cont, rec, frame_ids[i]))
            else:
                for w in range(1, n_windows + 1):
                    prompt_words = [tok for fr in story[i - w : i] for tok in fr]
                    prompt = [vocab.index.get(t, 2) for t in prompt_words]
                    samples.append(DataSample(prompt, cont, rec, frame_ids[i]))
        frame_id += len(story)
    return samples


def split_thirds(n: int) -> tuple[int, int, int]:
    """Balanced thirds, remainder tokens assigned to the earliest pieces."""
    base, rem = divmod(n, 3)
    return tuple(base + (1 if i < rem else 0) for i in range(3))


def build_samples_sentencewise(sentences, vocab, recordings: dict[int, BrainRecording]):
    """Sentence-thirds regime: (first third -> second third) and (first
    two-thirds -> last third). Sentences under 3 tokens are skipped; the skip
    count is returned alongside the samples."""
    samples = []
    skipped = 0
    for frame_id, sent in enumerate(sentences):
        if len(sent) < 3:
            skipped += 1
            continue
        a, b, c = split_thirds(len(sent))
        ids = [vocab.index.get(w, 2) for w in sent]
        rec = recordings[frame_id]
        samples.append(DataSample(ids[:a], ids[a : a + b], rec, frame_id))
        samples.append(DataSample(ids[: a + b], ids[a + b :], rec, frame_id))
    return samples, skipped


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        if np.any(f <= 0):
            raise DataError("split fractions must be positive")
        self.fractions = tuple(f / f.sum())


def split_dataset(samples, spec: SplitSpec):
    """Frame-granularity split: all samples of one frame land in one split;
    split sizes are within one frame of the requested proportions."""
    frames = sorted({s.frame_id for s in samples})
    rng = np.random.default_rng(spec.seed)
    order = [frames[i] for i in rng.permutation(len(frames))]
    n = len(frames)
    n_train = int(np.floor(spec.fractions[0] * n))
    n_valid = int(np.floor(spec.fractions[1] * n))
    assignment = {}
    for i, fid in enumerate(order):
        if i < n_train:
            assignment[fid] = 0
        elif i < n_train + n_valid:
            assignment[fid] = 1
        else:
            assignment[fid] = 2
    out = ([], [], [])
    for s in samples:
        out[assignment[s.frame_id]].append(s)
    return out


# ---- persistence ----

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def all_samples(self):
        return self.train + self.valid + self.test


def save_dataset(ds: Dataset, vocab, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    samples = ds.all_samples
    split_names = (
        ["train"] * len(ds.train) + ["valid"] * len(ds.valid) + ["test"] * len(ds.test)
    )
    feats_path = os.path.join(out_dir, "recordings.bin")
    t, c = samples[0].recording.frames.shape
    stacked = np.vstack([s.recording.frames for s in samples])
    with open(feats_path, "wb") as f:
        save_matrix(f, stacked)
    jsonl_path = os.path.join(out_dir, "samples.jsonl")
    with open(jsonl_path, "w") as f:
        for i, (s, split) in enumerate(zip(samples, split_names)):
            f.write(
                json.dumps(
                    {
                        "split": split,
                        "frame_id": s.frame_id,
                        "prompt": [vocab.tokens[j] for j in s.prompt_ids],
                        "continuation": [vocab.tokens[j] for j in s.continuation_ids],
                        "offset": i * t,
                        "tr_budget": s.tr_budget,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    manifest = {
        "t": t,
        "c": c,
        "counts": {"train": len(ds.train), "valid": len(ds.valid), "test": len(ds.test)},
        "frames": {
            name: len({s.frame_id for s in getattr(ds, name)})
            for name in ("train", "valid", "test")
        },
        "checksums": {
            "recordings.bin": sha256_file(feats_path),
            "samples.jsonl": sha256_file(jsonl_path),
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_dataset(out_dir: str, vocab) -> Dataset:
    with open(os.path.join(out_dir, "manifest.json")) as f:
        manifest = json.load(f)
    for name, digest in manifest["checksums"].items():
        actual = sha256_file(os.path.join(out_dir, name))
        if actual != digest:
            raise DataError(f"checksum mismatch for {name}: dataset corrupted")
    with open(os.path.join(out_dir, "recordings.bin"), "rb") as f:
        stacked = load_matrix(f)
    t = manifest["t"]
    ds = Dataset()
    with open(os.path.join(out_dir, "samples.jsonl")) as f:
        for line in f:
            rec = json.loads(line)
            frames = stacked[rec["offset"] : rec["offset"] + t]
            sample = DataSample(
                prompt_ids=[vocab.index[w] for w in rec["prompt"]],
                continuation_ids=[vocab.index[w] for w in rec["continuation"]],
                recording=BrainRecording(frames, rec["frame_id"]),
                frame_id=rec["frame_id"],
            )
            getattr(ds, rec["split"]).append(sample)
    return ds
