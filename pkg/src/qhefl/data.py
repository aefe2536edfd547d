"""Synthetic paired sequence/image datasets, k-mer TF-IDF features and splits."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import ConfigError, InputError, ParseError

ALPHABET = "ACGT"
SEQ = "sequence"
IMG = "image"


# -- containers --------------------------------------------------------------------


@dataclass
class Dataset:
    """Column-oriented samples: per-modality feature arrays and label arrays."""

    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]

    def __post_init__(self):
        sizes = {len(v) for v in self.features.values()} | {len(v) for v in self.labels.values()}
        if len(sizes) > 1:
            raise InputError(f"inconsistent sample counts {sorted(sizes)}")

    def __len__(self):
        return len(next(iter(self.labels.values()))) if self.labels else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset({k: v[idx] for k, v in self.features.items()}, {k: v[idx] for k, v in self.labels.items()})

    @property
    def modalities(self) -> list[str]:
        return list(self.labels)


@dataclass
class MultimodalSample:
    sequence: str
    image: np.ndarray
    labels: dict[str, int]


# -- k-mers and TF-IDF ----------------------------------------------------------------


def kmerize(seq: str, k: int) -> list[str]:
    if k < 1 or len(seq) < k:
        raise InputError(f"need len(seq) >= k >= 1, got len={len(seq)}, k={k}")
    return [seq[i : i + k] for i in range(len(seq) - k + 1)]


@dataclass
class TfidfVocab:
    k: int
    index: dict[str, int]
    df: np.ndarray
    n_docs: int

    @property
    def idf(self) -> np.ndarray:
        return np.log((1.0 + self.n_docs) / (1.0 + self.df)) + 1.0

    def __len__(self):
        return len(self.index)


def tfidf_fit(corpus, k: int = 3, vocabulary=None) -> TfidfVocab:
    """Fit document frequencies.  ``vocabulary`` fixes the token order (default: sorted seen tokens)."""
    corpus = list(corpus)
    if not corpus:
        raise InputError("empty corpus")
    docs = [set(kmerize(s, k)) for s in corpus]
    tokens = sorted(set().union(*docs)) if vocabulary is None else list(vocabulary)
    index = {t: i for i, t in enumerate(tokens)}
    df = np.zeros(len(tokens))
    for d in docs:
        for t in d:
            if t in index:
                df[index[t]] += 1
    return TfidfVocab(k, index, df, len(corpus))


def all_kmers(k: int) -> list[str]:
    out = [""]
    for _ in range(k):
        out = [p + a for p in out for a in ALPHABET]
    return out


def tfidf_transform(vocab: TfidfVocab, seq: str) -> np.ndarray:
    toks = kmerize(seq, vocab.k)
    v = np.zeros(len(vocab))
    for t, c in Counter(toks).items():
        i = vocab.index.get(t)
        if i is not None:
            v[i] = c / len(toks)
    v *= vocab.idf
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 0 else v


def tfidf_matrix(vocab: TfidfVocab, seqs) -> np.ndarray:
    return np.stack([tfidf_transform(vocab, s) for s in seqs]) if len(seqs) else np.zeros((0, len(vocab)))


# -- generation -----------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    samples: int = 800
    seq_classes: int = 4
    img_classes: int = 4
    seq_imbalance: float = 1.0
    img_imbalance: float = 1.0
    seq_len: int = 24
    motif_len: int = 12
    k: int = 3
    motif_noise: float = 0.05
    image_size: int = 16
    image_noise: float = 0.3
    seed: int = 0
    motifs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.samples < 1 or self.seq_classes < 1 or self.img_classes < 1:
            raise ConfigError("samples and class counts must be positive")
        if self.motif_len > self.seq_len:
            raise ConfigError("motif longer than the sequence")
        if min(self.seq_imbalance, self.img_imbalance) < 1.0:
            raise ConfigError("imbalance factor must be >= 1")
        if not 0.0 <= self.motif_noise <= 1.0:
            raise ConfigError("motif noise must be a probability")
        if self.motifs and len(self.motifs) != self.seq_classes:
            raise ConfigError("motif table size must equal the sequence class count")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def class_counts(total: int, classes: int, imbalance: float) -> np.ndarray:
    """Geometric class profile whose max/min ratio approximates ``imbalance``."""
    if classes == 1:
        return np.array([total])
    w = imbalance ** (-np.arange(classes) / (classes - 1))
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    # largest-remainder rounding keeps the total exact
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    if counts.min() < 1:
        raise ConfigError("too few samples for the requested imbalance")
    return counts


def imbalance_factor(labels) -> float:
    counts = np.bincount(np.asarray(labels))
    counts = counts[counts > 0]
    return float(counts.max() / counts.min())


def make_motifs(spec: SyntheticSpec) -> list[str]:
    if spec.motifs:
        return list(spec.motifs)
    rng = np.random.default_rng([spec.seed, 0x6D6F])
    motifs: list[str] = []
    while len(motifs) < spec.seq_classes:
        m = "".join(rng.choice(list(ALPHABET), spec.motif_len))
        if m not in motifs:
            motifs.append(m)
    return motifs


def _labels_for(counts, rng) -> np.ndarray:
    labels = np.repeat(np.arange(len(counts)), counts)
    return labels[rng.permutation(len(labels))]


def gen_sequences(spec: SyntheticSpec) -> tuple[list[str], np.ndarray]:
    """Random ACGT strings with the class motif planted at a random offset."""
    motifs = make_motifs(spec)
    rng = np.random.default_rng([spec.seed, 1])
    labels = _labels_for(class_counts(spec.samples, spec.seq_classes, spec.seq_imbalance), rng)
    alpha = np.array(list(ALPHABET))
    seqs = []
    for i, y in enumerate(labels):
        r = np.random.default_rng([spec.seed, 1, i])
        s = r.choice(alpha, spec.seq_len)
        motif = np.array(list(motifs[y]))
        flip = r.random(spec.motif_len) < spec.motif_noise
        motif[flip] = r.choice(alpha, int(flip.sum()))
        pos = r.integers(0, spec.seq_len - spec.motif_len + 1)
        s[pos : pos + spec.motif_len] = motif
        seqs.append("".join(s))
    return seqs, labels


def blob_centres(classes: int, size: int) -> list[tuple[float, float]]:
    """Blob centres on a near-square grid; 4 classes land in the 4 quadrants."""
    g = math.ceil(math.sqrt(classes))
    step = size / g
    return [((r + 0.5) * step, (c + 0.5) * step) for r in range(g) for c in range(g)][:classes]


def gen_images(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian noise plus a class-positioned blob; shape (N, 1, H, W)."""
    rng = np.random.default_rng([spec.seed, 2])
    labels = _labels_for(class_counts(spec.samples, spec.img_classes, spec.img_imbalance), rng)
    n = spec.image_size
    centres = blob_centres(spec.img_classes, n)
    sigma = n / (3.0 * math.ceil(math.sqrt(spec.img_classes)))
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    imgs = np.empty((len(labels), 1, n, n))
    for i, y in enumerate(labels):
        r = np.random.default_rng([spec.seed, 2, i])
        cy, cx = np.asarray(centres[y]) + r.uniform(-1, 1, 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        imgs[i, 0] = blob + spec.image_noise * r.normal(size=(n, n))
    return imgs, labels


def pair_modalities(seqs, seq_labels, imgs, img_labels, spec: SyntheticSpec) -> list[MultimodalSample]:
    """Pair the i-th sequence with a shuffled image; labels stay independent."""
    if len(seqs) != len(imgs):
        raise InputError("modalities must have equal sample counts")
    perm = np.random.default_rng([spec.seed, 3]).permutation(len(imgs))
    return [
        MultimodalSample(seqs[i], imgs[j], {SEQ: int(seq_labels[i]), IMG: int(img_labels[j])})
        for i, j in enumerate(perm)
    ]


def generate(spec: SyntheticSpec) -> list[MultimodalSample]:
    seqs, sl = gen_sequences(spec)
    imgs, il = gen_images(spec)
    return pair_modalities(seqs, sl, imgs, il, spec)


def to_dataset(samples: list[MultimodalSample], vocab: TfidfVocab) -> Dataset:
    return Dataset(
        {
            SEQ: tfidf_matrix(vocab, [s.sequence for s in samples]),
            IMG: np.stack([s.image for s in samples]).astype(np.float64),
        },
        {
            SEQ: np.array([s.labels[SEQ] for s in samples], dtype=np.int64),
            IMG: np.array([s.labels[IMG] for s in samples], dtype=np.int64),
        },
    )


# -- splitting ------------------------------------------------------------------------


def _round_table(share, row_sums, col_sums) -> np.ndarray:
    """Round each cell of ``share`` up or down so rows hit ``row_sums`` exactly.

    The extra units per row are routed to columns by a max-flow on the
    bipartite (row, column) graph with unit edges, which keeps every cell
    within one of its share.  Column sums match ``col_sums`` whenever that is
    feasible; otherwise columns with a fractional share may take one more.
    """
    base = np.floor(share + 1e-9).astype(np.int64)
    need = np.asarray(row_sums) - base.sum(axis=1)
    r, c = share.shape
    if r == 0:
        return base
    for slack in (0, 1):
        cap_col = np.maximum(np.asarray(col_sums) - base.sum(axis=0), 0)
        if slack:
            cap_col = cap_col + (share.sum(axis=0) % 1 > 1e-9)
        src, sink = 0, r + c + 1
        edges = [(src, 1 + i, need[i]) for i in range(r)]
        edges += [(1 + i, 1 + r + j, 1) for i in range(r) for j in range(c)]
        edges += [(1 + r + j, sink, cap_col[j]) for j in range(c)]
        u, v, w = (np.array(x, dtype=np.int32) for x in zip(*edges))
        graph = csr_matrix((w, (u, v)), shape=(r + c + 2,) * 2)
        flow = maximum_flow(graph, src, sink)
        if flow.flow_value == need.sum():
            f = flow.flow.toarray()[1 : 1 + r, 1 + r : 1 + r + c]
            return base + np.maximum(f, 0)
    raise ConfigError("cannot realise a stratified split for these fractions")


def split(labels, fractions, seed: int) -> list[np.ndarray]:
    """Stratified, seed-deterministic split into index arrays.

    ``labels`` may be 1-D or (N, m) for joint stratification over several
    label columns.  Split sizes are exact largest-remainder roundings of
    ``fractions * N``; each class contributes within one sample of its share.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    lab = np.asarray(labels)
    keys = lab if lab.ndim == 1 else np.unique(lab, axis=0, return_inverse=True)[1].ravel()
    n = len(keys)
    rng = np.random.default_rng([seed, 0x5E])
    classes = np.unique(keys)
    members = {c: rng.permutation(np.flatnonzero(keys == c)) for c in classes}
    totals = np.diff(np.round(np.concatenate([[0.0], np.cumsum(fr)]) * n).astype(np.int64))
    sizes = np.array([len(members[c]) for c in classes])
    alloc = _round_table(sizes[:, None] * fr[None, :], sizes, totals)
    parts: list[list[int]] = [[] for _ in fr]
    for ci, c in enumerate(classes):
        off = 0
        for si in range(len(fr)):
            parts[si].extend(members[c][off : off + alloc[ci, si]])
            off += alloc[ci, si]
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


# -- persistence ------------------------------------------------------------------------

CACHE_MAGIC = b"QDS1"


def save_samples(path, samples: list[MultimodalSample], spec: SyntheticSpec) -> None:
    """Header (spec hash, counts, image shape) then per-sample label/sequence/f32 image records."""
    shape = samples[0].image.shape if samples else (1, spec.image_size, spec.image_size)
    head = json.dumps({"spec_hash": spec.digest(), "count": len(samples), "image_shape": list(shape)}).encode()
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC + struct.pack("<I", len(head)) + head)
        for s in samples:
            seq = s.sequence.encode("utf-8")
            f.write(struct.pack("<HHI", s.labels[SEQ], s.labels[IMG], len(seq)) + seq)
            f.write(s.image.astype("<f4").tobytes())


def load_samples(path) -> tuple[list[MultimodalSample], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CACHE_MAGIC:
        raise ParseError("not a dataset cache file")
    try:
        (hl,) = struct.unpack_from("<I", blob, 4)
        meta = json.loads(blob[8 : 8 + hl])
    except (struct.error, ValueError) as exc:
        raise ParseError(f"corrupt dataset cache header ({exc})") from None
    shape = tuple(meta["image_shape"])
    npx = int(np.prod(shape))
    off = 8 + hl
    out = []
    for _ in range(meta["count"]):
        if off + 8 > len(blob):
            raise ParseError("truncated dataset cache")
        ys, yi, ln = struct.unpack_from("<HHI", blob, off)
        off += 8
        if off + ln + 4 * npx > len(blob):
            raise ParseError("truncated dataset cache")
        seq = blob[off : off + ln].decode("utf-8")
        off += ln
        img = np.frombuffer(blob, dtype="<f4", count=npx, offset=off).reshape(shape).astype(np.float64)
        off += 4 * npx
        out.append(MultimodalSample(seq, img, {SEQ: ys, IMG: yi}))
    return out, meta


def load_feature_csv(path, key: str = "x") -> Dataset:
    """CSV with a ``label`` column plus numeric feature columns."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise InputError(f"{path}: no rows")
    if "label" not in rows[0]:
        raise InputError(f"{path}: missing 'label' column")
    cols = [c for c in rows[0] if c != "label"]
    try:
        x = np.array([[float(r[c]) for c in cols] for r in rows])
        y = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from None
    return Dataset({key: x}, {key: y})
