"""Datasets: CIFAR-100 binary records, neural recording sessions and their preprocessing.

Neural sessions use a small binary container ("NDS1"):

    offset 0   4 bytes  magic b"NDS1"
    offset 4   3 x u32  n_images, n_repeats, n_neurons (little-endian)
    offset 16  n_images x u32 image ids
    then       n_images * n_repeats * n_neurons float64 counts, image-major

Pseudo-populations are exported as "NDPP" (magic, u32 rows, u32 cols, u32
image ids, float64 row-major matrix) plus a ``.json`` sidecar with the PCA
metadata and provenance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_nn import DTYPE

RECORD_BYTES = 3074
IMAGE_SHAPE = (32, 32, 3)
N_FINE, N_COARSE = 100, 20

FINE_LABEL_NAMES = (
    "apple aquarium_fish baby bear beaver bed bee beetle bicycle bottle bowl boy bridge bus "
    "butterfly camel can castle caterpillar cattle chair chimpanzee clock cloud cockroach couch "
    "crab crocodile cup dinosaur dolphin elephant flatfish forest fox girl hamster house kangaroo "
    "keyboard lamp lawn_mower leopard lion lizard lobster man maple_tree motorcycle mountain mouse "
    "mushroom oak_tree orange orchid otter palm_tree pear pickup_truck pine_tree plain plate poppy "
    "porcupine possum rabbit raccoon ray road rocket rose sea seal shark shrew skunk skyscraper "
    "snail snake spider squirrel streetcar sunflower sweet_pepper table tank telephone television "
    "tiger tractor train trout tulip turtle wardrobe whale willow_tree wolf woman worm"
).split()

COARSE_LABEL_NAMES = (
    "aquatic_mammals fish flowers food_containers fruit_and_vegetables household_electrical_devices "
    "household_furniture insects large_carnivores large_man-made_outdoor_things "
    "large_natural_outdoor_scenes large_omnivores_and_herbivores medium_mammals "
    "non-insect_invertebrates people reptiles small_mammals trees vehicles_1 vehicles_2"
).split()

# coarse label of each fine label, in fine-label order
CIFAR100_FINE_TO_COARSE = np.array([
    4, 1, 14, 8, 0, 6, 7, 7, 18, 3, 3, 14, 9, 18, 7, 11, 3, 9, 7, 11,
    6, 11, 5, 10, 7, 6, 13, 15, 3, 15, 0, 11, 1, 10, 12, 14, 16, 9, 11, 5,
    5, 19, 8, 8, 15, 13, 14, 17, 18, 10, 16, 4, 17, 4, 2, 0, 17, 4, 18, 17,
    10, 3, 2, 12, 12, 16, 12, 1, 9, 19, 2, 10, 0, 1, 16, 12, 9, 13, 15, 13,
    16, 19, 2, 4, 6, 19, 5, 5, 8, 19, 18, 1, 2, 15, 6, 0, 17, 8, 14, 13,
])


class FormatError(ValueError):
    pass


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CIFAR-100


@dataclass
class LabeledSet:
    """Images [N, H, W, 3] in [0, 1] with fine and coarse labels.

    ``fine_to_coarse[k]`` is the coarse label of fine label ``k``; when the
    set is a relabelled subset, ``class_ids[k]`` is the original CIFAR id.
    """

    images: np.ndarray
    fine_labels: np.ndarray
    coarse_labels: np.ndarray
    fine_to_coarse: np.ndarray
    class_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.fine_labels)

    @property
    def num_classes(self):
        return len(self.fine_to_coarse)

    def batches(self, batch_size, rng=None):
        """Yield ``(images, fine, coarse)``; shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.fine_labels[idx], self.coarse_labels[idx]

    def num_batches(self, batch_size):
        return -(-len(self) // batch_size)

    def take(self, idx):
        idx = np.asarray(idx)
        return LabeledSet(self.images[idx], self.fine_labels[idx], self.coarse_labels[idx],
                          self.fine_to_coarse, self.class_ids)

    def subset(self, fine_classes, per_class=None):
        """Keep the listed fine classes, relabelled 0..k-1 in the given order."""
        fine_classes = np.asarray(fine_classes)
        keep = []
        for k in fine_classes:
            idx = np.flatnonzero(self.fine_labels == k)
            keep.append(idx if per_class is None else idx[:per_class])
        keep = np.sort(np.concatenate(keep))
        remap = np.full(self.num_classes, -1)
        remap[fine_classes] = np.arange(len(fine_classes))
        ids = fine_classes if self.class_ids is None else self.class_ids[fine_classes]
        return LabeledSet(self.images[keep], remap[self.fine_labels[keep]], self.coarse_labels[keep],
                          self.fine_to_coarse[fine_classes], ids)


def parse_cifar_records(raw: bytes):
    """Decode CIFAR-100 binary records into (images, fine, coarse) arrays."""
    n, rem = divmod(len(raw), RECORD_BYTES)
    if rem:
        raise FormatError(
            f"file length {len(raw)} is not a multiple of {RECORD_BYTES}; "
            f"trailing partial record at byte offset {n * RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    coarse = rec[:, 0].astype(np.int64)
    fine = rec[:, 1].astype(np.int64)
    for labels, limit, what in ((coarse, N_COARSE, "coarse"), (fine, N_FINE, "fine")):
        bad = np.flatnonzero(labels >= limit)
        if bad.size:
            col = 0 if what == "coarse" else 1
            raise FormatError(
                f"{what} label {labels[bad[0]]} >= {limit} at byte offset {bad[0] * RECORD_BYTES + col}"
            )
    images = rec[:, 2:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1).astype(DTYPE) / 255.0
    return images, fine, coarse


def encode_cifar_records(images, fine, coarse) -> bytes:
    """Inverse of :func:`parse_cifar_records` for images that are exact multiples of 1/255."""
    pix = np.rint(np.asarray(images) * 255.0).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(fine), -1)
    head = np.stack([np.asarray(coarse), np.asarray(fine)], axis=1).astype(np.uint8)
    return np.concatenate([head, pix], axis=1).tobytes()


def fine_to_coarse_table(fine, coarse, require_complete=False):
    """Extract the fine->coarse table, checking each fine class has one coarse class."""
    table = np.full(N_FINE, -1, dtype=np.int64)
    for f in np.unique(fine):
        cs = np.unique(coarse[fine == f])
        if cs.size != 1:
            raise FormatError(f"fine label {f} appears with coarse labels {cs.tolist()}")
        table[f] = cs[0]
    present = table[table >= 0]
    counts = np.bincount(present, minlength=N_COARSE)
    if require_complete:
        if (table < 0).any() or not np.all(counts == 5):
            raise FormatError(f"expected 5 fine classes per coarse class, got counts {counts.tolist()}")
    elif counts.max(initial=0) > 5:
        raise FormatError(f"a coarse class has more than 5 fine classes: {counts.tolist()}")
    return table


def _load_split(path):
    images, fine, coarse = parse_cifar_records(Path(path).read_bytes())
    return images, fine, coarse


def load_cifar100(path, require_complete=True):
    """Load ``train.bin`` and ``test.bin`` from a cifar-100-binary directory."""
    path = Path(path)
    splits = []
    tables = []
    for name in ("train.bin", "test.bin"):
        images, fine, coarse = _load_split(path / name)
        tables.append(fine_to_coarse_table(fine, coarse, require_complete))
        splits.append((images, fine, coarse))
    table = np.where(tables[0] >= 0, tables[0], tables[1])
    agree = (tables[0] >= 0) & (tables[1] >= 0)
    if np.any(tables[0][agree] != tables[1][agree]):
        raise FormatError("train and test splits disagree on the fine->coarse mapping")
    return tuple(LabeledSet(im, f, c, table) for im, f, c in splits)


def write_cifar100(path, train: LabeledSet, test: LabeledSet):
    """Write a cifar-100-binary style directory (used for synthetic stand-ins)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train.bin", train), ("test.bin", test)):
        fine = ds.fine_labels if ds.class_ids is None else ds.class_ids[ds.fine_labels]
        (path / name).write_bytes(encode_cifar_records(ds.images, fine, ds.coarse_labels))


# ---------------------------------------------------------------------------
# neural sessions

NDS_MAGIC = b"NDS1"
NDPP_MAGIC = b"NDPP"


@dataclass
class NeuralSession:
    session_id: str
    spike_counts: np.ndarray  # [n_images, n_repeats, n_neurons]
    image_ids: np.ndarray

    def __post_init__(self):
        self.spike_counts = np.asarray(self.spike_counts, dtype=DTYPE)
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        if self.spike_counts.ndim != 3:
            raise FormatError(f"session {self.session_id}: counts must be [images, repeats, neurons]")
        if self.spike_counts.shape[0] != self.image_ids.size:
            raise FormatError(f"session {self.session_id}: {self.image_ids.size} ids for "
                              f"{self.spike_counts.shape[0]} images")
        if self.spike_counts.shape[1] < 1:
            raise FormatError(f"session {self.session_id}: needs at least one repeat")
        if np.any(self.spike_counts < 0) or not np.all(np.isfinite(self.spike_counts)):
            raise FormatError(f"session {self.session_id}: counts must be finite and nonnegative")

    @property
    def shape(self):
        return self.spike_counts.shape


def write_session(path, session: NeuralSession):
    n_img, n_rep, n_neu = session.shape
    with open(path, "wb") as fh:
        fh.write(NDS_MAGIC)
        fh.write(struct.pack("<3I", n_img, n_rep, n_neu))
        fh.write(session.image_ids.astype("<u4").tobytes())
        fh.write(session.spike_counts.astype("<f8").tobytes())


def read_session(path) -> NeuralSession:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != NDS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {NDS_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    n_img, n_rep, n_neu = struct.unpack_from("<3I", raw, 4)
    ids_end = 16 + 4 * n_img
    expected = ids_end + 8 * n_img * n_rep * n_neu
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for dims {(n_img, n_rep, n_neu)}, got {len(raw)}")
    ids = np.frombuffer(raw, dtype="<u4", count=n_img, offset=16)
    counts = np.frombuffer(raw, dtype="<f8", offset=ids_end).reshape(n_img, n_rep, n_neu)
    return NeuralSession(path.stem, counts.copy(), ids.copy())


def check_aligned(sessions):
    if not sessions:
        raise CorpusError("empty corpus")
    ref = sessions[0]
    for s in sessions[1:]:
        if s.image_ids.shape != ref.image_ids.shape or np.any(s.image_ids != ref.image_ids):
            raise CorpusError(f"session {s.session_id} image ids are not aligned with {ref.session_id}")
    return sessions


def load_sessions(path):
    """Load every ``*.nds`` file under ``path`` (sorted by file name)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.glob("*.nds"))
    if not files:
        raise CorpusError(f"no .nds session files under {path}")
    return check_aligned([read_session(f) for f in files])


def average_repeats(session: NeuralSession):
    return session.spike_counts.mean(axis=1)


@dataclass
class PcaFit:
    components: np.ndarray  # [d, k]
    projected: np.ndarray  # [n, k]
    means: np.ndarray  # [d]
    explained_variance: np.ndarray  # [k]


def pca_top_k(data, k) -> PcaFit:
    """Exact PCA of the centered covariance (1/(n-1)); largest |entry| of each component positive."""
    data = np.asarray(data, dtype=DTYPE)
    n, d = data.shape
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} must be in [1, min(n-1, d)] = [1, {min(n - 1, d)}]")
    means = data.mean(axis=0)
    centered = data - means
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order]
    flip = np.sign(comps[np.abs(comps).argmax(axis=0), np.arange(k)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    return PcaFit(comps, centered @ comps, means, evals[order])


@dataclass
class PseudoPopulation:
    responses: np.ndarray  # [n_images, k * n_sessions]
    image_ids: np.ndarray
    session_ids: list = field(default_factory=list)
    pca: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.pca[0].components.shape[1] if self.pca else None

    def block(self, s):
        k = self.k
        return self.responses[:, s * k:(s + 1) * k]

    def replace(self, responses, **prov):
        return PseudoPopulation(responses, self.image_ids.copy(), list(self.session_ids), list(self.pca),
                                {**self.provenance, **prov})


def build_pseudo_population(sessions, k) -> PseudoPopulation:
    """Average repeats, keep each session's top-k PCs, concatenate in session order."""
    check_aligned(sessions)
    blocks, fits = [], []
    for s in sessions:
        try:
            fit = pca_top_k(average_repeats(s), k)
        except ValueError as exc:
            raise ValueError(f"session {s.session_id}: {exc}") from None
        fits.append(fit)
        blocks.append(fit.projected)
    return PseudoPopulation(np.concatenate(blocks, axis=1), sessions[0].image_ids.copy(),
                            [s.session_id for s in sessions], fits, {"k": k, "kind": "neural"})


SURROGATE_KINDS = ("shuffled_labels", "v1_statistics", "standard_normal")


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str
    seed: int = 0
    per_neuron: bool = False

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"surrogate kind must be one of {SURROGATE_KINDS}, got {self.kind!r}")


def make_surrogate(pop: PseudoPopulation, spec: SurrogateSpec) -> PseudoPopulation:
    rng = np.random.default_rng(spec.seed)
    x = pop.responses
    if spec.kind == "shuffled_labels":
        out = x[rng.permutation(x.shape[0])]
    elif spec.kind == "v1_statistics":
        if spec.per_neuron:
            mu, sd = x.mean(axis=0), x.std(axis=0)
        else:
            mu, sd = x.mean(), x.std()
        out = rng.normal(size=x.shape) * sd + mu
    else:
        out = rng.normal(size=x.shape)
    return pop.replace(out, kind=spec.kind, seed=spec.seed, per_neuron=spec.per_neuron)


def save_pseudo_population(path, pop: PseudoPopulation, extra=None):
    path = Path(path)
    n, d = pop.responses.shape
    with open(path, "wb") as fh:
        fh.write(NDPP_MAGIC)
        fh.write(struct.pack("<2I", n, d))
        fh.write(pop.image_ids.astype("<u4").tobytes())
        fh.write(pop.responses.astype("<f8").tobytes())
    sidecar = {
        "shape": [n, d],
        "session_ids": pop.session_ids,
        "provenance": {**pop.provenance, **(extra or {})},
        "pca": [
            {"means": f.means.tolist(), "components": f.components.tolist(),
             "explained_variance": f.explained_variance.tolist()}
            for f in pop.pca
        ],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_pseudo_population(path) -> PseudoPopulation:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != NDPP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    n, d = struct.unpack_from("<2I", raw, 4)
    expected = 12 + 4 * n + 8 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    ids = np.frombuffer(raw, dtype="<u4", count=n, offset=12).astype(np.int64)
    resp = np.frombuffer(raw, dtype="<f8", offset=12 + 4 * n).reshape(n, d).copy()
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    fits = [PcaFit(np.asarray(p["components"]), None, np.asarray(p["means"]),
                   np.asarray(p["explained_variance"])) for p in meta.get("pca", [])]
    return PseudoPopulation(resp, ids, meta.get("session_ids", []), fits, meta.get("provenance", {}))


# ---------------------------------------------------------------------------
# synthetic data


def resize_bilinear(images, shape):
    """Bilinear resize of NHWC images to ``shape[:2]`` (align-corners=False)."""
    images = np.asarray(images, dtype=DTYPE)
    h, w = images.shape[1:3]
    oh, ow = shape[:2]
    if (h, w) == (oh, ow):
        return images.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h, oh)
    x0, x1, fx = coords(w, ow)
    top = images[:, y0][:, :, x0] * (1 - fx)[None, None, :, None] + images[:, y0][:, :, x1] * fx[None, None, :, None]
    bot = images[:, y1][:, :, x0] * (1 - fx)[None, None, :, None] + images[:, y1][:, :, x1] * fx[None, None, :, None]
    return top * (1 - fy)[None, :, None, None] + bot * fy[None, :, None, None]


def grating_bank(n, shape, rng):
    """``n`` random oriented sinusoidal gratings with per-channel colour weights, [n, H, W, C]."""
    h, w, c = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    theta = rng.uniform(0, np.pi, n)
    freq = rng.uniform(1.0, 4.0, n) / max(h, w)
    phase = rng.uniform(0, 2 * np.pi, n)
    colour = rng.uniform(0.3, 1.0, (n, c))
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    waves = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    return waves[..., None] * colour[:, None, None, :]


@dataclass
class SyntheticCorpus:
    images: np.ndarray  # [n_images, H, W, C] in [0, 1]
    latents: np.ndarray  # [n_images, n_latents]
    sessions: list


def make_synthetic_corpus(n_images=500, n_sessions=2, n_neurons=50, n_repeats=20, signal_strength=0.9,
                          seed=0, image_shape=IMAGE_SHAPE, n_latents=10, baseline=10.0, gain=3.0):
    """Stimulus images driven by latent factors plus Poisson responses of simulated neurons.

    Each neuron's mean rate is ``baseline + gain * (s * readout(latents) +
    (1 - s) * noise)`` with unit-variance readout and noise terms; counts are
    Poisson draws around that rate, independently per repeat.
    """
    if not 0.0 <= signal_strength <= 1.0:
        raise ValueError("signal_strength must be in [0, 1]")
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n_images, n_latents))
    bank = grating_bank(n_latents, image_shape, rng)
    images = 0.5 + 0.12 * np.tensordot(z, bank, axes=(1, 0)) / np.sqrt(n_latents) * 2.0
    images = np.clip(images, 0.0, 1.0)
    ids = np.arange(n_images)
    sessions = []
    for s_idx in range(n_sessions):
        readout = rng.normal(size=(n_latents, n_neurons)) / np.sqrt(n_latents)
        signal = z @ readout
        signal /= signal.std(axis=0, keepdims=True)
        noise = rng.normal(size=(n_images, n_neurons))
        drive = signal_strength * signal + (1.0 - signal_strength) * noise
        rate = np.maximum(baseline + gain * drive, 0.0)
        counts = rng.poisson(rate[:, None, :], size=(n_images, n_repeats, n_neurons)).astype(DTYPE)
        sessions.append(NeuralSession(f"session{s_idx:02d}", counts, ids))
    return SyntheticCorpus(images, z, sessions)


def make_synthetic_labeled(n_per_class, n_classes=10, seed=0, image_shape=IMAGE_SHAPE, noise=0.15,
                           class_ids=None):
    """Class-conditional grating images, quantized to 1/255 so they survive CIFAR encoding.

    A desk-scale stand-in when the real CIFAR-100 files are unavailable;
    fine labels are ``class_ids`` (default: the first ``n_classes`` ids).
    """
    rng = np.random.default_rng(seed)
    class_ids = np.arange(n_classes) if class_ids is None else np.asarray(class_ids)
    protos = rng.normal(size=(n_classes, 6))
    bank = grating_bank(6, image_shape, rng)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    coef = protos[labels] + 0.8 * rng.normal(size=(labels.size, 6))
    imgs = 0.5 + 0.1 * np.tensordot(coef, bank, axes=(1, 0)) + noise * rng.normal(size=(labels.size, *image_shape))
    imgs = np.rint(np.clip(imgs, 0, 1) * 255) / 255
    order = rng.permutation(labels.size)
    table = CIFAR100_FINE_TO_COARSE[class_ids]
    fine = labels[order]
    return LabeledSet(imgs[order], fine, table[fine], table, class_ids)


def make_synthetic_split(n_train_per_class, n_test_per_class, n_classes=10, seed=0, **kw):
    """Train/test pair drawn from one set of class prototypes, balanced per class."""
    full = make_synthetic_labeled(n_train_per_class + n_test_per_class, n_classes, seed, **kw)
    test_idx = np.concatenate([np.flatnonzero(full.fine_labels == k)[:n_test_per_class] for k in range(n_classes)])
    is_test = np.zeros(len(full), dtype=bool)
    is_test[test_idx] = True
    return full.take(np.flatnonzero(~is_test)), full.take(np.flatnonzero(is_test))
