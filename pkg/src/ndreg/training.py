"""Joint CE + DCCA training of CORnet-Z with a neural-data branch.

Each epoch makes one pass over the labelled image batches and
``neural_cycles_per_epoch`` passes over the stimulus/response pairs. Neural
batches are interleaved proportionally after every labelled batch so both
streams finish together. The two terms of ``lambda * L_dcca + (1 - lambda) *
L_ce`` are computed on disjoint data, so each applies its own scaled SGD step
as soon as its batch is done.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .cca import CcaConfig, ViewBatch, build_dcca_branch, dcca_loss_grad
from .data import LabeledSet, PseudoPopulation, resize_bilinear
from .evaluation import evaluate

log = logging.getLogger(__name__)

DATASET_KINDS = ("neural", "shuffled_labels", "v1_statistics", "standard_normal", "synthetic", "none")


@dataclass
class ExperimentConfig:
    lam: float = 0.5
    c: int = 10
    cca_reg: float = 1e-4
    lr_cnn: float = 0.01
    lr_dcca: float = 0.01
    batch_cifar: int = 128
    batch_dcca: int = 50
    epochs: int = 100
    neural_cycles_per_epoch: int = 20
    seed: int = 0
    dropout: float = 0.5
    channels: tuple = (64, 128, 256, 512)
    kernel: int = 3
    cnn_weight_decay: float = 0.0
    tap: str = "V1"
    dcca_hidden: int = 1024
    dcca_depth: int = 3
    dcca_out: int = 10
    dcca_dropout: float = 1e-4
    dcca_init_std: float = 0.01
    dcca_weight_decay: float = 1e-5
    dcca_active_epochs: str = "all"
    dataset: str = "neural"
    surrogate_seed: int = 0
    eval_batch: int = 500

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.batch_dcca < 2:
            raise ValueError("batch_dcca must be >= 2")
        if self.lr_cnn <= 0 or self.lr_dcca <= 0:
            raise ValueError("learning rates must be positive")
        if self.dataset not in DATASET_KINDS:
            raise ValueError(f"dataset must be one of {DATASET_KINDS}")
        self.active_range()

    def active_range(self):
        """Half-open epoch range ``[start, stop)`` in which the DCCA term is used."""
        spec = str(self.dcca_active_epochs).strip()
        if spec in ("all", ""):
            return 0, self.epochs
        try:
            lo, hi = spec.split("..")
            return int(lo or 0), int(hi or self.epochs)
        except ValueError:
            raise ValueError(f"dcca_active_epochs must look like 'all' or 'a..b', got {spec!r}") from None

    def dcca_active(self, epoch):
        lo, hi = self.active_range()
        return lo <= epoch < hi

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # flat "key = value" documents; "lambda" is accepted for ``lam``

    def dumps(self):
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(map(str, v))
            lines.append(f"{'lambda' if k == 'lam' else k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            key = "lam" if key == "lambda" else key
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            default = getattr(cls, key, None) if key != "channels" else ()
            if key == "channels":
                kwargs[key] = tuple(int(x) for x in (raw.split(",") if isinstance(raw, str) else raw))
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw).strip()
        return cls(**kwargs)

    @classmethod
    def loads(cls, text):
        mapping = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class NeuralPairs:
    """Stimulus images aligned row-by-row with their (pseudo-population) responses."""

    images: np.ndarray
    responses: np.ndarray
    image_ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.responses):
            raise ValueError("stimulus images and responses must be aligned")

    def __len__(self):
        return len(self.responses)

    def num_batches(self, batch_size):
        return -(-len(self) // batch_size)

    def batches(self, batch_size, rng):
        """One cycle: a fresh permutation split into ceil(n / batch_size) near-equal batches."""
        perm = rng.permutation(len(self))
        for idx in np.array_split(perm, self.num_batches(batch_size)):
            yield self.images[idx], self.responses[idx]


def neural_pairs(images, pop: PseudoPopulation, input_shape, image_ids=None):
    """Pair stimulus images with pseudo-population rows, resizing to the CNN input.

    With ``image_ids`` given, rows are matched by id rather than position.
    """
    images = np.asarray(images, dtype=np.float64)
    if image_ids is not None:
        pos = {int(i): n for n, i in enumerate(image_ids)}
        missing = [int(i) for i in pop.image_ids if int(i) not in pos]
        if missing:
            raise ValueError(f"no stimulus image for image ids {missing[:5]}")
        images = images[[pos[int(i)] for i in pop.image_ids]]
    elif len(images) != len(pop.responses):
        raise ValueError(f"{len(images)} stimulus images for {len(pop.responses)} response rows")
    if images.shape[1:3] != tuple(input_shape[:2]):
        images = resize_bilinear(images, tuple(input_shape[:2]))
    return NeuralPairs(images, pop.responses, np.asarray(pop.image_ids))


def joint_loss(lam, ce, dcca):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    return lam * dcca + (1.0 - lam) * ce


RNG_STREAMS = ("cnn_init", "dcca_init", "cifar_order", "cnn_dropout", "neural_order", "dcca_dropout")


@dataclass
class TrainState:
    cnn: nn.Network
    dcca_x: nn.Network | None
    dcca_y: nn.Network | None
    rngs: dict
    epoch: int = 0
    cifar_steps: int = 0
    neural_steps: int = 0
    history: list = field(default_factory=list)


def init_state(config: ExperimentConfig, num_classes, input_shape, brain_dim=None):
    """Fresh networks and RNG streams; the DCCA branch exists only when it can be used."""
    seqs = dict(zip(RNG_STREAMS, np.random.SeedSequence(config.seed).spawn(len(RNG_STREAMS))))
    rngs = {k: np.random.default_rng(s) for k, s in seqs.items()}
    cnn = nn.build_cornetz(num_classes, input_shape, config.channels, config.kernel, config.dropout,
                           config.cnn_weight_decay, seed=rngs.pop("cnn_init"))
    fx = fy = None
    dcca_seed = rngs.pop("dcca_init")
    if config.lam > 0 and brain_dim is not None:
        tap_dim = int(np.prod(cnn.tap_shape(config.tap)))
        fx, fy = build_dcca_branch(tap_dim, brain_dim, config.dcca_hidden, config.dcca_depth, config.dcca_out,
                                   config.c, config.dcca_dropout, config.dcca_init_std,
                                   config.dcca_weight_decay, seed=dcca_seed.integers(2 ** 63))
    return TrainState(cnn, fx, fy, rngs)


def _check_finite(value, what, state):
    if not np.isfinite(value):
        raise nn.NonFiniteError(
            f"non-finite {what} ({value}) at epoch {state.epoch}, cifar step {state.cifar_steps}, "
            f"neural step {state.neural_steps}"
        )


def ce_step(state: TrainState, config, images, labels):
    cnn = state.cnn.train()
    logits = cnn.forward(images, rng=state.rngs["cnn_dropout"])
    loss, g = nn.cross_entropy_loss(logits, labels)
    _check_finite(loss, "cross-entropy loss", state)
    grads, _ = cnn.backward(g, need_input_grad=False)
    nn.sgd_step(cnn, grads, config.lr_cnn, scale=1.0 - config.lam, step=state.cifar_steps)
    state.cifar_steps += 1
    return loss


def dcca_forward(state: TrainState, config, images, responses):
    """CNN trunk up to the tap, then both sub-models; returns (view batch, trunk output)."""
    trunk = state.cnn.forward(images, upto=config.tap)
    hx = state.dcca_x.forward(trunk.reshape(len(images), -1), rng=state.rngs["dcca_dropout"])
    hy = state.dcca_y.forward(responses, rng=state.rngs["dcca_dropout"])
    return ViewBatch(hx, hy), trunk


def dcca_step(state: TrainState, config, images, responses):
    state.cnn.train()
    state.dcca_x.train()
    state.dcca_y.train()
    views, trunk = dcca_forward(state, config, images, responses)
    loss, gx, gy, corr = dcca_loss_grad(views, CcaConfig(config.c, config.cca_reg))
    _check_finite(loss, "DCCA loss", state)
    gfx, g_in = state.dcca_x.backward(gx)
    gfy, _ = state.dcca_y.backward(gy)
    gcnn, _ = state.cnn.backward(g_in.reshape(trunk.shape), need_input_grad=False)
    lam, step = config.lam, state.neural_steps
    nn.sgd_step(state.dcca_x, gfx, config.lr_dcca, scale=lam, step=step)
    nn.sgd_step(state.dcca_y, gfy, config.lr_dcca, scale=lam, step=step)
    trunk_layers = range(state.cnn.taps[config.tap] + 1)
    nn.sgd_step(state.cnn, gcnn, config.lr_cnn, scale=lam, step=step, layers=trunk_layers)
    state.neural_steps += 1
    return loss, float(corr.mean())


def interleave_targets(n_cifar, total_neural):
    """Cumulative neural-batch count due after each labelled batch.

    Entry ``i - 1`` is round(i * total / n_cifar), so the per-batch share is the
    proportional rate with its fractional remainder carried forward.
    """
    i = np.arange(1, n_cifar + 1)
    return (2 * i * total_neural + n_cifar) // (2 * n_cifar)


def _neural_stream(neural, config, rng):
    for _ in range(config.neural_cycles_per_epoch):
        yield from neural.batches(config.batch_dcca, rng)


def train_epoch(state: TrainState, config: ExperimentConfig, cifar: LabeledSet, neural: NeuralPairs | None):
    """One labelled pass with proportionally interleaved neural batches.

    Returns the epoch's training statistics and advances ``state`` in place.
    """
    active = config.lam > 0 and neural is not None and state.dcca_x is not None and config.dcca_active(state.epoch)
    n_cifar = cifar.num_batches(config.batch_cifar)
    total_neural = config.neural_cycles_per_epoch * neural.num_batches(config.batch_dcca) if active else 0
    stream = _neural_stream(neural, config, state.rngs["neural_order"]) if active else None
    targets = interleave_targets(n_cifar, total_neural)
    ce_losses, dcca_losses, corrs = [], [], []
    done = 0
    for i, (x, y, _) in enumerate(cifar.batches(config.batch_cifar, state.rngs["cifar_order"])):
        if config.lam < 1.0:
            ce_losses.append(ce_step(state, config, x, y))
        while done < targets[i]:
            imgs, resp = next(stream)
            loss, corr = dcca_step(state, config, imgs, resp)
            dcca_losses.append(loss)
            corrs.append(corr)
            done += 1
    state.epoch += 1
    return {
        "ce_loss": float(np.mean(ce_losses)) if ce_losses else None,
        "dcca_loss": float(np.mean(dcca_losses)) if dcca_losses else None,
        "mean_cca_corr": float(np.mean(corrs)) if corrs else None,
        "neural_batches": done,
    }


# ---------------------------------------------------------------------------
# checkpoints

def save_state(path, state: TrainState, config: ExperimentConfig):
    arrays, cnn_meta = nn.network_to_arrays(state.cnn, "cnn.")
    meta = {
        "format": "ndreg-train-state/1",
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "epoch": state.epoch,
        "cifar_steps": state.cifar_steps,
        "neural_steps": state.neural_steps,
        "history": state.history,
        "rng_state": {k: r.bit_generator.state for k, r in state.rngs.items()},
        "cnn": cnn_meta,
    }
    for tag, net in (("dcca_x", state.dcca_x), ("dcca_y", state.dcca_y)):
        if net is not None:
            a, m = nn.network_to_arrays(net, f"{tag}.")
            arrays.update(a)
            meta[tag] = m
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_state(path, config: ExperimentConfig | None = None):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if config is not None and meta["config_hash"] != config.config_hash():
        raise ValueError(
            f"checkpoint {path} was written with config hash {meta['config_hash']}, "
            f"current config hashes to {config.config_hash()}"
        )
    cnn = nn.network_from_arrays(arrays, meta["cnn"], "cnn.")
    fx = nn.network_from_arrays(arrays, meta["dcca_x"], "dcca_x.") if "dcca_x" in meta else None
    fy = nn.network_from_arrays(arrays, meta["dcca_y"], "dcca_y.") if "dcca_y" in meta else None
    rngs = {}
    for k, st in meta["rng_state"].items():
        bg = getattr(np.random, st["bit_generator"])()
        bg.state = st
        rngs[k] = np.random.Generator(bg)
    state = TrainState(cnn, fx, fy, rngs, meta["epoch"], meta["cifar_steps"], meta["neural_steps"],
                       meta["history"])
    return state, ExperimentConfig.from_mapping(meta["config"])


# ---------------------------------------------------------------------------
# experiment driver

CHECKPOINT_NAME = "state.npz"
METRICS_NAME = "metrics.jsonl"


def run_experiment(config: ExperimentConfig, cifar_train: LabeledSet, cifar_test: LabeledSet,
                   neural: NeuralPairs | None = None, out_dir=None, stop_after=None):
    """Train for ``config.epochs`` epochs, evaluating on ``cifar_test`` after each.

    With ``out_dir`` a checkpoint is written after every epoch and metrics are
    appended as JSON lines; an existing checkpoint there is resumed.
    ``stop_after`` ends the run early after that many total epochs.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / CHECKPOINT_NAME if out_dir is not None else None
    if ckpt is not None and ckpt.exists():
        state, _ = load_state(ckpt, config)
        log.info("resuming %s at epoch %d", out_dir, state.epoch)
        # drop metric lines written after the checkpoint (interrupted epoch)
        (out_dir / METRICS_NAME).write_text("".join(json.dumps(r) + "\n" for r in state.history))
    else:
        brain_dim = neural.responses.shape[1] if neural is not None else None
        state = init_state(config, cifar_train.num_classes, cifar_train.images.shape[1:], brain_dim)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / METRICS_NAME).write_text("")
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    while state.epoch < last:
        stats = train_epoch(state, config, cifar_train, neural)
        report = evaluate(state.cnn, cifar_test)
        record = {
            "epoch": state.epoch,
            "lambda": config.lam,
            "seed": config.seed,
            "ce_loss": stats["ce_loss"],
            "dcca_loss": stats["dcca_loss"],
            "val_acc": report.exact_acc,
            "val_superclass_acc": report.super_acc,
            "mean_cca_corr": stats["mean_cca_corr"],
        }
        state.history.append(record)
        log.info("epoch %d: %s", state.epoch, record)
        if out_dir is not None:
            with open(out_dir / METRICS_NAME, "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_state(ckpt, state, config)
    return state.history, state
