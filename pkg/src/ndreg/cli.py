"""Command-line entry point: prepare data, train (lambda x seed sweeps), eval, attack, summarize.

Every run directory holds a ``manifest.json`` recording the merged config,
the data spec, hashes of all inputs and the outputs it produced, so a run can
be repeated from its manifest alone. Re-running a completed manifest is a
no-op.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SURROGATE_KINDS,
    CorpusError,
    FormatError,
    SurrogateSpec,
    build_pseudo_population,
    load_cifar100,
    load_pseudo_population,
    load_sessions,
    make_surrogate,
    make_synthetic_corpus,
    save_pseudo_population,
    write_session,
)
from .evaluation import evaluate, robustness_sweep
from .tensor_nn import NonFiniteError
from .training import CHECKPOINT_NAME, METRICS_NAME, ExperimentConfig, load_state, neural_pairs, run_experiment

log = logging.getLogger("ndreg")

DATA_ROOT_ENV = "NDREG_DATA_ROOT"
MANIFEST_NAME = "manifest.json"
POPULATION_NAME = "population.ndpp"
STIMULI_NAME = "stimuli.npy"
EVAL_NAME = "eval.json"
ROBUSTNESS_NAME = "robustness.csv"

SYNTHETIC_KEYS = {
    "n_images": ("n_images", int),
    "n_sessions": ("n_sessions", int),
    "n_neurons": ("n_neurons", int),
    "n_repeats": ("n_repeats", int),
    "s": ("signal_strength", float),
    "signal_strength": ("signal_strength", float),
    "seed": ("seed", int),
    "image_size": ("image_size", int),
}
SYNTHETIC_DEFAULTS = {"n_images": 500, "n_sessions": 10, "n_neurons": 100, "n_repeats": 20,
                      "signal_strength": 0.9, "seed": 0, "image_size": 32}


class InputError(Exception):
    """Bad arguments or missing/malformed input data (exit code 2)."""


# ---------------------------------------------------------------------------
# manifests


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    data: dict
    inputs: dict  # path -> sha256
    outputs: list = field(default_factory=list)
    status: str = "running"
    started: str = field(default_factory=_now)
    finished: str | None = None
    results: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def content_hash(self):
        """Hash of everything that determines the outputs (not timestamps or results)."""
        doc = {"command": self.command, "config": self.config, "data": self.data, "inputs": self.inputs}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def write(self, directory):
        doc = asdict(self)
        doc["content_hash"] = self.content_hash
        path = Path(directory) / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        tmp.replace(path)

    @classmethod
    def read(cls, directory):
        path = Path(directory) / MANIFEST_NAME
        if not path.exists():
            raise InputError(f"no {MANIFEST_NAME} in {directory}")
        doc = json.loads(path.read_text())
        stored = doc.pop("content_hash", None)
        m = cls(**doc)
        if stored is not None and stored != m.content_hash:
            raise InputError(f"{path}: content hash does not match its recorded fields")
        return m

    def finish(self, directory, outputs, results=None):
        for out in outputs:
            if not Path(directory, out).exists():
                raise RuntimeError(f"expected output {out} was not produced in {directory}")
        self.outputs = sorted(outputs)
        self.results = results or {}
        self.status = "complete"
        self.finished = _now()
        self.write(directory)


def _already_done(directory, manifest: RunManifest):
    """True if ``directory`` holds a completed run of this exact manifest."""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        return False
    old = RunManifest.read(directory)
    if old.content_hash != manifest.content_hash:
        if old.status == "complete":
            raise InputError(
                f"{directory} already holds a completed run with different inputs or config "
                f"(hash {old.content_hash[:12]} vs {manifest.content_hash[:12]}); use another --out"
            )
        return False
    return old.status == "complete"


# ---------------------------------------------------------------------------
# data helpers


def _data_root(args):
    root = getattr(args, "data_root", None) or os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _resolve(path, args, default_name):
    if path:
        return Path(path)
    root = _data_root(args)
    if root is None:
        raise InputError(f"no path given for {default_name} and ${DATA_ROOT_ENV} is not set")
    return root / default_name


def parse_key_values(items, what):
    """``key=value`` items, comma-separated; chunks without ``=`` extend the previous value (lists)."""
    out = {}
    for item in items or []:
        key = None
        for part in item.split(","):
            name, sep, value = part.partition("=")
            if sep:
                key = name.strip()
                out[key] = value.strip()
            elif key is not None:
                out[key] += "," + part.strip()
            elif part.strip():
                raise InputError(f"{what}: expected key=value, got {part!r}")
    return out


def synthetic_spec(items):
    spec = dict(SYNTHETIC_DEFAULTS)
    for key, value in parse_key_values(items, "--synthetic").items():
        if key not in SYNTHETIC_KEYS:
            raise InputError(f"--synthetic: unknown key {key!r} (known: {sorted(SYNTHETIC_KEYS)})")
        name, cast = SYNTHETIC_KEYS[key]
        spec[name] = cast(value)
    return spec


def load_cifar_subset(path, classes):
    """Load a cifar-100-binary directory, optionally keeping its first ``classes`` fine classes."""
    path = Path(path)
    for name in ("train.bin", "test.bin"):
        if not (path / name).exists():
            raise InputError(f"CIFAR-100 file not found: {path / name}")
    train, test = load_cifar100(path, require_complete=False)
    if classes:
        present = np.unique(train.fine_labels)
        if classes > len(present):
            raise InputError(f"--classes {classes} but {path} only has {len(present)} fine classes")
        keep = present[:classes]
        train, test = train.subset(keep), test.subset(keep)
    elif len(np.unique(train.fine_labels)) < train.num_classes:
        log.warning("%s has %d of %d fine classes; the classifier keeps all %d outputs (see --classes)",
                    path, len(np.unique(train.fine_labels)), train.num_classes, train.num_classes)
    return train, test


def load_prepared(path, dataset, surrogate_seed, input_shape):
    """Stimulus/response pairs for ``dataset`` from a prepared directory."""
    path = Path(path)
    pop_path, stim_path = path / POPULATION_NAME, path / STIMULI_NAME
    for p in (pop_path, stim_path):
        if not p.exists():
            raise InputError(f"prepared neural data not found: {p} (run `ndreg prepare` first)")
    pop = load_pseudo_population(pop_path)
    if dataset in SURROGATE_KINDS:
        pop = make_surrogate(pop, SurrogateSpec(dataset, surrogate_seed))
    stimuli = np.load(stim_path)
    if stimuli.dtype == np.uint8:
        stimuli = stimuli / 255.0
    return neural_pairs(stimuli, pop, input_shape), [pop_path, stim_path]


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args):
    out = Path(args.out)
    data = {"pca_k": args.pca_k, "surrogates": sorted(set(args.surrogate or [])), "seed": args.seed,
            "per_neuron": args.per_neuron}
    inputs = {}
    if args.synthetic is not None:
        spec = synthetic_spec(args.synthetic)
        data["synthetic"] = spec
    else:
        sessions_dir = _resolve(args.sessions, args, "sessions")
        if not sessions_dir.is_dir():
            raise InputError(f"session directory not found: {sessions_dir}")
        stim = Path(args.stimuli) if args.stimuli else sessions_dir / STIMULI_NAME
        if not stim.exists():
            raise InputError(f"stimulus images not found: {stim} (pass --stimuli)")
        files = sorted(sessions_dir.glob("*.nds"))
        inputs = {str(p): file_digest(p) for p in [*files, stim]}
        data["sessions"] = str(sessions_dir)
    manifest = RunManifest("prepare", sys.argv[1:], {}, data, inputs)
    if out.exists() and _already_done(out, manifest):
        print(f"{out}: already prepared with identical inputs, nothing to do")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out)

    if args.synthetic is not None:
        size = data["synthetic"]["image_size"]
        corpus = make_synthetic_corpus(spec["n_images"], spec["n_sessions"], spec["n_neurons"], spec["n_repeats"],
                                       spec["signal_strength"], spec["seed"], image_shape=(size, size, 3))
        sessions, stimuli = corpus.sessions, corpus.images
        if args.write_sessions:
            (out / "sessions").mkdir(exist_ok=True)
            for s in sessions:
                write_session(out / "sessions" / f"{s.session_id}.nds", s)
    else:
        sessions = load_sessions(sessions_dir)
        stimuli = np.load(stim)
        if len(stimuli) != sessions[0].spike_counts.shape[0]:
            raise InputError(f"{stim} holds {len(stimuli)} images but sessions have "
                             f"{sessions[0].spike_counts.shape[0]}")
    pop = build_pseudo_population(sessions, args.pca_k)
    outputs = [MANIFEST_NAME, POPULATION_NAME, "population.json", STIMULI_NAME]
    save_pseudo_population(out / POPULATION_NAME, pop, {"source": data.get("sessions", "synthetic")})
    np.save(out / STIMULI_NAME, stimuli)
    for kind in data["surrogates"]:
        sur = make_surrogate(pop, SurrogateSpec(kind, args.seed, args.per_neuron))
        save_pseudo_population(out / f"{kind}.ndpp", sur, {"source": POPULATION_NAME})
        outputs += [f"{kind}.ndpp", f"{kind}.json"]
    manifest.finish(out, outputs, {"shape": list(pop.responses.shape)})
    print(f"{out}: pseudo-population {pop.responses.shape[0]} x {pop.responses.shape[1]}"
          + (f", surrogates {', '.join(data['surrogates'])}" if data["surrogates"] else ""))
    return 0


# ---------------------------------------------------------------------------
# train


def merged_config(args, **fixed):
    """Defaults < --config file < --set overrides < dedicated flags."""
    mapping = {}
    if args.config:
        text = Path(args.config).read_text()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                mapping[key.strip()] = value.strip()
    mapping.update(parse_key_values(args.set, "--set"))
    for key in ("epochs", "dataset"):
        if getattr(args, key, None) is not None:
            mapping[key] = getattr(args, key)
    if getattr(args, "dcca_epochs", None):
        mapping["dcca_active_epochs"] = args.dcca_epochs
    mapping.update(fixed)
    try:
        return ExperimentConfig.from_mapping(mapping)
    except (KeyError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None


def _train_data_spec(args):
    return {"cifar": str(_resolve(args.cifar, args, "cifar-100-binary")), "classes": args.classes}


def _run_name(cfg: ExperimentConfig):
    prefix = "" if cfg.dataset in ("neural", "synthetic") else f"{cfg.dataset}_"
    return f"{prefix}lam{cfg.lam:g}_seed{cfg.seed}"


def cmd_train(args):
    base = merged_config(args)
    lambdas = args.lam if args.lam else [base.lam]
    seeds = args.seed if args.seed else (list(range(args.seeds)) if args.seeds else [base.seed])
    data = _train_data_spec(args)
    train, test = load_cifar_subset(data["cifar"], args.classes)
    cifar_inputs = {str(Path(data["cifar"]) / n): file_digest(Path(data["cifar"]) / n)
                    for n in ("train.bin", "test.bin")}
    neural_inputs = {}
    pairs = None
    needs_neural = base.dataset != "none" and any(lam > 0 for lam in lambdas)
    if needs_neural:
        neural_dir = _resolve(args.neural, args, "prepared")
        data["neural"] = str(neural_dir)
    out_root = Path(args.out)
    failures = 0
    for lam in lambdas:
        for seed in seeds:
            try:
                cfg = base.replace(lam=float(lam), seed=int(seed))
            except ValueError as exc:
                raise InputError(str(exc)) from None
            if cfg.lam > 0 and needs_neural and pairs is None:
                pairs, files = load_prepared(neural_dir, cfg.dataset, cfg.surrogate_seed, train.images.shape[1:])
                neural_inputs = {str(p): file_digest(p) for p in files}
            run_dir = out_root / _run_name(cfg)
            inputs = {**cifar_inputs, **(neural_inputs if cfg.lam > 0 else {})}
            manifest = RunManifest("train", sys.argv[1:], cfg.to_dict(), data, inputs)
            if _already_done(run_dir, manifest):
                print(f"{run_dir}: run already complete, nothing to do")
                continue
            run_dir.mkdir(parents=True, exist_ok=True)
            manifest.write(run_dir)
            (run_dir / "config.txt").write_text(cfg.dumps())
            use_pairs = pairs if cfg.lam > 0 and cfg.dataset != "none" else None
            try:
                history, _ = run_experiment(cfg, train, test, use_pairs, out_dir=run_dir)
            except NonFiniteError as exc:
                manifest.status = "failed"
                manifest.results = {"error": str(exc)}
                manifest.write(run_dir)
                print(f"{run_dir}: FAILED: {exc}", file=sys.stderr)
                failures += 1
                continue
            final = history[-1] if history else {}
            manifest.finish(run_dir, [MANIFEST_NAME, "config.txt", CHECKPOINT_NAME, METRICS_NAME], final)
            print(f"{run_dir}: val_acc {final.get('val_acc', float('nan')):.4f}, "
                  f"super {final.get('val_superclass_acc', float('nan')):.4f}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# eval / attack


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    if manifest.command != "train":
        raise InputError(f"{run_dir} is not a training run")
    ckpt = run_dir / CHECKPOINT_NAME
    if not ckpt.exists():
        raise InputError(f"checkpoint not found: {ckpt}")
    cfg = ExperimentConfig.from_mapping(manifest.config)
    try:
        state, _ = load_state(ckpt, cfg)
    except ValueError as exc:
        raise InputError(f"refusing to evaluate {run_dir}: {exc}") from None
    if state.epoch != cfg.epochs:
        log.warning("%s: checkpoint is at epoch %d of %d", run_dir, state.epoch, cfg.epochs)
    return manifest, cfg, state


def _test_set(manifest, args):
    path = args.cifar or manifest.data["cifar"]
    return load_cifar_subset(path, manifest.data.get("classes"))[1]


def cmd_eval(args):
    for run_dir in args.runs:
        manifest, cfg, state = _load_run(run_dir)
        report = evaluate(state.cnn, _test_set(manifest, args), batch=cfg.eval_batch)
        Path(run_dir, EVAL_NAME).write_text(report.to_json() + "\n")
        print(f"{run_dir}: exact {report.exact_acc:.4f}, super-class {report.super_acc:.4f}")
    return 0


def cmd_attack(args):
    strengths = sorted(float(e) for e in args.strengths)
    if strengths[0] != 0.0:
        strengths = [0.0] + strengths
    for run_dir in args.runs:
        manifest, cfg, state = _load_run(run_dir)
        curve = robustness_sweep(state.cnn, _test_set(manifest, args), strengths, batch=cfg.eval_batch)
        with open(Path(run_dir, ROBUSTNESS_NAME), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "accuracy"])
            w.writerows(curve)
        print(f"{run_dir}: " + ", ".join(f"eps {e:g}: {a:.4f}" for e, a in curve))
    return 0


# ---------------------------------------------------------------------------
# summarize


SUMMARY_METRICS = ("val_acc", "val_superclass_acc", "mean_cca_corr", "ce_loss", "dcca_loss")


def _mean_std(values):
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return "", ""
    return float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0


def cmd_summarize(args):
    root = Path(args.root)
    runs = sorted(p.parent for p in root.glob(f"*/{MANIFEST_NAME}"))
    if not runs:
        raise InputError(f"no runs found under {root}")
    by_epoch = defaultdict(lambda: defaultdict(list))
    by_eps = defaultdict(list)
    seeds = defaultdict(set)
    for run in runs:
        manifest = RunManifest.read(run)
        if manifest.command != "train" or manifest.status != "complete":
            continue
        lam, dataset = manifest.config["lam"], manifest.config["dataset"]
        seeds[(lam, dataset)].add(manifest.config["seed"])
        for line in (run / METRICS_NAME).read_text().splitlines():
            rec = json.loads(line)
            for m in SUMMARY_METRICS:
                by_epoch[(rec["epoch"], lam, dataset)][m].append(rec[m])
        rob = run / ROBUSTNESS_NAME
        if rob.exists():
            for row in csv.DictReader(open(rob)):
                by_eps[(float(row["epsilon"]), lam, dataset)].append(float(row["accuracy"]))
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary_epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lambda", "dataset", "n_seeds"]
                   + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")])
        for (epoch, lam, dataset), metrics in sorted(by_epoch.items()):
            row = [epoch, lam, dataset, len(metrics["val_acc"])]
            for m in SUMMARY_METRICS:
                row.extend(_mean_std(metrics[m]))
            w.writerow(row)
    written = ["summary_epochs.csv"]
    if by_eps:
        with open(out / "summary_attack.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "lambda", "dataset", "n_seeds", "mean", "std"])
            for (eps, lam, dataset), accs in sorted(by_eps.items()):
                w.writerow([eps, lam, dataset, len(accs), *_mean_std(accs)])
        written.append("summary_attack.csv")
    for (lam, dataset), s in sorted(seeds.items()):
        print(f"lambda {lam:g} ({dataset}): {len(s)} seed(s)")
    print(f"wrote {', '.join(str(out / n) for n in written)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="ndreg", description=__doc__.splitlines()[0])
    p.add_argument("--data-root", help=f"data root (default ${DATA_ROOT_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("prepare", help="build the pseudo-population and surrogate exports")
    src = pp.add_mutually_exclusive_group()
    src.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                     help="generate a synthetic corpus (keys: n_images, n_sessions, n_neurons, n_repeats, s, "
                          "seed, image_size)")
    src.add_argument("--sessions", help="directory of .nds session files (default $DATA_ROOT/sessions)")
    pp.add_argument("--stimuli", help="stimulus images as .npy [n, H, W, 3] (default SESSIONS/stimuli.npy)")
    pp.add_argument("--pca-k", type=int, default=80, help="principal components kept per session")
    pp.add_argument("--surrogate", action="append", choices=SURROGATE_KINDS, help="also write this surrogate")
    pp.add_argument("--seed", type=int, default=0, help="surrogate seed")
    pp.add_argument("--per-neuron", action="store_true", help="per-column moments for v1_statistics")
    pp.add_argument("--write-sessions", action="store_true", help="also export synthetic sessions as .nds")
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_prepare)

    pt = sub.add_parser("train", help="train one run per (lambda, seed)")
    pt.add_argument("--config", help="flat key = value config file")
    pt.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    pt.add_argument("--lambda", dest="lam", nargs="+", type=float, help="one or more lambda values")
    seeds = pt.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    seeds.add_argument("--seed", type=int, nargs="+", help="explicit seeds")
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--dataset", help="neural, a surrogate kind, or none")
    pt.add_argument("--dcca-epochs", help="epoch range a..b where the regularizer is active")
    pt.add_argument("--cifar", help="cifar-100-binary directory (default $DATA_ROOT/cifar-100-binary)")
    pt.add_argument("--classes", type=int, help="keep only the first N fine classes")
    pt.add_argument("--neural", help="prepared directory (default $DATA_ROOT/prepared)")
    pt.add_argument("--out", required=True, help="root directory for run directories")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="exact and super-class accuracy of trained runs")
    pe.add_argument("runs", nargs="+")
    pe.add_argument("--cifar", help="override the test data location recorded in the manifest")
    pe.set_defaults(func=cmd_eval)

    pa = sub.add_parser("attack", help="FGSM robustness sweep of trained runs")
    pa.add_argument("runs", nargs="+")
    pa.add_argument("--strengths", nargs="+", type=float, default=[0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2])
    pa.add_argument("--cifar")
    pa.set_defaults(func=cmd_attack)

    ps = sub.add_parser("summarize", help="aggregate metrics over seeds per lambda")
    ps.add_argument("root")
    ps.add_argument("--out", help="output directory (default ROOT)")
    ps.set_defaults(func=cmd_summarize)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"ndreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, CorpusError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"ndreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"ndreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
