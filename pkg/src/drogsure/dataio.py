"""Synthetic multimodal union-of-subspaces data, the on-disk dataset format,
and run-configuration loading.

Each cluster draws one shared basis used by every modality plus one private
basis per modality.  A sample's shared coefficients are identical in every
modality; its private coefficients are drawn independently per modality.
Basis vectors are low-pass-filtered noise fields, so samples look like
spatially correlated grayscale images rather than white noise, and the
constant image lives inside every shared basis so that the [0, 1] range
normalization keeps each cluster inside its subspace.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataFormatError
from .networks import ModelConfig

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class SyntheticSpec:
    clusters: int = 4
    per_cluster: int = 40
    side: int = 8
    modalities: int = 3
    shared_dim: int = 3
    private_dim: int = 2
    noise_sigma: float = 0.01
    seed: int = 0
    smoothness: float = 1.0   # gaussian blur radius for the basis fields

    def __post_init__(self):
        problems = []
        if self.clusters < 2:
            problems.append(f"clusters must be >= 2, got {self.clusters}")
        if self.modalities < 2:
            problems.append(f"modalities must be >= 2, got {self.modalities}")
        if self.per_cluster < 4:
            problems.append(f"per_cluster must be >= 4, got {self.per_cluster}")
        if self.side < 2:
            problems.append(f"side must be >= 2, got {self.side}")
        if self.shared_dim < 1 or self.private_dim < 0:
            problems.append("shared_dim must be >= 1 and private_dim >= 0")
        if self.shared_dim + self.private_dim > self.side * self.side:
            problems.append(
                f"shared_dim + private_dim = {self.shared_dim + self.private_dim} "
                f"exceeds the pixel count {self.side * self.side}"
            )
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if problems:
            raise ConfigError("; ".join(problems))


FIXTURE_SPEC = SyntheticSpec()

# Calibrated against the 8x8 synthetic fixture: reconstruction anchored
# strongly enough (gamma) that the coefficient blocks grow before latents can
# shrink, and a short schedule that still clusters the fixture perfectly.
FIXTURE_DATA_SEED = 2024
FIXTURE_SUBSPACE_DIM = FIXTURE_SPEC.shared_dim + FIXTURE_SPEC.private_dim


def fixture_model_config(variant="drogsure", **overrides):
    """Model configuration tuned for the synthetic fixture."""
    base = dict(
        variant=variant,
        modalities=FIXTURE_SPEC.modalities,
        encoder_layers=((4, 3), (4, 3), (2, 1)),
        image_h=FIXTURE_SPEC.side,
        image_w=FIXTURE_SPEC.side,
        gamma=40.0,
        rho=1e-3,
        mu=2.0,
        lambda_group=1.0,
        lambda_comm=1.0,
        pretrain_epochs=120,
        finetune_epochs=280,
        learning_rate=2e-3,
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModalityDataset:
    """Aligned views of the same samples: one (n, h, w) array per modality."""

    modalities: list
    labels: np.ndarray = None
    split: str = "learning"

    @property
    def n(self):
        return self.modalities[0].shape[0]

    @property
    def shape(self):
        return self.modalities[0].shape[1:]

    def copy(self):
        return ModalityDataset(
            [m.copy() for m in self.modalities],
            None if self.labels is None else self.labels.copy(),
            self.split,
        )

    def subset(self, indices):
        return ModalityDataset(
            [m[indices] for m in self.modalities],
            None if self.labels is None else self.labels[indices],
            self.split,
        )


def _smooth_field_basis(rng, side, count, smoothness, orth_against=None):
    """Orthonormal columns built from blurred white-noise images."""
    hw = side * side
    cols = []
    if orth_against is not None:
        cols.extend(orth_against.T)
    made = []
    while len(made) < count:
        img = rng.standard_normal((side, side))
        if smoothness > 0:
            img = gaussian_filter(img, smoothness, mode="wrap")
        v = img.ravel()
        for c in cols:
            v = v - (c @ v) * c
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            continue
        v = v / norm
        cols.append(v)
        made.append(v)
    return np.column_stack(made)


def gen_synthetic(spec, seed=None, with_bases=False):
    """Generate aligned learning/validation splits.

    Returns ``(learning, validation)`` :class:`ModalityDataset` pairs with a
    stratified 75/25 split.  All modalities are normalized together by one
    min-max map, so shared coefficients stay identical across modalities.
    With ``with_bases`` the planted ground truth (bases and the affine
    normalization) is returned as a third element.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    side, hw = spec.side, spec.side * spec.side
    n = spec.clusters * spec.per_cluster

    dc = np.ones(hw) / np.sqrt(hw)
    shared_bases = []
    private_bases = []
    for _ in range(spec.clusters):
        extra = _smooth_field_basis(
            rng, side, spec.shared_dim - 1, spec.smoothness, orth_against=dc[:, None]
        ) if spec.shared_dim > 1 else np.zeros((hw, 0))
        shared = np.column_stack([dc] + ([extra] if extra.size else []))
        shared_bases.append(shared)
        # private directions are orthogonal to the cluster's shared subspace,
        # so shared coefficients can be recovered uncontaminated
        per_mod = [
            _smooth_field_basis(rng, side, spec.private_dim, spec.smoothness,
                                orth_against=shared)
            if spec.private_dim
            else np.zeros((hw, 0))
            for _ in range(spec.modalities)
        ]
        private_bases.append(per_mod)

    def shell(dim):
        # spherical-shell coefficients: samples stay clear of the cluster
        # centroid, like well-exposed real samples do
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return v
        return v / norm * rng.uniform(0.8, 1.6) * np.sqrt(dim)

    data = [np.zeros((n, side, side)) for _ in range(spec.modalities)]
    labels = np.zeros(n, dtype=np.int64)
    row = 0
    for p in range(spec.clusters):
        for i in range(spec.per_cluster):
            base = shared_bases[p] @ shell(spec.shared_dim)
            for t in range(spec.modalities):
                x = base.copy()
                if spec.private_dim:
                    x = x + private_bases[p][t] @ shell(spec.private_dim)
                if spec.noise_sigma > 0:
                    x = x + spec.noise_sigma * rng.standard_normal(hw)
                data[t][row + i] = x.reshape(side, side)
            labels[row + i] = p
        row += spec.per_cluster

    # one global affine map into [0, 1]; per-modality maps would decouple the
    # shared coefficients across modalities
    lo = min(float(m.min()) for m in data)
    hi = max(float(m.max()) for m in data)
    scale = hi - lo if hi > lo else 1.0
    data = [(m - lo) / scale for m in data]

    learn_idx, val_idx = [], []
    for p in range(spec.clusters):
        members = np.nonzero(labels == p)[0]
        perm = rng.permutation(members)
        cut = int(round(0.75 * members.size))
        learn_idx.extend(perm[:cut])
        val_idx.extend(perm[cut:])
    learn_idx = np.sort(np.asarray(learn_idx))
    val_idx = np.sort(np.asarray(val_idx))

    learning = ModalityDataset(
        [m[learn_idx] for m in data], labels[learn_idx], "learning"
    )
    validation = ModalityDataset(
        [m[val_idx] for m in data], labels[val_idx], "validation"
    )
    if with_bases:
        info = {
            "shared_bases": shared_bases,
            "private_bases": private_bases,
            "scale": 1.0 / scale,
            "offset": -lo / scale,
            "learning_indices": learn_idx,
            "validation_indices": val_idx,
        }
        return learning, validation, info
    return learning, validation


# ------------------------------------------------------------------ files


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(dataset, directory):
    """Write one split: manifest.json + raw little-endian float64 per modality."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = dataset.n
    h, w = dataset.shape
    mod_files = []
    for t, m in enumerate(dataset.modalities):
        fname = f"modality_{t}.f64"
        np.ascontiguousarray(m, dtype="<f8").tofile(directory / fname)
        mod_files.append(fname)
    labels_file = None
    if dataset.labels is not None:
        labels_file = "labels.csv"
        with open(directory / labels_file, "w") as fh:
            fh.write("sample_id,label\n")
            for i, lab in enumerate(dataset.labels):
                fh.write(f"{i},{int(lab)}\n")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "t": len(dataset.modalities),
        "n": n,
        "h": h,
        "w": w,
        "dtype": "<f8",
        "split": dataset.split,
        "modality_files": mod_files,
        "labels_file": labels_file,
        "checksums": {f: _sha256(directory / f) for f in mod_files},
    }
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(directory):
    """Load a split; verifies shapes and checksums, normalizes to [0, 1] only
    when the stored values fall outside that range."""
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.exists():
        raise DataFormatError(f"{directory}: no {MANIFEST_NAME}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(f"{directory}: unsupported manifest version")
    n, h, w = manifest["n"], manifest["h"], manifest["w"]
    mods = []
    for fname in manifest["modality_files"]:
        fpath = directory / fname
        if not fpath.exists():
            raise DataFormatError(f"{directory}: missing modality file {fname}")
        if manifest["checksums"].get(fname) != _sha256(fpath):
            raise DataFormatError(f"{directory}: checksum mismatch for {fname}")
        raw = np.fromfile(fpath, dtype="<f8")
        if raw.size != n * h * w:
            raise DataFormatError(
                f"{directory}: {fname} holds {raw.size} values, manifest says {n * h * w}"
            )
        arr = raw.reshape(n, h, w)
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        mods.append(arr)
    labels = None
    if manifest.get("labels_file"):
        lpath = directory / manifest["labels_file"]
        if not lpath.exists():
            raise DataFormatError(f"{directory}: missing labels file")
        rows = lpath.read_text().strip().splitlines()[1:]
        labels = np.asarray([int(r.split(",")[1]) for r in rows], dtype=np.int64)
        if labels.size != n:
            raise DataFormatError(
                f"{directory}: {labels.size} labels for {n} samples"
            )
    return ModalityDataset(mods, labels, manifest["split"])


# ------------------------------------------------------------------ config


@dataclass
class Scenario:
    kind: str = "none"                      # shuffle | gaussian_snr | none
    target_modalities: tuple = ()
    snr_db: float = None
    phase: str = "train"                    # corruption phase: train | test
    available_modalities: tuple = None      # None: all present at test
    subset_size: int = None                 # average over all subsets of this size
    seeds: tuple = (0,)
    name: str = None

    def __post_init__(self):
        problems = []
        if self.kind not in ("shuffle", "gaussian_snr", "none"):
            problems.append(f"unknown corruption kind {self.kind!r}")
        if self.kind == "gaussian_snr" and self.snr_db is None:
            problems.append("gaussian_snr scenarios need snr_db")
        if self.kind != "none" and not self.target_modalities:
            problems.append(f"{self.kind} scenarios need target_modalities")
        if self.phase not in ("train", "test"):
            problems.append(f"phase must be train or test, got {self.phase!r}")
        if self.available_modalities is not None and self.subset_size is not None:
            problems.append("give available_modalities or subset_size, not both")
        if self.available_modalities is not None and not self.available_modalities:
            problems.append("available_modalities must be non-empty")
        if not self.seeds:
            problems.append("need at least one seed")
        if problems:
            raise ConfigError("; ".join(problems))
        self.target_modalities = tuple(int(t) for t in self.target_modalities)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.available_modalities is not None:
            self.available_modalities = tuple(int(t) for t in self.available_modalities)
        if self.name is None:
            bits = [self.kind]
            if self.kind != "none":
                bits.append("mods=" + "+".join(map(str, self.target_modalities)))
                bits.append(f"@{self.phase}")
            if self.kind == "gaussian_snr":
                bits.append(f"snr={self.snr_db:g}dB")
            if self.subset_size is not None:
                bits.append(f"subset={self.subset_size}")
            elif self.available_modalities is not None:
                bits.append("avail=" + "+".join(map(str, self.available_modalities)))
            self.name = ":".join(bits)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RunConfig:
    model: ModelConfig
    clusters: int
    learning_dir: str = None
    validation_dir: str = None
    scenarios: list = field(default_factory=list)
    out_dir: str = None
    seed: int = 0

    def to_dict(self):
        return {
            "variant": self.model.variant,
            "clusters": self.clusters,
            "dataset": {"learning": self.learning_dir, "validation": self.validation_dir},
            "model": {
                k: v for k, v in self.model.to_dict().items() if k != "variant"
            },
            "scenarios": [s.to_dict() for s in self.scenarios],
            "out_dir": self.out_dir,
            "seed": self.seed,
        }


_MODEL_KEYS = {
    "modalities", "encoder_layers", "image_h", "image_w", "gamma", "rho", "mu",
    "lambda_group", "lambda_comm", "pretrain_epochs", "finetune_epochs",
    "learning_rate", "seed",
}
_SCENARIO_KEYS = {
    "kind", "target_modalities", "snr_db", "phase", "available_modalities",
    "subset_size", "seeds", "name",
}
_TOP_KEYS = {"variant", "dataset", "model", "clusters", "scenarios", "out_dir", "seed"}


def load_config(path):
    """Parse and validate a JSON run configuration.

    Unknown keys are rejected; every violated constraint is reported in a
    single error message.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        problems.append(f"unknown keys: {sorted(unknown)}")
    if "variant" not in raw:
        problems.append("missing required key 'variant'")
    if "dataset" not in raw:
        problems.append("missing required key 'dataset'")

    model_raw = dict(raw.get("model", {}))
    unknown_model = set(model_raw) - _MODEL_KEYS
    if unknown_model:
        problems.append(f"unknown model keys: {sorted(unknown_model)}")
        for k in unknown_model:
            model_raw.pop(k)
    model_raw["variant"] = raw.get("variant", "drogsure")
    if "seed" not in model_raw and "seed" in raw:
        model_raw["seed"] = raw["seed"]
    if "encoder_layers" in model_raw:
        try:
            model = ModelConfig.from_dict({**ModelConfig().to_dict(), **model_raw})
        except ConfigError as exc:
            problems.append(str(exc))
            model = None
    else:
        try:
            model = ModelConfig(**model_raw)
        except (ConfigError, TypeError) as exc:
            problems.append(str(exc))
            model = None

    dataset = raw.get("dataset", {})
    learning_dir = validation_dir = None
    if isinstance(dataset, str):
        learning_dir = str(Path(dataset) / "learning")
        validation_dir = str(Path(dataset) / "validation")
    elif isinstance(dataset, dict):
        unknown_ds = set(dataset) - {"learning", "validation"}
        if unknown_ds:
            problems.append(f"unknown dataset keys: {sorted(unknown_ds)}")
        learning_dir = dataset.get("learning")
        validation_dir = dataset.get("validation")
    elif "dataset" in raw:
        problems.append("dataset must be a path or {learning, validation} object")
    if "dataset" in raw and not learning_dir:
        problems.append("dataset must name a learning split")
    for label, d in (("learning", learning_dir), ("validation", validation_dir)):
        if d is not None and not (Path(d) / MANIFEST_NAME).exists():
            problems.append(f"{label} dataset path {d!r} has no {MANIFEST_NAME}")

    scenarios = []
    for i, sraw in enumerate(raw.get("scenarios", [])):
        unknown_s = set(sraw) - _SCENARIO_KEYS
        if unknown_s:
            problems.append(f"scenario {i}: unknown keys {sorted(unknown_s)}")
            sraw = {k: v for k, v in sraw.items() if k in _SCENARIO_KEYS}
        for tup in ("target_modalities", "available_modalities", "seeds"):
            if tup in sraw and sraw[tup] is not None:
                sraw[tup] = tuple(sraw[tup])
        try:
            scenarios.append(Scenario(**sraw))
        except ConfigError as exc:
            problems.append(f"scenario {i}: {exc}")

    clusters = raw.get("clusters", 2)
    if not isinstance(clusters, int) or clusters < 2:
        problems.append(f"clusters must be an integer >= 2, got {clusters!r}")

    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return RunConfig(
        model=model,
        clusters=clusters,
        learning_dir=learning_dir,
        validation_dir=validation_dir,
        scenarios=scenarios,
        out_dir=raw.get("out_dir"),
        seed=int(raw.get("seed", 0)),
    )
