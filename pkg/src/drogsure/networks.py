"""Multi-branch self-expressive autoencoders and their training loop.

Three variants share one container:

* ``drogsure`` — one encoder/self-expressive-layer/decoder bank per modality;
  the T coefficient matrices are tied only through the group and commutator
  loss terms.
* ``dmsc``     — per-modality encoders and decoders around a single shared
  coefficient matrix.
* ``concat``   — per-modality encoders feeding one coefficient matrix over the
  channel-concatenated code; every decoder branch consumes the full
  self-expressed stacked code.

Latent codes are stored with samples as rows.  A coefficient matrix W acts on
a code matrix L as ``W.T @ L``: sample i is rebuilt from the other samples
with the column-i coefficients, and the diagonal is pinned to zero so no
sample ever expresses itself.
"""

import io
import json
import struct
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics
from .errors import ConfigError, DataFormatError, DimensionError, TrainingError

VARIANTS = ("drogsure", "dmsc", "concat")

CHECKPOINT_MAGIC = b"DRGSCKPT"
CHECKPOINT_VERSION = 1

# Encoder stacks used in the reference experiments: (filters, kernel) triples.
ARL_ENCODER = ((5, 3), (7, 1), (15, 1))
EYB_ENCODER = ((10, 5), (20, 3), (30, 3))


@dataclass(frozen=True)
class LayerSpec:
    """One convolution layer: filter count and (odd) kernel size."""

    filters: int
    kernel: int

    def __post_init__(self):
        if self.filters < 1:
            raise ConfigError(f"layer filters must be >= 1, got {self.filters}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"layer kernel must be odd and >= 1, got {self.kernel}")


def layer_specs(pairs):
    return tuple(LayerSpec(int(f), int(k)) for f, k in pairs)


@dataclass
class ModelConfig:
    variant: str = "drogsure"
    modalities: int = 2
    encoder_layers: tuple = layer_specs(ARL_ENCODER)
    image_h: int = 32
    image_w: int = 32
    gamma: float = 1.0
    rho: float = 1e-3
    mu: float = 20.0
    lambda_group: float = 1.0
    lambda_comm: float = 1.0
    pretrain_epochs: int = 200
    finetune_epochs: int = 1000
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.encoder_layers and not isinstance(self.encoder_layers[0], LayerSpec):
            self.encoder_layers = layer_specs(self.encoder_layers)
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self):
        """Every violated constraint, so callers can report all at once."""
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.modalities < 1:
            out.append(f"modalities must be >= 1, got {self.modalities}")
        if not 1 <= len(self.encoder_layers) <= 6:
            out.append(
                f"encoder_layers must have 1..6 entries, got {len(self.encoder_layers)}"
            )
        if self.image_h < 1 or self.image_w < 1:
            out.append("image dimensions must be positive")
        if self.gamma <= 0:
            out.append(f"gamma must be > 0, got {self.gamma}")
        if self.mu <= 0:
            out.append(f"mu must be > 0, got {self.mu}")
        for name in ("rho", "lambda_group", "lambda_comm"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            out.append("epoch counts must be >= 0")
        if self.learning_rate <= 0:
            out.append(f"learning_rate must be > 0, got {self.learning_rate}")
        return out

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["encoder_layers"] = [[s.filters, s.kernel] for s in self.encoder_layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder_layers"] = layer_specs(d["encoder_layers"])
        return cls(**d)


@dataclass
class ForwardCache:
    """Everything a loss evaluation needs from one forward pass."""

    latents: list            # per modality, (n, d_t)
    latent_maps: list        # per modality, (n, h, w, c_last)
    se_codes: list           # per modality, (n, d_t); concat: per-branch view
    recons: list             # per modality, (n, h, w, 1)
    stacked_code: np.ndarray = None   # concat only: (n, sum d_t)
    stacked_se: np.ndarray = None     # concat only: (n, sum d_t)


class _BranchCache:
    __slots__ = ("inputs", "preacts", "output")

    def __init__(self):
        self.inputs = []
        self.preacts = []
        self.output = None


def self_express(codes, coeff):
    """Mix sample codes with a zero-diagonal coefficient matrix.

    Row i of the result is the column-i-weighted combination of all other
    rows of ``codes``.
    """
    coeff = np.asarray(coeff, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if coeff.ndim != 2 or coeff.shape[0] != coeff.shape[1]:
        raise DimensionError(f"coefficient matrix must be square, got {coeff.shape}")
    if coeff.shape[0] != codes.shape[0]:
        raise DimensionError(
            f"coefficient side {coeff.shape[0]} does not match code rows {codes.shape[0]}"
        )
    if np.any(np.diag(coeff) != 0.0):
        raise ValueError("coefficient matrix has nonzero diagonal entries")
    return coeff.T @ codes


class MultiBranchAutoencoder:
    """Parameter container plus forward passes for all three variants."""

    def __init__(self, config, n):
        if n < 2:
            raise ConfigError(f"need at least 2 samples, got {n}")
        self.config = config
        self.n = int(n)
        self.params = {}
        self._build()

    # ------------------------------------------------------------------ setup

    def _encoder_channels(self):
        return [1] + [s.filters for s in self.config.encoder_layers]

    def decoder_specs(self):
        """(kernel, c_in, c_out) per decoder layer: the encoder mirrored.

        Kernel sizes reverse the encoder's; the channel path walks the encoder
        channels backwards down to the single image channel.  The first layer
        of the concat variant consumes the T-fold stacked code.
        """
        chans = self._encoder_channels()
        kernels = [s.kernel for s in self.config.encoder_layers][::-1]
        specs = []
        for j, k in enumerate(kernels):
            c_in = chans[len(chans) - 1 - j]
            c_out = chans[len(chans) - 2 - j]
            if j == 0 and self.config.variant == "concat":
                c_in *= self.config.modalities
            specs.append((k, c_in, c_out))
        return specs

    @property
    def latent_channels(self):
        return self.config.encoder_layers[-1].filters

    @property
    def latent_dim(self):
        return self.config.image_h * self.config.image_w * self.latent_channels

    @property
    def coeff_side(self):
        return self.n

    def _build(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)

        def glorot(shape, fan_in, fan_out):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-s, s, size=shape)

        for t in range(cfg.modalities):
            c_prev = 1
            for i, spec in enumerate(cfg.encoder_layers):
                k = spec.kernel
                shape = (k, k, c_prev, spec.filters)
                self.params[f"enc{t}.conv{i}.kernel"] = glorot(
                    shape, k * k * c_prev, k * k * spec.filters
                )
                self.params[f"enc{t}.conv{i}.bias"] = np.zeros(spec.filters)
                c_prev = spec.filters

        for name in self.se_block_names():
            w = rng.uniform(-1e-4, 1e-4, size=(self.n, self.n))
            np.fill_diagonal(w, 0.0)
            self.params[name] = w

        for t in range(cfg.modalities):
            for j, (k, c_in, c_out) in enumerate(self.decoder_specs()):
                shape = (k, k, c_out, c_in)
                self.params[f"dec{t}.conv{j}.kernel"] = glorot(
                    shape, k * k * c_in, k * k * c_out
                )
                self.params[f"dec{t}.conv{j}.bias"] = np.zeros(c_out)

    # ------------------------------------------------------------- block maps

    def se_block_names(self):
        if self.config.variant == "drogsure":
            return [f"se{t}.coeff" for t in range(self.config.modalities)]
        return ["se.coeff"]

    def encoder_block(self, t):
        return [
            f"enc{t}.conv{i}.{part}"
            for i in range(len(self.config.encoder_layers))
            for part in ("kernel", "bias")
        ]

    def decoder_block(self, t):
        return [
            f"dec{t}.conv{j}.{part}"
            for j in range(len(self.decoder_specs()))
            for part in ("kernel", "bias")
        ]

    def se_block(self, t):
        if self.config.variant == "drogsure":
            return [f"se{t}.coeff"]
        return ["se.coeff"]

    def coeff_matrices(self):
        return [self.params[name] for name in self.se_block_names()]

    def zero_coeff_diagonal(self):
        for name in self.se_block_names():
            np.fill_diagonal(self.params[name], 0.0)

    # --------------------------------------------------------------- forwards

    def _check_input(self, t, x):
        cfg = self.config
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != (cfg.image_h, cfg.image_w, 1):
            raise DimensionError(
                f"modality {t} images have shape {x.shape[1:]}, expected "
                f"({cfg.image_h}, {cfg.image_w}, 1)"
            )
        if x.shape[0] != self.n:
            raise DimensionError(
                f"modality {t} sample axis is {x.shape[0]}, model was built for {self.n}"
            )
        return np.ascontiguousarray(x, dtype=np.float64)

    def encode_cached(self, t, x):
        x = self._check_input(t, x)
        cache = _BranchCache()
        a = x
        for i, spec in enumerate(self.config.encoder_layers):
            k = self.params[f"enc{t}.conv{i}.kernel"]
            b = self.params[f"enc{t}.conv{i}.bias"]
            pre = numerics.conv2d(a, k, b, activation="identity")
            cache.inputs.append(a)
            cache.preacts.append(pre)
            a = numerics.apply_activation(pre, "relu")
        cache.output = a
        return cache

    def encode(self, t, x):
        """Latent code of modality t: the flattened final feature map."""
        out = self.encode_cached(t, x).output
        return out.reshape(out.shape[0], -1)

    def decode_cached(self, t, code_map):
        cache = _BranchCache()
        a = code_map
        specs = self.decoder_specs()
        for j, (k, c_in, c_out) in enumerate(specs):
            kern = self.params[f"dec{t}.conv{j}.kernel"]
            b = self.params[f"dec{t}.conv{j}.bias"]
            pre = numerics.conv2d_transpose(a, kern, b, activation="identity")
            cache.inputs.append(a)
            cache.preacts.append(pre)
            act = "identity" if j == len(specs) - 1 else "relu"
            a = numerics.apply_activation(pre, act)
        cache.output = a
        return cache

    def decode(self, t, code_map):
        return self.decode_cached(t, code_map).output

    def _latent_map(self, latent):
        cfg = self.config
        return latent.reshape(-1, cfg.image_h, cfg.image_w, self.latent_channels)

    def forward(self, modalities):
        """Full forward pass; ``modalities`` is a list of (n, h, w) arrays."""
        cfg = self.config
        mods = list(getattr(modalities, "modalities", modalities))
        if len(mods) != cfg.modalities:
            raise DimensionError(
                f"dataset has {len(mods)} modalities, model expects {cfg.modalities}"
            )
        latent_maps = [self.encode_cached(t, mods[t]).output for t in range(cfg.modalities)]
        latents = [m.reshape(m.shape[0], -1) for m in latent_maps]

        # the raw matmul form keeps the loss differentiable in every coefficient
        # entry; the zero-diagonal constraint is enforced by the trainer's
        # projection, not by the forward pass
        if cfg.variant == "concat":
            stacked_map = np.concatenate(latent_maps, axis=3)
            stacked = stacked_map.reshape(stacked_map.shape[0], -1)
            w = self.params["se.coeff"]
            se_stacked = w.T @ stacked
            se_map = se_stacked.reshape(stacked_map.shape)
            recons = [self.decode(t, se_map) for t in range(cfg.modalities)]
            # per-branch views of the stacked code, aligned with the latents
            splits = np.cumsum([m.shape[3] for m in latent_maps])[:-1]
            se_codes = [
                part.reshape(part.shape[0], -1)
                for part in np.split(se_map, splits, axis=3)
            ]
            return ForwardCache(latents, latent_maps, se_codes, recons,
                                stacked_code=stacked, stacked_se=se_stacked)

        coeffs = self.coeff_matrices()
        se_codes, recons = [], []
        for t in range(cfg.modalities):
            w = coeffs[t] if cfg.variant == "drogsure" else coeffs[0]
            se = w.T @ latents[t]
            se_codes.append(se)
            recons.append(self.decode(t, self._latent_map(se)))
        return ForwardCache(latents, latent_maps, se_codes, recons)


def build_model(config, n):
    """Construct a :class:`MultiBranchAutoencoder` for ``n`` samples."""
    return MultiBranchAutoencoder(config, n)


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    loss_trace: np.ndarray
    warnings: list
    pretrain_epochs: int
    finetune_epochs: int
    optimizers: dict = field(default_factory=dict, repr=False)


def _block_groups(model):
    groups = {}
    for t in range(model.config.modalities):
        groups[f"enc{t}"] = model.encoder_block(t)
        groups[f"dec{t}"] = model.decoder_block(t)
    if model.config.variant == "drogsure":
        for t in range(model.config.modalities):
            groups[f"se{t}"] = model.se_block(t)
    else:
        groups["se"] = ["se.coeff"]
    return groups


def train(model, dataset, config=None, optimizers=None, skip_pretrain=False):
    """Block-coordinate training.

    Phase 1 pretrains encoders/decoders on a reconstruction-only objective
    with the self-expressive layer bypassed (it stays at its init).  Phase 2
    sweeps modalities in order, stepping the encoder, then the coefficient
    block, then the decoder of each, holding everything else fixed; the
    coefficient diagonal is re-zeroed after every step.

    Returns the per-epoch loss trace (pretrain epochs record the
    reconstruction objective, finetune epochs the full objective).
    """
    from . import objectives  # deferred: objectives imports nothing from here

    cfg = config or model.config
    mods = [
        np.ascontiguousarray(m, dtype=np.float64)
        for m in getattr(dataset, "modalities", dataset)
    ]
    if len(mods) != cfg.modalities:
        raise DimensionError(
            f"dataset has {len(mods)} modalities, config expects {cfg.modalities}"
        )
    groups = _block_groups(model)
    if optimizers is None:
        optimizers = {g: numerics.Adam(cfg.learning_rate) for g in groups}
    trace = []
    notes = []

    n_pre = 0 if skip_pretrain else cfg.pretrain_epochs
    for epoch in range(n_pre):
        for t in range(cfg.modalities):
            for kind, group in (("enc", f"enc{t}"), ("dec", f"dec{t}")):
                grads = objectives.pretrain_block_backprop(model, mods, kind, t)
                names = groups[group]
                sub = {n: model.params[n] for n in names}
                optimizers[group].step(sub, {n: grads[n] for n in names})
                model.zero_coeff_diagonal()
        loss = objectives.pretrain_loss(model, mods, cfg)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite pretrain loss at epoch {epoch}")
        trace.append(loss)

    for epoch in range(cfg.finetune_epochs):
        for t in range(cfg.modalities):
            for kind in ("enc", "se", "dec"):
                grads = objectives.block_backprop(model, mods, kind, t)
                group = "se" if (kind == "se" and cfg.variant != "drogsure") else f"{kind}{t}"
                names = groups[group]
                sub = {n: model.params[n] for n in names}
                optimizers[group].step(sub, {n: grads[n] for n in names})
                model.zero_coeff_diagonal()
        breakdown = objectives.model_loss(model, mods, cfg)
        if not np.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss at finetune epoch {epoch}")
        trace.append(breakdown.total)

    window = 20
    ft = trace[n_pre:]
    if len(ft) > window:
        means = np.convolve(ft, np.ones(window) / window, mode="valid")
        rises = np.nonzero(np.diff(means) > 1e-12 * np.abs(means[:-1]))[0]
        if rises.size:
            msg = (
                f"trailing-window mean loss increased at finetune epoch "
                f"{int(rises[0]) + window}"
            )
            notes.append(msg)
            warnings.warn(msg)

    return TrainResult(
        loss_trace=np.asarray(trace),
        warnings=notes,
        pretrain_epochs=n_pre,
        finetune_epochs=cfg.finetune_epochs,
        optimizers=optimizers,
    )


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(model, path, optimizers=None, epochs_completed=None):
    """Versioned container: JSON header + raw little-endian float64 blocks."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.config.variant,
        "seed": model.config.seed,
        "n": model.n,
        "config": model.config.to_dict(),
        "blocks": [
            {"name": name, "shape": list(model.params[name].shape)}
            for name in model.params
        ],
        "opt_blocks": [],
        "opt_steps": {},
        "epochs_completed": epochs_completed or {"pretrain": 0, "finetune": 0},
    }
    opt_arrays = []
    if optimizers:
        for gname in sorted(optimizers):
            opt = optimizers[gname]
            header["opt_steps"][gname] = opt.step_count
            for key, arr in sorted(opt.state_blocks().items()):
                header["opt_blocks"].append(
                    {"name": f"{gname}|{key}", "shape": list(arr.shape)}
                )
                opt_arrays.append(arr)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for name in model.params:
        buf.write(model.params[name].astype("<f8").tobytes())
    for arr in opt_arrays:
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Rebuild the model (and optimizer states, if stored) from a checkpoint."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    if header["format_version"] != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported checkpoint version {header['format_version']}"
        )
    config = ModelConfig.from_dict(header["config"])
    model = MultiBranchAutoencoder(config, header["n"])

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        return np.array(arr)

    for blk in header["blocks"]:
        if blk["name"] not in model.params:
            raise DataFormatError(f"{path}: unknown parameter block {blk['name']!r}")
        if list(model.params[blk["name"]].shape) != blk["shape"]:
            raise DataFormatError(
                f"{path}: block {blk['name']!r} shape {blk['shape']} does not match "
                f"model shape {list(model.params[blk['name']].shape)}"
            )
        model.params[blk["name"]] = take(blk["shape"])

    optimizers = {}
    per_group = {}
    for blk in header["opt_blocks"]:
        gname, key = blk["name"].split("|", 1)
        per_group.setdefault(gname, {})[key] = take(blk["shape"])
    for gname, blocks in per_group.items():
        opt = numerics.Adam(config.learning_rate)
        opt.load_state_blocks(blocks, header["opt_steps"][gname])
        optimizers[gname] = opt
    return model, optimizers or None, header.get("epochs_completed", {})
