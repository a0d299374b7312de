"""DT-Net: five encoder MDIC modules, five decoder MDIC modules and a 1x1 classifier."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from dtnet import ops
from dtnet.dataio import dtt_bytes, dtt_read
from dtnet.mdic import (
    DmParams,
    EmParams,
    MdicConfig,
    ParamSpec,
    ThresholdSpec,
    conv_specs,
    dm_forward,
    dm_param_specs,
    em_forward,
    em_param_specs,
)
from dtnet.tensor import Tensor, as_tensor

ARCHIVE_VERSION = "dtnet-archive-v1"
PAPER_TOTAL_PARAMS = 5_272_277
PAPER_NO_MDIC_PARAMS = 7_651_541


@dataclass(frozen=True)
class DtNetConfig:
    encoder_filters: tuple[int, ...] = (24, 48, 96, 192, 192)
    decoder_filters: tuple[int, ...] | None = None
    num_classes: int = 5
    input_channels: int = 1
    input_size: int = 256
    part_kernels: tuple[int, int, int, int] = (1, 3, 5, 7)
    global_kernel: int = 3
    multiscale: bool = True
    threshold: ThresholdSpec = field(default_factory=ThresholdSpec)
    disable_mdic: bool = False
    disable_threshold: bool = False
    disable_skip: bool = False

    def __post_init__(self):
        enc = tuple(int(f) for f in self.encoder_filters)
        object.__setattr__(self, "encoder_filters", enc)
        dec = tuple(reversed(enc)) if self.decoder_filters is None else tuple(self.decoder_filters)
        object.__setattr__(self, "decoder_filters", dec)
        object.__setattr__(self, "part_kernels", tuple(self.part_kernels))
        if len(enc) != 5:
            raise ValueError("DT-Net has exactly five encoder modules")
        if dec != tuple(reversed(enc)):
            raise ValueError("decoder_filters must be encoder_filters reversed")
        if any(f < 4 or f % 4 for f in enc):
            raise ValueError(f"filter counts must be positive multiples of 4, got {enc}")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a multiple of 32, got {self.input_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        # validates kernel sizes once
        self.mdic(self.input_channels, enc[0])

    def mdic(self, cin: int, cout: int) -> MdicConfig:
        return MdicConfig(
            cin,
            cout,
            self.part_kernels,
            self.global_kernel,
            multiscale=self.multiscale,
            directional=not self.disable_mdic,
        )

    def encoder_mdic(self) -> list[MdicConfig]:
        chans = (self.input_channels, *self.encoder_filters)
        return [self.mdic(chans[i], chans[i + 1]) for i in range(5)]

    def decoder_mdic(self) -> list[MdicConfig]:
        chans = (self.encoder_filters[-1], *self.decoder_filters)
        return [self.mdic(chans[i], chans[i + 1]) for i in range(5)]

    @property
    def effective_threshold(self) -> ThresholdSpec | None:
        return None if self.disable_threshold else self.threshold

    # -- plain-text form ---------------------------------------------------

    def to_pairs(self) -> list[tuple[str, str]]:
        d = asdict(self)
        th = d.pop("threshold")
        pairs = []
        for key, value in d.items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            pairs.append((key, str(value)))
        pairs += [
            ("threshold_T", repr(float(th["T"]))),
            ("threshold_variant", th["variant"]),
            ("threshold_epsilon", repr(float(th["epsilon"]))),
        ]
        return pairs

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "DtNetConfig":
        def ints(key):
            return tuple(int(v) for v in pairs[key].split(","))

        def flag(key):
            if pairs[key] not in ("true", "false"):
                raise ValueError(f"{key} must be true or false")
            return pairs[key] == "true"

        try:
            return cls(
                encoder_filters=ints("encoder_filters"),
                decoder_filters=ints("decoder_filters"),
                num_classes=int(pairs["num_classes"]),
                input_channels=int(pairs["input_channels"]),
                input_size=int(pairs["input_size"]),
                part_kernels=ints("part_kernels"),
                global_kernel=int(pairs["global_kernel"]),
                multiscale=flag("multiscale"),
                threshold=ThresholdSpec(
                    float(pairs["threshold_T"]),
                    pairs["threshold_variant"],
                    float(pairs["threshold_epsilon"]),
                ),
                disable_mdic=flag("disable_mdic"),
                disable_threshold=flag("disable_threshold"),
                disable_skip=flag("disable_skip"),
            )
        except KeyError as exc:
            raise ValueError(f"config is missing key {exc.args[0]}") from None

    def digest(self) -> str:
        text = "\n".join(f"{k} = {v}" for k, v in self.to_pairs())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def param_specs(config: DtNetConfig) -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    for m, cfg in enumerate(config.encoder_mdic(), 1):
        specs += em_param_specs(f"enc{m}", cfg)
    for m, cfg in enumerate(config.decoder_mdic(), 1):
        specs += dm_param_specs(f"dec{m}", cfg)
    specs += conv_specs("classifier", config.decoder_filters[-1], config.num_classes, 1, bn=False)
    return specs


class ParamStore:
    """Ordered name -> Tensor map with a trainable flag per entry."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name}")
        self._tensors[name] = tensor
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def count(self, trainable: bool = True) -> int:
        return sum(t.size for n, t in self._tensors.items() if self._trainable[n] == trainable)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode())
            h.update(dtt_bytes(t))
        return h.hexdigest()


class Model:
    def __init__(self, config: DtNetConfig, store: ParamStore):
        self.config = config
        self.store = store
        th = config.effective_threshold
        self.encoders = [
            EmParams.from_store(store, f"enc{m}", cfg, th)
            for m, cfg in enumerate(config.encoder_mdic(), 1)
        ]
        self.decoders = [
            DmParams.from_store(store, f"dec{m}", cfg)
            for m, cfg in enumerate(config.decoder_mdic(), 1)
        ]
        self.classifier_w = store["classifier/conv/weight"]
        self.classifier_b = store["classifier/conv/bias"]
        self._check_skip_pairing()

    def _check_skip_pairing(self) -> None:
        s = self.config.input_size
        skip_shapes = [(f, s >> i) for i, f in enumerate(self.config.encoder_filters)]
        h = s >> 5
        for j, dec in enumerate(self.decoders):
            h *= 2
            want = (dec.cfg.out_channels, h)
            if skip_shapes[4 - j] != want:
                raise ValueError(f"dec{j + 1} expects skip {want}, encoder gives {skip_shapes[4 - j]}")

    @property
    def dtype(self) -> np.dtype:
        return self.classifier_w.dtype

    def forward(self, x, mode: str = "infer", capture: dict | None = None) -> Tensor:
        """Logits (N, num_classes, S, S); softmax is left to the loss."""
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise ValueError(f"expected input (N, {cfg.input_channels}, S, S), got {x.shape}")
        if x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(f"expected spatial extent {cfg.input_size}, got {x.shape[2:]}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        skips = []
        h = x
        for m, em in enumerate(self.encoders, 1):
            cap = {} if capture is not None else None
            skip, h = em_forward(h, em, mode, capture=cap)
            skips.append(skip)
            if capture is not None:
                capture[f"enc{m}"] = cap
        for j, dm in enumerate(self.decoders):
            skip = skips[4 - j]
            if cfg.disable_skip:
                skip = Tensor(np.zeros_like(skip.data))
            h = dm_forward(h, skip, dm, mode)
        return ops.conv2d(h, self.classifier_w, self.classifier_b)

    def predict(self, x, batch_size: int = 8) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        out = [
            self.forward(x[i : i + batch_size], "infer").data.argmax(axis=1)
            for i in range(0, len(x), batch_size)
        ]
        return np.concatenate(out).astype(np.uint8)


def build(config: DtNetConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Allocate every parameter in name order from one seeded generator.

    Convolution weights are He-uniform, biases and BN shifts zero, BN scales
    one, running statistics (0, 1).
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for spec in param_specs(config):
        if spec.init == "he":
            bound = np.sqrt(6.0 / spec.fan_in)
            arr = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == "ones":
            arr = np.ones(spec.shape)
        else:
            arr = np.zeros(spec.shape)
        store.add(spec.name, Tensor(arr.astype(dtype)), spec.trainable)
    return Model(config, store)


def forward(model: Model, x, mode: str = "infer") -> Tensor:
    return model.forward(x, mode)


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamCount:
    total: int
    non_trainable: int
    breakdown: dict[str, int]

    def delta(self, reference: int = PAPER_TOTAL_PARAMS) -> int:
        return self.total - reference


def _count_specs(specs: list[ParamSpec]) -> ParamCount:
    breakdown: dict[str, int] = {}
    total = frozen = 0
    for spec in specs:
        n = int(np.prod(spec.shape))
        if spec.trainable:
            total += n
            module = spec.name.split("/", 1)[0]
            breakdown[module] = breakdown.get(module, 0) + n
        else:
            frozen += n
    return ParamCount(total, frozen, breakdown)


def count_params(model: Model) -> ParamCount:
    """Trainable weights, biases, BN gamma and beta; running statistics counted separately."""
    breakdown: dict[str, int] = {}
    for name, t in model.store.trainable():
        module = name.split("/", 1)[0]
        breakdown[module] = breakdown.get(module, 0) + t.size
    return ParamCount(model.store.count(True), model.store.count(False), breakdown)


def count_config_params(config: DtNetConfig) -> ParamCount:
    """Same as :func:`count_params` without allocating the weights."""
    return _count_specs(param_specs(config))


def ablation_config(config: DtNetConfig, **flags) -> DtNetConfig:
    return replace(config, **flags)


# ---------------------------------------------------------------------------
# archive


class ArchiveError(ValueError):
    pass


def _tensor_filename(name: str) -> str:
    return name.replace("/", ".") + ".dtt"


def save(model: Model, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [ARCHIVE_VERSION, f"dtype = {np.dtype(model.dtype).name}"]
    lines += [f"{k} = {v}" for k, v in model.config.to_pairs()]
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, t in model.store.items():
        (out / _tensor_filename(name)).write_bytes(dtt_bytes(t))
    return out


def read_config(path) -> tuple[DtNetConfig, np.dtype]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != ARCHIVE_VERSION:
        found = text[0].strip() if text else "<empty>"
        raise ArchiveError(f"archive version mismatch: expected {ARCHIVE_VERSION}, found {found}")
    pairs = {}
    for line in text[1:]:
        if line.strip():
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    dtype = np.dtype(pairs.pop("dtype", "float32"))
    return DtNetConfig.from_pairs(pairs), dtype


def load(path) -> Model:
    root = Path(path)
    cfg_path = root / "config.txt"
    if not cfg_path.exists():
        raise ArchiveError(f"{root}: no config.txt")
    config, dtype = read_config(cfg_path)
    store = ParamStore()
    for spec in param_specs(config):
        fpath = root / _tensor_filename(spec.name)
        if not fpath.exists():
            raise ArchiveError(f"missing tensor file for parameter {spec.name} ({fpath.name})")
        arr = dtt_read(fpath)
        if arr.shape != spec.shape:
            raise ArchiveError(f"parameter {spec.name}: shape {arr.shape}, config expects {spec.shape}")
        store.add(spec.name, Tensor(arr.astype(dtype, copy=False)), spec.trainable)
    return Model(config, store)
