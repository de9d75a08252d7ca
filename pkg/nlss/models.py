"""Per-modality mini U-Nets and their single / middle / late fusion wiring.

Each modality owns an encoder.  In late fusion each modality also owns a decoder; in middle
fusion both modalities route through one decoder object, so parameters and batch-norm running
statistics are stored once and every update is seen by both.
"""
import copy
import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Tuple
import numpy as np
from nlss.utils import exporter, derive_seed, dataclass_from_dict, ConfigError, DimensionError
from nlss.tensor import Tensor, concat, softmax, upsample_nearest2d
from nlss.layers import Module, Conv2d, ConvBNReLU


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

FUSION_MODES = ("single", "middle", "late")


@export
@dataclass
class MiniUNetConfig:
    in_channels: Tuple[int, int] = (2, 2)
    base_width: int = 16
    depth: int = 3
    num_classes: int = 4
    input_size: int = 64

    def __post_init__(self):
        self.in_channels = tuple(int(c) for c in self.in_channels)
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1 or self.num_classes < 1 or any(c < 1 for c in self.in_channels):
            raise ConfigError("widths, channel counts and num_classes must be positive")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(f"input size {self.input_size} is not divisible by 2^{self.depth}")

    @property
    def widths(self) -> List[int]:
        return [self.base_width * (k + 1) for k in range(self.depth + 1)]

    @classmethod
    def from_dict(cls, **kwargs) -> "MiniUNetConfig":
        return dataclass_from_dict(cls, kwargs)


@export
@dataclass
class FusionSpec:
    mode: str = "middle"
    modality: int = 1

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if self.modality not in (1, 2):
            raise ConfigError(f"modality must be 1 or 2, got {self.modality}")

    @property
    def share_decoder(self) -> bool:
        return self.mode == "middle"

    @property
    def modalities(self) -> Tuple[int, ...]:
        return (self.modality,) if self.mode == "single" else (1, 2)


@export
class Encoder(Module):
    """Stem at full resolution followed by `depth` stride-2 stages"""

    def __init__(self, in_channels: int, widths: List[int], rng: np.random.Generator):
        super().__init__()
        self.in_channels = in_channels
        self.stem = [ConvBNReLU(in_channels, widths[0], rng=rng), ConvBNReLU(widths[0], widths[0], rng=rng)]
        self.stages = [ConvBNReLU(widths[k - 1], widths[k], stride=2, rng=rng) for k in range(1, len(widths))]

    @property
    def widths(self) -> List[int]:
        return [self.stem[0].conv.weight.shape[0]] + [stage.conv.weight.shape[0] for stage in self.stages]

    def forward(self, x: Tensor) -> List[Tensor]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError("encoder", f"expected [B, {self.in_channels}, H, W], got {x.shape}")
        step = 2 ** len(self.stages)
        if x.shape[2] % step or x.shape[3] % step:
            raise ConfigError(f"input {x.shape[2]}x{x.shape[3]} is not divisible by {step}")
        h = x
        for block in self.stem:
            h = block(h)
        features = [h]
        for stage in self.stages:
            h = stage(h)
            features.append(h)
        return features


@export
class Decoder(Module):
    """Nearest upsampling, skip concatenation, conv block per stage, then a 1x1 class head"""

    def __init__(self, widths: List[int], num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.num_classes = num_classes
        self.ups = [
            ConvBNReLU(widths[k] + widths[k - 1], widths[k - 1], rng=rng) for k in range(len(widths) - 1, 0, -1)
        ]
        self.head = Conv2d(widths[0], num_classes, kernel_size=1, padding=0, bias=True, rng=rng)

    def forward(self, features: List[Tensor]) -> Tensor:
        h = features[-1]
        for block, skip in zip(self.ups, reversed(features[:-1])):
            h = block(concat([upsample_nearest2d(h, 2), skip], axis=1))
        return self.head(h)


@export
class SegmentationModel(Module):
    """One encoder and one decoder, the unit that is transferred downstream"""

    def __init__(self, encoder: Encoder, decoder: Decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def logits(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))

    def forward(self, x: Tensor) -> Tensor:
        return softmax(self.logits(x), axis=1)


@export
class ModelPair(Module):
    """Encoder/decoder per modality, with the decoder aliased under middle fusion"""

    def __init__(self, config: MiniUNetConfig, fusion: FusionSpec, seed: int):
        super().__init__()
        self.config = config
        self.fusion = fusion
        self.seed = seed
        widths = config.widths
        for d in (1, 2):
            encoder = None
            if d in fusion.modalities:
                encoder = Encoder(config.in_channels[d - 1], widths, derive_seed(seed, d))
            setattr(self, f"encoder{d}", encoder)
        decoders = {d: None for d in (1, 2)}
        for d in fusion.modalities:
            if fusion.share_decoder and d == 2:
                decoders[d] = decoders[1]
            else:
                # late fusion decoders start identical and drift apart under training
                decoders[d] = Decoder(widths, config.num_classes, derive_seed(seed, 0))
        self.decoder1 = decoders[1]
        self.decoder2 = decoders[2]

    @property
    def modalities(self) -> Tuple[int, ...]:
        return self.fusion.modalities

    def encoder(self, d: int) -> Encoder:
        enc = getattr(self, f"encoder{d}", None)
        if enc is None:
            raise ConfigError(f"modality {d} is not part of this {self.fusion.mode} model")
        return enc

    def decoder(self, d: int) -> Decoder:
        dec = getattr(self, f"decoder{d}", None)
        if dec is None:
            raise ConfigError(f"modality {d} is not part of this {self.fusion.mode} model")
        return dec

    def encoder_features(self, d: int, x: Tensor) -> List[Tensor]:
        return self.encoder(d)(x)

    def logits(self, d: int, x: Tensor) -> Tensor:
        return self.decoder(d)(self.encoder_features(d, x))

    def forward(self, d: int, x: Tensor) -> Tensor:
        """Per-pixel class distribution `Q^(d)`, shape `[B, C, H, W]`"""
        return softmax(self.logits(d, x), axis=1)

    def segmentation_model(self, d: int) -> SegmentationModel:
        """A deep copy of modality d's encoder and decoder"""
        return SegmentationModel(copy.deepcopy(self.encoder(d)), copy.deepcopy(self.decoder(d)))

    def bn_stats(self, d: int, part: str = "encoder") -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        """Running mean / variance of every batch-norm layer in one part of modality d's network"""
        module = self.encoder(d) if part == "encoder" else self.decoder(d)
        stats = {}
        for prefix, child in module.modules():
            if "running_mean" in child._buffers:
                stats[prefix] = (child.running_mean, child.running_var)
        return stats

    def describe(self) -> Dict:
        return {"config": asdict(self.config), "fusion": asdict(self.fusion), "seed": self.seed}


@export
def build(config: MiniUNetConfig, fusion: FusionSpec, seed: int) -> ModelPair:
    """Deterministically initialized model pair, He-uniform kernels and zero biases"""
    pair = ModelPair(config, fusion, seed)
    logger.info(
        "built %s model pair, %d parameters (%s)",
        fusion.mode,
        pair.num_parameters(),
        ", ".join(f"encoder{d}={pair.encoder(d).num_parameters()}" for d in pair.modalities),
    )
    return pair


@export
def predict(model, x: np.ndarray, d: Optional[int] = None, batch_size: int = 16) -> np.ndarray:
    """Arg-max label map of a `ModelPair` (modality d) or a `SegmentationModel`, evaluated in eval mode"""
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(x), batch_size):
        batch = Tensor(x[start : start + batch_size])
        probs = model(d, batch) if isinstance(model, ModelPair) else model(batch)
        out.append(np.argmax(probs.data, axis=1).astype(np.uint8))
    model.train(was_training)
    return np.concatenate(out, axis=0)
