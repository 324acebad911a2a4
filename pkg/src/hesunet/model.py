"""The full segmentation network and its configuration.

The encoder produces five feature levels, the aggregation block folds
them into one global feature map, the upsampling block redistributes
that map across all levels, and the decoder walks back up through six
blocks, each refined by a global attention module and each emitting a
deep-supervision prediction. Ablation switches replace, not remove, the
three contributed modules so that every shape contract stays intact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import torch
from torch import Tensor, nn

from . import ops
from .blocks import GAM, MAB, MDB, MUB, CBAM, DecoderBlock, DeepBridge, EncoderBlock, StageShapeSpec
from .errors import ConfigError, NonFiniteError

STAGE_LEVELS = range(1, 6)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``c0`` is the width of the first encoder level; every deeper level
    doubles it, so the default yields the [32, 64, 128, 256, 512] ladder.
    ``lambda_weights`` are the deep-supervision weights, ordered from the
    full-resolution prediction (P0) down to the coarsest (P5).
    """

    c0: int = 32
    input_size: tuple[int, int] = (512, 512)
    in_channels: int = 1
    num_classes: int = 1
    use_mdb: bool = True
    use_mub: bool = True
    use_mab: bool = True
    gam_dilations: tuple[int, int, int, int] = (1, 2, 3, 4)
    ghpa_grid: int = 8
    lambda_weights: tuple[float, float, float, float, float, float] = (1.0, 0.5, 0.4, 0.3, 0.2, 0.1)
    seed: int = 0

    def validate(self) -> "ModelConfig":
        h, w = self.input_size
        if h % 64 or w % 64 or h < 64 or w < 64:
            raise ConfigError(f"input_size {h}x{w} must be positive and divisible by 64")
        if self.c0 < 4 or self.c0 % 4:
            raise ConfigError(f"c0={self.c0} must be a positive multiple of 4")
        if self.in_channels != 1 or self.num_classes != 1:
            raise ConfigError("only single-channel input and single-class output are supported")
        if len(self.gam_dilations) != 4 or any(d < 1 for d in self.gam_dilations):
            raise ConfigError(f"gam_dilations must be 4 positive ints, got {self.gam_dilations}")
        if self.ghpa_grid < 1:
            raise ConfigError(f"ghpa_grid must be positive, got {self.ghpa_grid}")
        if len(self.lambda_weights) != 6 or any(w < 0 for w in self.lambda_weights):
            raise ConfigError(f"lambda_weights must be 6 non-negative reals, got {self.lambda_weights}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        cfg = cls(**data)
        cfg.input_size = tuple(cfg.input_size)
        cfg.gam_dilations = tuple(cfg.gam_dilations)
        cfg.lambda_weights = tuple(cfg.lambda_weights)
        return cfg

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def stage_shapes(config: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """Expected (channels, height, width) for every named pipeline stage."""
    c0 = config.c0
    h, w = config.input_size
    shapes: dict[str, tuple[int, int, int]] = {}
    for i in STAGE_LEVELS:
        spec = StageShapeSpec.for_level(i, c0, h, w)
        shapes[f"E{i}"] = spec.encoder
        shapes[f"G{i}"] = spec.global_feature
        shapes[f"Q{i}"] = spec.encoder
        shapes[f"P{i}"] = spec.prediction
    shapes["E6"] = (32 * c0, h >> 5, w >> 5)
    shapes["F"] = (32 * c0, h >> 5, w >> 5)
    shapes["P0"] = (1, h, w)
    shapes["D6"] = (16 * c0, h >> 5, w >> 5)
    for level in range(5, 1, -1):
        shapes[f"D{level}"] = (c0 * 2 ** (level - 2), h >> (level - 1), w >> (level - 1))
    shapes["D1"] = (c0 // 2, h, w)
    return shapes


class HESUNet(nn.Module):
    """Encoder / aggregation / upsampling / decoder segmentation network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c0 = config.c0
        grid = config.ghpa_grid
        # Parameter creation order is fixed, so seeding here makes
        # initialization reproducible without touching the caller's RNG.
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            widths = [c0 * 2**i for i in range(5)]
            ins = [config.in_channels] + widths[:-1]
            self.encoder = nn.ModuleList(
                EncoderBlock(i + 1, ins[i], widths[i], grid, use_mdb=config.use_mdb)
                for i in range(5)
            )
            self.bridge = DeepBridge(16 * c0, 32 * c0, grid)
            self.mab = MAB(c0, 32 * c0) if config.use_mab else None
            self.mub = MUB(32 * c0, c0, grid) if config.use_mub else None
            self.gams = nn.ModuleList(
                GAM(c0 * 2 ** (i - 1), c0 * 2**i, config.gam_dilations) for i in STAGE_LEVELS
            )
            decoder_ins = {6: 32 * c0, 1: c0}
            decoder_ins.update({level: c0 * 2 ** (level - 1) for level in range(2, 6)})
            self.decoder = nn.ModuleDict(
                {str(level): DecoderBlock(level, decoder_ins[level], grid) for level in range(1, 7)}
            )

    def _check_input(self, x: Tensor) -> tuple[Tensor, bool]:
        if x.dim() == 3:
            batched, squeeze = x.unsqueeze(0), True
        elif x.dim() == 4:
            batched, squeeze = x, False
        else:
            raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {tuple(x.shape)}")
        expected = (self.config.in_channels, *self.config.input_size)
        if tuple(batched.shape[1:]) != expected:
            raise ValueError(f"input shape {tuple(batched.shape[1:])} does not match configured {expected}")
        return batched, squeeze

    def forward(
        self, x: Tensor, capture: bool = False, check_finite: bool = True
    ) -> tuple[Tensor, dict[str, Tensor] | None]:
        """Run the network; returns full-resolution logits and, optionally,
        every named stage activation (E1..E6, F, G1..G5, Q1..Q5, D1..D6, P0..P5)."""
        xb, squeeze = self._check_input(x)
        h, w = self.config.input_size
        stages: dict[str, Tensor] = {}

        def record(name: str, value: Tensor) -> Tensor:
            if check_finite and not torch.isfinite(value).all():
                raise NonFiniteError(f"non-finite values in stage {name}")
            if capture:
                stages[name] = value.squeeze(0) if squeeze else value
            return value

        feats = []
        current = xb
        for i, block in enumerate(self.encoder, start=1):
            current = record(f"E{i}", block(current))
            feats.append(current)

        bridged = record("E6", self.bridge(feats[-1]))
        if self.mab is not None:
            f = self.mab(feats, bridged)
        else:
            f = bridged
        f = record("F", f)

        sizes = [(h >> (i + 1), w >> (i + 1)) for i in STAGE_LEVELS]
        if self.mub is not None:
            global_streams = self.mub(f, sizes)
            decoder_feed = global_streams[4]
        else:
            # Ablated: the decoder is fed a parameter-free projection of the
            # global feature; the attention modules see a zero global stream.
            decoder_feed = ops.bilinear_resize(f, h >> 6, w >> 6)
            global_streams = [
                xb.new_zeros((xb.shape[0], self.config.c0 * 2**i, *sizes[i - 1])) for i in STAGE_LEVELS
            ]
            global_streams[4] = decoder_feed
        for i in STAGE_LEVELS:
            record(f"G{i}", global_streams[i - 1])

        gam_streams = global_streams if self.mub is not None else [torch.zeros_like(g) for g in global_streams]

        d, p = self.decoder["6"](decoder_feed)
        record("D6", d)
        record("P5", p)
        for level in range(5, 0, -1):
            q = record(f"Q{level}", self.gams[level - 1](feats[level - 1], gam_streams[level - 1], p))
            d, p = self.decoder[str(level)](q + d)
            record(f"D{level}", d)
            record(f"P{level - 1}", p)

        logits = p.squeeze(0) if squeeze else p
        return logits, (stages if capture else None)

    def predict(self, x: Tensor, threshold: float = 0.5) -> Tensor:
        """Binary mask from thresholded sigmoid probabilities (boundary inclusive)."""
        if not 0.0 < threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logits, _ = self.forward(x)
                return (torch.sigmoid(logits) >= threshold).to(logits.dtype)
        finally:
            self.train(was_training)


def parameter_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic ordered list of (parameter name, shape) for a config."""
    model = HESUNet(config)
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]
