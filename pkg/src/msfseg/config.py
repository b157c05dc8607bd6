"""Configuration dataclasses for the model and training harness."""

from dataclasses import dataclass, field, asdict

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the segmentation network.

    The backbone emits ``len(channels)`` pyramid levels at strides
    4, 8, 16, ... relative to the input; level 0 (stride 4) feeds the
    decoder skip connection and sets the working resolution of mask
    features.
    """

    input_size: int = 384
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 128, 256)
    heads: int = 4
    head_channels: int = 16      # width of the cascaded conv head after attention
    fused_channels: int = 16     # output channels of the surrogate fusion conv
    fusion_kernel: int = 3       # spatial kernel of the fusion conv
    decoder_channels: tuple[int, ...] = (64, 32)
    upsample: str = "nearest"    # "nearest" or "deconv"

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(4 * 2 ** j for j in range(len(self.channels)))

    @property
    def work_stride(self) -> int:
        return 4

    def validate(self) -> "ModelConfig":
        if len(self.channels) < 2:
            raise ConfigError("backbone needs at least 2 pyramid levels")
        if self.input_size <= 0 or self.input_size % self.strides[-1] != 0:
            raise ConfigError(
                f"input_size {self.input_size} must be a positive multiple of "
                f"the deepest stride {self.strides[-1]}"
            )
        for c in self.channels:
            if c % self.heads != 0:
                raise ConfigError(f"channels {self.channels} must be divisible by heads={self.heads}")
        if self.upsample not in ("nearest", "deconv"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if len(self.decoder_channels) != 2:
            raise ConfigError("decoder has exactly two upsampling blocks")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("channels", "decoder_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


# Small preset used throughout the synthetic-data tests and the trend run.
SMALL_MODEL = ModelConfig(
    input_size=64,
    channels=(16, 32, 64),
    head_channels=16,
    fused_channels=16,
    decoder_channels=(32, 16),
)


@dataclass(frozen=True)
class TrainConfig:
    """Episodic optimization settings."""

    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-4
    n: int = 1               # supports per episode (upper bound if n_min is set)
    n_min: int | None = None
    d: int = 1               # slices per support sequence
    seed: int = 0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    setting: int = 1
    pseudo: bool = False     # synthesize n supports from one by augmentation
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("steps/batch_size/lr must be nonnegative (batch >= 1)")
        if self.n < 1 or self.d < 1:
            raise ConfigError("n and d must be >= 1")
        if self.n_min is not None and not (1 <= self.n_min <= self.n):
            raise ConfigError("n_min must satisfy 1 <= n_min <= n")
        if self.setting not in (1, 2):
            raise ConfigError("setting must be 1 or 2")
        if self.ce_weight < 0 or self.dice_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        self.model.validate()
        return self
