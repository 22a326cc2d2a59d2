"""Network topology configuration and the two built-in profiles."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigurationError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    """Residual-network topology: a 7×7/stride-2 stem (with optional 3×3/stride-2
    max pooling), four stages of two-convolution basic blocks, global average
    pooling and a linear classifier."""

    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    input_channels: int = 3
    num_classes: int = 4
    stem_pool: bool = True

    def __post_init__(self):
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ConfigurationError("stage_blocks and stage_channels must have 4 entries")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigurationError(f"every stage needs >= 1 block, got {self.stage_blocks}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigurationError(f"stage channels must be >= 1, got {self.stage_channels}")
        if self.input_channels < 1:
            raise ConfigurationError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        # frozen dataclass: normalize sequence fields through __setattr__
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    def to_json_dict(self) -> dict:
        return {
            "stage_blocks": list(self.stage_blocks),
            "stage_channels": list(self.stage_channels),
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "stem_pool": self.stem_pool,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "NetConfig":
        return cls(
            stage_blocks=tuple(data["stage_blocks"]),
            stage_channels=tuple(data["stage_channels"]),
            input_channels=data.get("input_channels", 3),
            num_classes=data["num_classes"],
            stem_pool=data.get("stem_pool", True),
        )


def resnet34_config(num_classes: int) -> NetConfig:
    return NetConfig(num_classes=num_classes)


def desk_config(num_classes: int) -> NetConfig:
    """Small profile for tests and desk-scale experiments."""
    return NetConfig(
        stage_blocks=(1, 1, 1, 1),
        stage_channels=(8, 16, 32, 64),
        num_classes=num_classes,
    )
