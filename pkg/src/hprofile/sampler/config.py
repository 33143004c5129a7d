from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..errors import InputError


@dataclass(frozen=True)
class ChainConfig:
    burn_in: int = 5000
    keep: int = 3000
    thin: int = 1
    chains: int = 4
    seed: int = 0
    window: int = 50
    target_accept: float = 0.44

    def __post_init__(self):
        if self.burn_in < 0 or self.keep < 1 or self.thin < 1 or self.chains < 1 or self.window < 1:
            raise InputError("chain config needs burn_in >= 0, keep >= 1, thin >= 1, chains >= 1, window >= 1")
        if not 0 < self.target_accept < 1:
            raise InputError("target_accept must be in (0, 1)")

    @property
    def sweeps(self) -> int:
        return self.burn_in + self.keep * self.thin

    def with_seed(self, seed: int) -> "ChainConfig":
        return replace(self, seed=int(seed))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ChainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InputError(f"chain config: unknown field {sorted(unknown)[0]!r}")
        try:
            return cls(**{k: (float(v) if k == "target_accept" else int(v)) for k, v in obj.items()})
        except (TypeError, ValueError) as exc:
            raise InputError(f"chain config: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *key)``; streams never share state."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


# stream identifiers
CHAIN_STREAM = 1
REPLICATE_STREAM = 2


def chain_streams(seed: int, chain: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators owned by one chain."""
    return [stream(seed, CHAIN_STREAM, chain, j) for j in range(n)]
