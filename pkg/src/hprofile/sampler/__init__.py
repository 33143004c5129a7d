"""MCMC machinery: chain configuration, diagnostics, draws and samplers."""

from .config import ChainConfig, chain_streams, stream
from .diagnostics import ess, mcse, split_rhat
from .draws import PosteriorDraws
from .engine import Block, run_mwg
from .hier import BetaUpdate, sample_hier

__all__ = [
    "ChainConfig",
    "PosteriorDraws",
    "Block",
    "run_mwg",
    "BetaUpdate",
    "sample_hier",
    "split_rhat",
    "ess",
    "mcse",
    "stream",
    "chain_streams",
]
