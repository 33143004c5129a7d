"""Generic adaptive Metropolis-within-Gibbs over named vector blocks.

A block's components are proposed and accepted independently in one
vectorised step, which is valid when they are conditionally independent
given every other block (person abilities given item parameters, item
parameters given abilities, ...). ``log_target(state)`` returns the
component-wise log conditional density up to a constant, as an array of the
block's size.

A ``JointMove`` adds a one-dimensional adaptive random walk along a
deterministic path through the state (for example rescaling several blocks
at once); its ``propose(state, step)`` returns the new state and the log
Jacobian of the map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import NonFiniteLogPosterior
from .config import ChainConfig, chain_streams
from .draws import PosteriorDraws

State = dict[str, np.ndarray]


@dataclass(frozen=True)
class Block:
    name: str
    size: int
    log_target: Callable[[State], np.ndarray]
    positive: bool = False  # random walk on the log scale, with Jacobian
    initial_scale: float = 0.5


@dataclass(frozen=True)
class JointMove:
    name: str
    propose: Callable[[State, float], tuple[State, float]]
    log_target: Callable[[State], float]
    initial_scale: float = 0.1


def run_mwg(
    blocks: list[Block],
    init: Callable[[np.random.Generator], State],
    cfg: ChainConfig,
    labels: dict[str, tuple[str, ...]] | None = None,
    metadata: dict | None = None,
    scalar: tuple[str, ...] = (),
    moves: tuple[JointMove, ...] = (),
) -> PosteriorDraws:
    """Run ``cfg.chains`` chains; blocks named in ``scalar`` are stored as scalars.

    Each sweep updates the blocks in order, then applies the joint moves.
    """
    sweeps = cfg.sweeps
    out = {b.name: np.empty((cfg.keep, cfg.chains, b.size)) for b in blocks}
    acc_total = {b.name: np.zeros((cfg.chains, b.size)) for b in blocks}
    acc_total.update({m.name: np.zeros((cfg.chains, 1)) for m in moves})
    for c in range(cfg.chains):
        r_init, r_z, r_u = chain_streams(cfg.seed, c, 3)
        state = {k: np.array(v, dtype=float) for k, v in init(r_init).items()}
        width = sum(b.size for b in blocks) + len(moves)
        Z = r_z.standard_normal((sweeps, width))
        U = r_u.random((sweeps, width))
        log_scale = {b.name: np.full(b.size, np.log(b.initial_scale)) for b in blocks}
        log_scale.update({m.name: np.full(1, np.log(m.initial_scale)) for m in moves})
        window_acc = {name: np.zeros(len(v)) for name, v in log_scale.items()}
        for b in blocks:
            lp = b.log_target(state)
            if not np.all(np.isfinite(lp)):
                raise NonFiniteLogPosterior(f"chain {c}: block {b.name} has a non-finite initial log density")
        batch = 0
        kept = 0
        for sweep in range(sweeps):
            burning = sweep < cfg.burn_in
            offset = 0
            for b in blocks:
                z = Z[sweep, offset : offset + b.size]
                logu = np.log(U[sweep, offset : offset + b.size])
                offset += b.size
                old = state[b.name]
                cur = b.log_target(state)
                step = np.exp(log_scale[b.name]) * z
                if b.positive:
                    cand = old * np.exp(step)
                    jac = step
                else:
                    cand = old + step
                    jac = 0.0
                state[b.name] = cand
                new = b.log_target(state)
                ok = logu < new - cur + jac
                ok &= np.isfinite(new)
                state[b.name] = np.where(ok, cand, old)
                window_acc[b.name] += ok
                if not burning:
                    acc_total[b.name][c] += ok
            for m in moves:
                step = float(np.exp(log_scale[m.name][0]) * Z[sweep, offset])
                logu = np.log(U[sweep, offset])
                offset += 1
                cand, log_jac = m.propose(state, step)
                diff = m.log_target(cand) - m.log_target(state) + log_jac
                ok = bool(logu < diff)
                if ok:
                    state = cand
                window_acc[m.name] += ok
                if not burning:
                    acc_total[m.name][c] += ok
            if burning and (sweep + 1) % cfg.window == 0:
                batch += 1
                gain = 2.0 / np.sqrt(batch)
                for name in log_scale:
                    log_scale[name] += gain * (window_acc[name] / cfg.window - cfg.target_accept)
                    window_acc[name][:] = 0
            if not burning and (sweep - cfg.burn_in + 1) % cfg.thin == 0:
                for b in blocks:
                    out[b.name][kept, c] = state[b.name]
                kept += 1
    n_post = cfg.keep * cfg.thin
    samples = {name: (arr[:, :, 0] if name in scalar else arr) for name, arr in out.items()}
    acceptance = {name: a.sum(0) / (n_post * cfg.chains) for name, a in acc_total.items()}
    lab = {b.name: tuple(str(i) for i in range(b.size)) for b in blocks if b.name not in scalar}
    lab.update(labels or {})
    return PosteriorDraws(samples, lab, acceptance, cfg, dict(metadata or {}))
