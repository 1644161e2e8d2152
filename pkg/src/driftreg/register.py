"""Registration loops: direct field optimisation and the multi-scale, inverse-consistent variant."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import optim
from .losses import MICDIR_WEIGHTS, Flags, LossValue, LossWeights, direct_loss, micdir_loss, ncc
from .metrics import evaluate
from .scg import init_params, scg_term
from .volume import DeformationField, Volume, VolumeError, downsample2x, _values
from .warp import compose, warp_trilinear

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "RegistrationDiverged",
    "register_direct",
    "register_micdir",
    "register",
    "inverse_consistency_error",
    "micdir_config",
]

log = logging.getLogger(__name__)

SIMILARITIES = ("ncc", "lncc", "nmi", "mse")


class RegistrationDiverged(RuntimeError):
    """The objective became non-finite."""

    def __init__(self, iteration, trace):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class RegistrationConfig:
    similarity: str = "ncc"
    weights: LossWeights = LossWeights()
    optimizer: optim.OptimizerConfig = optim.OptimizerConfig()
    iterations: int = 1500
    flags: Flags = Flags()
    seed: int = 0
    scg_pool: tuple = (4, 4, 4)
    scg_channels: int = 8
    nmi_bins: int = 32
    nmi_width: float = 0.5
    ncc_window: int = 9

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}, expected one of {SIMILARITIES}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")

    @property
    def sim_opts(self):
        if self.similarity == "nmi":
            return {"bins": self.nmi_bins, "width": self.nmi_width}
        if self.similarity == "lncc":
            return {"window": self.ncc_window}
        return {}

    def to_dict(self):
        d = asdict(self)
        d["scg_pool"] = list(self.scg_pool)
        return d


def micdir_config(**overrides):
    """All three features on, ``MICDIR_WEIGHTS``, RMSProp."""
    base = dict(
        weights=MICDIR_WEIGHTS,
        flags=Flags(mss=True, ic=True, scg=True),
        optimizer=optim.OptimizerConfig(kind="rmsprop", lr=2e-3),
    )
    base.update(overrides)
    return RegistrationConfig(**base)


@dataclass
class RegistrationResult:
    u_mf: DeformationField
    u_fm: DeformationField | None
    warped: Volume
    loss_trace: list = field(default_factory=list)
    metric_report: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def report(self, cfg: RegistrationConfig | None = None):
        out = {
            "loss_trace": [v.as_dict() for v in self.loss_trace],
            "final_loss": self.loss_trace[-1].as_dict() if self.loss_trace else None,
            "metrics": self.metric_report,
            "timing": {"elapsed_s": self.elapsed},
        }
        if cfg is not None:
            out["config"] = cfg.to_dict()
        return out


def _as_volume(v):
    return v if isinstance(v, Volume) else Volume(v)


def _check_pair(f, m):
    if f.dims != m.dims:
        raise VolumeError(f"fixed {f.dims} and moving {m.dims} dimensions differ")


def _report(f, warped, cfg, extra=None):
    rep = evaluate(f, warped, intermodal=cfg.similarity == "nmi", seed=cfg.seed)
    metrics = rep["metrics"]
    try:
        metrics["ncc"] = ncc(f.data, warped.data)[0]
    except ValueError:
        metrics["ncc"] = float("nan")
    if extra:
        metrics.update(extra)
    return rep


def inverse_consistency_error(u_fm, u_mf, margin=1):
    """Mean and max norm of the round-trip field ``compose(u_fm, u_mf)`` away from the border."""
    a, b = _values(u_fm), _values(u_mf)
    if a.shape != b.shape:
        raise VolumeError(f"dimension mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    e = compose(a, b)
    sl = (slice(None),) + tuple(slice(margin, n - margin) for n in e.shape[1:])
    norm = np.sqrt(np.sum(e[sl] ** 2, axis=0))
    return float(norm.mean()), float(norm.max())


def _guard(value: LossValue, it, trace):
    if not np.isfinite(value.total):
        raise RegistrationDiverged(it, trace)


def register_direct(f, m, cfg: RegistrationConfig, evaluate_result=True) -> RegistrationResult:
    """Optimise a single displacement field on ``alpha sim + beta smoothness``."""
    if cfg.flags.any:
        raise ValueError("register_direct takes a config with mss, ic and scg all off")
    f, m = _as_volume(f), _as_volume(m)
    _check_pair(f, m)
    t0 = time.perf_counter()
    u = np.zeros((3,) + f.dims)
    state = optim.init(cfg.optimizer, u.shape)
    trace = []
    fd, md = f.data, m.data
    for it in range(cfg.iterations):
        value, grad = direct_loss(fd, md, u, cfg.similarity, cfg.weights.alpha, cfg.weights.beta,
                                  cfg.sim_opts)
        _guard(value, it, trace)
        trace.append(value)
        u = optim.step(state, u, grad)
    u_mf = DeformationField(u)
    warped = warp_trilinear(m, u_mf)
    elapsed = time.perf_counter() - t0
    result = RegistrationResult(u_mf, None, warped, trace, {}, elapsed)
    if evaluate_result:
        result.metric_report = _report(f, warped, cfg)
    return result


def register_micdir(f, m, cfg: RegistrationConfig, evaluate_result=True) -> RegistrationResult:
    """Optimise ``u_mf`` (and ``u_fm`` with ``ic``) on the multi-scale objective.

    Both directions are stepped from the same loss evaluation with separate
    optimiser states.  The half-resolution field is ``downsample_dvf`` of the
    full one, so a single field per direction carries both scales.
    """
    f, m = _as_volume(f), _as_volume(m)
    _check_pair(f, m)
    flags = cfg.flags
    if flags.mss and any(d % 2 for d in f.dims):
        raise VolumeError(f"multi-scale loss needs even dims, got {f.dims}")
    t0 = time.perf_counter()
    fd, md = f.data, m.data
    pyramid = (downsample2x(fd), downsample2x(md)) if flags.mss else None
    scg_terms = None
    if flags.scg:
        params = init_params(2, cfg.scg_channels, seed=cfg.seed)
        # the stacked inputs do not change during optimisation, so one
        # evaluation per direction serves every iteration
        scg_terms = (
            scg_term(md, fd, params, cfg.scg_pool, seed=cfg.seed),
            scg_term(fd, md, params, cfg.scg_pool, seed=cfg.seed),
        )

    u_mf = np.zeros((3,) + f.dims)
    u_fm = np.zeros((3,) + f.dims) if flags.ic else None
    st_mf = optim.init(cfg.optimizer, u_mf.shape)
    st_fm = optim.init(cfg.optimizer, u_mf.shape) if flags.ic else None
    trace = []
    for it in range(cfg.iterations):
        value, g_fm, g_mf = micdir_loss(
            fd, md, u_fm, u_mf, cfg.weights, flags, scg_terms, cfg.similarity, cfg.sim_opts, pyramid
        )
        _guard(value, it, trace)
        trace.append(value)
        u_mf = optim.step(st_mf, u_mf, g_mf)
        if flags.ic:
            u_fm = optim.step(st_fm, u_fm, g_fm)

    field_mf = DeformationField(u_mf)
    field_fm = DeformationField(u_fm) if flags.ic else None
    warped = warp_trilinear(m, field_mf)
    elapsed = time.perf_counter() - t0
    result = RegistrationResult(field_mf, field_fm, warped, trace, {}, elapsed)
    if evaluate_result:
        extra = {}
        if flags.ic:
            extra["ic_error_mean"], extra["ic_error_max"] = inverse_consistency_error(u_fm, u_mf)
        if flags.scg:
            extra["scg_fm"], extra["scg_mf"] = scg_terms
        result.metric_report = _report(f, warped, cfg, extra)
    return result


def register(f, m, cfg: RegistrationConfig, evaluate_result=True) -> RegistrationResult:
    """Direct loop when every feature flag is off, the multi-scale loop otherwise."""
    if cfg.flags.any:
        return register_micdir(f, m, cfg, evaluate_result)
    return register_direct(f, m, cfg, evaluate_result)
