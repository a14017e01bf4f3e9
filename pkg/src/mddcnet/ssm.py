"""Selective state-space (Mamba-style) sequence mixer.

Continuous dynamics h' = A h + B u with diagonal negative-real A are
discretized per token by a data-dependent step size (zero-order hold),
then rolled out as the linear recurrence h_t = Ā_t h_{t-1} + B̄_t u_t,
sequentially or via an associative parallel scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, Module, Parameter, Linear, linear_recurrence,
                     flatten_hw, unflatten_hw, kaiming_uniform)

__all__ = ["MambaBlockConfig", "SsmParams", "discretize_zoh", "selective_scan",
           "selective_scan_seq", "selective_scan_par", "MambaBlock",
           "MambaBlock2d"]

_SERIES_EPS = 1e-6
_SSM_FIELDS = ("A_log", "D_skip", "proj_B", "proj_C", "dt_down", "dt_up")


@dataclass
class MambaBlockConfig:
    d_model: int
    expand: int = 2
    d_state: int = 16
    conv_width: int = 3
    # rank of the factored step-size projection; None: max(4, d_inner // 16)
    dt_rank: int | None = None
    scan_direction: str = "forward"     # "forward" | "bidirectional"
    parallel_scan: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.scan_direction not in ("forward", "bidirectional"):
            raise ValueError(f"unknown scan_direction {self.scan_direction!r}")
        if self.d_inner % 2:
            raise ValueError("d_inner must be even")

    @property
    def d_inner(self) -> int:
        return self.d_model * self.expand

    def resolved_dt_rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else max(4, self.d_inner // 16)


def _zoh_bfactor(delta: Tensor, a: Tensor) -> Tensor:
    """(exp(Δ·A) − 1) / A elementwise, with the Δ-series limit as Δ·A → 0.

    delta: [N, L, D]; a: [D, S]; result [N, L, D, S].
    """
    dd = delta.data[..., None]
    ad = a.data
    da = dd * ad
    small = np.abs(da) < _SERIES_EPS
    any_small = bool(small.any())
    em1 = np.expm1(da)
    if any_small:
        safe_a = np.where(small, 1.0, ad)
        out = np.where(small, dd * (1.0 + 0.5 * da), em1 / safe_a)
    else:
        safe_a = ad
        out = em1 / ad

    def back(g):
        eda = em1 + 1.0
        gd = (g * eda).sum(axis=3)
        # d/dA [(e^{ΔA}−1)/A] = (ΔA·e^{ΔA} − (e^{ΔA}−1)) / A²; series: Δ²/2
        ga_full = (da * eda - em1) / (safe_a * safe_a)
        if any_small:
            ga_full = np.where(small, 0.5 * dd * dd, ga_full)
        return gd, (g * ga_full).sum(axis=(0, 1))

    return Tensor._node(out, (delta, a), back)


def discretize_zoh(a: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of diagonal dynamics.

    a: [D, S] strictly negative; b: [N, L, S]; delta: [N, L, D] strictly
    positive. Returns (abar, bbar), each [N, L, D, S]:
        abar = exp(Δ·A);  bbar = ((exp(Δ·A) − 1)/A)·B,
    falling back to the series limit Δ·B when |Δ·A| < 1e-6.
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize_zoh: step sizes must be strictly positive")
    n, l, d = delta.shape
    abar = (delta.reshape(n, l, d, 1) * a).exp()
    bbar = _zoh_bfactor(delta, a) * b.reshape(n, l, 1, b.shape[2])
    return abar, bbar


def selective_scan(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor,
                   d_skip: Tensor, *, parallel: bool = False,
                   threads: int = 1) -> Tensor:
    """Run the discretized recurrence and read out with per-token C.

    u, delta: [N, L, D]; a: [D, S]; b, c: [N, L, S]; d_skip: [D].
    Returns y[n,l,d] = Σ_s h[n,l,d,s]·c[n,l,s] + d_skip[d]·u[n,l,d]
    where h_t = abar_t ⊙ h_{t-1} + bbar_t·u_t, h_0 = 0.
    """
    n, l, d = u.shape
    s = a.shape[1]
    abar, bbar = discretize_zoh(a, b, delta)
    h = linear_recurrence(abar, bbar * u.reshape(n, l, d, 1),
                          parallel=parallel, threads=threads)
    return (h * c.reshape(n, l, 1, s)).sum(axis=3) + u * d_skip


class SsmParams(Module):
    """State matrices and input-dependent projections of one scan direction.

    A is parameterized as −exp(A_log) (always stable); A_log rows start at
    log(1..S). The step size is softplus of a factored linear projection
    (dt_up ∘ dt_down: D_inner→rank→D_inner) whose bias is drawn so the
    initial step lands in [1e-3, 1e-1].
    """

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        di, s, r = cfg.d_inner, cfg.d_state, cfg.resolved_dt_rank()
        self.A_log = Parameter(np.log(np.tile(np.arange(1.0, s + 1.0),
                                              (di, 1))).astype(dtype))
        self.D_skip = Parameter(np.ones(di, dtype=dtype))
        self.proj_B = Linear(di, s, bias=False, rng=rng, dtype=dtype)
        self.proj_C = Linear(di, s, bias=False, rng=rng, dtype=dtype)
        self.dt_down = Linear(di, r, bias=False, rng=rng, dtype=dtype)
        self.dt_up = Linear(r, di, rng=rng, dtype=dtype)
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=di))
        self.dt_up.bias.data = np.log(np.expm1(dt0)).astype(dtype)


def _apply_ssm(p, u: Tensor, *, parallel: bool = False, threads: int = 1) -> Tensor:
    """Run the selective scan of any container exposing the SsmParams fields."""
    a = -p.A_log.exp()
    delta = p.dt_up(p.dt_down(u)).softplus()
    return selective_scan(u, delta, a, p.proj_B(u), p.proj_C(u), p.D_skip,
                          parallel=parallel, threads=threads)


def selective_scan_seq(u: Tensor, params) -> Tensor:
    """Left-to-right recurrent evaluation (the canonical reference)."""
    return _apply_ssm(params, u, parallel=False)


def selective_scan_par(u: Tensor, params, threads: int = 1) -> Tensor:
    """Same result via the associative tree scan."""
    return _apply_ssm(params, u, parallel=True, threads=threads)


class MambaBlock(Module):
    """Gated selective-scan token mixer for [N, L, C] sequences.

    in_proj widens to (main, gate); a width-3 depthwise sequence conv
    (zero-padded, non-causal) and SiLU precede the scan; the SiLU-gated
    result leaves through a zero-initialized out_proj, so a fresh block
    is an exact no-op under a caller-side residual. The forward-direction
    scan parameters live directly on the block (A_log, proj_B, ...);
    bidirectional mode adds an independent reverse-direction set.
    """

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        if cfg.conv_width != 3:
            raise ValueError("only conv_width=3 is supported")
        self.cfg = cfg
        di = cfg.d_inner
        self.in_proj = Linear(cfg.d_model, 2 * di, bias=False, rng=rng, dtype=dtype)
        self.conv_weight = Parameter(kaiming_uniform(rng, (3, di), 3, dtype))
        self.conv_bias = Parameter(np.zeros(di, dtype=dtype))
        fwd = SsmParams(cfg, rng, dtype)
        for name in _SSM_FIELDS:
            setattr(self, name, getattr(fwd, name))
        if cfg.scan_direction == "bidirectional":
            self.rev = SsmParams(cfg, rng, dtype)
        self.out_proj = Linear(di, cfg.d_model, zero_init=True, dtype=dtype)

    def _seq_conv(self, u: Tensor) -> Tensor:
        up = u.pad(((0, 0), (1, 1), (0, 0)))
        w = self.conv_weight
        return (up[:, :-2] * w[0] + up[:, 1:-1] * w[1] + up[:, 2:] * w[2]
                + self.conv_bias)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        di = cfg.d_inner
        proj = self.in_proj(x)
        u, gate = proj[:, :, :di], proj[:, :, di:]
        u = self._seq_conv(u).silu()
        y = _apply_ssm(self, u, parallel=cfg.parallel_scan, threads=cfg.threads)
        if cfg.scan_direction == "bidirectional":
            y_rev = _apply_ssm(self.rev, u.flip(1), parallel=cfg.parallel_scan,
                               threads=cfg.threads).flip(1)
            y = (y + y_rev) * 0.5
        return self.out_proj(y * gate.silu())


class MambaBlock2d(Module):
    """MambaBlock over an image feature map, tokens in row-major order."""

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.block = MambaBlock(cfg, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        return unflatten_hw(self.block(flatten_hw(x)), h, w)
