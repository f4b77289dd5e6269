"""
Selective state-space machinery

- zoh_discretize: exact zero-order-hold discretization of a diagonal SSM
- selective_scan: the input-dependent recurrence h_t = Ā_t h_{t-1} + B̄_t x_t,
  y_t = <C_t, h_t> + D x_t, as one graph primitive with an analytic backward
- lti_kernel / causal_conv / frozen_scan: the time-invariant convolution form
  and its recurrent twin, used as oracles
- MambaBlock: gated block with a causal depthwise conv in front of the scan
- chunked_scan: forward-only variant that carries state across chunks and can
  spread channel lanes over worker threads
"""

from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator

import numpy as np

import tensor_core as tc
from errors import ContractError
from layers import CausalConv1d, Linear, Module, parameter
from tensor_core import Tensor

ZOH_SERIES_THRESHOLD = 1e-6
DEFAULT_STATE_SIZE = 16

_active_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Deliberately corrupt a kernel so the verification harness can prove it notices"""
    _active_faults.add(name)
    try:
        yield
    finally:
        _active_faults.discard(name)


def _array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def zoh_factors(a: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (exp(Δa), φ) with B̄ = φ·B; φ = (exp(Δa) - 1)/a, or Δ when |Δa| is tiny"""
    da = delta * a
    small = np.abs(da) < ZOH_SERIES_THRESHOLD
    a_bar = np.exp(da)
    phi = np.where(small, delta, np.expm1(da) / np.where(small, 1.0, a))
    return a_bar, phi.astype(a_bar.dtype, copy=False)


def _zoh_partials(a, delta, a_bar):
    """∂φ/∂Δ and ∂φ/∂a, consistent with the series fallback in zoh_factors"""
    da = delta * a
    small = np.abs(da) < ZOH_SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    dphi_ddelta = np.where(small, 1.0, a_bar)
    dphi_da = np.where(small, 0.0, (da * a_bar - np.expm1(da)) / (safe_a * safe_a))
    return dphi_ddelta, dphi_da


def zoh_discretize(A, B_t, Delta_t) -> tuple[Tensor, Tensor]:
    """A [D,N] (negative), B_t [L,N], Delta_t [L,D] -> (Ā [L,D,N], B̄ [L,D,N])"""
    a, b, delta = _array(A), _array(B_t), _array(Delta_t)
    if np.any(delta <= 0):
        raise ContractError("zoh_discretize: step sizes Δ must be strictly positive")
    if a.ndim != 2 or b.ndim != 2 or delta.ndim != 2:
        raise ContractError(f"zoh_discretize: expected A [D,N], B [L,N], Δ [L,D]; got {a.shape}, {b.shape}, {delta.shape}")
    if delta.shape[1] != a.shape[0] or b.shape[1] != a.shape[1] or b.shape[0] != delta.shape[0]:
        raise ContractError(f"zoh_discretize: extents disagree: A {a.shape}, B {b.shape}, Δ {delta.shape}")
    a_bar, phi = zoh_factors(a[None, :, :], delta[:, :, None])
    return Tensor(a_bar), Tensor(phi * b[:, None, :])


# ---------------------------------------------------------------------------
# Recurrence kernels
# ---------------------------------------------------------------------------

def _run_recurrence(a_bar: np.ndarray, bx: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """States of h_t = ā_t ⊙ h_{t-1} + bx_t for [B,L,E,N] inputs; returns all h_t"""
    if "scan" in _active_faults:
        a_bar = a_bar * 0.9
    batch, length = bx.shape[:2]
    states = np.empty(np.broadcast_shapes(a_bar.shape, bx.shape), dtype=bx.dtype)
    h = np.zeros((batch,) + states.shape[2:], dtype=bx.dtype) if h0 is None else h0
    for t in range(length):
        h = a_bar[:, t] * h + bx[:, t]
        states[:, t] = h
    return states


def scan_kernel(u, delta, a, b, c, d, h0=None):
    """Forward selective scan on arrays.

    u, delta: [B,L,E]; a: [E,N]; b, c: [B,L,N]; d: [E]; h0: [B,E,N] or None.
    Returns (y [B,L,E], states [B,L,E,N], a_bar, phi).
    """
    a_bar, phi = zoh_factors(a, delta[..., None])
    bx = phi * b[:, :, None, :] * u[..., None]
    states = _run_recurrence(a_bar, bx, h0)
    y = np.einsum("blen,bln->ble", states, c) + u * d
    return y, states, a_bar, phi


def _check_scan_inputs(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> None:
    if u.ndim != 3:
        raise ContractError(f"selective_scan: expected [B,L,E] input, got {u.shape}")
    batch, length, width = u.shape
    if length < 1:
        raise ContractError("selective_scan: empty sequence")
    state = a.shape[-1]
    expected = {
        "delta": (delta.shape, (batch, length, width)),
        "A": (a.shape, (width, state)),
        "B": (b.shape, (batch, length, state)),
        "C": (c.shape, (batch, length, state)),
        "D": (d.shape, (width,)),
    }
    for name, (got, want) in expected.items():
        if tuple(got) != want:
            raise ContractError(f"selective_scan: {name} has shape {tuple(got)}, expected {want}")


def selective_scan_op(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """Differentiable selective scan with exact ZOH; every input may require grad"""
    _check_scan_inputs(u, delta, a, b, c, d)
    if np.any(delta.data <= 0):
        raise ContractError("selective_scan: step sizes Δ must be strictly positive")
    y, states, a_bar, phi = scan_kernel(u.data, delta.data, a.data, b.data, c.data, d.data)

    def backward_fn(gy):
        ud, dd, bd, cd = u.data, delta.data, b.data, c.data
        ad = a.data
        g_d = (gy * ud).sum(axis=(0, 1))
        g_u = gy * d.data
        g_c = np.einsum("ble,blen->bln", gy, states)

        from_output = gy[..., None] * cd[:, :, None, :]
        dh = np.empty_like(states)
        carry = np.zeros_like(states[:, 0])
        for t in range(states.shape[1] - 1, -1, -1):
            carry = from_output[:, t] + carry
            dh[:, t] = carry
            carry = carry * a_bar[:, t]

        h_prev = np.concatenate([np.zeros_like(states[:, :1]), states[:, :-1]], axis=1)
        g_abar = dh * h_prev
        dh_phi = dh * phi
        g_b = np.einsum("blen,ble->bln", dh_phi, ud)
        g_u = g_u + np.einsum("blen,bln->ble", dh_phi, bd)
        g_phi = dh * bd[:, :, None, :] * ud[..., None]

        dphi_ddelta, dphi_da = _zoh_partials(ad, dd[..., None], a_bar)
        g_delta = (g_abar * ad * a_bar + g_phi * dphi_ddelta).sum(axis=-1)
        g_a = (g_abar * dd[..., None] * a_bar + g_phi * dphi_da).sum(axis=(0, 1))
        return g_u, g_delta, g_a, g_b, g_c, g_d

    return tc.record(y, (u, delta, a, b, c, d), backward_fn, "selective_scan")


def frozen_scan(x, A_bar, B_bar, C, skip=None) -> np.ndarray:
    """Time-invariant recurrence: x [L,D], Ā/B̄/C [D,N], skip [D] -> y [L,D]"""
    x = np.asarray(_array(x), dtype=np.float64)
    a_bar, b_bar, c = (np.asarray(_array(v), dtype=np.float64) for v in (A_bar, B_bar, C))
    length = x.shape[0]
    states = _run_recurrence(
        np.broadcast_to(a_bar, (1, length) + a_bar.shape),
        (b_bar[None, None] * x[None, :, :, None]),
    )
    y = np.einsum("blen,en->ble", states, c)[0]
    if skip is not None:
        y = y + np.asarray(_array(skip), dtype=np.float64) * x
    return y


def lti_kernel(A_bar, B_bar, C, L: int) -> np.ndarray:
    """K̄ = (C B̄, C Ā B̄, ..., C Ā^{L-1} B̄) per channel: [D,N] params -> [D,L]"""
    if L < 1:
        raise ContractError(f"lti_kernel: L must be >= 1, got {L}")
    a_bar, b_bar, c = (np.asarray(_array(v), dtype=np.float64) for v in (A_bar, B_bar, C))
    powers = a_bar[..., None] ** np.arange(L)
    return np.einsum("dn,dnl,dn->dl", c, powers, b_bar)


def causal_conv(x, kernel) -> np.ndarray:
    """y[t,d] = sum_{k<=t} K[d,k] x[t-k,d] for x [L,D], K [D,L]"""
    x = np.asarray(_array(x), dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    length = x.shape[0]
    y = np.zeros_like(x)
    for k in range(min(length, kernel.shape[1])):
        y[k:] += kernel[:, k] * x[:length - k]
    return y


# ---------------------------------------------------------------------------
# Parameterized SSM and the Mamba block
# ---------------------------------------------------------------------------

class SelectiveSSM(Module):
    """Selective SSM over token width E: A = -exp(A_log), data-dependent B, C, Δ"""

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        state_size: int = DEFAULT_STATE_SIZE,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        self.A_log = parameter(np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (width, 1))))
        self.proj_B = Linear(width, state_size, rng, bias=False)
        self.proj_C = Linear(width, state_size, rng, bias=False)
        self.proj_delta = Linear(width, 1, rng, bias=False)
        self.proj_delta.weight = parameter(rng.uniform(-0.1, 0.1, size=(width, 1)) / np.sqrt(width))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=width))
        # inverse softplus so softplus(bias) == dt
        self.delta_bias = parameter(dt + np.log(-np.expm1(-dt)))
        self.D_skip = parameter(np.ones(width))
        self._width = width
        self._state_size = state_size

    @property
    def width(self) -> int:
        return self._width

    def discretization_inputs(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Δ [B,L,E], A [E,N], B [B,L,N], C [B,L,N] for a [B,L,E] input"""
        delta = tc.softplus(self.proj_delta(x) + self.delta_bias)
        a = -tc.exp(self.A_log)
        return delta, a, self.proj_B(x), self.proj_C(x)

    def forward(self, x: Tensor) -> Tensor:
        return selective_scan(x, self)


def _as_batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim == 3:
        return x, False
    raise ContractError(f"{op}: expected [L,D] or [B,L,D], got {x.shape}")


def selective_scan(x: Tensor, params: SelectiveSSM) -> Tensor:
    """Run the selective SSM over x [L,D] or [B,L,D]; h_0 = 0"""
    batched, squeeze = _as_batched(x, "selective_scan")
    if batched.shape[1] < 1:
        raise ContractError("selective_scan: empty sequence")
    if batched.shape[2] != params.width:
        raise ContractError(f"selective_scan: token width {batched.shape[2]} != SSM width {params.width}")
    delta, a, b, c = params.discretization_inputs(batched)
    y = selective_scan_op(batched, delta, a, b, c, params.D_skip)
    return y.reshape(y.shape[1:]) if squeeze else y


def chunked_scan(x, params: SelectiveSSM, chunk: int, workers: int = 1) -> Tensor:
    """Forward-only scan processed in chunks of `chunk` steps, carrying state between them

    Channel lanes are independent, so with workers > 1 they are split into
    groups scanned on a thread pool. The result carries no graph.
    """
    if chunk < 1:
        raise ContractError(f"chunked_scan: chunk must be >= 1, got {chunk}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    batched, squeeze = _as_batched(x, "chunked_scan")
    if batched.shape[1] < 1:
        raise ContractError("chunked_scan: empty sequence")
    with tc.no_grad():
        delta, a, b, c = params.discretization_inputs(batched)
    u, dd, ad, bd, cd, skip = batched.data, delta.data, a.data, b.data, c.data, params.D_skip.data
    lanes = np.array_split(np.arange(u.shape[2]), max(1, min(workers, u.shape[2])))

    def run_lane(channels: np.ndarray) -> np.ndarray:
        h = None
        pieces = []
        for start in range(0, u.shape[1], chunk):
            stop = min(start + chunk, u.shape[1])
            y, states, _, _ = scan_kernel(
                u[:, start:stop, channels], dd[:, start:stop, channels], ad[channels],
                bd[:, start:stop], cd[:, start:stop], skip[channels], h,
            )
            h = states[:, -1]
            pieces.append(y)
        return np.concatenate(pieces, axis=1)

    if len(lanes) == 1:
        y = run_lane(lanes[0])
    else:
        y = np.empty_like(u)
        with ThreadPoolExecutor(max_workers=len(lanes)) as pool:
            for channels, part in zip(lanes, pool.map(run_lane, lanes)):
                y[:, :, channels] = part
    out = Tensor(y)
    return out.reshape(out.shape[1:]) if squeeze else out


class MambaBlock(Module):
    """in-proj -> (content, gate); content: causal dwconv + SiLU -> scan; * SiLU(gate) -> out-proj"""

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        expand: int = 2,
        conv_width: int = 4,
        state_size: int = DEFAULT_STATE_SIZE,
    ):
        inner = expand * width
        self.in_proj = Linear(width, 2 * inner, rng)
        self.conv = CausalConv1d(inner, conv_width, rng)
        self.ssm = SelectiveSSM(inner, rng, state_size)
        self.out_proj = Linear(inner, width, rng)
        self._inner = inner

    def forward(self, x: Tensor) -> Tensor:
        return mamba_block(x, self)


def mamba_block(x: Tensor, params: MambaBlockParams) -> Tensor:
    batched, squeeze = _as_batched(x, "mamba_block")
    content, gate = tc.split(params.in_proj(batched), 2, axis=-1)
    content = tc.silu(params.conv(content))
    y = selective_scan(content, params.ssm) * tc.silu(gate)
    out = params.out_proj(y)
    return out.reshape(out.shape[1:]) if squeeze else out


MambaBlockParams = MambaBlock
SSMParams = SelectiveSSM
