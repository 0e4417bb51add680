"""Graphical residual flow blocks.

Each block computes z + (w2 (.) m2) . tanh((w1 (.) m1) . y + b1) + b2 where
y is z, or z concatenated with the conditioning input for encoder blocks.
Masking the weights first and then rescaling them so each masked matrix has
spectral norm <= c < 1 makes the residual part a contraction, so every block
is invertible and the permuted Jacobian is lower triangular with positive
diagonal; the log-determinant is therefore the exact sum of elementwise logs
of the diagonal entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from sirenvae import diffcore as dc
from sirenvae.diffcore import Parameter, Var
from sirenvae.masking import MaskSet

__all__ = [
    "FlowError",
    "InversionError",
    "ResidualBlock",
    "Grf",
    "spectral_normalize",
    "block_forward",
    "block_diag_jacobian",
    "flow_forward_logdet",
    "block_invert",
    "flow_invert",
]

Direction = Literal["normalizing", "generative"]

DEFAULT_LIP_COEFF = 0.97
TRAIN_POWER_ITERS = 5
TEST_POWER_ITERS = 50


class FlowError(RuntimeError):
    pass


class InversionError(FlowError):
    def __init__(self, message: str, residual: float, iterations: int, block_index: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.block_index = block_index


def _power_iteration(a: np.ndarray, u: np.ndarray, iters: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Estimate the largest singular value of a from a warm-start left vector."""
    v = np.zeros(a.shape[1])
    for _ in range(iters):
        v = a.T @ u
        v /= max(np.linalg.norm(v), 1e-30)
        u = a @ v
        u /= max(np.linalg.norm(u), 1e-30)
    sigma = float(u @ a @ v)
    return sigma, u, v


def spectral_normalize(w: np.ndarray, m: np.ndarray, c: float, iters: int = TEST_POWER_ITERS, seed: int = 0) -> np.ndarray:
    """Return (w (.) m) scaled by min(1, c / sigma_hat).

    sigma_hat is a power-iteration estimate started from a seeded random
    vector; an (effectively) zero matrix is returned unchanged.
    """
    if not 0.0 < c < 1.0:
        raise FlowError(f"lipschitz coefficient must be in (0,1), got {c}")
    if iters < 1:
        raise FlowError("power iteration needs at least one step")
    a = np.asarray(w, dtype=np.float64) * np.asarray(m, dtype=np.float64)
    if not a.any():
        return a
    u0 = np.random.default_rng(seed).standard_normal(a.shape[0])
    sigma, _, _ = _power_iteration(a, u0, iters)
    if sigma <= 1e-30:
        return a
    return a * min(1.0, c / sigma)


class ResidualBlock:
    """One Lipschitz-constrained masked residual transformation."""

    def __init__(
        self,
        masks: MaskSet,
        lip_coeff: float = DEFAULT_LIP_COEFF,
        conditioning_dim: int = 0,
        rng: np.random.Generator | None = None,
        name: str = "block",
    ):
        if not 0.0 < lip_coeff < 1.0:
            raise FlowError(f"lipschitz coefficient must be in (0,1), got {lip_coeff}")
        if masks.n_inputs != masks.n_outputs + conditioning_dim:
            raise FlowError(
                f"mask input width {masks.n_inputs} != dim {masks.n_outputs} "
                f"+ conditioning {conditioning_dim}"
            )
        rng = rng or np.random.default_rng(0)
        self.masks = masks
        self.lip_coeff = lip_coeff
        self.conditioning_dim = conditioning_dim
        h, n_in = masks.m1.shape
        k = masks.n_outputs
        self.w1 = Parameter(f"{name}.w1", rng.standard_normal((h, n_in)) / np.sqrt(n_in))
        self.b1 = Parameter(f"{name}.b1", np.zeros((1, h)))
        self.w2 = Parameter(f"{name}.w2", rng.standard_normal((k, h)) / np.sqrt(h))
        self.b2 = Parameter(f"{name}.b2", np.zeros((1, k)))
        self._u1 = rng.standard_normal(h)
        self._u2 = rng.standard_normal(k)
        self.normalize(TEST_POWER_ITERS)

    @property
    def dim(self) -> int:
        return self.masks.n_outputs

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def normalize(self, iters: int = TRAIN_POWER_ITERS) -> None:
        """Project both masked weight matrices onto spectral norm <= c.

        Power vectors persist across calls, so a few iterations per training
        step keep the estimate tight while weights drift slowly.
        """
        for w, m, attr in ((self.w1, self.masks.m1, "_u1"), (self.w2, self.masks.m2, "_u2")):
            a = w.data * m
            if not a.any():
                w.data = a
                continue
            sigma, u, _ = _power_iteration(a, getattr(self, attr), iters)
            setattr(self, attr, u)
            if sigma > 1e-30:
                a = a * min(1.0, self.lip_coeff / sigma)
            w.data = a

    # --- differentiable path ---------------------------------------------

    def _input(self, z: Var, cond: Var | np.ndarray | None) -> Var:
        if self.conditioning_dim == 0:
            if cond is not None:
                raise FlowError("block takes no conditioning input")
            return z
        if cond is None:
            raise FlowError("block requires a conditioning input")
        cond = dc.as_var(cond)
        if cond.shape != (z.shape[0], self.conditioning_dim):
            raise FlowError(
                f"conditioning shape {cond.shape} != ({z.shape[0]}, {self.conditioning_dim})"
            )
        return dc.hstack(z, cond)

    def forward(self, z, cond=None) -> Var:
        """z + (w2 (.) m2) tanh((w1 (.) m1) y + b1) + b2."""
        z = dc.as_var(z)
        h = dc.tanh(dc.masked_linear(self._input(z, cond), self.w1, self.masks.m1, self.b1))
        return dc.add(z, dc.masked_linear(h, self.w2, self.masks.m2, self.b2))

    def forward_with_diag(self, z, cond=None) -> tuple[Var, Var]:
        """Forward pass plus the K diagonal Jacobian entries, sharing the
        hidden pre-activation."""
        z = dc.as_var(z)
        pre = dc.masked_linear(self._input(z, cond), self.w1, self.masks.m1, self.b1)
        t = dc.tanh(pre)
        out = dc.add(z, dc.masked_linear(t, self.w2, self.masks.m2, self.b2))
        hp = dc.sub(1.0, dc.mul(t, t))
        diag = self._diag_from_hp(hp)
        if (diag.data <= 0.0).any():
            raise FlowError("non-positive diagonal Jacobian entry; block is not normalized")
        return out, diag

    def diag_jacobian(self, z, cond=None) -> Var:
        """Entries 1 + sum_k (w2 (.) m2)[j,k] tanh'(pre_k) (w1 (.) m1)[k,j]."""
        return self.forward_with_diag(z, cond)[1]

    def _diag_from_hp(self, hp: Var) -> Var:
        w1, w2 = self.w1, self.w2
        m1, m2 = self.masks.m1, self.masks.m2
        k = self.dim
        w1m = w1.data * m1
        w2m = w2.data * m2
        c = w2m.T * w1m[:, :k]  # (hidden, k); c[h,j] = w2m[j,h] * w1m[h,j]
        out = 1.0 + hp.data @ c

        def back(g):
            dc_ = hp.data.T @ g  # (hidden, k)
            d_hp = g @ c.T
            d_w1 = np.zeros_like(w1.data)
            d_w1[:, :k] = dc_ * w2m.T * m1[:, :k]
            d_w2 = (dc_ * w1m[:, :k]).T * m2
            return d_hp, d_w1, d_w2

        return dc.custom_op(out, "resblock_diag", (hp, w1, w2), back)

    # --- no-grad numpy path (inversion) ------------------------------------

    def _np_forward_diag(self, z: np.ndarray, cond: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        k = self.dim
        w1m = self.w1.data * self.masks.m1
        w2m = self.w2.data * self.masks.m2
        y = z if self.conditioning_dim == 0 else np.hstack([z, cond])
        t = np.tanh(y @ w1m.T + self.b1.data)
        out = z + t @ w2m.T + self.b2.data
        diag = 1.0 + (1.0 - t * t) @ (w2m.T * w1m[:, :k])
        return out, diag

    def invert(
        self,
        y,
        cond=None,
        tol: float = 1e-6,
        max_iter: int = 100,
        method: Literal["auto", "newton", "contraction"] = "auto",
    ) -> np.ndarray:
        """Solve forward(z) = y to within ||.||_inf <= tol.

        Runs the diagonal-Newton fixed-point update z <- z - (f(z) - y)/diag
        starting from z = y, and falls back permanently to the contraction
        iteration z <- y - g(z) (convergent because Lip(g) < 1) if the
        residual fails to decrease for 5 consecutive steps.
        """
        if tol <= 0:
            raise FlowError(f"tolerance must be positive, got {tol}")
        y = np.asarray(y, dtype=np.float64)
        if cond is not None:
            cond = np.asarray(cond, dtype=np.float64)
        newton = method != "contraction"
        z = y.copy()
        prev = np.inf
        stalls = 0
        for it in range(max_iter):
            fz, diag = self._np_forward_diag(z, cond)
            res = fz - y
            r = float(np.abs(res).max())
            if r <= tol:
                return z
            if r >= prev:
                stalls += 1
                if newton and method == "auto" and stalls >= 5:
                    newton = False
                    stalls = 0
            else:
                stalls = 0
            if newton:
                z = z - res / diag
            else:
                z = y - (fz - z)
            prev = r
        fz, _ = self._np_forward_diag(z, cond)
        r = float(np.abs(fz - y).max())
        raise InversionError(
            f"block inversion did not reach tol={tol} in {max_iter} iterations "
            f"(residual {r:.3e})",
            residual=r,
            iterations=max_iter,
        )


@dataclass
class Grf:
    """A composition of residual blocks, all sharing dim and direction."""

    blocks: list[ResidualBlock]
    direction: Direction
    dim: int

    def __post_init__(self):
        if not self.blocks:
            raise FlowError("flow needs at least one block")
        if self.direction not in ("normalizing", "generative"):
            raise FlowError(f"invalid direction {self.direction!r}")
        for b in self.blocks:
            if b.dim != self.dim:
                raise FlowError("all blocks must share the flow dimension")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()]

    def normalize(self, iters: int = TRAIN_POWER_ITERS) -> None:
        for b in self.blocks:
            b.normalize(iters)

    def forward_logdet(self, z0, cond=None) -> tuple[Var, Var]:
        """Apply blocks in order; the log-determinant is the exact sum over
        blocks and coordinates of log diagonal Jacobian entries."""
        z = dc.as_var(z0)
        logdet: Var | None = None
        for i, b in enumerate(self.blocks):
            try:
                z, diag = b.forward_with_diag(z, cond)
            except (dc.NonFiniteError, FlowError) as exc:
                raise FlowError(f"block {i}: {exc}") from exc
            term = dc.vsum(dc.log(diag), axis=1)
            logdet = term if logdet is None else dc.add(logdet, term)
        return z, logdet

    def invert(self, z_t, cond=None, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
        """Invert blocks in reverse order; round-trips to within tol * depth."""
        z = np.asarray(z_t, dtype=np.float64)
        for i in range(len(self.blocks) - 1, -1, -1):
            try:
                z = self.blocks[i].invert(z, cond, tol=tol, max_iter=max_iter)
            except InversionError as exc:
                raise InversionError(
                    f"block {i}: {exc}", exc.residual, exc.iterations, block_index=i
                ) from exc
        return z


# --- operation-style wrappers ----------------------------------------------


def block_forward(b: ResidualBlock, z, cond=None) -> Var:
    return b.forward(z, cond)


def block_diag_jacobian(b: ResidualBlock, z, cond=None) -> Var:
    return b.diag_jacobian(z, cond)


def block_invert(b: ResidualBlock, y, cond=None, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    return b.invert(y, cond, tol=tol, max_iter=max_iter)


def flow_forward_logdet(f: Grf, z0, cond=None) -> tuple[Var, Var]:
    return f.forward_logdet(z0, cond)


def flow_invert(f: Grf, z_t, cond=None, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    return f.invert(z_t, cond, tol=tol, max_iter=max_iter)
