"""SIReN-VAE assembly and the vanilla-VAE baseline.

The encoder is a generative graphical residual flow conditioned on x whose
masks come from the faithful inverse of the model graph; the prior is a
normalizing flow masked by the graph itself; the likelihood is a fully
factored Gaussian whose per-coordinate (mu, log sigma) come from a masked
two-head decoder network.  The baseline VAE keeps a factorized N(0, I) prior
and Gaussian posterior with dense networks of the same widths.
"""

from __future__ import annotations

import numpy as np

from sirenvae import diffcore as dc
from sirenvae.diffcore import Parameter, Var
from sirenvae.flow import Grf, ResidualBlock, TRAIN_POWER_ITERS
from sirenvae.graph import BayesNet, GraphError, faithful_inverse
from sirenvae.masking import MaskSet, decoder_flow_masks, decoder_nn_masks, encoder_flow_masks

__all__ = ["ModelError", "MaskedTwoHead", "SirenVae", "VanillaVae", "logmeanexp"]

LOGSIGMA_BOUND = 7.0


class ModelError(RuntimeError):
    pass


def _std_normal_logp(v) -> Var:
    """Row sums of log N(v; 0, I)."""
    return dc.vsum(dc.gaussian_logpdf(v, 0.0, 0.0), axis=1)


def logmeanexp(log_w: np.ndarray, axis: int = 1) -> np.ndarray:
    """Max-shift stabilized log of the mean of exp(log_w)."""
    m = log_w.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(log_w - m).mean(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _iwae_logp(model, x, s: int, rng: np.random.Generator | None) -> np.ndarray:
    if s < 1:
        raise ModelError("importance sample count must be >= 1")
    rng = rng or np.random.default_rng(0)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    x_rep = np.repeat(x, s, axis=0)
    eps = rng.standard_normal((n * s, model.latent_dim))
    log_w = model._log_weights(x_rep, eps).reshape(n, s)
    return logmeanexp(log_w)


def _dense_masks(n_in: int, n_out: int, m: int) -> MaskSet:
    labels = tuple(f"u{j}" for j in range(n_out) for _ in range(m))
    m2 = np.zeros((n_out, m * n_out))
    for j in range(n_out):
        m2[j, j * m : (j + 1) * m] = 1.0
    return MaskSet(np.ones((m * n_out, n_in)), m2, labels, m)


class MaskedTwoHead:
    """One masked tanh hidden layer with masked linear mu / log-sigma heads.

    Both heads share the same hidden-to-output mask, and log sigma is hard
    clamped to [-LOGSIGMA_BOUND, LOGSIGMA_BOUND] before use.
    """

    def __init__(self, masks: MaskSet, rng: np.random.Generator, name: str):
        h, n_in = masks.m1.shape
        n_out = masks.n_outputs
        self.masks = masks
        self.w1 = Parameter(f"{name}.w1", rng.standard_normal((h, n_in)) / np.sqrt(max(n_in, 1)))
        self.b1 = Parameter(f"{name}.b1", np.zeros((1, h)))
        self.wm = Parameter(f"{name}.wm", rng.standard_normal((n_out, h)) / np.sqrt(h))
        self.bm = Parameter(f"{name}.bm", np.zeros((1, n_out)))
        self.ws = Parameter(f"{name}.ws", rng.standard_normal((n_out, h)) / np.sqrt(h))
        self.bs = Parameter(f"{name}.bs", np.zeros((1, n_out)))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.wm, self.bm, self.ws, self.bs]

    def __call__(self, z) -> tuple[Var, Var]:
        z = dc.as_var(z)
        h = dc.tanh(dc.masked_linear(z, self.w1, self.masks.m1, self.b1))
        mu = dc.masked_linear(h, self.wm, self.masks.m2, self.bm)
        logsig = dc.clip(
            dc.masked_linear(h, self.ws, self.masks.m2, self.bs),
            -LOGSIGMA_BOUND,
            LOGSIGMA_BOUND,
        )
        return mu, logsig


class SirenVae:
    """VAE whose prior and inference networks are graphical residual flows
    encoding ``graph`` and its faithful inverse."""

    kind = "siren"

    def __init__(
        self,
        graph: BayesNet,
        blocks: int = 4,
        hidden_multiplier: int = 4,
        lip_coeff: float = 0.97,
        seed: int = 0,
    ):
        if blocks < 1:
            raise ModelError("flow depth must be >= 1")
        if graph.num_latent == 0:
            raise ModelError("graph has no latent nodes")
        self.graph = graph
        self.inverse = faithful_inverse(graph)
        self.blocks = blocks
        self.hidden_multiplier = hidden_multiplier
        self.lip_coeff = lip_coeff
        self.latent_dim = graph.num_latent
        self.observed_dim = graph.num_observed
        self.observed_ids = graph.observed_ids

        enc_masks = encoder_flow_masks(self.inverse, hidden_multiplier)
        pri_masks = decoder_flow_masks(graph, hidden_multiplier)
        dec_masks = decoder_nn_masks(graph, hidden_multiplier)

        ss = np.random.SeedSequence(seed)
        enc_rng, pri_rng, dec_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        self.encoder = Grf(
            [
                ResidualBlock(enc_masks, lip_coeff, self.observed_dim, enc_rng, name=f"enc{i}")
                for i in range(blocks)
            ],
            direction="generative",
            dim=self.latent_dim,
        )
        self.prior = Grf(
            [
                ResidualBlock(pri_masks, lip_coeff, 0, pri_rng, name=f"prior{i}")
                for i in range(blocks)
            ],
            direction="normalizing",
            dim=self.latent_dim,
        )
        self.decoder = MaskedTwoHead(dec_masks, dec_rng, "dec")

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.prior.parameters() + self.decoder.parameters()

    def normalize(self, iters: int = TRAIN_POWER_ITERS) -> None:
        self.encoder.normalize(iters)
        self.prior.normalize(iters)

    # --- densities ---------------------------------------------------------

    def encode(self, x, eps) -> tuple[Var, Var]:
        """Push base noise through the conditioned encoder flow.

        Returns (z, log q(z|x)) with log q = log p0(eps) - logdet.
        """
        x = dc.as_var(x)
        z, logdet = self.encoder.forward_logdet(dc.as_var(eps), x)
        return z, dc.sub(_std_normal_logp(eps), logdet)

    def prior_logp(self, z) -> Var:
        """log p(z) = log p0(F_n(z)) + logdet(F_n at z), per row."""
        w, logdet = self.prior.forward_logdet(z)
        return dc.add(_std_normal_logp(w), logdet)

    def decode_params(self, z) -> tuple[Var, Var]:
        return self.decoder(z)

    @staticmethod
    def likelihood_logp(x, mu, logsigma) -> Var:
        """Row sums of the fully factored Gaussian log-likelihood."""
        return dc.vsum(dc.gaussian_logpdf(x, mu, logsigma), axis=1)

    def elbo(self, x, n_mc: int = 1, rng: np.random.Generator | None = None) -> Var:
        """Monte-Carlo ELBO averaged over the batch rows and n_mc draws."""
        if n_mc < 1:
            raise ModelError("n_mc must be >= 1")
        rng = rng or np.random.default_rng(0)
        x = np.asarray(x, dtype=np.float64)
        acc: Var | None = None
        for _ in range(n_mc):
            eps = rng.standard_normal((x.shape[0], self.latent_dim))
            z, log_q = self.encode(x, eps)
            mu, logsig = self.decode_params(z)
            term = dc.sub(
                dc.add(self.likelihood_logp(x, mu, logsig), self.prior_logp(z)), log_q
            )
            acc = term if acc is None else dc.add(acc, term)
        return dc.vmean(acc) / n_mc

    def _log_weights(self, x_rep: np.ndarray, eps: np.ndarray) -> np.ndarray:
        z, log_q = self.encode(x_rep, eps)
        mu, logsig = self.decode_params(z)
        ll = self.likelihood_logp(x_rep, mu, logsig)
        return (ll.data + self.prior_logp(z).data - log_q.data)[:, 0]

    def iwae_logp(self, x, s: int = 500, rng: np.random.Generator | None = None) -> np.ndarray:
        """Importance-weighted log-likelihood estimate per row of x."""
        return _iwae_logp(self, x, s, rng)

    def reconstruction_error(self, x, s: int = 10, rng: np.random.Generator | None = None) -> np.ndarray:
        """Negative expected reconstruction log-likelihood under q(z|x),
        estimated with s posterior samples per row."""
        if s < 1:
            raise ModelError("sample count must be >= 1")
        rng = rng or np.random.default_rng(0)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        x_rep = np.repeat(x, s, axis=0)
        eps = rng.standard_normal((n * s, self.latent_dim))
        z, _ = self.encode(x_rep, eps)
        mu, logsig = self.decode_params(z)
        ll = self.likelihood_logp(x_rep, mu, logsig).data.reshape(n, s)
        return -ll.mean(axis=1)

    def sample(self, n: int, rng: np.random.Generator | None = None,
               tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
        """Ancestral model samples: invert the prior flow on base noise, then
        draw observations from the decoded Gaussians."""
        rng = rng or np.random.default_rng(0)
        eps = rng.standard_normal((n, self.latent_dim))
        z = self.prior.invert(eps, tol=tol, max_iter=max_iter)
        mu, logsig = self.decode_params(z)
        noise = rng.standard_normal((n, self.observed_dim))
        return mu.data + np.exp(logsig.data) * noise


class VanillaVae:
    """Baseline VAE: factorized Gaussian prior/posterior of the same latent
    dimension, with dense encoder/decoder networks of the decoder's widths."""

    kind = "vanilla"

    def __init__(
        self,
        graph: BayesNet,
        blocks: int = 4,  # unused; kept for a uniform build signature
        hidden_multiplier: int = 4,
        lip_coeff: float = 0.97,  # unused
        seed: int = 0,
    ):
        if graph.num_latent == 0:
            raise ModelError("graph has no latent nodes")
        self.graph = graph
        self.blocks = blocks
        self.hidden_multiplier = hidden_multiplier
        self.lip_coeff = lip_coeff
        self.latent_dim = graph.num_latent
        self.observed_dim = graph.num_observed
        self.observed_ids = graph.observed_ids
        ss = np.random.SeedSequence(seed)
        enc_rng, dec_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        k, d, m = self.latent_dim, self.observed_dim, hidden_multiplier
        self.encoder_net = MaskedTwoHead(_dense_masks(d, k, m), enc_rng, "enc")
        self.decoder_net = MaskedTwoHead(_dense_masks(k, d, m), dec_rng, "dec")

    def parameters(self) -> list[Parameter]:
        return self.encoder_net.parameters() + self.decoder_net.parameters()

    def normalize(self, iters: int = TRAIN_POWER_ITERS) -> None:
        pass  # no Lipschitz constraint on the baseline

    def decode_params(self, z) -> tuple[Var, Var]:
        return self.decoder_net(z)

    likelihood_logp = staticmethod(SirenVae.likelihood_logp)

    def _posterior(self, x) -> tuple[Var, Var]:
        return self.encoder_net(x)

    def elbo(self, x, n_mc: int = 1, rng: np.random.Generator | None = None) -> Var:
        """Reparameterized ELBO with the closed-form Gaussian KL."""
        if n_mc < 1:
            raise ModelError("n_mc must be >= 1")
        rng = rng or np.random.default_rng(0)
        x = np.asarray(x, dtype=np.float64)
        mu_z, ls_z = self._posterior(x)
        #  KL(N(mu, sigma) || N(0, 1)) = sum(mu^2 + sigma^2 - 1 - 2 log sigma) / 2
        kl = dc.vsum(
            dc.mul(mu_z, mu_z) + dc.exp(2.0 * ls_z) - 1.0 - 2.0 * ls_z, axis=1
        ) * 0.5
        acc: Var | None = None
        for _ in range(n_mc):
            eps = rng.standard_normal((x.shape[0], self.latent_dim))
            z = dc.add(mu_z, dc.mul(dc.exp(ls_z), eps))
            mu_x, ls_x = self.decode_params(z)
            ll = self.likelihood_logp(x, mu_x, ls_x)
            acc = ll if acc is None else dc.add(acc, ll)
        return dc.vmean(dc.sub(acc / n_mc, kl))

    def _log_weights(self, x_rep: np.ndarray, eps: np.ndarray) -> np.ndarray:
        mu_z, ls_z = self._posterior(x_rep)
        z = dc.add(mu_z, dc.mul(dc.exp(ls_z), eps))
        log_q = dc.vsum(dc.gaussian_logpdf(z, mu_z, ls_z), axis=1)
        mu_x, ls_x = self.decode_params(z)
        ll = self.likelihood_logp(x_rep, mu_x, ls_x)
        return (ll.data + _std_normal_logp(z).data - log_q.data)[:, 0]

    def iwae_logp(self, x, s: int = 500, rng: np.random.Generator | None = None) -> np.ndarray:
        """Importance-weighted log-likelihood estimate per row of x."""
        return _iwae_logp(self, x, s, rng)

    def reconstruction_error(self, x, s: int = 10, rng: np.random.Generator | None = None) -> np.ndarray:
        if s < 1:
            raise ModelError("sample count must be >= 1")
        rng = rng or np.random.default_rng(0)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        x_rep = np.repeat(x, s, axis=0)
        mu_z, ls_z = self._posterior(x_rep)
        eps = rng.standard_normal((n * s, self.latent_dim))
        z = mu_z.data + np.exp(ls_z.data) * eps
        mu_x, ls_x = self.decode_params(z)
        ll = self.likelihood_logp(x_rep, mu_x, ls_x).data.reshape(n, s)
        return -ll.mean(axis=1)

    def sample(self, n: int, rng: np.random.Generator | None = None, **_ignored) -> np.ndarray:
        rng = rng or np.random.default_rng(0)
        z = rng.standard_normal((n, self.latent_dim))
        mu, logsig = self.decode_params(z)
        noise = rng.standard_normal((n, self.observed_dim))
        return mu.data + np.exp(logsig.data) * noise
