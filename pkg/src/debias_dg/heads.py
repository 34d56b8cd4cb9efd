"""Visual-world head, per-domain bias heads and the linear domain classifier.

All heads act on ``[z, 1]`` (an intercept column is appended), so every weight
matrix has ``embedding_dim + 1`` rows.  Domains are indexed ``0 .. N-1`` in the
order the training domains were given.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .network import glorot_bound

DELTA_INIT_SCALE = 1e-2


def _check_embedding(z: Tensor, emb_dim: int, who: str) -> None:
    if z.ndim != 2 or z.shape[1] != emb_dim:
        raise ShapeError(f"{who}: embedding has shape {z.shape}, expected (n, {emb_dim})")


class BiasHeadBank:
    """``w_vw`` plus one ``(alpha_i, delta_i)`` pair per training domain.

    The composed head of domain ``i`` is ``alpha_i * w_vw + delta_i``.  With
    ``alpha_on_intercept=False`` the intercept row of ``alpha_i`` is held at 1.
    """

    def __init__(self, w_vw: Tensor, alphas: list[Tensor], deltas: list[Tensor],
                 alpha_on_intercept: bool = True):
        if len(alphas) != len(deltas):
            raise ValueError("need one alpha and one delta per domain")
        for t in list(alphas) + list(deltas):
            if t.shape != w_vw.shape:
                raise ShapeError(f"head parameter shape {t.shape} != w_vw shape {w_vw.shape}")
        self.w_vw = w_vw
        self.alphas = list(alphas)
        self.deltas = list(deltas)
        self.alpha_on_intercept = alpha_on_intercept
        mask = np.ones(w_vw.shape)
        if not alpha_on_intercept:
            mask[-1, :] = 0.0
        self._alpha_mask = mask

    @classmethod
    def init(cls, emb_dim: int, label_dim: int, n_domains: int, rng: np.random.Generator,
             alpha_on_intercept: bool = True) -> "BiasHeadBank":
        shape = (emb_dim + 1, label_dim)
        bound = glorot_bound(*shape)
        w_vw = Tensor(rng.uniform(-bound, bound, size=shape), name="w_vw")
        alphas = [Tensor(np.ones(shape), name=f"alpha{i}") for i in range(n_domains)]
        deltas = [Tensor(DELTA_INIT_SCALE * rng.uniform(-bound, bound, size=shape), name=f"delta{i}")
                  for i in range(n_domains)]
        return cls(w_vw, alphas, deltas, alpha_on_intercept)

    @property
    def n_domains(self) -> int:
        return len(self.alphas)

    @property
    def embedding_dim(self) -> int:
        return self.w_vw.shape[0] - 1

    @property
    def label_dim(self) -> int:
        return self.w_vw.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_vw] + self.alphas + self.deltas

    def composed(self, i: int) -> Tensor:
        """``alpha_i * w_vw + delta_i`` as a recorded tensor."""
        if not 0 <= i < self.n_domains:
            raise IndexError(f"domain index {i} out of range for {self.n_domains} domains")
        alpha = self.alphas[i]
        if not self.alpha_on_intercept:
            alpha = ad.add(ad.mul(alpha, self._alpha_mask), 1.0 - self._alpha_mask)
        return ad.add(ad.mul(alpha, self.w_vw), self.deltas[i])

    def vw_logits(self, z) -> Tensor:
        z = ad.as_tensor(z)
        _check_embedding(z, self.embedding_dim, "vw_logits")
        return ad.matmul(ad.append_ones(z), self.w_vw)

    def bias_logits(self, i: int, z) -> Tensor:
        z = ad.as_tensor(z)
        w_i = self.composed(i)
        _check_embedding(z, self.embedding_dim, "bias_logits")
        return ad.matmul(ad.append_ones(z), w_i)

    def copy(self) -> "BiasHeadBank":
        return BiasHeadBank(Tensor(self.w_vw.data), [Tensor(a.data) for a in self.alphas],
                            [Tensor(d.data) for d in self.deltas], self.alpha_on_intercept)


class DomainClassifier:
    """Linear map ``[z, 1] @ phi`` to one logit per training domain."""

    def __init__(self, phi: Tensor):
        if phi.ndim != 2:
            raise ShapeError(f"phi must be a matrix, got shape {phi.shape}")
        self.phi = phi

    @classmethod
    def init(cls, emb_dim: int, n_domains: int, rng: np.random.Generator) -> "DomainClassifier":
        bound = glorot_bound(emb_dim + 1, n_domains)
        return cls(Tensor(rng.uniform(-bound, bound, size=(emb_dim + 1, n_domains)), name="phi"))

    @property
    def n_domains(self) -> int:
        return self.phi.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.phi.shape[0] - 1

    def parameters(self) -> list[Tensor]:
        return [self.phi]

    def logits(self, z_detached) -> Tensor:
        """Domain logits.  Callers pass a detached embedding so no gradient reaches the extractor."""
        z = ad.as_tensor(z_detached)
        _check_embedding(z, self.embedding_dim, "domain_logits")
        return ad.matmul(ad.append_ones(z), self.phi)

    def copy(self) -> "DomainClassifier":
        return DomainClassifier(Tensor(self.phi.data))


def vw_logits(bank: BiasHeadBank, z) -> Tensor:
    return bank.vw_logits(z)


def bias_logits(bank: BiasHeadBank, i: int, z) -> Tensor:
    return bank.bias_logits(i, z)


def domain_logits(dc: DomainClassifier, z_detached) -> Tensor:
    return dc.logits(z_detached)


def head_logits(bank: BiasHeadBank, z: np.ndarray, domain: Optional[int] = None) -> np.ndarray:
    """Logits of the visual-world head, or of bias head ``domain``, as a plain array."""
    z = np.asarray(z, dtype=np.float64)
    zz = np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)
    if domain is None:
        return zz @ bank.w_vw.data
    return zz @ bank.composed(domain).data
