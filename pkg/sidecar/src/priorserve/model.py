"""Latent consistency backends the server can expose.

The shipped backend is procedural: an orthogonal patch-transform
auto-encoder plus a conditional Gaussian latent law whose consistency map
(posterior mean of the clean latent given a noised one) has a closed form.
It needs no checkpoint files, is deterministic bit for bit, and stands in
for a pretrained text-to-image model wherever one cannot be bundled; real
models register the same interface under their own identifier.

Interface expected by the server, duck-typed:

    latent_shape, image_shape, cond_dim, T
    encode(x) -> z          decode(z) -> x
    consistency(z_t, t, c) -> z_0 estimate
    embed_prompt(text) -> conditioning vector
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


def _dct_matrix(n: int) -> np.ndarray:
    # Orthonormal DCT-II; n is tiny (the patch side), so the direct formula
    # beats pulling in a transform library.
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] = math.sqrt(1.0 / n)
    return mat


def _seeded_rng(*tags: str) -> np.random.Generator:
    digest = hashlib.blake2b("|".join(tags).encode("utf-8"), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class ProceduralLatentModel:
    """Deterministic latent consistency model with no external weights.

    Images are single-channel ``(1, s*h, s*w)``; the encoder splits them
    into s-by-s patches and takes each patch's orthonormal 2-D DCT, giving
    latents of shape ``(s*s, h, w)``. The decoder is the exact inverse, so
    the auto-encoding error is float rounding: zero at float64, and below
    about 1e-6 relative after the float32 casts a wire crossing applies.

    Clean latents follow ``z | c ~ N(mu(c), v I)`` with
    ``mu(c) = encode(gray) + Gc``, G fixed by a seeded draw. Under the
    variance-preserving schedule the consistency map is the posterior mean

        f(z_t, t, c) = mu + sqrt(ab_t) v / (ab_t v + 1 - ab_t) (z_t - sqrt(ab_t) mu)

    and f(z_0, 0, c) = z_0 is honored exactly (not merely to rounding).
    """

    name = "procedural"

    T = 1000
    latent_var = 0.08

    def __init__(
        self,
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        cond_dim: int = 16,
        device: str = "cpu",
    ):
        if device != "cpu":
            raise ValueError(f"model 'procedural' runs on cpu only, got device '{device}'")
        if len(latent_shape) != 3 or min(latent_shape) < 1:
            raise ValueError(f"latent shape must be (channels, h, w) positive, got {latent_shape}")
        channels, h, w = (int(d) for d in latent_shape)
        side = math.isqrt(channels)
        if side * side != channels:
            raise ValueError(
                f"latent channel count {channels} must be a square (patch side squared)"
            )
        if cond_dim < 1:
            raise ValueError(f"cond_dim must be >= 1, got {cond_dim}")
        self.latent_shape = (channels, h, w)
        self.image_shape = (1, side * h, side * w)
        self.cond_dim = int(cond_dim)
        self.device = device
        self._side = side
        self._dct = _dct_matrix(side)
        beta = np.linspace(1e-4, 2e-2, self.T)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        d = channels * h * w
        rng = _seeded_rng("procedural", "cond-map", f"{self.latent_shape}", f"{cond_dim}")
        self._cond_map = rng.standard_normal((d, cond_dim)) * (0.25 / math.sqrt(cond_dim))
        self._base = self.encode(np.full(self.image_shape, 0.5))

    # ------------------------------------------------------------ transform

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.image_shape:
            raise ValueError(f"encode expects image shape {self.image_shape}, got {x.shape}")
        s = self._side
        _, h, w = self.latent_shape
        patches = x[0].reshape(h, s, w, s).transpose(0, 2, 1, 3)
        coeff = np.einsum("ka,hwab,lb->hwkl", self._dct, patches, self._dct)
        return coeff.transpose(2, 3, 0, 1).reshape(self.latent_shape)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.latent_shape:
            raise ValueError(f"decode expects latent shape {self.latent_shape}, got {z.shape}")
        s = self._side
        _, h, w = self.latent_shape
        coeff = z.reshape(s, s, h, w).transpose(2, 3, 0, 1)
        patches = np.einsum("ka,hwkl,lb->hwab", self._dct, coeff, self._dct)
        return patches.transpose(0, 2, 1, 3).reshape(1, s * h, s * w)

    # ---------------------------------------------------------- consistency

    def mean_latent(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64).ravel()
        if c.size != self.cond_dim:
            raise ValueError(f"conditioning vector has size {c.size}, expected {self.cond_dim}")
        return self._base + (self._cond_map @ c).reshape(self.latent_shape)

    def consistency(self, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != self.latent_shape:
            raise ValueError(f"consistency expects latent shape {self.latent_shape}, got {z_t.shape}")
        t = int(t)
        if t < 0 or t > self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        if t == 0:
            return z_t.copy()
        mu = self.mean_latent(c)
        ab = self.alpha_bar[t]
        v = self.latent_var
        gain = math.sqrt(ab) * v / (ab * v + 1.0 - ab)
        return mu + gain * (z_t - math.sqrt(ab) * mu)

    # --------------------------------------------------------------- prompt

    def embed_prompt(self, text: str) -> np.ndarray:
        """Conditioning vector for a prompt; the empty string gives the
        model's null-prompt embedding. Deterministic in the text alone."""
        rng = _seeded_rng("procedural", "prompt", f"{self.cond_dim}", text)
        e = rng.standard_normal(self.cond_dim)
        return e / np.linalg.norm(e)

    def null_embedding(self) -> np.ndarray:
        return self.embed_prompt("")


MODELS = {
    ProceduralLatentModel.name: ProceduralLatentModel,
}


def build_model(name: str, latent_shape: tuple[int, int, int], cond_dim: int, device: str):
    try:
        factory = MODELS[name]
    except KeyError:
        known = ", ".join(sorted(MODELS))
        raise ValueError(f"unknown model '{name}' (known: {known})") from None
    return factory(latent_shape=latent_shape, cond_dim=cond_dim, device=device)
