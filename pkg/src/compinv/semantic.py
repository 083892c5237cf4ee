"""Anchor-regularized embedding inversion.

Plain textual inversion minimizes the reconstruction loss over a single
pseudo-token row. The anchored variant adds a pull towards a sparse, convex
combination of pretrained noun embeddings and blends the two objectives as
``(1 - lam) * L_rec + lam * L_anc``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import torch

from .diffusion import DiffusionModel, reconstruction_loss, to_chw
from .errors import ConfigError, ContractError, NumericError
from .numerics import RngStream
from .text_encoder import KIND_PRETRAINED

log = logging.getLogger(__name__)


@dataclass
class AnchorSet:
    token_ids: list[int]
    vectors: torch.Tensor  # (n, d), frozen copies

    @classmethod
    def from_encoder(cls, encoder) -> "AnchorSet":
        ids = encoder.vocab.noun_ids(KIND_PRETRAINED)
        return cls(ids, encoder.table.detach()[ids].clone())

    def __len__(self):
        return len(self.token_ids)


@dataclass
class SparseWeights:
    delta: np.ndarray
    support: tuple[int, ...]

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.delta, dtype=dtype)


# ------------------------------------------------------------- sparse coding


def _residual(D: np.ndarray, e: np.ndarray, support) -> tuple[float, np.ndarray]:
    sub = D[:, list(support)]
    coef, *_ = np.linalg.lstsq(sub, e, rcond=None)
    r = e - sub @ coef
    return float(r @ r), coef


def _best_subset(D: np.ndarray, e: np.ndarray, k: int, incumbent: tuple[float, tuple[int, ...]]):
    """Exact best k-subset by branch and bound.

    Any superset fits at least as well as its subsets, so the residual of
    ``chosen + all remaining candidates`` bounds every completion of a node.
    ``incumbent`` (residual, support) seeds the bound, normally from greedy pursuit.
    """
    n = D.shape[1]
    best = [incumbent[0], incumbent[1]]
    tol = 1e-12 * max(float(e @ e), 1e-300)

    def visit(chosen: tuple[int, ...], start: int):
        need = k - len(chosen)
        if need == 0:
            r, _ = _residual(D, e, chosen)
            if r < best[0] - tol or (abs(r - best[0]) <= tol and chosen < best[1]):
                best[0], best[1] = r, chosen
            return
        rest = tuple(range(start, n))
        if len(rest) < need:
            return
        bound, _ = _residual(D, e, chosen + rest) if chosen + rest else (float(e @ e), None)
        if bound > best[0] + tol:
            return
        for j in rest:
            visit(chosen + (j,), j + 1)

    visit((), 0)
    return best[0], best[1]


def _greedy_pursuit(D: np.ndarray, e: np.ndarray, k: int) -> tuple[float, tuple[int, ...]]:
    """Orthogonal matching pursuit; ties go to the lowest anchor index."""
    norms = np.linalg.norm(D, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    chosen: list[int] = []
    r = e.copy()
    for _ in range(k):
        corr = np.abs(D.T @ r) / norms
        corr[chosen] = -1.0
        chosen.append(int(np.argmax(corr)))
        _, coef = _residual(D, e, chosen)
        r = e - D[:, chosen] @ coef
    support = tuple(sorted(chosen))
    return _residual(D, e, support)[0], support


def solve_sparse_weights(e, anchors, c: int = 3, residual_tol: float = 0.05) -> SparseWeights:
    """Sparse attraction weights for ``e`` over the anchor dictionary.

    Finds the least-squares best support of each size up to ``c - 1``
    (greedy pursuit warm start, refined to the exact optimum), keeps the
    smallest size whose relative residual is within ``residual_tol``, then
    clamps coefficients to be non-negative and renormalizes onto the simplex.
    """
    if c < 2:
        raise ConfigError("c must be at least 2")
    vecs = anchors.vectors if isinstance(anchors, AnchorSet) else anchors
    D = np.asarray(torch.as_tensor(vecs).detach().cpu().double()).T  # (d, n)
    n = D.shape[1]
    if n == 0:
        raise ContractError("anchor set is empty")
    x = np.asarray(torch.as_tensor(e).detach().cpu().double()).reshape(-1)
    energy = float(x @ x)
    kmax = min(c - 1, n)
    support = ()
    for k in range(1, kmax + 1):
        r, support = _best_subset(D, x, k, _greedy_pursuit(D, x, k))
        if r <= (residual_tol ** 2) * energy:
            break
    _, coef = _residual(D, x, support)
    return _simplex_weights(D, x, support, coef)


def _simplex_weights(D, x, support, coef) -> SparseWeights:
    n = D.shape[1]
    coef = np.clip(coef, 0.0, None)
    keep = [(i, w) for i, w in zip(support, coef) if w > 0]
    delta = np.zeros(n)
    if not keep:
        norms = np.linalg.norm(D, axis=0)
        corr = (D.T @ x) / np.where(norms > 0, norms, 1.0)
        j = int(np.argmax(corr))
        delta[j] = 1.0
        return SparseWeights(delta, (j,))
    total = sum(w for _, w in keep)
    for i, w in keep:
        delta[i] = w / total
    return SparseWeights(delta, tuple(i for i, _ in keep))


def anchor_loss(e: torch.Tensor, anchors, delta) -> torch.Tensor:
    """Mean over the anchor set of delta-weighted squared distances to ``e``."""
    vecs = anchors.vectors if isinstance(anchors, AnchorSet) else anchors
    vecs = vecs.to(e.dtype)
    w = delta.as_tensor(e.dtype) if isinstance(delta, SparseWeights) else torch.as_tensor(delta, dtype=e.dtype)
    d2 = (e[None, :] - vecs).pow(2).sum(1)
    return (w * d2).sum() / vecs.shape[0]


# ---------------------------------------------------------------- inversion


@dataclass
class InversionConfig:
    lam: float = 0.95
    c: int = 3
    learning_rate: float = 0.04
    steps: int = 400
    delta_refresh_interval: int = 50
    seed: int = 0
    batch_size: int = 5
    noise_scale: float = 0.01
    init: str = "superclass"
    optimizer: str = "adam"
    residual_tol: float = 0.05

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.c < 2:
            raise ConfigError("c must be at least 2")
        if self.steps < 0 or self.delta_refresh_interval < 1:
            raise ConfigError("steps must be >= 0 and the refresh interval >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class InversionResult:
    name: str
    token_id: int
    embedding: torch.Tensor
    delta: SparseWeights | None
    log: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "L_rec", "L_anc", "L_final", "delta_support", "entropy"])
        for row in self.log:
            w.writerow([row["step"], repr(row["L_rec"]), repr(row["L_anc"]), repr(row["L_final"]),
                        " ".join(str(i) for i in row["delta_support"]), repr(row["entropy"])])
        return buf.getvalue()


def embedding_entropy(e) -> float:
    """Shannon entropy (nats) of softmax(|e|) across embedding dimensions."""
    v = torch.as_tensor(e, dtype=torch.float64).reshape(-1)
    if not bool((v != 0).any()):
        raise ContractError("entropy of the zero vector is undefined")
    p = torch.softmax(v.abs(), 0)
    return float(-(p * torch.log(p)).sum())


def _pseudo_table(base: torch.Tensor, row: torch.Tensor, pid: int) -> torch.Tensor:
    return torch.cat([base[:pid], row[None], base[pid + 1:]], dim=0)


def invert(user_images: torch.Tensor, name: str, superclass: str, model: DiffusionModel,
           config: InversionConfig, anchored: bool = True) -> InversionResult:
    """Learn a pseudo-token row for the concept shown in ``user_images`` (N, H, W, 3).

    ``anchored=False`` is the plain textual-inversion path: the objective is
    the reconstruction loss alone. The sparse weights and anchor loss are
    still computed and logged so both paths share one log format.
    Only the pseudo row changes; every other table row is left bit-identical.
    """
    config.validate()
    if user_images.shape[0] < 1:
        raise ContractError("inversion needs at least one sample image")
    enc = model.encoder
    for p in model.parameters():
        p.requires_grad_(False)
    rng = RngStream(config.seed, f"invert/{name}")
    pid = enc.register_pseudo(name, superclass, rng.child("init"), config.noise_scale, config.init)
    prompt = f"a photo of a {name} {superclass}"
    ids_one = torch.tensor(enc.tokenize(prompt))
    base = enc.table.detach().clone()
    anchors = AnchorSet.from_encoder(enc)
    dtype = next(model.denoiser.parameters()).dtype
    row = base[pid].clone().requires_grad_(True)
    if config.optimizer == "adam":
        opt = torch.optim.Adam([row], lr=config.learning_rate)
    else:
        opt = torch.optim.SGD([row], lr=config.learning_rate)
    x_all = to_chw(user_images).to(dtype)
    lam = float(config.lam)
    delta = None
    history = []
    for step in range(config.steps):
        if step % config.delta_refresh_interval == 0:
            delta = solve_sparse_weights(row.detach(), anchors, config.c, config.residual_tol)
        srng = rng.child(f"step{step}")
        idx = torch.from_numpy(srng.integers(0, x_all.shape[0], size=config.batch_size))
        ids = ids_one[None].repeat(config.batch_size, 1)
        table = _pseudo_table(base, row, pid)
        need_rec_grad = not anchored or lam < 1.0
        with torch.set_grad_enabled(need_rec_grad):
            l_rec = reconstruction_loss(x_all[idx], ids, model, srng, table=table)
        if anchored:
            l_anc = anchor_loss(row, anchors, delta)
            l_final = (1.0 - lam) * l_rec + lam * l_anc if lam < 1.0 else l_anc
        else:
            # logged for comparison only; plain inversion never sees it
            l_anc = anchor_loss(row.detach(), anchors, delta)
            l_final = l_rec
        if not torch.isfinite(l_final):
            raise NumericError(f"inversion of {name!r} diverged at step {step}: "
                               f"L_rec={float(l_rec)}, L_anc={float(l_anc)}, |e|={float(row.norm())}")
        history.append({
            "step": step, "L_rec": l_rec.item(), "L_anc": l_anc.item(), "L_final": l_final.item(),
            "delta_support": list(delta.support) if delta else [],
            "entropy": embedding_entropy(row.detach()),
        })
        opt.zero_grad(set_to_none=True)
        l_final.backward()
        opt.step()
    final = row.detach().clone()
    enc.set_row(pid, final)
    return InversionResult(name, pid, final, delta, history)


def textual_inversion(user_images, name, superclass, model, config: InversionConfig) -> InversionResult:
    return invert(user_images, name, superclass, model, config, anchored=False)


# -------------------------------------------------------------- diagnostics


def ood_projection(vectors: torch.Tensor, names: list[str], scores) -> list[tuple[float, float, float, str]]:
    """Project embeddings onto their top-2 principal components."""
    X = np.asarray(torch.as_tensor(vectors).detach().double())
    if X.shape[0] < 3:
        raise ContractError("need at least 3 embeddings for a projection")
    Xc = X - X.mean(0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    basis = vt[:2]
    # fix the sign of each axis so the projection is deterministic
    for k in range(basis.shape[0]):
        j = int(np.argmax(np.abs(basis[k])))
        if basis[k, j] < 0:
            basis[k] = -basis[k]
    P = Xc @ basis.T
    if P.shape[1] < 2:
        P = np.pad(P, ((0, 0), (0, 2 - P.shape[1])))
    return [(float(P[i, 0]), float(P[i, 1]), float(scores[i]), names[i]) for i in range(len(names))]


def pca_reconstruction_error(vectors) -> tuple[float, float]:
    """(squared reconstruction error of the 2-component projection, sum of discarded eigenvalues)."""
    X = np.asarray(torch.as_tensor(vectors).detach().double())
    Xc = X - X.mean(0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    basis = vt[:2]
    recon = (Xc @ basis.T) @ basis
    err = float(((Xc - recon) ** 2).sum())
    eig = np.linalg.eigvalsh(Xc.T @ Xc)[::-1]
    return err, float(eig[2:].sum())
