"""Layout prediction, attention masks, the location loss, and the latent
guidance hook used during the first reverse steps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .boxes import BBox, iou
from .diffusion import CANONICAL_RES, HOOK_STEPS, AttentionRecorder, DiffusionModel, sample
from .errors import ConfigError, ContractError, DataError, NumericError
from .numerics import RngStream
from .scene_corpus import concept, detect, detection_for
from .text_encoder import KIND_PRETRAINED

log = logging.getLogger(__name__)


# -------------------------------------------------------------------- masks


def bbox_to_mask(box: BBox, grid: int = CANONICAL_RES) -> torch.Tensor:
    """Binary (grid, grid) mask of cells whose centers fall inside ``box``.

    If no center does, the single cell holding the box center is switched on.
    """
    centers = (torch.arange(grid, dtype=torch.float64) + 0.5) / grid
    cols = (centers >= box.x0) & (centers <= box.x1)
    rows = (centers >= box.y0) & (centers <= box.y1)
    mask = (rows[:, None] & cols[None, :]).to(torch.float64)
    if mask.sum() == 0:
        cx, cy = box.center
        mask[min(int(cy * grid), grid - 1), min(int(cx * grid), grid - 1)] = 1.0
    return mask


def location_loss(masks: torch.Tensor, maps: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Mean over nouns of ``1 - sum(M * A) / sum(A)``.

    masks: (N, g, g) or (B, N, g, g); maps: (B, N, g, g) or (N, g, g).
    ``reduction='sum'`` adds the per-sample losses over the batch instead of
    averaging them, which keeps each sample's latent gradient independent.
    """
    if maps.dim() == 3:
        maps = maps[None]
    if masks.dim() == 3:
        masks = masks[None]
    if masks.shape[-3:] != maps.shape[-3:]:
        raise ContractError(f"mask shape {tuple(masks.shape)} does not match maps {tuple(maps.shape)}")
    masks = masks.to(maps.dtype)
    total = maps.sum(dim=(-1, -2))
    if bool((total <= 0).any()):
        raise NumericError("attention map with zero mass")
    inside = (masks * maps).sum(dim=(-1, -2))
    per_sample = (1.0 - inside / total).mean(-1)
    return per_sample.sum() if reduction == "sum" else per_sample.mean()


def noun_groups(encoder, ids: Sequence[int]) -> list[list[int]]:
    """Positions of noun phrases: adjacent noun tokens ("S* superclass") form one group."""
    groups: list[list[int]] = []
    prev = False
    for pos, tid in enumerate(ids):
        is_noun = encoder.vocab.noun_flags[tid]
        if is_noun:
            if prev:
                groups[-1].append(pos)
            else:
                groups.append([pos])
        prev = is_noun
    return groups


def group_maps(maps: torch.Tensor, groups: list[list[int]]) -> torch.Tensor:
    """(B, L, g, g) token maps -> (B, N, g, g) maps summed within each noun group."""
    return torch.stack([maps[:, g].sum(1) for g in groups], dim=1)


# ------------------------------------------------------------ layout model


class LayoutPredictor(nn.Module):
    """3-layer MLP mapping a pair of raw noun embeddings to two boxes."""

    def __init__(self, dim: int = 64, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 8))

    @staticmethod
    def to_boxes(raw: torch.Tensor) -> torch.Tensor:
        """(…, 8) logits -> (…, 2, 4) boxes; x0 = s(a), x1 = x0 + (1 - x0) s(b), same for y."""
        r = raw.reshape(*raw.shape[:-1], 2, 4)
        x0 = torch.sigmoid(r[..., 0])
        y0 = torch.sigmoid(r[..., 1])
        x1 = x0 + (1 - x0) * torch.sigmoid(r[..., 2])
        y1 = y0 + (1 - y0) * torch.sigmoid(r[..., 3])
        return torch.stack([x0, y0, x1, y1], dim=-1)

    def forward(self, e_i: torch.Tensor, e_j: torch.Tensor) -> torch.Tensor:
        return self.to_boxes(self.net(torch.cat([e_i, e_j], dim=-1)))


def nearest_noun(e: torch.Tensor, noun_table: torch.Tensor) -> int:
    """Index of the nearest row (Euclidean); ties go to the lowest index."""
    d = (noun_table.to(torch.float64) - e.to(torch.float64)[None]).pow(2).sum(1)
    return int(torch.nonzero(d == d.min())[0, 0])


def predict_layout(e_i: torch.Tensor, e_j: torch.Tensor, predictor: LayoutPredictor,
                   noun_table: torch.Tensor) -> tuple[BBox, BBox]:
    """Boxes for a noun pair; each embedding is first snapped to its nearest pretrained noun."""
    a = noun_table[nearest_noun(e_i, noun_table)]
    b = noun_table[nearest_noun(e_j, noun_table)]
    dtype = next(predictor.parameters()).dtype
    with torch.no_grad():
        boxes = predictor(a.to(dtype)[None], b.to(dtype)[None])[0].double()
    return _valid_box(boxes[0]), _valid_box(boxes[1])


def _valid_box(v: torch.Tensor) -> BBox:
    x0, y0, x1, y1 = (float(t) for t in v)
    # sigmoid saturation in float can collapse x1 onto x0; keep the box non-degenerate
    eps = 1e-6
    x0, y0 = min(x0, 1 - eps), min(y0, 1 - eps)
    return BBox(x0, y0, max(x1, x0 + eps), max(y1, y0 + eps))


# ----------------------------------------------------------- layout dataset


@dataclass
class LayoutRecord:
    noun_i: str
    noun_j: str
    box_i: BBox
    box_j: BBox
    conf_i: float
    conf_j: float


@dataclass
class LayoutDataset:
    records: list[LayoutRecord] = field(default_factory=list)
    yield_report: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["noun_i", "noun_j", "xi0", "yi0", "xi1", "yi1", "xj0", "yj0", "xj1", "yj1", "conf_i", "conf_j"])
        for r in self.records:
            w.writerow([r.noun_i, r.noun_j, *map(repr, r.box_i.as_tuple()), *map(repr, r.box_j.as_tuple()),
                        repr(r.conf_i), repr(r.conf_j)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LayoutDataset":
        rows = list(csv.reader(io.StringIO(text)))
        recs = []
        for r in rows[1:]:
            v = [float(x) for x in r[2:]]
            recs.append(LayoutRecord(r[0], r[1], BBox(*v[0:4]), BBox(*v[4:8]), v[8], v[9]))
        return cls(recs)


def build_layout_dataset(model: DiffusionModel, nouns: Sequence[str], per_pair: int, rng: RngStream,
                         sample_steps: int = 50, guidance_scale: float = 7.5, threshold: float = 0.5,
                         min_yield: float = 0.3) -> LayoutDataset:
    """Generate pair prompts, detect both nouns, and keep the images where both are found."""
    ds = LayoutDataset()
    kept = total = 0
    for a in nouns:
        for b in nouns:
            if a == b:
                continue
            prompt = f"a {a} and a {b}"
            imgs, _ = sample(prompt, model, guidance_scale, sample_steps, rng.child(f"{a}|{b}"),
                             batch=per_pair, record=False)
            n_keep = 0
            for img in imgs:
                dets = detect(img, [concept(a), concept(b)])
                da, db = detection_for(dets, a), detection_for(dets, b)
                if da and db and da.confidence >= threshold and db.confidence >= threshold:
                    ds.records.append(LayoutRecord(a, b, da.bbox, db.bbox, da.confidence, db.confidence))
                    n_keep += 1
            ds.yield_report[f"{a}|{b}"] = n_keep / per_pair
            kept += n_keep
            total += per_pair
    overall = kept / max(total, 1)
    ds.yield_report["overall"] = overall
    if overall < min_yield:
        worst = sorted((v, k) for k, v in ds.yield_report.items() if k != "overall")[:10]
        raise DataError(f"layout dataset yield {overall:.2%} below {min_yield:.0%}; lowest pairs: {worst}")
    return ds


@dataclass
class LayoutTrainConfig:
    epochs: int = 300
    lr: float = 3e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class LayoutTrainResult:
    predictor: LayoutPredictor
    val_iou: float
    train_curve: list[float]
    train_pairs: list[tuple[str, str]]
    val_pairs: list[tuple[str, str]]
    initial_loss: float = float("nan")


def split_pairs(records: Sequence[LayoutRecord], val_fraction: float, rng: RngStream):
    """Unordered-pair split so that no validation pair (in either order) is seen in training."""
    pairs = sorted({tuple(sorted((r.noun_i, r.noun_j))) for r in records})
    perm = rng.permutation(len(pairs))
    n_val = max(1, int(round(val_fraction * len(pairs)))) if len(pairs) > 1 else 0
    val = {pairs[k] for k in perm[:n_val]}
    return [p for p in pairs if p not in val], sorted(val)


def train_layout_predictor(dataset: LayoutDataset, noun_vectors: dict[str, torch.Tensor],
                           config: LayoutTrainConfig, min_records: int = 100) -> LayoutTrainResult:
    """MSE regression of both boxes from the raw noun-embedding pair."""
    if len(dataset.records) < min_records:
        raise DataError(f"layout dataset has {len(dataset.records)} records, need {min_records}")
    rng = RngStream(config.seed, "layout")
    train_pairs, val_pairs = split_pairs(dataset.records, config.val_fraction, rng.child("split"))
    val_set = set(val_pairs)

    def tensors(recs):
        ei = torch.stack([noun_vectors[r.noun_i] for r in recs]).float()
        ej = torch.stack([noun_vectors[r.noun_j] for r in recs]).float()
        y = torch.tensor([[r.box_i.as_tuple(), r.box_j.as_tuple()] for r in recs], dtype=torch.float32)
        return ei, ej, y

    tr = [r for r in dataset.records if tuple(sorted((r.noun_i, r.noun_j))) not in val_set]
    va = [r for r in dataset.records if tuple(sorted((r.noun_i, r.noun_j))) in val_set]
    torch.manual_seed(config.seed)
    model = LayoutPredictor(dim=next(iter(noun_vectors.values())).numel())
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ei, ej, y = tensors(tr)
    with torch.no_grad():
        init_loss = float((model(ei, ej) - y).pow(2).mean())
    curve = []
    for epoch in range(config.epochs):
        perm = torch.from_numpy(rng.child(f"epoch{epoch}").permutation(len(tr)))
        tot = 0.0
        for s in range(0, len(tr), config.batch_size):
            idx = perm[s:s + config.batch_size]
            loss = (model(ei[idx], ej[idx]) - y[idx]).pow(2).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"layout training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(idx)
        curve.append(tot / len(tr))
    val_iou = float("nan")
    if va:
        vi, vj, vy = tensors(va)
        with torch.no_grad():
            pred = model(vi, vj)
        ious = [iou(_valid_box(p[k]), BBox(*map(float, t[k]))) for p, t in zip(pred, vy) for k in range(2)]
        val_iou = float(np.mean(ious))
    return LayoutTrainResult(model, val_iou, curve, train_pairs, val_pairs, init_loss)


# ----------------------------------------------------------- guidance hook


@dataclass
class PromptMasks:
    groups: list[list[int]]
    masks: torch.Tensor  # (N, g, g)
    boxes: list[BBox]


def prompt_masks(model: DiffusionModel, prompt: str, predictor: LayoutPredictor,
                 grid: int = CANONICAL_RES) -> PromptMasks:
    """Per-noun-group masks for a prompt from the layout predictor.

    Each group is represented by its first noun token (the pseudo-token in
    "S* superclass"). A single group is predicted against itself and only its
    own box is used; the partner slot is treated as the full frame.
    """
    enc = model.encoder
    ids = enc.tokenize(prompt)
    groups = noun_groups(enc, ids)
    if not groups:
        raise ContractError(f"prompt {prompt!r} has no noun tokens")
    if len(groups) > 2:
        raise ContractError("at most two constrained nouns per prompt")
    table = enc.table.detach()
    noun_table = table[enc.vocab.noun_ids(KIND_PRETRAINED)]
    reps = [table[ids[g[0]]] for g in groups]
    if len(groups) == 2:
        boxes = list(predict_layout(reps[0], reps[1], predictor, noun_table))
    else:
        boxes = [predict_layout(reps[0], reps[0], predictor, noun_table)[0]]
    masks = torch.stack([bbox_to_mask(b, grid) for b in boxes])
    return PromptMasks(groups, masks, boxes)


def make_guidance_hook(model: DiffusionModel, prompt: str, predictor: LayoutPredictor, step_size: float = 50.0,
                       inner_steps: int = 3, active_steps: int = HOOK_STEPS, masks: PromptMasks | None = None):
    """Hook that nudges x_t down the location-loss gradient during early reverse steps."""
    if inner_steps < 1:
        raise ConfigError("inner_steps must be >= 1")
    pm = masks or prompt_masks(model, prompt, predictor)
    enc = model.encoder
    ids = torch.tensor(enc.tokenize(prompt))
    dtype = next(model.denoiser.parameters()).dtype

    def hook(index: int, t: int, x: torch.Tensor, record=None) -> torch.Tensor:
        if index >= active_steps or step_size == 0.0:
            return x
        with torch.no_grad():
            ctx = enc.refine(ids[None].repeat(x.shape[0], 1)).to(dtype)
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        x = x.detach()
        for _ in range(inner_steps):
            x = x.requires_grad_(True)
            rec = AttentionRecorder(keep_graph=True)
            model.denoiser(x, tt, ctx, rec)
            loss = location_loss(pm.masks, group_maps(rec.canonical(), pm.groups), reduction="sum")
            (grad,) = torch.autograd.grad(loss, x)
            if not torch.isfinite(grad).all():
                raise NumericError(f"non-finite location-loss gradient at reverse step {index}")
            x = (x - step_size * grad).detach()
        return x

    hook.masks = pm
    return hook


def in_mask_fraction(record_maps: torch.Tensor, pm: PromptMasks) -> torch.Tensor:
    """Per-sample mean over nouns of sum(M * A) / sum(A) for canonical maps (B, L, g, g)."""
    gm = group_maps(record_maps, pm.groups)
    frac = (pm.masks.to(gm.dtype)[None] * gm).sum((-1, -2)) / gm.sum((-1, -2))
    return frac.mean(-1)
