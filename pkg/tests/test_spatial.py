import numpy as np
import pytest
import torch

from compinv.boxes import BBox
from compinv.diffusion import cross_attention, sample
from compinv.errors import ContractError, DataError
from compinv.numerics import RngStream, finite_difference_check
from compinv.spatial import (
    LayoutDataset, LayoutPredictor, LayoutRecord, LayoutTrainConfig, bbox_to_mask, group_maps,
    location_loss, make_guidance_hook, nearest_noun, noun_groups, predict_layout, prompt_masks,
    split_pairs, train_layout_predictor,
)

from conftest import make_tiny_model


def test_full_box_mask():
    assert int(bbox_to_mask(BBox(0, 0, 1, 1)).sum()) == 256


def test_center_box_mask_matches_enumeration():
    box = BBox(0.25, 0.25, 0.75, 0.75)
    m = bbox_to_mask(box)
    expected = np.zeros((16, 16))
    for r in range(16):
        for c in range(16):
            cy, cx = (r + 0.5) / 16, (c + 0.5) / 16
            expected[r, c] = box.x0 <= cx <= box.x1 and box.y0 <= cy <= box.y1
    assert np.array_equal(m.numpy(), expected) and expected.sum() == 64
    assert m[4:12, 4:12].all()


def test_tiny_box_fallback_is_one_cell():
    m = bbox_to_mask(BBox(0.499, 0.499, 0.501, 0.501))
    assert int(m.sum()) == 1 and m[8, 8] == 1


def test_location_loss_extremes():
    masks = torch.zeros(2, 4, 4)
    masks[0, :2] = 1
    masks[1, 2:] = 1
    inside = masks / masks.sum((-1, -2), keepdim=True)
    assert float(location_loss(masks, inside[None])) == 0.0
    assert float(location_loss(masks, inside.flip(0)[None])) == 1.0
    m16 = bbox_to_mask(BBox(0.25, 0.25, 0.75, 0.75))[None]
    uniform = torch.full((1, 1, 16, 16), 1 / 256, dtype=torch.float64)
    assert float(location_loss(m16, uniform)) == pytest.approx(0.75)


def test_location_loss_bounds_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        maps = torch.rand(3, 2, 16, 16, generator=g, dtype=torch.float64)
        masks = (torch.rand(2, 16, 16, generator=g) > 0.5).double()
        v = float(location_loss(masks, maps))
        assert 0.0 <= v <= 1.0


def test_location_loss_errors():
    with pytest.raises(ContractError):
        location_loss(torch.ones(1, 4, 4), torch.ones(1, 1, 8, 8))


def test_location_loss_latent_gradient_small_instance():
    g = torch.Generator().manual_seed(1)
    ctx = torch.randn(1, 2, 5, generator=g, dtype=torch.float64)
    wq = torch.randn(3, 4, generator=g, dtype=torch.float64)
    wk = torch.randn(5, 4, generator=g, dtype=torch.float64)
    wv = torch.randn(5, 4, generator=g, dtype=torch.float64)
    masks = torch.zeros(2, 4, 4, dtype=torch.float64)
    masks[0, :, :2] = 1
    masks[1, 1:3, 1:] = 1

    def loss(L):
        feats = L["x"].reshape(1, 3, 16).transpose(1, 2)
        _, maps = cross_attention(feats, ctx, wq, wk, wv, heads=2)
        return location_loss(masks, maps.reshape(1, 2, 4, 4))

    rep = finite_difference_check(loss, {"x": torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)},
                                  tolerance=1e-4)
    assert rep.passed, rep.per_leaf_max_rel_error


def test_noun_groups_join_adjacent_nouns():
    m = make_tiny_model()
    m.encoder.register_pseudo("cat*", "redcircle")
    ids = m.encoder.tokenize("a cat* redcircle and a bluesquare")
    assert noun_groups(m.encoder, ids) == [[1, 2], [5]]
    maps = torch.rand(2, 8, 4, 4, dtype=torch.float64)
    gm = group_maps(maps, [[1, 2], [5]])
    assert torch.allclose(gm[:, 0], maps[:, 1] + maps[:, 2])


def test_predictor_boxes_always_valid():
    torch.manual_seed(0)
    p = LayoutPredictor(dim=16)
    with torch.no_grad():
        for lin in p.net:
            if isinstance(lin, torch.nn.Linear):
                lin.weight.mul_(5.0)
        boxes = p(torch.randn(10_000, 16) * 3, torch.randn(10_000, 16) * 3)
    assert bool((boxes[..., 0] <= boxes[..., 2]).all() and (boxes[..., 1] <= boxes[..., 3]).all())
    table = torch.randn(5, 16, dtype=torch.float64)
    for k in range(200):
        a, b = predict_layout(torch.randn(16), torch.randn(16), p, table)
        assert a.x0 < a.x1 and a.y0 < a.y1 and b.x0 < b.x1 and b.y0 < b.y1


def test_nearest_noun_identity_and_tie():
    table = torch.tensor([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
    assert nearest_noun(table[2], table) == 2
    assert nearest_noun(torch.tensor([1.0, 0.0]), table) == 0


def _records(nouns, box_i, box_j, per=10):
    return [LayoutRecord(a, b, box_i, box_j, 0.9, 0.9) for a in nouns for b in nouns if a != b for _ in range(per)]


def test_constant_target_training_converges():
    nouns = [f"n{k}" for k in range(12)]
    vecs = {n: torch.randn(8, generator=torch.Generator().manual_seed(k)) for k, n in enumerate(nouns)}
    bi, bj = BBox(0.1, 0.2, 0.45, 0.6), BBox(0.55, 0.3, 0.9, 0.8)
    ds = LayoutDataset(_records(nouns, bi, bj, per=2))
    res = train_layout_predictor(ds, vecs, LayoutTrainConfig(epochs=150, batch_size=32))
    assert res.val_iou >= 0.9
    assert res.train_curve[-1] < res.initial_loss / 5
    train = {tuple(p) for p in res.train_pairs}
    assert not train & {tuple(p) for p in res.val_pairs}


def test_layout_training_needs_records():
    with pytest.raises(DataError):
        train_layout_predictor(LayoutDataset(_records(["a", "b"], BBox(0, 0, 1, 1), BBox(0, 0, 1, 1), 1)),
                               {"a": torch.zeros(4), "b": torch.ones(4)}, LayoutTrainConfig())


def test_split_is_by_unordered_pair():
    recs = _records(["a", "b", "c", "d", "e"], BBox(0, 0, 1, 1), BBox(0, 0, 1, 1), 1)
    train, val = split_pairs(recs, 0.2, RngStream(0, "s"))
    assert len(val) == 2 and len(train) == 8 and not set(train) & set(val)


def test_dataset_csv_roundtrip():
    ds = LayoutDataset(_records(["a", "b"], BBox(0.1, 0.1, 0.3, 0.4), BBox(0.5, 0.5, 0.9, 0.95), 2))
    back = LayoutDataset.from_csv(ds.to_csv())
    assert back.records == ds.records


def _hook(model, step_size, inner_steps=1):
    torch.manual_seed(0)
    pred = LayoutPredictor(dim=model.encoder.dim).double()
    return make_guidance_hook(model, "a redcircle and a bluesquare", pred, step_size=step_size,
                              inner_steps=inner_steps)


def test_zero_step_hook_is_bit_identical(tiny_model):
    a, _ = sample("a redcircle and a bluesquare", tiny_model, steps=12, rng=RngStream(1, "s"))
    b, _ = sample("a redcircle and a bluesquare", tiny_model, steps=12, rng=RngStream(1, "s"),
                  hook=_hook(tiny_model, 0.0))
    assert torch.equal(a, b)


def test_single_inner_step_moves_by_eta_times_gradient(tiny_model):
    hook = _hook(tiny_model, 0.3)
    x = RngStream(0, "x").normal((2, 3, 32, 32), torch.float64)
    new = hook(0, 20, x)
    enc = tiny_model.encoder
    from compinv.diffusion import AttentionRecorder
    ids = torch.tensor(enc.tokenize("a redcircle and a bluesquare"))[None].repeat(2, 1)
    xr = x.clone().requires_grad_(True)
    rec = AttentionRecorder(keep_graph=True)
    tiny_model.denoiser(xr, torch.full((2,), 20), enc.refine(ids), rec)
    loss = location_loss(hook.masks.masks, group_maps(rec.canonical(), hook.masks.groups), reduction="sum")
    (g,) = torch.autograd.grad(loss, xr)
    assert float((new - x).norm()) == pytest.approx(0.3 * float(g.norm()), rel=1e-10)
    assert hook(10, 20, x) is x


def test_hook_locality_by_state_injection(tiny_model):
    states = {}
    hook = _hook(tiny_model, 5.0, inner_steps=2)
    with_hook, _ = sample("a redcircle and a bluesquare", tiny_model, steps=15, rng=RngStream(2, "s"), hook=hook,
                          trace=lambda i, x: states.setdefault(i, x))
    resumed, _ = sample("a redcircle and a bluesquare", tiny_model, steps=15, rng=RngStream(2, "s"),
                        x_init=states[10], start_index=10)
    plain, _ = sample("a redcircle and a bluesquare", tiny_model, steps=15, rng=RngStream(2, "s"))
    assert torch.equal(with_hook, resumed)
    assert not torch.equal(with_hook, plain)


def test_single_noun_prompt_masks(tiny_model):
    torch.manual_seed(0)
    pm = prompt_masks(tiny_model, "a photo of a redcircle", LayoutPredictor(dim=8).double())
    assert pm.groups == [[4]] and pm.masks.shape == (1, 16, 16) and pm.masks.sum() >= 1
    with pytest.raises(ContractError):
        prompt_masks(tiny_model, "a photo of", LayoutPredictor(dim=8))
