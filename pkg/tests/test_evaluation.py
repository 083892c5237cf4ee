import math

import numpy as np
import pytest
import torch

from compinv import checkpoint
from compinv.boxes import BBox
from compinv.errors import DataError
from compinv.evaluation import (
    SUBSTITUTIONS, MetricReport, TaskRow, attention_similarity_series, bootstrap_ci, bootstrap_diff_ci,
    coi_likelihood, compositionality_matrix, cosine, image_alignment, matrix_csv, text_alignment_proxy,
)
from compinv.scene_corpus import SceneObject, SceneSpec, concept, render


def _scene(*items, bg=1):
    return render(SceneSpec([SceneObject(concept(n), BBox(*b)) for n, b in items], bg))


RED = ("redcircle", (0.1, 0.1, 0.45, 0.45))
BLUE = ("bluesquare", (0.55, 0.5, 0.9, 0.85))


def test_coi_likelihood_counts_hits():
    imgs = [_scene(RED, BLUE), _scene(BLUE), _scene(RED)]
    assert coi_likelihood(imgs, "redcircle") == pytest.approx(2 / 3)
    assert coi_likelihood(imgs, "bluesquare") == pytest.approx(2 / 3)
    assert coi_likelihood([_scene(BLUE)], "zebraball") == 0.0


def test_text_alignment_proxy_range():
    both = text_alignment_proxy([_scene(RED, BLUE)], ["redcircle", "bluesquare"])
    half = text_alignment_proxy([_scene(RED)], ["redcircle", "bluesquare"])
    assert 0.9 <= both <= 1.0
    assert 0.4 < half < 0.55
    with pytest.raises(ValueError):
        text_alignment_proxy([_scene(RED)], [])


def test_image_alignment_identity_and_miss():
    img = _scene(RED)
    box = BBox(*RED[1])
    assert image_alignment([img], [img], [box], "redcircle") == pytest.approx(1.0, abs=0.02)
    assert image_alignment([_scene(BLUE)], [img], [box], "redcircle") == 0.0
    with pytest.raises(ValueError):
        image_alignment([img], [img], [None], "redcircle")


def test_image_alignment_prefers_matching_texture():
    zebra = _scene(("zebraball", (0.2, 0.2, 0.7, 0.7)))
    plain = _scene(("redcircle", (0.2, 0.2, 0.7, 0.7)))
    box = BBox(0.2, 0.2, 0.7, 0.7)
    same = image_alignment([zebra], [zebra], [box], "zebraball")
    other = image_alignment([plain], [zebra], [box], "zebraball")
    assert same > other


def test_cosine_zero_vector():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_attention_similarity_series_oracle():
    maps = torch.zeros(1, 8, 4, 4)
    maps[0, 1] = 0.75
    maps[0, 4] = 0.25
    series, gap = attention_similarity_series([maps, maps], [[1], [4]])
    assert series.shape == (2, 2)
    assert series[0] == pytest.approx([1.5, 0.5])
    assert gap == pytest.approx(1.0)
    _, even = attention_similarity_series([torch.ones(1, 8, 4, 4)], [[1], [4]])
    assert even == 0.0


def test_bootstrap_interval_orders_and_contains_mean():
    rng = np.random.default_rng(0)
    m, lo, hi = bootstrap_ci(rng.random(40), rng)
    assert lo <= m <= hi
    m, lo, hi = bootstrap_diff_ci(np.ones(10), np.zeros(10), rng)
    assert (m, lo, hi) == (1.0, 1.0, 1.0)
    assert all(math.isnan(v) for v in bootstrap_ci([], rng))


def test_metric_report_labels_and_bounds():
    rep = MetricReport([TaskRow("ti", "cat*", "bluesquare", 0.5, 0.2, 0.9, 0.7),
                        TaskRow("ti", "cat*", "greencircle", 0.7, 0.4, 0.8, 0.6)], "abc", [0, 1])
    csv_text = rep.to_csv()
    first = csv_text.splitlines()[0]
    assert first.startswith("# ") and "SUBSTITUTED" in first
    assert csv_text.splitlines()[1].startswith("method,concept_a")
    agg = rep.aggregates()["ti"]["text_align_proxy"]
    assert agg["mean"] == pytest.approx(0.6) and agg["ci95"][0] <= 0.6 <= agg["ci95"][1]
    assert '"metric_definitions"' in rep.to_json()
    assert set(SUBSTITUTIONS) == {"text_align_proxy", "coi_likelihood", "image_align"}


def test_compositionality_matrix_symmetric():
    names = ["zebraball*", "bluesquare", "greencircle"]
    calls = []

    def images_for_pair(a, b):
        calls.append((a, b))
        objs = []
        for n, box in zip((a.rstrip("*"), b), ((0.05, 0.1, 0.45, 0.5), (0.55, 0.5, 0.95, 0.9))):
            objs.append((n, box))
        return [_scene(*objs)]

    M, means = compositionality_matrix(names, images_for_pair)
    assert len(calls) == 3
    assert np.all(np.isnan(np.diag(M)))
    assert np.allclose(M, M.T, equal_nan=True)
    assert np.all(means > 0.8)
    assert matrix_csv(names, M, means).splitlines()[1].split(",")[0] == "concept"


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"w": torch.randn(3, 4), "d": torch.randn(2, dtype=torch.float64), "i": torch.arange(5)}
    checkpoint.save(tmp_path / "m.ckpt", tensors, {"hash": "x", "n": 3})
    back, meta = checkpoint.load(tmp_path / "m.ckpt")
    assert meta == {"hash": "x", "n": 3}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        checkpoint.load(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(DataError, match="magic"):
        checkpoint.load(tmp_path / "bad.ckpt")
    checkpoint.save(tmp_path / "t.ckpt", {"w": torch.randn(100)})
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="truncated"):
        checkpoint.load(tmp_path / "t.ckpt")
    with pytest.raises(DataError):
        checkpoint.save(tmp_path / "h.ckpt", {"w": torch.zeros(2, dtype=torch.float16)})
