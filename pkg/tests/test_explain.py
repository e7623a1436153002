import numpy as np
import pytest

from sslfgvc import tensor as T
from sslfgvc.dataset import Dataset, Sample, read_graymap, read_pixmap
from sslfgvc.explain import Heatmap, export_heatmap, grad_cam, localization_rate, rate_from_heatmaps


class Readout:
    """Features are the image itself; class c scores the mean of channel c times ``w[c]``."""

    def __init__(self, w=(1.0, 1.0, 1.0)):
        self.w = np.asarray(w, dtype=np.float64)

    def features(self, x):
        return T.Tensor(np.asarray(x, dtype=np.float64))

    def class_scores(self, f):
        pooled = T.global_avg_pool(f)  # 1×3
        return T.mul(pooled, T.Tensor(self.w[None]))


def test_channel_zero_readout():
    img = np.zeros((4, 4, 3))
    img[1, 2, 0] = 2.0
    img[3, 3, 0] = 1.0
    img[0, 0, 1] = 9.0  # other channel must not leak in
    hm = grad_cam(Readout(), img, 0)
    expect = np.zeros((4, 4))
    expect[1, 2], expect[3, 3] = 1.0, 0.5
    assert np.allclose(hm.values, expect, atol=1e-12)


def test_accepts_chw_input():
    img = np.random.default_rng(0).random((4, 4, 3))
    a = grad_cam(Readout(), img, 1).values
    b = grad_cam(Readout(), img.transpose(2, 0, 1), 1).values
    assert np.array_equal(a, b)


def test_negative_weight_is_rectified_to_zero():
    img = np.random.default_rng(0).random((4, 4, 3)) + 0.1
    hm = grad_cam(Readout((-1.0, 1.0, 1.0)), img, 0)
    assert hm.values.min() >= 0 and not hm.values.any()


def test_zero_features_give_zero_map():
    assert not grad_cam(Readout(), np.zeros((4, 4, 3)), 2).values.any()


def test_class_out_of_range():
    with pytest.raises(ValueError):
        grad_cam(Readout(), np.zeros((4, 4, 3)), 3)


def test_export(tmp_path):
    base = np.full((8, 8, 3), 0.4)
    export_heatmap(Heatmap(np.zeros((2, 2)), 0), base, tmp_path / "z.pgm", tmp_path / "z.ppm")
    assert not read_graymap(tmp_path / "z.pgm").any()
    assert np.allclose(read_pixmap(tmp_path / "z.ppm"), 0.2, atol=1 / 510 + 1e-7)
    peak = np.zeros((2, 2))
    peak[0, 0] = 1.0
    export_heatmap(Heatmap(peak, 0), base, tmp_path / "p.pgm", tmp_path / "p.ppm")
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw[-64:][0] == 255 and len(raw[-64:]) == 64


def _box_dataset(n=20, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        r, c = rng.integers(0, size - 4, size=2)
        img = np.zeros((size, size, 3), dtype=np.float32)
        img[r:r + 4, c:c + 4, 0] = 1.0
        out.append(Sample(img, 0, i, (int(r), int(c), int(r) + 4, int(c) + 4)))
    return Dataset(out, 3, "test")


def test_localization_forced_inside():
    assert localization_rate(Readout(), _box_dataset()) == 100.0


def test_localization_invariant_to_weight_scale():
    ds = _box_dataset()
    assert localization_rate(Readout((3.0, 1.0, 1.0)), ds) == localization_rate(Readout((0.01, 1.0, 1.0)), ds)


def test_random_maps_hit_at_area_ratio():
    rng = np.random.default_rng(0)
    n, size = 4000, 32
    maps = [rng.random((size, size)) for _ in range(n)]
    boxes = [(0, 0, 8, 8)] * n
    rate = rate_from_heatmaps(maps, boxes, (size, size))
    assert abs(rate - 100 * 64 / 1024) < 1.5


def test_localization_empty_and_missing_box():
    with pytest.raises(ValueError):
        localization_rate(Readout(), Dataset([], 3, "test"))
    with pytest.raises(ValueError):
        rate_from_heatmaps([np.ones((2, 2))], [None], (4, 4))
