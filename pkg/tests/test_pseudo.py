import numpy as np
import pytest

from incseg.pseudo import PseudoLabelMap, entropy_map, pseudo_labels, region_masks

# frozen closed-form entropies, natural log
ENTROPY_TENT = 0.639031859650177    # [0.1, 0.8, 0.1]
ENTROPY_FLAT3 = 1.0986122886681098  # uniform over 3
ENTROPY_WIDE = 1.0888999753452238   # [0.4, 0.3, 0.3]


def test_entropy_one_hot_near_zero():
    u = entropy_map(np.array([[1.0, 0.0, 0.0]]))
    assert 0.0 <= u[0] < 1e-5


def test_entropy_uniform():
    u = entropy_map(np.array([[1 / 3, 1 / 3, 1 / 3]]))
    assert u[0] == pytest.approx(ENTROPY_FLAT3, abs=1e-9)


def test_entropy_value():
    u = entropy_map(np.array([[0.1, 0.8, 0.1]]))
    assert u[0] == pytest.approx(ENTROPY_TENT, abs=1e-9)


def test_entropy_rejects_unnormalized():
    with pytest.raises(ValueError):
        entropy_map(np.array([[0.5, 0.2, 0.1]]))


def test_gt_foreground_kept_verbatim():
    gt = np.array([3, 3])
    teacher = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = pseudo_labels(gt, teacher, old_class_ids=(1,), tau=0.7)
    np.testing.assert_array_equal(out.labels, [3, 3])


def test_confident_old_prediction_accepted():
    # entropy 0.6390 < 0.7 and argmax is old class 1
    gt = np.array([0])
    teacher = np.array([[0.1, 0.8, 0.1]])
    out = pseudo_labels(gt, teacher, old_class_ids=(1, 2), tau=0.7)
    assert out.labels[0] == 1
    assert out.uncertainty[0] == pytest.approx(ENTROPY_TENT, abs=1e-9)


def test_uncertain_prediction_rejected():
    # entropy 1.0889 >= 0.7
    gt = np.array([0])
    teacher = np.array([[0.4, 0.3, 0.3]])
    out = pseudo_labels(gt, teacher, old_class_ids=(1, 2), tau=0.7)
    assert out.labels[0] == 0
    assert out.uncertainty[0] == pytest.approx(ENTROPY_WIDE, abs=1e-9)


def test_background_argmax_never_pseudo_labels():
    gt = np.array([0])
    teacher = np.array([[0.98, 0.01, 0.01]])  # confident background
    out = pseudo_labels(gt, teacher, old_class_ids=(1, 2), tau=10.0)
    assert out.labels[0] == 0


def test_argmax_tie_breaks_low_channel():
    gt = np.array([0])
    teacher = np.array([[0.2, 0.4, 0.4]])
    out = pseudo_labels(gt, teacher, old_class_ids=(5, 6), tau=10.0)
    assert out.labels[0] == 5


def test_tau_monotonicity():
    rng = np.random.default_rng(0)
    v = 500
    gt = np.where(rng.uniform(size=v) < 0.3, 9, 0)
    logits = rng.normal(size=(v, 4)) * 2
    teacher = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    previous = None
    for tau in (0.0, 0.3, 0.7, 1.1, np.inf):
        out = pseudo_labels(gt, teacher, old_class_ids=(1, 2, 3), tau=tau)
        old_voxels = set(np.flatnonzero(np.isin(out.labels, (1, 2, 3))).tolist())
        if tau == 0.0:
            assert old_voxels == set()
        if previous is not None:
            assert previous <= old_voxels
        previous = old_voxels
    # at tau = inf: exactly the background voxels whose argmax is non-background
    expect = set(np.flatnonzero((gt == 0) & (teacher.argmax(axis=1) != 0)).tolist())
    assert previous == expect


def test_region_masks_rules():
    pl = PseudoLabelMap(np.array([2, 0, 4]), np.zeros(3))
    masks = region_masks(pl, old_classes=(1, 2), current_classes=(3, 4))
    np.testing.assert_array_equal(masks.old, [True, False, False])
    np.testing.assert_array_equal(masks.current, [False, True, True])


def test_region_masks_partition():
    rng = np.random.default_rng(1)
    for _ in range(25):
        labels = rng.choice([0, 1, 2, 3], size=64)
        pl = PseudoLabelMap(labels, np.zeros(64))
        masks = region_masks(pl, (1, 2), (3,))
        assert np.all(masks.old ^ masks.current)


def test_region_masks_rejects_stray_label():
    pl = PseudoLabelMap(np.array([7]), np.zeros(1))
    with pytest.raises(ValueError):
        region_masks(pl, (1,), (2,))
