import numpy as np
import pytest

from incseg import autodiff as ad
from incseg.alignment import (LossWeights, dapd_loss, prototype_distance,
                              unbiased_merge)
from incseg.prototypes import LocalPrototypes, local_prototypes


def _locals(entries, counts=None, source="student"):
    counts = counts or {c: 1 for c in entries}
    return LocalPrototypes({c: np.asarray(v, dtype=float) for c, v in entries.items()},
                           counts, source)


def _vec(x):
    return x.data if hasattr(x, "data") else np.asarray(x)


def test_merge_sum_example():
    locs = _locals({0: [1.0, 0.0], 9: [0.0, 1.0]})
    merged = unbiased_merge(locs, (9,), mode="sum")
    np.testing.assert_array_equal(_vec(merged.vectors[0]), [1.0, 1.0])


def test_merge_no_current_classes():
    locs = _locals({0: [2.0, 3.0]})
    merged = unbiased_merge(locs, ())
    np.testing.assert_array_equal(_vec(merged.vectors[0]), [2.0, 3.0])


def test_merge_old_class_passthrough_bitwise():
    vec = np.array([3.0, 4.0])
    locs = LocalPrototypes({0: np.zeros(2), 1: vec, 5: np.ones(2)},
                           {0: 4, 1: 2, 5: 3}, "student")
    merged = unbiased_merge(locs, (5,))
    assert merged.vectors[1] is vec


def test_merge_count_mean_mode():
    locs = _locals({0: [0.0, 0.0], 7: [1.0, 1.0]}, counts={0: 3, 7: 1})
    merged = unbiased_merge(locs, (7,), mode="count_mean")
    np.testing.assert_allclose(_vec(merged.vectors[0]), [0.25, 0.25])


def test_merge_missing_background_rejected():
    with pytest.raises(ValueError):
        unbiased_merge(_locals({1: [1.0]}), (1,))


def test_merge_skips_absent_new_classes():
    locs = _locals({0: [1.0, 0.0]})
    merged = unbiased_merge(locs, (8, 9))
    np.testing.assert_array_equal(_vec(merged.vectors[0]), [1.0, 0.0])


def test_distance_identity_zero():
    locs = _locals({0: [1.0, 2.0], 1: [3.0, 4.0]})
    merged = unbiased_merge(locs, ())
    targets = {0: np.array([1.0, 2.0]), 1: np.array([3.0, 4.0])}
    assert prototype_distance(merged, targets).item() == 0.0


def test_distance_example():
    # diffs: bg [1,1] -> 2, class 1 [0,0] -> 0; mean over 2 classes = 1
    locs = _locals({0: [1.0, 1.0], 1: [3.0, 4.0]})
    merged = unbiased_merge(locs, ())
    targets = {0: np.zeros(2), 1: np.array([3.0, 4.0])}
    assert prototype_distance(merged, targets).item() == pytest.approx(1.0)


def test_distance_quadratic_scaling():
    locs = _locals({0: [2.0, 2.0]})
    merged = unbiased_merge(locs, ())
    d1 = prototype_distance(merged, {0: np.array([1.0, 1.0])}).item()
    locs2 = _locals({0: [3.0, 3.0]})  # doubled difference vector
    d2 = prototype_distance(unbiased_merge(locs2, ()), {0: np.array([1.0, 1.0])}).item()
    assert d2 == pytest.approx(4.0 * d1)


def test_distance_skips_missing_classes():
    locs = _locals({0: [1.0], 1: [5.0]})
    merged = unbiased_merge(locs, ())
    # class 1 has no target: denominator shrinks to the single shared class
    assert prototype_distance(merged, {0: np.array([0.0])}).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        prototype_distance(merged, {9: np.array([0.0])})


def test_dapd_example_weighted_combination():
    # distances engineered to 1.0 and 2.0; defaults 0.5/0.1 give 0.7
    student = _locals({0: [1.0, 0.0]})
    teacher = _locals({0: [0.0, 0.0]}, source="teacher")            # d_ll = 1
    globals_ = {0: np.array([1.0 - np.sqrt(2.0), 0.0])}             # d_lg = 2
    out = dapd_loss(student, teacher, globals_, (), LossWeights())
    assert out.item() == pytest.approx(0.7, abs=1e-12)


def test_dapd_zero_cases():
    student = _locals({0: [1.0, 2.0]})
    teacher = _locals({0: [1.0, 2.0]}, source="teacher")
    globals_ = {0: np.array([1.0, 2.0])}
    assert dapd_loss(student, teacher, globals_, (), LossWeights()).item() == 0.0
    off = LossWeights(ll=0.0, lg=0.0)
    teacher2 = _locals({0: [9.0, 9.0]}, source="teacher")
    assert dapd_loss(student, teacher2, globals_, (), off).item() == 0.0


def test_dapd_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(25):
        student = _locals({0: rng.normal(size=3), 1: rng.normal(size=3)})
        teacher = _locals({0: rng.normal(size=3), 1: rng.normal(size=3)},
                          source="teacher")
        globals_ = {0: rng.normal(size=3), 1: rng.normal(size=3)}
        assert dapd_loss(student, teacher, globals_, (), LossWeights()).item() >= 0.0


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(ll=-0.1)


def test_dapd_gradient_via_student_features():
    rng = np.random.default_rng(1)
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 2])
    teacher_feats = rng.normal(size=(8, 3))
    teacher = local_prototypes(teacher_feats, labels, (0, 1), source="teacher")
    globals_ = {0: rng.normal(size=3), 1: rng.normal(size=3)}

    def f(feats):
        student = local_prototypes(feats, labels, (0, 1, 2))
        return dapd_loss(student, teacher, globals_, (2,), LossWeights())

    x = ad.Array(rng.normal(size=(8, 3)))
    assert ad.finite_diff_check(f, x, eps=1e-6) < 1e-5


def test_dapd_gradient_count_mean_mode():
    rng = np.random.default_rng(2)
    labels = np.array([0, 0, 2, 2, 1, 0])
    teacher = local_prototypes(rng.normal(size=(6, 2)), labels, (0, 1), source="teacher")
    globals_ = {0: rng.normal(size=2), 1: rng.normal(size=2)}

    def f(feats):
        student = local_prototypes(feats, labels, (0, 1, 2))
        return dapd_loss(student, teacher, globals_, (2,), LossWeights(),
                         merge_mode="count_mean")

    x = ad.Array(rng.normal(size=(6, 2)))
    assert ad.finite_diff_check(f, x, eps=1e-6) < 1e-5
