"""Average precision against hand examples and a brute-force sweep oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlab.errors import MetricUndefined
from patchlab.metrics import average_precision


def ap_oracle(scores, labels):
    """Independent brute force: evaluate precision at every distinct
    threshold (all tied items included) and integrate stepwise."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = (labels == 1).sum()
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        taken = scores >= thr
        tp = int(((labels == 1) & taken).sum())
        precision = tp / int(taken.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_perfect_separation():
    assert average_precision([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == pytest.approx(1.0)


def test_fake_real_fake_hand_sweep():
    # descending-score label order [fake, real, fake]:
    # 0.5*1 + 0.5*(2/3) = 5/6
    ap = average_precision([0.9, 0.5, 0.1], [1, 0, 1])
    assert ap == pytest.approx(5 / 6)


def test_all_scores_equal_gives_prevalence():
    ap = average_precision([0.3] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    assert ap == pytest.approx(0.3)


def test_single_class_undefined():
    with pytest.raises(MetricUndefined):
        average_precision([0.5, 0.2], [1, 1])
    with pytest.raises(MetricUndefined):
        average_precision([0.5, 0.2], [0, 0])


def test_tie_group_across_classes():
    # one threshold catches a tied fake/real pair
    ap = average_precision([0.7, 0.7, 0.2], [1, 0, 1])
    assert ap == pytest.approx(ap_oracle([0.7, 0.7, 0.2], [1, 0, 1]))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_matches_brute_force_oracle(data):
    n = data.draw(st.integers(min_value=2, max_value=50))
    # coarse score grid makes ties frequent
    scores = data.draw(st.lists(st.sampled_from([i / 8 for i in range(9)]),
                                min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(min_value=0, max_value=1),
                                min_size=n, max_size=n))
    if sum(labels) in (0, n):
        labels[0] = 1 - labels[0]
    got = average_precision(scores, labels)
    want = ap_oracle(scores, labels)
    assert got == pytest.approx(want, abs=1e-12)
