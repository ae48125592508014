import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformfusion.geometry import CameraIntrinsics, DepthScan, rotation_matrix
from deformfusion.posefeed import (
    FeatureCorrespondence,
    FrameEnvelope,
    LatestFeed,
    OrderingError,
    PosePrior,
    apply_prior,
)
from deformfusion.warpfield import build_node_graph

INTR = CameraIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)


def env(i: int) -> FrameEnvelope:
    return FrameEnvelope(DepthScan(np.full((8, 8), 50.0), INTR, frame_index=i))


def test_latest_wins_three():
    feed = LatestFeed()
    for i in (1, 2, 3):
        feed.submit(env(i))
    assert feed.take_latest().frame_index == 3
    assert feed.dropped == 2 and feed.dropped_frames == [1, 2]
    assert feed.take_latest() is None


def test_single_submit_delivered():
    feed = LatestFeed()
    ack = feed.submit(env(7))
    assert ack.superseded is None
    assert feed.take_latest().frame_index == 7


def test_out_of_order_rejected():
    feed = LatestFeed()
    feed.submit(env(5))
    with pytest.raises(OrderingError):
        feed.submit(env(4))
    with pytest.raises(OrderingError):
        feed.submit(env(5))
    assert feed.submitted == 1


def test_empty_feed():
    assert LatestFeed().take_latest() is None


def test_stalled_consumer_ten_submissions():
    feed = LatestFeed()
    for i in range(1, 11):
        feed.submit(env(i))
    assert feed.take_latest().frame_index == 10
    assert feed.dropped == 9


def test_alternating_has_no_drops():
    feed = LatestFeed()
    for i in range(20):
        feed.submit(env(i))
        assert feed.take_latest().frame_index == i
    assert feed.dropped == 0 and feed.delivered == 20


@settings(max_examples=300, deadline=None)
@given(st.lists(st.booleans(), max_size=60))
def test_random_schedule_invariants(ops):
    feed = LatestFeed()
    nxt, last = 0, -1
    for submit in ops:
        if submit:
            feed.submit(env(nxt))
            nxt += 1
        else:
            got = feed.take_latest()
            if got is not None:
                assert got.frame_index > last
                assert got.frame_index == nxt - 1  # never a superseded envelope
                last = got.frame_index
        assert feed.dropped + feed.delivered + feed.pending == feed.submitted
    feed.take_latest()
    assert feed.dropped + feed.delivered == feed.submitted


def test_concurrent_producer_consumer():
    feed = LatestFeed()
    n = 2000
    delivered = []
    done = threading.Event()

    def produce():
        for i in range(n):
            feed.submit(env(i))
        done.set()

    t = threading.Thread(target=produce)
    t.start()
    while not (done.is_set() and feed.pending == 0):
        e = feed.take_latest()
        if e is not None:
            delivered.append(e.frame_index)
    t.join()
    assert all(b > a for a, b in zip(delivered, delivered[1:]))
    assert delivered[-1] == n - 1
    assert feed.dropped + len(delivered) == n


def test_apply_prior_identity_and_translation():
    field = build_node_graph(np.random.default_rng(0).uniform(0, 20, (100, 3)), 5.0)
    field.t += 0.3
    out, ok = apply_prior(field, PosePrior.identity(3), 3)
    assert ok and np.array_equal(out.R, np.eye(3)) and np.array_equal(out.T, np.zeros(3))
    out, ok = apply_prior(field, PosePrior(np.eye(3), [5.0, 0, 0], 3), 3)
    assert ok and np.array_equal(out.T, [5.0, 0, 0])
    assert np.array_equal(out.A, field.A) and np.array_equal(out.t, field.t) and np.array_equal(out.g, field.g)


def test_apply_prior_missing_or_mismatched():
    field = build_node_graph(np.zeros((1, 3)), 5.0)
    field.T = np.array([1.0, 2, 3])
    out, ok = apply_prior(field, None, 1)
    assert not ok and out is field
    out, ok = apply_prior(field, PosePrior(np.eye(3), [9, 9, 9], 2), 1)
    assert not ok and np.array_equal(out.T, [1, 2, 3])


def test_prior_validation():
    PosePrior(rotation_matrix([1, 0, 0], 0.3), [0, 0, 0])
    with pytest.raises(ValueError):
        PosePrior(np.diag([1.0, 1.0, -1.0]), [0, 0, 0])
    with pytest.raises(ValueError):
        PosePrior(2 * np.eye(3), [0, 0, 0])


def test_correspondence_validation():
    c = FeatureCorrespondence([1, 2, 3], [4, 5, 6], 9)
    e = FrameEnvelope(env(0).scan, None, [c])
    prev, cur = e.correspondence_arrays()
    assert prev.tolist() == [[1, 2, 3]] and cur.tolist() == [[4, 5, 6]]
    with pytest.raises(ValueError):
        FeatureCorrespondence([np.nan, 0, 0], [0, 0, 0])
