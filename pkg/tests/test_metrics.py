"""Scoring: SSE and Pearson against hand computations, stage-binned error
maps, and agreement with the alignment module's per-subject residuals."""

import numpy as np
import pytest

from trajmoe.alignment import Placement, Subject, align_cohort, subject_sse
from trajmoe.errors import InvalidCohort, ShapeMismatch
from trajmoe.metrics import (
    ErrorMap,
    collect_pairs,
    mean_pearson,
    pearson_summary,
    read_error_map_csv,
    regional_error_map,
    sse,
    write_error_map_csv,
)
from trajmoe.moe import Trajectory, predict_at


def make_traj(t_horizon=8.0, step=0.1, n=3):
    times = np.arange(0.0, t_horizon + step / 2, step)
    states = np.stack(
        [1.0 / (1.0 + np.exp(-(times - 3.0 - j))) for j in range(n)], axis=1)
    return Trajectory(times=times, states=states)


def test_sse_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((7, 4)), rng.random((7, 4))
    want = 0.0
    for i in range(7):
        for j in range(4):
            want += (a[i, j] - b[i, j]) ** 2
    assert sse(a, b) == pytest.approx(want, rel=1e-15)
    assert sse(a, a) == 0.0
    with pytest.raises(ShapeMismatch):
        sse(a, b[:, :3])


def test_pearson_perfect_and_inverted():
    obs = np.array([[0.1, 0.5, 0.9]])
    assert mean_pearson(obs * 2.0 + 1.0, obs) == pytest.approx(1.0)
    assert mean_pearson(-obs, obs) == pytest.approx(-1.0)


def test_pearson_hand_computed_three_regions():
    p = np.array([[1.0, 2.0, 4.0]])
    o = np.array([[1.0, 3.0, 2.0]])
    # population covariance / product of population sds
    pc = p[0] - p[0].mean()
    oc = o[0] - o[0].mean()
    want = float(pc @ oc) / np.sqrt(float(pc @ pc) * float(oc @ oc))
    assert mean_pearson(p, o) == pytest.approx(want, rel=1e-15)


def test_pearson_zero_variance_rows_skipped():
    pred = np.array([[0.5, 0.5, 0.5],
                     [0.1, 0.2, 0.3]])
    obs = np.array([[0.1, 0.4, 0.9],
                    [0.2, 0.4, 0.8]])
    s = pearson_summary(pred, obs)
    assert s.n_used == 1
    assert s.n_skipped == 1
    assert s.mean_r == pytest.approx(mean_pearson(pred[1:], obs[1:]))
    all_flat = pearson_summary(np.full((2, 3), 1.0), obs)
    assert all_flat.n_used == 0
    assert np.isnan(all_flat.mean_r)


def test_pearson_averages_rows():
    rng = np.random.default_rng(1)
    pred, obs = rng.random((5, 6)), rng.random((5, 6))
    per_row = [mean_pearson(pred[i:i + 1], obs[i:i + 1]) for i in range(5)]
    assert mean_pearson(pred, obs) == pytest.approx(np.mean(per_row), rel=1e-12)


def test_collect_pairs_order_and_values():
    traj = make_traj()
    subjects = [
        Subject(id="a", gaps=(0.0, 1.0), obs=np.random.default_rng(2).random((2, 3))),
        Subject(id="b", gaps=(0.0,), obs=np.random.default_rng(3).random((1, 3))),
    ]
    placements = [Placement(subject_id="b", t0=2.0, sse=0.0),
                  Placement(subject_id="a", t0=4.5, sse=0.0)]
    pred, obs, taus = collect_pairs(traj, placements, subjects)
    assert taus.tolist() == [2.0, 4.5, 5.5]   # placement order, then scan order
    assert np.array_equal(obs[0], subjects[1].obs[0])
    assert np.array_equal(pred[1], predict_at(traj, 4.5))
    with pytest.raises(InvalidCohort):
        collect_pairs(traj, [Placement(subject_id="zz", t0=0.0, sse=0.0)], subjects)


def test_sse_consistent_with_alignment_residuals():
    traj = make_traj()
    rng = np.random.default_rng(4)
    subjects = [Subject(id=f"s{i}", gaps=(0.0, 1.0),
                        obs=np.clip(rng.random((2, 3)), 0, 1)) for i in range(6)]
    placements = align_cohort(traj, subjects)
    pred, obs, _ = collect_pairs(traj, placements, subjects)
    total = sse(pred, obs)
    want = sum(subject_sse(traj, s, p.t0) for s, p in zip(subjects, placements))
    assert total == pytest.approx(want, rel=1e-10)


def test_error_map_all_observations_first_bin():
    traj = make_traj()
    subjects = [Subject(id="a", gaps=(0.0,), obs=np.random.default_rng(5).random((1, 3)))]
    placements = [Placement(subject_id="a", t0=0.5, sse=0.0)]
    em = regional_error_map(traj, placements, subjects, bins=4)
    assert em.counts.tolist() == [1, 0, 0, 0]
    assert np.all(np.isnan(em.mse[1:]))
    want = (predict_at(traj, 0.5) - subjects[0].obs[0]) ** 2
    assert np.allclose(em.mse[0], want)


def test_error_map_perfect_fit_zero():
    traj = make_traj()
    subjects = [Subject(id="a", gaps=(0.0, 1.0),
                        obs=np.stack([predict_at(traj, 2.0), predict_at(traj, 3.0)]))]
    placements = [Placement(subject_id="a", t0=2.0, sse=0.0)]
    em = regional_error_map(traj, placements, subjects, bins=2)
    assert np.allclose(em.mse[em.counts > 0], 0.0, atol=1e-30)


def test_error_map_inflated_regions_dominate():
    traj = make_traj(n=6)
    rng = np.random.default_rng(6)
    subjects, placements = [], []
    for i in range(40):
        t0 = float(rng.uniform(0, 7))
        clean = predict_at(traj, t0)
        noise = rng.normal(0, 0.01, 6)
        noise[2] += rng.normal(0, 0.3)
        noise[5] += rng.normal(0, 0.3)
        subjects.append(Subject(id=f"s{i}", gaps=(0.0,), obs=(clean + noise)[None, :]))
        placements.append(Placement(subject_id=f"s{i}", t0=t0, sse=0.0))
    em = regional_error_map(traj, placements, subjects, bins=4)
    total = np.nansum(em.mse * em.counts[:, None], axis=0) / em.counts.sum()
    loud = {2, 5}
    quiet = [total[j] for j in range(6) if j not in loud]
    assert min(total[2], total[5]) > 10 * max(quiet)
    assert em.counts.sum() == 40


def test_error_map_bin_edges_and_last_bin_closed():
    traj = make_traj(t_horizon=8.0)
    subjects = [Subject(id="a", gaps=(0.0,), obs=np.zeros((1, 3)))]
    placements = [Placement(subject_id="a", t0=8.0, sse=0.0)]
    em = regional_error_map(traj, placements, subjects, bins=4)
    assert np.allclose(em.edges, [0.0, 2.0, 4.0, 6.0, 8.0])
    assert em.counts.tolist() == [0, 0, 0, 1]   # t = T lands in the last bin
    with pytest.raises(InvalidCohort):
        regional_error_map(traj, placements, subjects, bins=0)


def test_error_map_csv_round_trip(tmp_path):
    em = ErrorMap(edges=np.array([0.0, 4.0, 8.0]),
                  mse=np.array([[0.1, 0.2], [np.nan, np.nan]]),
                  counts=np.array([3, 0], dtype=np.int64))
    p = tmp_path / "em.csv"
    write_error_map_csv(p, ("a", "b"), em)
    names, back = read_error_map_csv(p)
    assert names == ("a", "b")
    assert np.array_equal(back.edges, em.edges)
    assert back.counts.tolist() == [3, 0]
    assert np.allclose(back.mse[0], em.mse[0])
    assert np.all(np.isnan(back.mse[1]))
    (tmp_path / "bad.csv").write_text("nope\n")
    with pytest.raises(InvalidCohort):
        read_error_map_csv(tmp_path / "bad.csv")
