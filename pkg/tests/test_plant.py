import io

import numpy as np
import pytest

from snapfit.numerics import RngStream
from snapfit.plant import (
    DatasetConfig,
    LabeledTrace,
    PlantState,
    SnapForceProfile,
    TransientTemplate,
    contact_force,
    default_presets,
    joint_signature,
    make_dataset,
    plan_corpus,
    plant_step,
    read_manifest,
    read_trace_csv,
    slice_windows,
    synth_trace,
    window_label,
    write_manifest,
    write_trace_csv,
)

PRESETS = default_presets()
LENS = PRESETS["lens_frame"]


def test_presets_cover_the_six_parts():
    assert list(PRESETS) == ["marker_cap", "highlighter_cap", "bottle_lid", "type_c", "lens_frame", "e_stop"]
    for sc in PRESETS.values():
        assert sc.n_joints == 7
        g = np.abs(np.array(sc.signature_gain)) ** 2
        assert np.sort(g)[-2:].sum() / g.sum() >= 0.8


def test_type_c_has_the_weakest_transient():
    amp = {n: s.transient_amplitude() for n, s in PRESETS.items()}
    assert min(amp, key=amp.get) == "type_c"


def test_profile_invariants():
    with pytest.raises(ValueError):
        SnapForceProfile(1000.0, 1e-3, 1.2, 1000.0, 2e-3)
    with pytest.raises(ValueError):
        SnapForceProfile(1000.0, 1e-3, 0.3, 1000.0, 0.5e-3)
    with pytest.raises(ValueError):
        SnapForceProfile(1000.0, 1e-3, 0.3, 1000.0, 2e-3, True, 1.5e-3)
    with pytest.raises(ValueError):
        TransientTemplate(duration_s=0.1)
    with pytest.raises(ValueError):
        TransientTemplate(freq_hz=50.0)


def test_contact_force_stages():
    p = LENS.profile
    assert contact_force(0.0, False, p) == 0.0
    eps = 1e-9
    assert contact_force(p.d_crit - eps, False, p) == pytest.approx(-p.k_engage * p.d_crit, rel=1e-5)
    assert contact_force(p.d_detent, True, p) == 0.0
    # right after the snap the force magnitude drops to rho * k_engage * d_crit
    assert abs(contact_force(p.d_crit, True, p)) == pytest.approx(p.drop_ratio * p.k_engage * p.d_crit)
    with pytest.raises(ValueError):
        contact_force(-1e-6, False, p)


def test_barrier_adds_stiff_unilateral_spring():
    p = PRESETS["marker_cap"].profile
    d = p.d_barrier + 1e-4
    expected = -p.k_lock * (d - p.d_detent) - 100.0 * p.k_engage * 1e-4
    assert contact_force(d, True, p) == pytest.approx(expected)
    assert contact_force(d, True, p.without_barrier()) == pytest.approx(-p.k_lock * (d - p.d_detent))


def test_plant_rest_is_unchanged():
    s = plant_step(PlantState(), 0.0, LENS.profile)
    assert (s.d, s.v, s.engaged) == (0.0, 0.0, False)


def _time_to_engage(F, profile, t_max=1.0):
    s = PlantState()
    while s.t < t_max:
        s = plant_step(s, F, profile)
        if s.engaged:
            return s.t_engage
    return None


def test_engagement_time_decreases_with_force():
    p = LENS.profile
    forces = p.critical_load * np.array([1.1, 1.5, 2.0, 4.0, 8.0])
    times = [_time_to_engage(F, p) for F in forces]
    assert all(t is not None for t in times)
    assert all(a > b for a, b in zip(times, times[1:]))
    # a critically damped sub-threshold push settles short of the snap
    s = PlantState()
    c = 2.0 * np.sqrt(p.k_engage * s.m_eff)
    for _ in range(3000):
        s = plant_step(s, 0.9 * p.critical_load - c * s.v, p)
    assert not s.engaged


@pytest.mark.parametrize("name", [n for n, s in PRESETS.items() if s.profile.barrier])
def test_barrier_limits_steady_state_penetration(name):
    p = PRESETS[name].profile
    for F in (10.0, 30.0, 50.0):
        s = PlantState()
        for _ in range(6000):
            # bounded push plus viscous damping so the mass comes to rest
            s = plant_step(s, F - 40.0 * s.v, p)
        assert s.d <= p.d_barrier + 1e-4


def _snap_through(profile, F):
    """Push until engagement, then release; return (peak post-snap KE, stored + work, overshoot)."""
    s, work, peak_ke, max_d = PlantState(), 0.0, 0.0, 0.0
    for _ in range(3000):
        f = 0.0 if s.engaged else F
        nxt = plant_step(s, f, profile)
        work += f * (nxt.d - s.d)
        s = nxt
        if s.engaged:
            peak_ke = max(peak_ke, 0.5 * s.m_eff * s.v ** 2)
            max_d = max(max_d, s.d)
    return peak_ke, 0.5 * profile.k_engage * profile.d_crit ** 2 + work, max_d - profile.d_detent


def test_snap_through_creates_no_energy():
    for sc in PRESETS.values():
        p = sc.profile.without_barrier()
        ke, budget, _ = _snap_through(p, 1.2 * p.critical_load)
        assert 0.0 < ke <= budget * (1 + 1e-3)


def test_barrier_reduces_overshoot():
    for sc in PRESETS.values():
        if not sc.profile.barrier:
            continue
        F = 1.2 * sc.profile.critical_load
        _, _, with_barrier = _snap_through(sc.profile, F)
        _, _, without = _snap_through(sc.profile.without_barrier(), F)
        assert without > with_barrier


def test_joint_signature_zero_and_linear():
    sc = LENS.__class__(**{**LENS.__dict__, "noise_std": 0.0})
    assert np.all(joint_signature(0.0, sc, RngStream(0)) == 0.0)
    a = joint_signature(0.03, sc, RngStream(0))
    b = joint_signature(0.06, sc, RngStream(0))
    assert np.allclose(b, 2 * a, rtol=0, atol=1e-15)


def test_lens_frame_transient_exceeds_noise():
    sc = LENS.__class__(**{**LENS.__dict__, "noise_std": 0.0})
    t = np.arange(0.0, 0.08, 1e-3)
    peak = max(np.max(np.abs(joint_signature(0.0, sc, None, float(ts)))) for ts in t)
    assert peak > 5 * LENS.noise_std


def test_transient_is_confined_to_its_window():
    sc = LENS.__class__(**{**LENS.__dict__, "noise_std": 0.0})
    assert np.all(joint_signature(0.0, sc, None, LENS.transient.duration_s) == 0.0)
    assert np.all(joint_signature(0.0, sc, None, -0.01) == 0.0)


def test_synth_trace_labels_and_determinism():
    a = synth_trace(LENS, 2.0, 0.05, 11, "snap")
    b = synth_trace(LENS, 2.0, 0.05, 11, "snap")
    assert np.array_equal(a.velocities, b.velocities) and a.snap_intervals == b.snap_intervals
    assert a.velocities.shape == (200, 7)
    assert len(a.snap_intervals) == 1
    start, end = a.snap_intervals[0]
    assert end - start == 8


def test_unreachable_depth_gives_negative_trace():
    tr = synth_trace(LENS, 2.0, 0.05, 3, "snap", depth=0.5 * LENS.profile.d_crit)
    assert tr.snap_intervals == []
    for kind in ("no_snap", "distractor"):
        assert synth_trace(LENS, 2.0, 0.05, 4, kind).snap_intervals == []


def test_synth_trace_rejects_out_of_range_speed():
    with pytest.raises(ValueError):
        synth_trace(LENS, 2.0, 0.2, 0)


def test_labeled_trace_interval_invariants():
    v = np.zeros((10, 7))
    with pytest.raises(ValueError):
        LabeledTrace(v, [(5, 12)], "x", 0)
    with pytest.raises(ValueError):
        LabeledTrace(v, [(5, 7), (2, 4)], "x", 0)


def test_trace_csv_round_trip():
    tr = synth_trace(PRESETS["type_c"], 1.0, 0.08, 5, "snap")
    buf = io.StringIO()
    write_trace_csv(buf, tr)
    text = buf.getvalue()
    lines = text.splitlines()
    assert lines[0].startswith("# format_version=1")
    assert lines[1] == "time_s," + ",".join(f"v_joint_{j}" for j in range(1, 8)) + ",label"
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.csv")
        write_trace_csv(path, tr)
        back = read_trace_csv(path)
        with open(path) as fh:
            assert fh.read() == text
    assert np.array_equal(back.velocities, tr.velocities)
    assert back.snap_intervals == tr.snap_intervals and back.seed == tr.seed


def test_window_labels():
    assert window_label(10, 50, [(20, 28)], 0.4) == 1          # fully inside
    assert window_label(100, 50, [(20, 28)], 0.4) == 0         # no overlap
    assert window_label(0, 50, [(47, 55)], 0.4) == 0           # 3 of 8 samples
    assert window_label(0, 50, [(46, 54)], 0.4) == 1           # 4 of 8 samples


def test_plan_corpus_split_counts():
    specs = plan_corpus(DatasetConfig(n_traces=500), RngStream(0))
    counts = {s: sum(1 for x in specs if x.split == s) for s in ("train", "val", "test")}
    assert counts == {"train": 400, "val": 50, "test": 50}
    with pytest.raises(ValueError):
        plan_corpus(DatasetConfig(n_traces=0), RngStream(0))


@pytest.fixture(scope="module")
def small_dataset():
    cfg = DatasetConfig(n_traces=40)
    specs = plan_corpus(cfg, RngStream(1))
    from snapfit.plant import generate_traces
    traces = generate_traces(specs, cfg)
    return cfg, specs, traces, make_dataset(cfg, RngStream(1), traces, specs)


def test_label_consistency_exhaustive(small_dataset):
    cfg, specs, traces, _ = small_dataset
    for tr in traces:
        X, y, starts = slice_windows(tr, cfg.window, cfg.stride, cfg.min_overlap)
        lab = tr.labels
        for s, yy in zip(starts, y):
            inside = int(lab[s : s + cfg.window].sum())
            total = sum(b - a for a, b in tr.snap_intervals)
            assert yy == int(total > 0 and inside > 0 and inside >= cfg.min_overlap * total)


def test_dataset_normalized_with_train_statistics(small_dataset):
    cfg, specs, traces, ds = small_dataset
    train = np.concatenate([t.velocities for t, s in zip(traces, specs) if s.split == "train"])
    assert np.allclose(ds.mean, train.mean(0)) and np.allclose(ds.std, train.std(0))
    assert abs(ds.X["train"].mean()) < 0.2
    with pytest.raises(ValueError):
        make_dataset(cfg, RngStream(0), [], [])


def test_manifest_round_trip(tmp_path, small_dataset):
    cfg, specs, _, _ = small_dataset
    path = tmp_path / "manifest.txt"
    write_manifest(path, specs, cfg, 1)
    meta, back = read_manifest(path)
    assert meta["seed"] == "1" and meta["format_version"] == "1"
    assert [(s.scenario, s.kind, s.speed, s.seed, s.split) for s in back] == \
           [(s.scenario, s.kind, s.speed, s.seed, s.split) for s in specs]


def test_default_corpus_positive_fraction():
    ds = make_dataset(DatasetConfig(), RngStream(0))
    assert 0.05 <= ds.positive_fraction() <= 0.20
