import math

import numpy as np
import pytest

from snapfit.numerics import RngStream, finite_diff_grad
from snapfit.snapnet import _fallback, kernels
from snapfit.snapnet.io import (
    CheckpointError,
    load_checkpoint,
    read_curves_csv,
    read_eval_csv,
    save_checkpoint,
    write_curves_csv,
    write_eval_csv,
)
from snapfit.snapnet.loss import focal_grad_logit, focal_loss
from snapfit.snapnet.model import (
    VARIANTS,
    ConfigError,
    ModelConfig,
    _forward,
    attention_pool,
    build_variant,
    flatten,
    forward,
    init_params,
    loss_and_grad,
    param_count,
    predict_proba,
    softmax,
    softmax_jacobian,
    unflatten,
)
from snapfit.snapnet.optim import AdamState, adam_step
from snapfit.snapnet.streaming import StreamingDetector, offline_window_scores, streaming_detect
from snapfit.snapnet.training import (
    DetectionMetrics,
    DetectorThreshold,
    TrainConfig,
    TrainingDivergence,
    calibrate_from_scores,
    evaluate,
    train,
)

BACKENDS = [_fallback]
try:
    from snapfit.snapnet import _core
    BACKENDS.append(_core)
except ImportError:  # compiled kernels not built
    pass


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# --------------------------------------------------------------------------
# encoder kernels

@pytest.mark.parametrize("k", BACKENDS)
def test_conv_zero_input_gives_zero_features(k):
    out, _ = k.conv_forward(np.zeros((3, 50)), RngStream(0).normal(size=(16, 5)), np.zeros(16))
    assert out.shape == (3, 23, 16)
    assert np.all(out == 0.0)


@pytest.mark.parametrize("k", BACKENDS)
def test_conv_spike_shift_moves_activation_by_one_pool_cell(k):
    W = np.zeros((1, 5))
    W[0, 0] = 1.0
    x = np.zeros((2, 20))
    x[0, 6] = 1.0
    x[1, 8] = 1.0
    out, _ = k.conv_forward(x, W, np.zeros(1))
    a, b = np.flatnonzero(out[0, :, 0]), np.flatnonzero(out[1, :, 0])
    assert len(a) == len(b) == 1 and b[0] == a[0] + 1


@pytest.mark.parametrize("k", BACKENDS)
def test_gru_zero_input_zero_weights(k):
    h, _ = k.gru_forward(np.zeros((2, 5, 3)), np.zeros((3, 12)), np.zeros((4, 12)), np.zeros(12))
    assert np.all(h == 0.0)


@pytest.mark.parametrize("k", BACKENDS)
def test_gru_output_bounded(k):
    r = RngStream(1)
    h, _ = k.gru_forward(3 * r.normal(size=(16, 30, 3)), r.normal(size=(3, 12)),
                         r.normal(size=(4, 12)), r.normal(size=12))
    assert np.all(np.abs(h) < 1.0)
    # saturating inputs may round to +-1 but never beyond
    h, _ = k.gru_forward(1e3 * r.normal(size=(16, 30, 3)), r.normal(size=(3, 12)),
                         r.normal(size=(4, 12)), r.normal(size=12))
    assert np.all(np.abs(h) <= 1.0)


@pytest.mark.parametrize("k", BACKENDS)
def test_gru_two_steps_by_hand(k):
    wz, wr, wn = 0.7, -0.4, 1.3
    uz, ur, un = 0.5, 0.9, -1.1
    bz, br, bn = 0.1, -0.2, 0.05
    x1, x2 = 0.8, -0.6
    z = _sig(wz * x1 + bz)
    n = math.tanh(wn * x1 + bn)
    h1 = z * n
    z = _sig(wz * x2 + bz + uz * h1)
    r = _sig(wr * x2 + br + ur * h1)
    n = math.tanh(wn * x2 + bn + un * r * h1)
    h2 = (1 - z) * h1 + z * n
    h, _ = k.gru_forward(np.array([[[x1], [x2]]]), np.array([[wz, wr, wn]]),
                         np.array([[uz, ur, un]]), np.array([bz, br, bn]))
    assert h[0, 0] == pytest.approx(h2, abs=1e-14)


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    cfg = ModelConfig(T=20, N=3, d_c=4, d_h=5)
    r = RngStream(2)
    params = init_params(cfg, r)
    X, y = r.normal(size=(6, 20, 3)), np.array([1, 0, 0, 1, 0, 1.0])
    la, ga = loss_and_grad(X, y, params, cfg, kern=_fallback)
    lb, gb = loss_and_grad(X, y, params, cfg, kern=_core)
    assert la == pytest.approx(lb, abs=1e-13)
    for n in ga:
        assert np.allclose(ga[n], gb[n], atol=1e-13)


# --------------------------------------------------------------------------
# attention, head and variants

def test_attention_identical_embeddings_uniform():
    r = RngStream(3)
    params = {"att_W": r.normal(size=(4, 4)), "att_b": r.normal(size=4), "att_u": r.normal(size=4)}
    h = np.tile(r.normal(size=4), (5, 1))
    pooled, alpha = attention_pool(h, params)
    assert np.allclose(alpha, 0.2, atol=1e-15)
    assert np.allclose(pooled, h[0], atol=1e-15)


def test_attention_simplex_and_permutation():
    r = RngStream(4)
    params = {"att_W": r.normal(size=(6, 6)), "att_b": r.normal(size=6), "att_u": r.normal(size=6)}
    h = r.normal(size=(7, 6))
    pooled, alpha = attention_pool(h, params)
    assert np.all(alpha > 0) and abs(alpha.sum() - 1) < 1e-12
    perm = r.permutation(7)
    pooled_p, alpha_p = attention_pool(h[perm], params)
    assert np.max(np.abs(pooled - pooled_p)) < 1e-12
    assert np.allclose(alpha_p, alpha[perm], atol=1e-15)


def test_softmax_jacobian_rows_sum_to_zero():
    a = softmax(RngStream(5).normal(size=9))
    J = softmax_jacobian(a)
    assert np.max(np.abs(J.sum(axis=1))) < 1e-15
    eps = 1e-6
    s = np.log(a)
    num = np.stack([(softmax(s + eps * e) - softmax(s - eps * e)) / (2 * eps) for e in np.eye(9)], axis=1)
    assert np.allclose(J, num, atol=1e-9)


def test_forward_zero_weights_is_half():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    params = {k: np.zeros(s) for k, s in build_variant(cfg).items()}
    assert forward(RngStream(0).normal(size=(10, 2)), params, cfg) == 0.5


def test_forward_probability_range_and_shape_check():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    params = init_params(cfg, RngStream(6))
    p = predict_proba(1e3 * RngStream(7).normal(size=(20, 10, 2)), params, cfg)
    assert np.all((p > 0) & (p < 1))
    with pytest.raises(ConfigError):
        forward(np.zeros((9, 2)), params, cfg)


def _reference_forward(window, P, T=10, N=2, k=5):
    """Loop-by-loop SnapNet, written independently of the vectorized model."""
    d_c, H = P["conv_W"].shape[0], P["gru_Wh"].shape[0]
    embs = []
    for j in range(N):
        x = [float(window[t][j]) for t in range(T)]
        conv = [[max(0.0, sum(P["conv_W"][c][i] * x[t + i] for i in range(k)) + P["conv_b"][c]) for c in range(d_c)]
                for t in range(T - k + 1)]
        pooled = [[max(conv[2 * t][c], conv[2 * t + 1][c]) for c in range(d_c)] for t in range((T - k + 1) // 2)]
        h = [0.0] * H
        for f in pooled:
            a = [sum(f[c] * P["gru_Wx"][c][m] for c in range(d_c)) + P["gru_b"][m] for m in range(3 * H)]
            z = [_sig(a[m] + sum(h[q] * P["gru_Wh"][q][m] for q in range(H))) for m in range(H)]
            r = [_sig(a[H + m] + sum(h[q] * P["gru_Wh"][q][H + m] for q in range(H))) for m in range(H)]
            n = [math.tanh(a[2 * H + m] + sum(r[q] * h[q] * P["gru_Wh"][q][2 * H + m] for q in range(H)))
                 for m in range(H)]
            h = [(1 - z[m]) * h[m] + z[m] * n[m] for m in range(H)]
        embs.append(h)
    scores = [sum(P["att_u"][m] * math.tanh(sum(P["att_W"][m][q] * e[q] for q in range(H)) + P["att_b"][m])
                  for m in range(H)) for e in embs]
    top = max(scores)
    w = [math.exp(s - top) for s in scores]
    w = [v / sum(w) for v in w]
    g = [sum(w[j] * embs[j][m] for j in range(N)) for m in range(H)]
    return _sig(sum(P["out_w"][m] * g[m] for m in range(H)) + float(P["out_b"]))


def test_forward_matches_straight_line_reimplementation():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    for s in range(5):
        r = RngStream(100 + s)
        params = {k: v + 0.2 * r.child(i).normal(size=np.shape(v))
                  for i, (k, v) in enumerate(sorted(init_params(cfg, r).items()))}
        w = r.child(99).normal(size=(10, 2))
        for k in BACKENDS:
            assert forward(w, params, cfg, k) == pytest.approx(_reference_forward(w, params), abs=1e-12)


def test_variant_structure():
    cfg = ModelConfig()
    full = param_count(cfg)
    assert full - param_count(ModelConfig(variant="no_attention")) == cfg.d_h ** 2 + 2 * cfg.d_h
    assert "gru_Wx" not in build_variant(ModelConfig(variant="no_gru"))
    assert build_variant(ModelConfig(variant="no_cnn"))["gru_Wx"] == (1, 3 * cfg.d_h)
    assert ModelConfig(T=50, k=5).T_prime == 23
    with pytest.raises(ConfigError):
        ModelConfig(variant="no_head")
    with pytest.raises(ConfigError):
        ModelConfig(T=4, k=5)


def test_no_attention_equals_full_on_identical_joints():
    full, mean = ModelConfig(T=10, N=3, d_c=2, d_h=3), ModelConfig(T=10, N=3, d_c=2, d_h=3, variant="no_attention")
    params = init_params(full, RngStream(8))
    sub = {k: v for k, v in params.items() if not k.startswith("att_")}
    X = np.repeat(RngStream(9).normal(size=(4, 10, 1)), 3, axis=2)
    assert np.allclose(predict_proba(X, params, full), predict_proba(X, sub, mean), atol=1e-15)


# --------------------------------------------------------------------------
# loss and gradients

def test_focal_loss_identities():
    r = RngStream(10)
    y = r.integers(0, 2, 500).astype(float)
    p = r.uniform(1e-6, 1 - 1e-6, 500)
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert np.max(np.abs(focal_loss(y, p, 0.5, 0.0) - 0.5 * bce)) < 1e-12
    assert focal_loss(1.0, 1.0 - 1e-12) < 1e-20
    assert focal_loss(1.0, 0.5, 0.25, 2.0) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)
    assert focal_loss(1.0, 0.5, 0.25, 2.0) == pytest.approx(0.043322, abs=1e-6)
    assert np.all(focal_loss(y, p) >= 0)
    grid = np.linspace(0.01, 0.99, 99)
    assert np.all(np.diff(focal_loss(1.0, grid)) < 0)
    with pytest.raises(ValueError):
        focal_loss(1.0, 1.5)


def test_focal_grad_logit_matches_finite_difference():
    for y in (0.0, 1.0):
        for a in np.linspace(-6, 6, 25):
            num = finite_diff_grad(lambda v: float(focal_loss(y, 1 / (1 + np.exp(-v[0])))), [a], 1e-6)[0]
            assert focal_grad_logit(y, a) == pytest.approx(num, abs=1e-7)


def test_head_gradient_is_logistic_regression():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    r = RngStream(11)
    params = init_params(cfg, r)
    X, y = r.normal(size=(8, 10, 2)), (r.uniform(size=8) < 0.5).astype(float)
    _, g = loss_and_grad(X, y, params, cfg, alpha=0.5, gamma=0.0)
    logit, cache = _forward(X, params, cfg, kernels)
    p = 1 / (1 + np.exp(-logit))
    # focal(alpha=1/2, gamma=0) is half the cross-entropy
    assert np.allclose(g["out_w"], 0.5 * np.mean((p - y)[:, None] * cache["g"], axis=0), atol=1e-15)
    assert g["out_b"] == pytest.approx(0.5 * np.mean(p - y), abs=1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradients_match_oracle(variant):
    cfg = ModelConfig(T=10, N=2, d_c=3, d_h=4, variant=variant)
    for s in range(3):
        r = RngStream(200 + s)
        params = {k: v + 0.1 * r.child(i).normal(size=np.shape(v))
                  for i, (k, v) in enumerate(sorted(init_params(cfg, r).items()))}
        X, y = r.child(50).normal(size=(3, 10, 2)), np.array([1.0, 0.0, 1.0])
        _, g = loss_and_grad(X, y, params, cfg)
        num = unflatten(finite_diff_grad(lambda v: loss_and_grad(X, y, unflatten(v, params), cfg)[0],
                                         flatten(params), 1e-5), params)
        for k in params:
            scale = max(np.max(np.abs(g[k])), np.max(np.abs(num[k])), 1e-8)
            assert np.max(np.abs(g[k] - num[k])) / scale < 1e-5, k


# --------------------------------------------------------------------------
# optimizer and training

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, st = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 1e-3)
    assert np.array_equal(new["w"], p["w"]) and st.step == 1


def test_adam_first_step_has_magnitude_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    new, _ = adam_step(p, g, AdamState.zeros_like(p), 1e-3)
    assert np.allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-4)


def test_adam_minimizes_quadratic_bowl():
    A = np.diag([1.0, 3.0, 10.0])
    p = {"w": np.array([0.8, -0.5, 0.3])}
    st = AdamState.zeros_like(p)
    for _ in range(2000):
        p, st = adam_step(p, {"w": A @ p["w"]}, st, 1e-2)
    assert 0.5 * p["w"] @ A @ p["w"] < 1e-6


def _toy_data(n=120, seed=12):
    r = RngStream(seed)
    X = r.normal(size=(n, 10, 2))
    y = (r.uniform(size=n) < 0.3).astype(float)
    X[y == 1, 4:7, 0] += 3.0
    return X, y


def test_zero_epochs_returns_initial_params():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    X, y = _toy_data()
    params, curves = train(X, y, cfg, TrainConfig(epochs=0, seed=3, precision="float64"))
    init = init_params(cfg, RngStream(3).child(0))
    assert curves.epoch == []
    assert all(np.array_equal(params[k], init[k]) for k in init)


def test_training_is_deterministic_and_learns():
    cfg = ModelConfig(T=10, N=2, d_c=4, d_h=4)
    X, y = _toy_data()
    tc = TrainConfig(epochs=30, lr=1e-2, batch_size=16, seed=5)
    a, ca = train(X, y, cfg, tc, X, y)
    b, cb = train(X, y, cfg, tc, X, y)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert ca.val_f1 == cb.val_f1 and len(ca.epoch) == 30
    assert ca.train_loss[-1] < ca.train_loss[0]
    assert ca.val_f1[-1] > 0.9


def test_divergence_reports_epoch_and_batch():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3, variant="no_gru")
    X, y = _toy_data(40)
    X[7, 3, 1] = np.nan
    with pytest.raises(TrainingDivergence) as info:
        train(X, y, cfg, TrainConfig(epochs=2, batch_size=8, precision="float64"))
    assert info.value.epoch == 0


# --------------------------------------------------------------------------
# thresholds and metrics

def test_calibration_on_separated_scores_prefers_half():
    y = np.array([0, 0, 0, 1, 1])
    th = calibrate_from_scores(np.array([0.05, 0.1, 0.2, 0.8, 0.9]), y)
    assert th.tau == 0.5
    assert DetectionMetrics.from_scores([0.05, 0.1, 0.2, 0.8, 0.9], y, th.tau).f1 == 1.0


def test_calibrated_tau_is_grid_optimal():
    r = RngStream(13)
    y = (r.uniform(size=400) < 0.2).astype(int)
    s = np.clip(0.35 * y + r.uniform(0, 0.7, 400), 0, 1)
    th = calibrate_from_scores(s, y)
    best = DetectionMetrics.from_scores(s, y, th.tau).f1
    assert all(DetectionMetrics.from_scores(s, y, t).f1 <= best + 1e-15 for t in np.arange(1, 100) / 100)
    with pytest.raises(ValueError):
        calibrate_from_scores(s, np.zeros(400))


def test_metric_identities():
    perfect = DetectionMetrics.from_scores([0.9, 0.1, 0.8], [1, 0, 1], 0.5)
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0, 1.0)
    none = DetectionMetrics.from_scores([0.1, 0.1, 0.1], [1, 0, 1], 0.5)
    assert none.recall == 0.0 and none.f1 == 0.0
    r = RngStream(14)
    s, y = r.uniform(size=300), r.integers(0, 2, 300)
    m = DetectionMetrics.from_scores(s, y, 0.4)
    tp = sum(1 for a, b in zip(s, y) if a > 0.4 and b == 1)
    fp = sum(1 for a, b in zip(s, y) if a > 0.4 and b == 0)
    fn = sum(1 for a, b in zip(s, y) if a <= 0.4 and b == 1)
    tn = 300 - tp - fp - fn
    assert (m.TP, m.FP, m.FN, m.TN) == (tp, fp, fn, tn)
    assert m.accuracy == (tp + tn) / 300
    assert m.f1 == pytest.approx(2 / (1 / (tp / (tp + fp)) + 1 / (tp / (tp + fn))))


def test_evaluate_rejects_empty_set():
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    with pytest.raises(ValueError):
        evaluate(init_params(cfg, RngStream(0)), 0.5, np.zeros((0, 10, 2)), np.zeros(0), cfg)


# --------------------------------------------------------------------------
# streaming

def _spike_detector(refractory=20):
    """Tiny hand-set model that fires whenever a unit spike is inside the window."""
    cfg = ModelConfig(T=10, N=2, k=5, d_c=1, d_h=1, variant="no_gru")
    params = {"conv_W": np.ones((1, 5)), "conv_b": np.array([-0.5]),
              "att_W": np.zeros((1, 1)), "att_b": np.zeros(1), "att_u": np.zeros(1),
              "out_w": np.array([40.0]), "out_b": np.array(-5.0)}
    return StreamingDetector(params, cfg, DetectorThreshold(0.5, refractory))


def _stream(spikes, n=120):
    v = np.zeros((n, 2))
    for s in spikes:
        v[s, 0] = 1.0
    return v


def test_short_stream_gives_no_detection():
    assert streaming_detect(_stream([3], 9), _spike_detector()) == []


def test_injected_spike_detected_within_window():
    det = _spike_detector()
    for s in (15, 40, 77):
        streaming_detect(_stream([s]), det)
        assert len(det.detections) == 1 and s <= det.detections[0] <= s + det.config.T


def test_refractory_suppression():
    det = _spike_detector(refractory=20)
    streaming_detect(_stream([30, 60]), det)
    assert len(det.detections) == 2
    streaming_detect(_stream([30, 40]), det)
    assert len(det.detections) == 1


def test_detector_silent_until_armed():
    det = _spike_detector()
    # a spike scores above threshold once it has reached two pooled cells
    assert streaming_detect(_stream([30, 80]), det, arm_at=50) == [0.82]


def test_streaming_matches_offline_scores():
    cfg = ModelConfig(T=20, N=3, d_c=4, d_h=5)
    for s in range(10):
        r = RngStream(300 + s)
        params = init_params(cfg, r)
        v = r.child(1).normal(size=(150, 3))
        det = StreamingDetector(params, cfg, DetectorThreshold(0.5, refractory=1))
        scores = offline_window_scores(v, det)
        tau = float(np.round(np.quantile(scores, 0.9 if s % 2 else 1.0) + (0.0 if s % 2 else 0.01), 6))
        tau = min(max(tau, 1e-6), 1 - 1e-6)
        det.threshold = DetectorThreshold(tau, 1)
        streaming_detect(v, det)
        hits = np.flatnonzero(scores > tau) + cfg.T - 1
        assert bool(det.detections) == bool(hits.size)
        assert det.detections == [int(k) for k in hits]


def test_streaming_tick_budget_at_default_size():
    cfg = ModelConfig()
    det = StreamingDetector(init_params(cfg, RngStream(15), np.float32), cfg, DetectorThreshold(0.99))
    streaming_detect(RngStream(16).normal(size=(300, 7)), det)
    assert len(det.tick_seconds) == 300 - cfg.T + 1
    assert det.max_tick_seconds < 0.010


# --------------------------------------------------------------------------
# persistence

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3, variant="no_cnn")
    params = init_params(cfg, RngStream(17), dtype)
    path = tmp_path / "ck.json"
    save_checkpoint(path, params, cfg, np.arange(2.0), np.ones(2), DetectorThreshold(0.37, 12), {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.threshold == DetectorThreshold(0.37, 12) and ck.meta == {"note": "x"}
    for k in params:
        assert ck.params[k].dtype == dtype and np.array_equal(ck.params[k], params[k])
    text = path.read_text()
    save_checkpoint(path, ck.params, ck.config, ck.mean, ck.std, ck.threshold, ck.meta)
    assert path.read_text() == text


def test_checkpoint_rejects_mismatch(tmp_path):
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    params = init_params(cfg, RngStream(18))
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "a.json", params, ModelConfig(T=10, N=2, d_c=2, d_h=3, variant="no_gru"),
                        np.zeros(2), np.ones(2))
    path = tmp_path / "b.json"
    save_checkpoint(path, params, cfg, np.zeros(2), np.ones(2))
    path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_curve_and_eval_csv(tmp_path):
    cfg = ModelConfig(T=10, N=2, d_c=2, d_h=3)
    X, y = _toy_data(40)
    _, curves = train(X, y, cfg, TrainConfig(epochs=3, batch_size=16), X, y)
    write_curves_csv(tmp_path / "c.csv", curves)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_f1" and len(lines) == 4
    assert read_curves_csv(tmp_path / "c.csv").rows() == curves.rows()
    m = DetectionMetrics(5, 1, 30, 2)
    write_eval_csv(tmp_path / "e.csv", [("full", m)])
    assert (tmp_path / "e.csv").read_text().splitlines()[0].startswith("variant,TP,TN,accuracy,recall,precision,F1")
    (name, back), = read_eval_csv(tmp_path / "e.csv")
    assert name == "full" and back.TP == 5 and back.TN == 30 and back.f1 == pytest.approx(m.f1)
