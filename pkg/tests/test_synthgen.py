import numpy as np
import pytest

from divts.errors import InvalidConfig, MissingPlantedLabels
from divts.synthgen import SynthConfig, class_params, domain_params, generate, render_series, separability_check

SMALL = dict(subjects_per_domain=2, target_subjects=1, series_length=544)


def test_deterministic():
    a_tr, a_te = generate(SynthConfig(seed=3, **SMALL))
    b_tr, b_te = generate(SynthConfig(seed=3, **SMALL))
    assert a_tr.equals(b_tr) and a_te.equals(b_te)
    assert a_tr.x.tobytes() == b_tr.x.tobytes()
    c_tr, _ = generate(SynthConfig(seed=4, **SMALL))
    assert not np.array_equal(a_tr.x, c_tr.x)


def test_degenerate_generator_gives_identical_windows():
    """Without jitter, noise and drift, recordings of one class coincide across subjects."""
    cfg = SynthConfig(K_true=1, drift_rate=0.0, noise_sigma=0.0, subject_jitter=0.0, subjects_per_domain=3,
                      series_length=256, seed=0)
    tr, _ = generate(cfg)
    n_win = (cfg.series_length - cfg.window) // cfg.step + 1
    for c in np.unique(tr.y):
        w = tr.x[tr.y == c]
        assert len(w) == 3 * n_win
        per_subject = w.reshape(3, n_win, *w.shape[1:])
        assert np.array_equal(per_subject[0], per_subject[1])
        assert np.array_equal(per_subject[0], per_subject[2])


def test_contracts():
    cfg = SynthConfig(seed=1, **SMALL)
    tr, te = generate(cfg)
    assert set(np.unique(tr.y)) == set(range(1, cfg.C + 1))
    assert set(np.unique(te.y)) == set(range(1, cfg.C + cfg.ood_extra + 1))
    assert not tr.is_ood.any() and te.is_ood.any()
    assert set(np.unique(tr.d_planted)) == set(range(cfg.K_true))
    assert np.all(te.d_planted == cfg.K_true)
    assert tr.x.shape[1:] == (cfg.channels, 1, cfg.window)
    assert tr.x.min() >= 0 and tr.x.max() <= 1
    # no label shift without extra classes
    _, te0 = generate(SynthConfig(seed=1, ood_extra=0, **SMALL))
    assert set(np.unique(te0.y)) == set(np.unique(tr.y))


def test_training_data_ignores_ood_classes():
    a, _ = generate(SynthConfig(seed=2, ood_extra=0, **SMALL))
    b, _ = generate(SynthConfig(seed=2, ood_extra=2, **SMALL))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_ood_class_is_a_chirp():
    """Zero crossings per half window rise within each window-aligned period."""
    cfg = SynthConfig(noise_sigma=0.0, drift_rate=0.0, subject_jitter=0.0, series_length=256, seed=0)
    params = class_params(cfg.C + 1, cfg.window, cfg.seed, cfg.C)
    assert [p.chirp for p in params] == [False] * cfg.C + [True]
    dom = domain_params(cfg)[0][0]
    sig = render_series(cfg, dom, params[-1], np.random.default_rng(0))
    W = cfg.window
    for k in range(cfg.series_length // W):
        seg = sig[0, k * W:(k + 1) * W] - dom.offsets[0]
        crossings = [np.sum(np.diff(np.sign(h)) != 0) for h in (seg[:W // 2], seg[W // 2:])]
        assert crossings[1] > crossings[0]


def _drift_t_statistic(cfg):
    """t statistic of the late-minus-early spectral-centroid shift, pooled over all recordings."""
    tr, _ = generate(cfg)
    n_win = (cfg.series_length - cfg.window) // cfg.step + 1
    q = n_win // 4
    shifts = []
    for s in range(len(tr) // n_win):
        w = tr.x[s * n_win:(s + 1) * n_win].reshape(n_win, cfg.channels, -1)
        power = np.abs(np.fft.rfft(w - w.mean(axis=2, keepdims=True), axis=2)) ** 2
        centroid = ((power * np.arange(power.shape[2])).sum(axis=2) / power.sum(axis=2)).mean(axis=1)
        shifts.append(centroid[-q:].mean() - centroid[:q].mean())
    shifts = np.array(shifts)
    return shifts.mean() / (shifts.std(ddof=1) / np.sqrt(len(shifts)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_feature_shift_with_drift(seed):
    """Late windows of a recording sit at higher frequency than early ones, beyond 3 standard errors."""
    assert _drift_t_statistic(SynthConfig(seed=seed)) > 3
    assert abs(_drift_t_statistic(SynthConfig(seed=seed, drift_rate=0.0))) < 3


def test_default_config_is_separable():
    tr, _ = generate(SynthConfig())
    assert 1500 <= len(tr) <= 2500
    assert separability_check(tr) >= 0.9


def test_separability_examples():
    tr, _ = generate(SynthConfig(K_true=1, seed=0, **SMALL))
    assert separability_check(tr) == 1.0
    noisy = [separability_check(generate(SynthConfig(noise_sigma=100.0, seed=s, **SMALL))[0]) for s in range(5)]
    assert abs(np.mean(noisy) - 1 / 3) < 0.1
    tr.d_planted = None
    with pytest.raises(MissingPlantedLabels):
        separability_check(tr)


@pytest.mark.parametrize("bad", [dict(K_true=0), dict(C=1), dict(channels=0), dict(noise_sigma=-1.0),
                                 dict(drift_rate=-0.1), dict(subject_jitter=-1.0), dict(step=100), dict(series_length=10)])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfig):
        SynthConfig(**bad)


def test_from_dict_rejects_unknown_keys():
    assert SynthConfig.from_dict({"C": 3}).C == 3
    with pytest.raises(InvalidConfig):
        SynthConfig.from_dict({"domains": 3})
