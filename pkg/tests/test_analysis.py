from __future__ import annotations

import logging

import numpy as np
import pytest

from app.analysis import CORTICAL_OMITTED, export_params, log_ripple_grid, modulation_profile
from app.autodiff import parameter
from app.frontend.cortex import CorticalParams, init_cortical
from app.training import TrainConfig, TrainingData, load_manifest, train


def _checkpoint(toy_classify, ablation: str):
    cfg = TrainConfig(task="classify", n_classes=3, ablation=ablation, steps=0, crop_seconds=0.5)
    return train(cfg, TrainingData(load_manifest(toy_classify))).checkpoint


def test_export_params_lists_every_frontend_value(toy_classify):
    report = export_params(_checkpoint(toy_classify, "full"))
    assert len(report.filters) == 40
    assert len(report.cochlea) == 129
    assert dict(report.scalars) == {"w0": 1.0, "w1": -1.0, "tau_ms": 8.0}
    assert report.filters[0].scale == 0.5
    assert report.filters[25].sign == -1
    assert report.filters[0].init == "log"
    assert report.cochlea[24].center_hz == pytest.approx(360.0)
    assert report.notice is None


def test_export_params_without_cortex_warns(toy_classify, caplog):
    with caplog.at_level(logging.WARNING, logger="app.analysis"):
        report = export_params(_checkpoint(toy_classify, "cnn"))
    assert report.filters == ()
    assert report.notice == CORTICAL_OMITTED
    assert CORTICAL_OMITTED in caplog.text


def test_ripple_grid_matches_log_initialization():
    assert log_ripple_grid() == init_cortical("log").pairs()


def test_profile_energy_scales_with_amplitude():
    cortex = CorticalParams(scale=parameter([1.0, 2.0]), rate=parameter([4.0, -8.0]))
    ripples = [(1.0, 4.0), (2.0, -8.0), (0.5, 1.0)]
    unit = modulation_profile(cortex, ripples, duration_s=1.0)
    half = modulation_profile(cortex, ripples, duration_s=1.0, amplitude=0.5)
    assert unit.shape == (2, 3)
    np.testing.assert_allclose(half, 0.25 * unit, rtol=1e-10)
    assert np.argmax(unit[0]) == 0
    assert np.argmax(unit[1]) == 1


def test_profile_rejects_checkpoint_without_cortex(toy_classify):
    with pytest.raises(ValueError, match="cnn"):
        modulation_profile(_checkpoint(toy_classify, "cnn"), [(1.0, 4.0)])


@pytest.mark.slow
def test_every_log_filter_ranks_its_own_ripple_in_the_top_three():
    cortex = init_cortical("log")
    ripples = log_ripple_grid()
    energies = modulation_profile(cortex, ripples)
    for i, pair in enumerate(cortex.pairs()):
        top = np.argsort(energies[i])[::-1][:3]
        assert ripples.index(pair) in top, (i, pair)
