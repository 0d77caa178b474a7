from __future__ import annotations

import numpy as np
import pytest

from app.frontend.params import init_frontend
from app.services import build_toy_corpus
from app.signal_io import Waveform, gen_harmonic_complex, write_wav


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tone() -> Waveform:
    return gen_harmonic_complex(200.0, 10, 0.5)


@pytest.fixture
def tone_wav(tmp_path, tone):
    path = tmp_path / "tone.wav"
    write_wav(path, tone)
    return path


@pytest.fixture
def frontend():
    return init_frontend("full", "log", seed=0)


@pytest.fixture
def toy_classify(tmp_path):
    return build_toy_corpus("toy-classify", str(tmp_path / "toy_classify"), items=6, seed=0, duration_s=0.5)


@pytest.fixture
def toy_enhance(tmp_path):
    return build_toy_corpus("toy-enhance", str(tmp_path / "toy_enhance"), items=3, seed=0, duration_s=0.5)
