import numpy as np
import pytest

from tsinterp.forecaster import Forecaster, ModelConfig
from tsinterp.series import gen_seasonal, make_windows
from tsinterp.tokenizer import TokenizerConfig, tokenize_window


@pytest.fixture
def tok_cfg():
    return TokenizerConfig(n_bins=32, clip_lo=-4.0, clip_hi=4.0)


@pytest.fixture
def tiny_model(tok_cfg):
    cfg = ModelConfig(n_encoder_blocks=2, n_decoder_blocks=2, d_model=16, n_heads=2, d_ff=32,
                      vocab=tok_cfg.vocab_size, max_context=16, seed=3)
    return Forecaster(cfg)


@pytest.fixture
def tiny_windows(tok_cfg):
    s = gen_seasonal(96, period=12, amplitude=1.0, level=2.0, noise=0.1, rng=np.random.default_rng(1), name="sea")
    return [tokenize_window(w, tok_cfg) for w in make_windows(s, 12, 6, max_windows=6, stride=5, seed=0)]


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
