import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from tbvlm.config import ModelConfig
from tbvlm.params import init_params

# 32x32 images, 4 patches, width 8: small enough for exhaustive checks
TINY = ModelConfig(image_size=32, patch_size=16, d_vision=8, d_text=8, d_fused=8, d_decoder=16,
                   vision_layers=1, vision_heads=2, text_layers=1, text_heads=2,
                   fusion_layers=1, fusion_heads=2, decoder_layers=2, decoder_heads=2,
                   vocab_size=32, max_text_len=16, max_report_len=12)


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def tiny_params():
    params = init_params(TINY, seed=3)
    # non-trivial affine parameters so gradient checks exercise every path
    rng = np.random.default_rng(99)
    for name, p in params.items():
        if name.endswith(".g"):
            p.data = 1.0 + 0.1 * rng.normal(size=p.shape)
        elif name.endswith(".b"):
            p.data = 0.05 * rng.normal(size=p.shape)
        else:
            p.data = p.data * 10.0
    return params


# 64x64 variant of TINY that fits synthetic dataset records
SMALL = ModelConfig(image_size=64, patch_size=16, d_vision=8, d_text=8, d_fused=8, d_decoder=16,
                    vision_layers=1, vision_heads=2, text_layers=1, text_heads=2,
                    fusion_layers=1, fusion_heads=2, decoder_layers=1, decoder_heads=2,
                    vocab_size=128, max_text_len=48, max_report_len=64)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from tbvlm.synth import build_dataset

    out = tmp_path_factory.mktemp("ds") / "data"
    build_dataset(40, out, (0.5, 0.25, 0.25), seed=7, size=64, patch_size=16, noise=0.03, prevalence=0.25)
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
