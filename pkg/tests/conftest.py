import pytest
import torch

from compinv.diffusion import Denoiser, DiffusionModel, NoiseSchedule
from compinv.numerics import RngStream
from compinv.scene_corpus import PRETRAIN_CONCEPTS
from compinv.text_encoder import TextEncoder, Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary.default(list(PRETRAIN_CONCEPTS))


def make_tiny_model(dim=8, seed=0, dtype=torch.float64, T=20):
    """A deliberately small model for exact-gradient and plumbing tests."""
    torch.manual_seed(seed)
    v = Vocabulary.default(list(PRETRAIN_CONCEPTS))
    enc = TextEncoder(v, dim=dim, rng=RngStream(seed, "tiny"))
    den = Denoiser(ctx_dim=dim, ch=8, ch2=16, tdim=8)
    m = DiffusionModel(enc, den, NoiseSchedule.linear(T))
    # break the identity init so refiner gradients are non-trivial
    with torch.no_grad():
        for p in enc.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return m.to(dtype)


@pytest.fixture
def tiny_model():
    return make_tiny_model()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
