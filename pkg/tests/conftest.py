import numpy as np
import pytest

from saml.adapters import LoraModule, Router, SamlLayer
from saml.model import ModelConfig
from saml.numerics import Parameter, SeededRng
from saml.pipeline import PipelineConfig, generate_corpus, run_pipeline


def random_saml_layer(seed: int, n: int = 4, d: int = 6, k: int = 5, r: int = 2, alpha=None,
                      router_std: float = 1.0) -> SamlLayer:
    """SAML layer with every factor random (non-zero B), so deltas are non-trivial."""
    rng = SeededRng(seed)
    W0 = rng.normal((d, k))
    experts = [LoraModule(Parameter(rng.normal((r, k))), Parameter(rng.normal((d, r))), alpha) for _ in range(n)]
    router = Router(rng.normal((n, k), std=router_std)) if n > 1 else None
    return SamlLayer(W0, experts, router, "full", bias=rng.normal(d), name="layer")


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=16, max_len=8, d_model=16, n_heads=2, n_blocks=1, ff_hidden=32, n_experts=3,
                lora_rank=2, block_size=16, seed=5)
    base.update(overrides)
    return ModelConfig(**base)


SMALL_CORPUS = dict(n_speakers=8, utterances_per_speaker=20, seq_len=8, vocab=16, master_seed=3,
                    n_target_speakers=2, domain_swaps=2, speaker_swaps=2, base_utterances=400)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(**SMALL_CORPUS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_run():
    """One full pipeline run at the default configuration (a few minutes on CPU)."""
    return run_pipeline(PipelineConfig())


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion-marked test

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        _CRITERIA[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}" + (f" ({detail})" if detail else ""))
