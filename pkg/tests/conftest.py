import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from densetrack import synthgen
from densetrack.correspond import EncoderConfig, TrainConfig, train_pairwise
from densetrack.memory import MomentumPair

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Desk-scale smoke recipe shared by the acceptance suite and the CLI tests.
SMOKE_CONFIG = TrainConfig(
    iterations=500,
    batch_size=4,
    crop=64,
    log_every=50,
    seed=0,
    encoder=EncoderConfig(widths=(32, 64, 128)),
)


@pytest.fixture(scope="session")
def smoke_training():
    """Pairwise training on 10 synthetic sequences; about two minutes on one core."""
    corpus = synthgen.random_corpus(10, seed=0, frame_size=64, length=30)
    return train_pairwise(corpus, SMOKE_CONFIG)


@pytest.fixture(scope="session")
def smoke_pair(smoke_training):
    return MomentumPair.from_encoder(smoke_training.encoder)


@pytest.fixture(scope="session")
def smoke_checkpoint(smoke_training, tmp_path_factory):
    from densetrack.checkpoint import save_encoder

    path = tmp_path_factory.mktemp("smoke") / "encoder.ckpt"
    save_encoder(path, smoke_training.encoder)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, collected by the ``criterion`` fixture
# and echoed in the terminal summary so the verdicts survive output capture.
ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    import time

    start = time.perf_counter()
    state = {"detail": ""}

    def note(detail: str) -> None:
        state["detail"] = detail

    yield note
    rep = getattr(request.node, "rep_call", None)
    verdict = "PASS" if rep is not None and rep.passed else "FAIL"
    line = f"{verdict}  {request.node.name:<40} {time.perf_counter() - start:7.1f}s  {state['detail']}"
    ACCEPTANCE.append(line)
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
