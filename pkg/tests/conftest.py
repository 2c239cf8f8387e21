import numpy as np
import pytest

from wmdenoise.training import TrainConfig


def tiny_config(tmp_path=None, **changes) -> TrainConfig:
    """A model small enough for unit tests (16×16 images, 4 bits)."""
    base = dict(image_size=16, message_length=4, batch_size=4, steps=3, encoder_channels=4,
                decoder_channels=4, denoiser_channels=2, discriminator_channels=2, se_reduction=2,
                noise_pool="identity", holdout_count=2, seed=0)
    if tmp_path is not None:
        base["out_dir"] = str(tmp_path / "run")
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(11)
    # smooth-ish random images: low-res noise upsampled
    low = rng.random((16, 3, 4, 4))
    return np.repeat(np.repeat(low, 4, axis=2), 4, axis=3).astype(np.float32)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion, printed after the run

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        status, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{status}  {name}  {detail}")
