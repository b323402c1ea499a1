import numpy as np
import pytest
import torch

from dcanet.config import DataConfig, ExperimentConfig, ModelConfig, SynthSpec, TrainConfig

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    """Record and print one PASS/FAIL line, then fail the test if the criterion failed."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_experiment(structure="cascade", max_iter=5, **model_kw) -> ExperimentConfig:
    """A very small configuration that trains in a second or two."""
    model = ModelConfig(structure=structure, backbone_channels=(4, 8, 8, 16), width=8,
                        semantic_width=8, aux_width=8, **model_kw)
    return ExperimentConfig(
        model=model,
        train=TrainConfig(max_iter=max_iter, batch_size=2, crop_size=32),
        data=DataConfig(synth=SynthSpec(num_images=8, image_size=32), num_val=4),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_experiment


def zero_weights_identity_bn(module: torch.nn.Module) -> None:
    """All conv/linear weights to zero; batch norms at identity statistics, inference mode."""
    module.eval()
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, torch.nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
