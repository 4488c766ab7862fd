import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import HealthCheck, settings

from maskexplain.classifier import Explanandum, InputSpec

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


class _FixedLogitNet(nn.Module):
    """Returns the same logits for every input; keeps a graph to the input
    so frozen-classifier code paths stay differentiable."""

    def __init__(self, logits):
        super().__init__()
        self.register_buffer("fixed", torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        # multiply by 0 to retain input in the graph without affecting output
        return self.fixed.unsqueeze(0).expand(x.shape[0], -1) + 0.0 * x.mean(dim=(1, 2, 3), keepdim=False).unsqueeze(1)


class _LinearProbeNet(nn.Module):
    """Tiny fixed linear map from flattened pixels to logits."""

    def __init__(self, class_count, size, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(class_count, 3 * size * size, generator=gen) * 0.05)
        self.bias = nn.Parameter(torch.randn(class_count, generator=gen) * 0.1)

    def forward(self, x):
        return x.flatten(1) @ self.weight.t().to(x.dtype) + self.bias.to(x.dtype)


def make_fixed_classifier(logits, size=8):
    net = _FixedLogitNet(logits)
    model = Explanandum(net, class_count=len(logits), input_spec=InputSpec(size=size))
    return model.freeze()


def make_linear_classifier(class_count=3, size=8, seed=0):
    net = _LinearProbeNet(class_count, size, seed)
    model = Explanandum(net, class_count=class_count, input_spec=InputSpec(size=size))
    return model.freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
