import numpy as np
import pytest

from aap.graph import LayerSpec, ModelGraph


def random_model(seed: int, num_classes: int = 4) -> ModelGraph:
    """Small random conv/linear chain with valid shapes."""
    rng = np.random.default_rng(seed)
    while True:
        try:
            c = int(rng.integers(1, 3))
            size = int(rng.choice([8, 12, 16]))
            specs = []
            cur_c, cur_s = c, size
            for _ in range(int(rng.integers(1, 3))):
                out_c = int(rng.integers(2, 6))
                k = int(rng.choice([3, 5]))
                pad = k // 2 if rng.random() < 0.5 else 0
                specs.append(LayerSpec("conv2d", in_channels=cur_c, out_channels=out_c,
                                       kernel=k, padding=pad, prunable=True))
                specs.append(LayerSpec("relu"))
                cur_s = cur_s + 2 * pad - k + 1
                cur_c = out_c
                if cur_s % 2 == 0 and cur_s >= 4 and rng.random() < 0.7:
                    specs.append(LayerSpec("maxpool2d", pool_size=2))
                    cur_s //= 2
            feat = cur_c * cur_s * cur_s
            hidden = int(rng.integers(4, 12))
            specs.append(LayerSpec("flatten"))
            specs.append(LayerSpec("linear", in_units=feat, out_units=hidden, prunable=True))
            specs.append(LayerSpec("relu"))
            specs.append(LayerSpec("linear", in_units=hidden, out_units=num_classes))
            m = ModelGraph(specs, (c, size, size))
            return m.init_params(int(rng.integers(0, 2**31)))
        except ValueError:
            continue


@pytest.fixture
def rng():
    return np.random.default_rng(0)
