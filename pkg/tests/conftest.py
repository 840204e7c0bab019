import numpy as np
import pytest

from emgse.autodiff import set_default_dtype
from emgse.autodiff import ops


@pytest.fixture(autouse=True)
def float64_mode():
    # Gradient arithmetic is verified in 64-bit; runtime uses 32-bit.
    set_default_dtype(np.float64)
    ops.fault_hooks.clear()
    yield
    set_default_dtype(np.float32)
    ops.fault_hooks.clear()
