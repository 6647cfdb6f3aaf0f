import numpy as np

from itkd.autodiff import Parameter, ops
from itkd.autodiff.tensor import Tensor


def project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any tensor to a scalar through a fixed random weighting."""
    return ops.sum(ops.mul(out, Tensor(rng.normal(size=out.shape))))


def param(rng, shape, name, scale=1.0):
    return Parameter(rng.normal(0.0, scale, size=shape), name)
