import torch

from .autodiff import DTYPE

# Every network in the package is built in float64.
torch.set_default_dtype(DTYPE)
