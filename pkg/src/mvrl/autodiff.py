"""
Dense float64 tensors, reverse-mode gradients, Adam and checkpoints.

Every network in the package is a ``torch.nn.Module``. ``ComputationGraph``
wraps one so that forward/backward follow an explicit two-phase contract
with structured errors, and ``AdamOptimizer`` refuses non-finite gradients
instead of silently propagating them into the weights.
"""

import json
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .constants import CHECKPOINT_FORMAT_VERSION, LOGVAR_MAX, LOGVAR_MIN

DTYPE = torch.float64

logger = logging.getLogger(__name__)


class AutodiffError(Exception):
    """Base class for tensor/graph/optimizer failures."""


class GraphShapeError(AutodiffError):
    """An input reached a graph node with an unexpected shape."""

    def __init__(self, node: str, expected: Any, actual: Any):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"Shape mismatch at node '{node}': expected {expected}, got {actual}")


class BackwardBeforeForwardError(AutodiffError):
    """``backward`` was called on a graph with no recorded forward pass."""


class NonFiniteGradientError(AutodiffError):
    """A gradient contained NaN or infinity."""


class CheckpointError(AutodiffError):
    """A checkpoint document is malformed or does not fit the target module."""


def as_tensor(values: Any) -> torch.Tensor:
    """Converts arrays/lists to a float64 tensor (no copy when already one)."""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def ensure_finite(name: str, tensor: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteGradientError(f"Non-finite values in '{name}'")
    return tensor


def check_last_dim(node: str, tensor: torch.Tensor, expected: int) -> None:
    if tensor.dim() == 0 or tensor.shape[-1] != expected:
        raise GraphShapeError(node, f"(..., {expected})", tuple(tensor.shape))


def _expected_input_width(module: nn.Module) -> Optional[int]:
    if isinstance(module, nn.Linear):
        return module.in_features
    if isinstance(module, (nn.GRUCell, nn.GRU, nn.LSTMCell, nn.LSTM)):
        return module.input_size
    return None


class ComputationGraph:
    """
    A module plus the state of its most recent forward pass.

    The nodes are the leaf modules of the wrapped network in registration
    order, which is also their evaluation order for the sequential
    networks used here.
    """

    def __init__(self, module: nn.Module, name: str = "graph"):
        self.module = module
        self.name = name
        self._output: Optional[torch.Tensor] = None
        self._hooks = []
        for node_name, node in self.nodes:
            width = _expected_input_width(node)
            if width is not None:
                self._hooks.append(node.register_forward_pre_hook(self._shape_hook(f"{name}.{node_name}", width)))

    @staticmethod
    def _shape_hook(node_name: str, width: int) -> Callable:
        def hook(_module, inputs):
            check_last_dim(node_name, inputs[0], width)
        return hook

    @property
    def nodes(self) -> List[Tuple[str, nn.Module]]:
        return [(n, m) for n, m in self.module.named_modules() if n and not list(m.children())]

    def parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.module.named_parameters() if p.requires_grad]

    def forward(self, *inputs: torch.Tensor) -> torch.Tensor:
        """Runs the module and keeps the output (and its autograd tape) for ``backward``."""
        self._output = self.module(*inputs)
        return self._output

    def backward(self, seed_gradient: Optional[torch.Tensor] = None) -> "OrderedDict[str, torch.Tensor]":
        """
        Returns d(output)/d(parameter) for every trainable parameter.

        A scalar output needs no seed. Parameters that do not influence the
        output get a zero gradient. The recorded forward pass is consumed.
        """
        if self._output is None:
            raise BackwardBeforeForwardError(f"backward() called on '{self.name}' before forward()")
        output, self._output = self._output, None
        if seed_gradient is None:
            if output.numel() != 1:
                raise GraphShapeError(f"{self.name}.output", "scalar or explicit seed", tuple(output.shape))
            seed_gradient = torch.ones_like(output)
        elif seed_gradient.shape != output.shape:
            raise GraphShapeError(f"{self.name}.seed_gradient", tuple(output.shape), tuple(seed_gradient.shape))
        named = self.parameters()
        grads = torch.autograd.grad(output, [p for _, p in named], grad_outputs=seed_gradient, allow_unused=True)
        result: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for (name, param), grad in zip(named, grads):
            grad = torch.zeros_like(param) if grad is None else grad
            result[name] = ensure_finite(f"{self.name}.{name}.grad", grad)
        return result

    def close(self) -> None:
        for handle in self._hooks:
            handle.remove()
        self._hooks = []


def clamp_logvar(logvar: torch.Tensor) -> torch.Tensor:
    return torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


def kl_diag_gaussians(mu_q: torch.Tensor, logvar_q: torch.Tensor,
                      mu_p: torch.Tensor, logvar_p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over every element."""
    shape = mu_q.shape
    for node, tensor in (("logvar_q", logvar_q), ("mu_p", mu_p), ("logvar_p", logvar_p)):
        if tensor.shape != shape:
            raise GraphShapeError(f"kl_diag_gaussians.{node}", tuple(shape), tuple(tensor.shape))
    logvar_q = clamp_logvar(logvar_q)
    logvar_p = clamp_logvar(logvar_p)
    ratio = (torch.exp(logvar_q) + (mu_q - mu_p) ** 2) / torch.exp(logvar_p)
    return 0.5 * torch.sum(logvar_p - logvar_q + ratio - 1.0)


def reparam_sample(mu: torch.Tensor, logvar: torch.Tensor,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` drawn from ``generator``."""
    if mu.shape != logvar.shape:
        raise GraphShapeError("reparam_sample.logvar", tuple(mu.shape), tuple(logvar.shape))
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * clamp_logvar(logvar)) * eps


def gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor, logvar: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Diagonal Gaussian log-density summed over the last axis (unit variance when ``logvar`` is None)."""
    if logvar is None:
        logvar = torch.zeros_like(mean)
    logvar = clamp_logvar(logvar)
    return -0.5 * torch.sum(math.log(2 * math.pi) + logvar + (x - mean) ** 2 / torch.exp(logvar), dim=-1)


class AdamOptimizer:
    """``torch.optim.Adam`` behind an explicit ``apply(grads)`` step that rejects NaN/inf."""

    def __init__(self, params: Iterable[nn.Parameter], lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: Optional[float] = None, name: str = "adam"):
        self.params = [p for p in params if p.requires_grad]
        if not self.params:
            raise AutodiffError(f"Optimizer '{name}' received no trainable parameters")
        self.name = name
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self._optim = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)

    @property
    def step_count(self) -> int:
        state = self._optim.state.get(self.params[0], {})
        step = state.get("step", 0)
        return int(step.item()) if isinstance(step, torch.Tensor) else int(step)

    def moments(self, index: int = 0) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        state = self._optim.state.get(self.params[index], {})
        return state.get("exp_avg"), state.get("exp_avg_sq")

    def apply(self, grads: Sequence[Optional[torch.Tensor]]) -> List[nn.Parameter]:
        if len(grads) != len(self.params):
            raise GraphShapeError(f"{self.name}.grads", len(self.params), len(grads))
        for index, (param, grad) in enumerate(zip(self.params, grads)):
            grad = torch.zeros_like(param) if grad is None else grad.detach()
            if grad.shape != param.shape:
                raise GraphShapeError(f"{self.name}.grads[{index}]", tuple(param.shape), tuple(grad.shape))
            if not torch.isfinite(grad).all():
                raise NonFiniteGradientError(
                    f"Optimizer '{self.name}': non-finite gradient for parameter {index} "
                    f"(shape {tuple(param.shape)}) at step {self.step_count + 1}"
                )
            param.grad = grad.clone()
        if self.max_grad_norm is not None:
            nn.utils.clip_grad_norm_(self.params, self.max_grad_norm)
        self._optim.step()
        self._optim.zero_grad(set_to_none=True)
        return self.params

    def minimize(self, loss: torch.Tensor) -> float:
        """Backpropagates ``loss`` to the optimizer's parameters and applies one step."""
        grads = torch.autograd.grad(loss, self.params, allow_unused=True)
        self.apply(list(grads))
        return float(loss.detach())


def adam_step(optimizer: AdamOptimizer, grads: Sequence[Optional[torch.Tensor]]) -> List[nn.Parameter]:
    return optimizer.apply(grads)


def gradient_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                   eps: float = 1e-5, rtol: float = 1e-4) -> bool:
    """Central finite differences against reverse mode (float64 inputs with ``requires_grad``)."""
    return torch.autograd.gradcheck(fn, tuple(inputs), eps=eps, atol=1e-6, rtol=rtol)


def save_checkpoint(path: Path, tensors: Mapping[str, torch.Tensor],
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Writes named tensors as one JSON document.

    Floats are written with ``repr`` precision, so loading returns
    bit-identical float64 values.
    """
    parameters = OrderedDict()
    for name, tensor in tensors.items():
        values = tensor.detach().to(DTYPE).reshape(-1).tolist()
        if not all(math.isfinite(v) for v in values):
            raise CheckpointError(f"Refusing to checkpoint non-finite tensor '{name}'")
        parameters[name] = {"shape": list(tensor.shape), "values": values}
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": metadata or {},
        "parameters": parameters,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=1)
    logger.info(f"Checkpoint with {len(parameters)} tensors written to {path}")
    return path


def load_checkpoint(path: Path) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    version = document.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version!r}")

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, entry in document.get("parameters", {}).items():
        shape, values = entry.get("shape"), entry.get("values")
        if shape is None or values is None or math.prod(shape) != len(values):
            raise CheckpointError(f"{path}: tensor '{name}' has inconsistent shape/values")
        tensors[name] = torch.tensor(values, dtype=DTYPE).reshape(shape)
    return tensors, document.get("metadata", {})


def load_into(module: nn.Module, tensors: Mapping[str, torch.Tensor]) -> nn.Module:
    """Copies checkpoint tensors into ``module``; names and shapes must match exactly."""
    expected = module.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"Checkpoint/module mismatch: missing={missing}, unexpected={unexpected}")
    for name, tensor in tensors.items():
        if tuple(expected[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Tensor '{name}': checkpoint shape {tuple(tensor.shape)} != module shape {tuple(expected[name].shape)}"
            )
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in tensors.items()})
    return module
