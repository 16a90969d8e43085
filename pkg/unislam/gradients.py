import dataclasses
import enum
import logging
import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from unislam.exceptions import GradientError, NonFiniteLossError

logger = logging.getLogger(__name__)


class BlockRole(str, enum.Enum):
    GEOMETRY_GRID = 'geometry-grid'
    APPEARANCE_GRID = 'appearance-grid'
    GEOMETRY_DECODER = 'geometry-decoder'
    APPEARANCE_DECODER = 'appearance-decoder'
    ALPHA = 'alpha'
    POSE_ROTATION = 'pose-rotation'
    POSE_TRANSLATION = 'pose-translation'


@dataclasses.dataclass(eq=False)
class ParameterBlock:
    """
    Flat float64 vector optimised as one unit.

    `values` is always an autograd leaf; `lower_bound` is the projection applied after every
    Adam update (used for the density sharpness).
    """

    name: str
    role: BlockRole
    values: torch.Tensor
    learning_rate: float
    lower_bound: Optional[float] = None

    def __post_init__(self) -> None:
        values = torch.as_tensor(self.values, dtype=torch.float64)
        self.values = values.detach().reshape(-1).clone().requires_grad_(True)
        if self.role is BlockRole.ALPHA and self.values.numel() != 1:
            raise GradientError(f'Block {self.name}: alpha block must hold exactly one value.')
        if not bool(torch.isfinite(self.values).all()):
            raise GradientError(f'Block {self.name} holds non-finite values.')

    @property
    def size(self) -> int:
        return self.values.numel()

    def assign(self, values: torch.Tensor) -> None:
        if values.numel() != self.size:
            raise GradientError(f'Block {self.name}: expected {self.size} values, got {values.numel()}.')
        with torch.no_grad():
            self.values.copy_(values.reshape(-1))

    def snapshot(self) -> torch.Tensor:
        return self.values.detach().clone()


@dataclasses.dataclass
class AdamState:
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor

    @classmethod
    def zeros_like(cls, block: ParameterBlock) -> 'AdamState':
        return cls(
            exp_avg=torch.zeros(block.size, dtype=torch.float64),
            exp_avg_sq=torch.zeros(block.size, dtype=torch.float64),
        )


@dataclasses.dataclass(frozen=True)
class AdamSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclasses.dataclass
class LossEvaluation:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor]

    def item(self) -> float:
        return float(self.total.detach())


@dataclasses.dataclass(frozen=True)
class FiniteDifferenceRow:
    block: str
    checked: int
    flagged: int
    max_relative_error: float
    mean_relative_error: float
    max_absolute_error: float


@dataclasses.dataclass
class GradientReport:
    gradients: Dict[str, torch.Tensor]
    max_abs: float
    checked_against_fd: Optional[Dict[str, FiniteDifferenceRow]] = None


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)


def _check_finite(evaluation: LossEvaluation) -> None:
    for name, term in evaluation.terms.items():
        value = float(term.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    total = float(evaluation.total.detach())
    if not math.isfinite(total):
        raise NonFiniteLossError('total', total)


def compute_gradients(
    evaluation: LossEvaluation, blocks: Sequence[ParameterBlock], retain_graph: bool = False,
) -> GradientReport:
    _check_finite(evaluation)

    gradients = {block.name: torch.zeros(block.size, dtype=torch.float64) for block in blocks}
    active = [block for block in blocks if block.values.requires_grad]
    if evaluation.total.requires_grad and active:
        raw = torch.autograd.grad(
            evaluation.total, [block.values for block in active], allow_unused=True, retain_graph=retain_graph,
        )
        for block, grad in zip(active, raw):
            if grad is not None:
                gradients[block.name] = grad.detach().reshape(-1)

    max_abs = max((float(grad.abs().max()) for grad in gradients.values() if grad.numel()), default=0.0)
    return GradientReport(gradients=gradients, max_abs=max_abs)


def adam_step(
    block: ParameterBlock, grad: torch.Tensor, state: AdamState, t: int, settings: AdamSettings = AdamSettings(),
) -> Tuple[ParameterBlock, AdamState]:
    if t < 1:
        raise GradientError(f'Adam step index must be at least 1, got {t}.')
    if grad.numel() != block.size:
        raise GradientError(f'Block {block.name}: gradient has {grad.numel()} values, block has {block.size}.')
    if state.exp_avg.numel() != block.size or state.exp_avg_sq.numel() != block.size:
        raise GradientError(f'Block {block.name}: optimizer state does not match the block length.')

    with torch.no_grad():
        grad = grad.reshape(-1).to(torch.float64)
        exp_avg = state.exp_avg * settings.beta1 + grad * (1.0 - settings.beta1)
        exp_avg_sq = state.exp_avg_sq * settings.beta2 + grad * grad * (1.0 - settings.beta2)
        corrected_avg = exp_avg / (1.0 - settings.beta1 ** t)
        corrected_avg_sq = exp_avg_sq / (1.0 - settings.beta2 ** t)
        values = block.values.detach() - block.learning_rate * corrected_avg / (corrected_avg_sq.sqrt() + settings.eps)
        if block.lower_bound is not None:
            values = values.clamp_min(block.lower_bound)

    if not bool(torch.isfinite(values).all()):
        raise GradientError(f'Block {block.name}: update produced non-finite values.')

    return dataclasses.replace(block, values=values), AdamState(exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)


class AdamOptimizer:
    """Applies `adam_step` to a fixed set of blocks, writing updated values back in place."""

    def __init__(self, blocks: Sequence[ParameterBlock], settings: AdamSettings = AdamSettings()) -> None:
        self.blocks = list(blocks)
        self.settings = settings
        self.states = {block.name: AdamState.zeros_like(block) for block in self.blocks}
        self.step_index = 0

    def step(self, report: GradientReport) -> None:
        self.step_index += 1
        for block in self.blocks:
            updated, self.states[block.name] = adam_step(
                block, report.gradients[block.name], self.states[block.name], self.step_index, self.settings,
            )
            block.assign(updated.values.detach())


def _pick_coordinates(analytic: torch.Tensor, max_coordinates: int) -> List[int]:
    if analytic.numel() <= max_coordinates:
        return list(range(analytic.numel()))
    order = torch.argsort(-analytic.abs(), stable=True)
    return sorted(int(index) for index in order[:max_coordinates])


def finite_difference_check(
    pipeline: Callable[[], torch.Tensor],
    blocks: Sequence[ParameterBlock],
    h: float = 1e-4,
    coordinates: Optional[Mapping[str, Sequence[int]]] = None,
    max_coordinates: int = 24,
    fd_floor: float = 1e-8,
    analytic: Optional[Mapping[str, torch.Tensor]] = None,
) -> Dict[str, FiniteDifferenceRow]:
    """
    Compare analytic gradients of a scalar pipeline with central differences.

    Coordinates whose central difference is not above `fd_floor` are flagged and excluded
    from the error summary; without explicit `coordinates` the `max_coordinates` entries
    with the largest analytic gradient are checked per block.
    """
    if analytic is None:
        loss = pipeline()
        analytic = compute_gradients(LossEvaluation(total=loss, terms={'loss': loss}), blocks).gradients

    rows = {}
    for block in blocks:
        block_analytic = analytic[block.name].reshape(-1)
        if coordinates is not None and block.name in coordinates:
            indices = list(coordinates[block.name])
        else:
            indices = _pick_coordinates(block_analytic, max_coordinates)

        errors = []
        absolute_errors = []
        flagged = 0
        for index in indices:
            with torch.no_grad():
                original = block.values[index].item()
                block.values[index] = original + h
                forward = float(pipeline())
                block.values[index] = original - h
                backward = float(pipeline())
                block.values[index] = original
            numeric = (forward - backward) / (2.0 * h)
            absolute_error = abs(float(block_analytic[index]) - numeric)
            absolute_errors.append(absolute_error)
            if abs(numeric) <= fd_floor:
                flagged += 1
                continue
            errors.append(absolute_error / abs(numeric))

        rows[block.name] = FiniteDifferenceRow(
            block=block.name,
            checked=len(indices),
            flagged=flagged,
            max_relative_error=max(errors) if errors else math.inf if flagged else 0.0,
            mean_relative_error=sum(errors) / len(errors) if errors else math.inf if flagged else 0.0,
            max_absolute_error=max(absolute_errors, default=0.0),
        )
    return rows


def format_gradient_table(rows: Mapping[str, FiniteDifferenceRow]) -> str:
    header = f'{"block":<28} {"checked":>7} {"flagged":>7} {"max rel":>11} {"mean rel":>11} {"max abs":>11}'
    lines = [header, '-' * len(header)]
    for row in rows.values():
        lines.append(
            f'{row.block:<28} {row.checked:>7} {row.flagged:>7} '
            f'{row.max_relative_error:>11.3e} {row.mean_relative_error:>11.3e} {row.max_absolute_error:>11.3e}',
        )
    return '\n'.join(lines)
