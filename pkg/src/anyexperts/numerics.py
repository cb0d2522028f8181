"""Dense float64 linear algebra with a reverse-mode tape and a finite-difference gradient oracle.

Every other module computes on the primitives defined here. A ``Matrix`` is an
immutable 2-D float64 array. Operations record themselves on the active ``Tape``
(installed with ``with tape:``) whenever one of their operands is tracked by it;
``backward`` then replays the tape in strict reverse recording order.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel

from .errors import ConfigError, ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
VJP = Callable[[FloatArray], Sequence[Optional[FloatArray]]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "anyexperts_active_tape", default=None
)


class Matrix:
    """Immutable row-major matrix of finite 64-bit floats."""

    __slots__ = ("_data", "_tape", "_index")

    def __init__(self, data: Any):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise DimensionError("matrix data must be at most 2-D", [array.shape])
        if not np.isfinite(array).all():
            raise NumericError("matrix holds non-finite values")
        array.setflags(write=False)
        self._data: FloatArray = array
        self._tape: Optional[Tape] = None
        self._index = -1

    @classmethod
    def column(cls, values: Any) -> "Matrix":
        """Build an n×1 column from a flat sequence."""
        return cls(np.asarray(values, dtype=np.float64).reshape(-1, 1))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @property
    def data(self) -> FloatArray:
        return self._data

    @property
    def rows(self) -> int:
        return int(self._data.shape[0])

    @property
    def cols(self) -> int:
        return int(self._data.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1×1 matrix, got {self.shape}")
        return float(self._data[0, 0])

    def flat(self) -> list[float]:
        """Row-major element list."""
        return [float(v) for v in self._data.reshape(-1)]

    def tolist(self) -> list[list[float]]:
        return self._data.tolist()

    def __add__(self, other: Operand) -> "Matrix":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Matrix":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Matrix":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Matrix":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Matrix":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Matrix":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Matrix":
        return div(self, other)

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, {self._data.tolist()!r})"


Operand = Union[Matrix, float, int, np.ndarray]


@dataclass(frozen=True)
class _Record:
    op: str
    parents: tuple[int, ...]
    vjp: Optional[VJP]


class Tape:
    """Ordered record of primitive operations plus a named parameter registry.

    A tape is confined to one logical thread and one training step.
    """

    def __init__(self) -> None:
        self.nodes: list[_Record] = []
        self.parameters: dict[str, Matrix] = {}
        self.grads: dict[str, FloatArray] = {}
        self.visited: list[int] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise ContractError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, matrix: Matrix) -> bool:
        return matrix._tape is self

    def parameter(self, name: str, value: Any) -> Matrix:
        """Register a named leaf whose gradient ``backward`` accumulates."""
        if name in self.parameters:
            raise ContractError(f"parameter {name!r} registered twice")
        matrix = Matrix(value)
        self._attach(matrix, _Record("parameter", (), None))
        self.parameters[name] = matrix
        self.grads[name] = np.zeros(matrix.shape)
        return matrix

    def record(self, op: str, value: FloatArray, operands: Sequence[Matrix], vjp: VJP) -> Matrix:
        out = _checked(op, value)
        parents = tuple(m._index if m._tape is self else -1 for m in operands)
        self._attach(out, _Record(op, parents, vjp))
        return out

    def _attach(self, matrix: Matrix, record: _Record) -> None:
        matrix._tape = self
        matrix._index = len(self.nodes)
        self.nodes.append(record)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run a block with recording disabled, even inside an active tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def bind(values: Mapping[str, Any]) -> dict[str, Matrix]:
    """Wrap raw parameter arrays, registering them on the active tape if there is one."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return {name: Matrix(value) for name, value in values.items()}
    return {name: tape.parameter(name, value) for name, value in values.items()}


def as_matrix(value: Operand) -> Matrix:
    return value if isinstance(value, Matrix) else Matrix(value)


def _checked(op: str, value: FloatArray) -> Matrix:
    try:
        return Matrix(value)
    except NumericError as exc:
        raise NumericError(f"{op} produced non-finite values") from exc


def _emit(op: str, value: FloatArray, operands: Sequence[Matrix], vjp: VJP) -> Matrix:
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(m._tape is tape for m in operands):
        return _checked(op, value)
    return tape.record(op, value, operands, vjp)


def _unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast(op: str, a: Matrix, b: Matrix) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes", [a.shape, b.shape]) from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise DimensionError("matmul: inner dimensions differ", [a.shape, b.shape])
    av, bv = a.data, b.data
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Operand, b: Operand) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast("mul", a, b)
    av, bv = a.data, b.data
    return _emit(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a: Operand, b: Operand) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    _broadcast("div", a, b)
    av, bv = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        value = av / bv
    return _emit(
        "div",
        value,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def scale(a: Matrix, factor: float) -> Matrix:
    factor = float(factor)
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def _expit(x: FloatArray) -> FloatArray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def sigmoid(a: Matrix) -> Matrix:
    y = _expit(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Matrix) -> Matrix:
    av = a.data
    return _emit("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def square(a: Matrix) -> Matrix:
    av = a.data
    return _emit("square", av * av, (a,), lambda g: (2.0 * av * g,))


def log(a: Matrix) -> Matrix:
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(av)
    return _emit("log", y, (a,), lambda g: (g / av,))


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return _emit("sum_all", np.array([[a.data.sum()]]), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Matrix) -> Matrix:
    if a.rows * a.cols == 0:
        raise ContractError("mean of an empty matrix")
    return scale(sum_all(a), 1.0 / (a.rows * a.cols))


def sum_rows(a: Matrix) -> Matrix:
    """Sum across each row, giving an n×1 column."""
    shape = a.shape
    return _emit(
        "sum_rows",
        a.data.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def sum_cols(a: Matrix) -> Matrix:
    """Sum down each column, giving a 1×m row."""
    shape = a.shape
    return _emit(
        "sum_cols",
        a.data.sum(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean_cols(a: Matrix) -> Matrix:
    if a.rows == 0:
        raise ContractError("column mean over zero rows")
    return scale(sum_cols(a), 1.0 / a.rows)


def softmax_rows(a: Matrix) -> Matrix:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit(
        "softmax_rows",
        y,
        (a,),
        lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),),
    )


def cross_entropy(logits: Matrix, targets: Sequence[int]) -> Matrix:
    """Mean negative log-softmax probability of each row's target column."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != logits.rows:
        raise DimensionError("cross_entropy: one target per logits row", [logits.shape, (t.shape[0],)])
    if t.shape[0] == 0:
        raise ContractError("cross_entropy over an empty batch")
    if (t < 0).any() or (t >= logits.cols).any():
        bad = int(t[(t < 0) | (t >= logits.cols)][0])
        raise ContractError(f"target id {bad} outside vocabulary of size {logits.cols}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = t.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, t].sum() / n

    def vjp(g: FloatArray) -> tuple[FloatArray]:
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * (g[0, 0] / n),)

    return _emit("cross_entropy", np.array([[loss]]), (logits,), vjp)


def layer_norm(x: Matrix, gain: Matrix, bias: Matrix, eps: float) -> Matrix:
    """Row-wise (x − mean)/sqrt(var + eps)·gain + bias with 1/d variance."""
    d = x.cols
    if d == 0:
        raise ContractError("layer_norm: empty input")
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError("layer_norm: gain and bias must be 1×d", [x.shape, gain.shape, bias.shape])
    if eps < 0:
        raise ContractError(f"layer_norm: eps must be non-negative, got {eps}")
    xv, gv = x.data, gain.data
    centered = xv - xv.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    if (var + eps <= 0.0).any():
        raise NumericError("layer_norm: zero variance with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def vjp(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit("layer_norm", xhat * gv + bias.data, (x, gain, bias), vjp)


def take_rows(a: Matrix, index: Sequence[int]) -> Matrix:
    """Gather rows; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    shape = a.shape

    def vjp(g: FloatArray) -> tuple[FloatArray]:
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit("take_rows", a.data[idx].reshape(len(idx), shape[1]), (a,), vjp)


def scatter_rows(a: Matrix, index: Sequence[int], n_rows: int) -> Matrix:
    """Add row i of ``a`` into row index[i] of an n_rows×cols zero matrix."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != a.rows:
        raise DimensionError("scatter_rows: one index per row", [a.shape, (idx.shape[0],)])
    out = np.zeros((n_rows, a.cols))
    np.add.at(out, idx, a.data)
    return _emit("scatter_rows", out, (a,), lambda g: (g[idx],))


def take_cols(a: Matrix, index: Sequence[int]) -> Matrix:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    shape = a.shape

    def vjp(g: FloatArray) -> tuple[FloatArray]:
        grad = np.zeros(shape)
        np.add.at(grad, (slice(None), idx), g)
        return (grad,)

    return _emit("take_cols", a.data[:, idx].reshape(shape[0], len(idx)), (a,), vjp)


_ELEMENTWISE: dict[str, Callable[..., Matrix]] = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "square": square,
    "scale": scale,
}


def elementwise(op: str, *args: Any) -> Matrix:
    """Dispatch one of add, mul, sigmoid, relu, square, scale by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Matrix) -> dict[str, FloatArray]:
    """Accumulate ∂loss/∂parameter for every parameter registered on ``tape``.

    Discrete choices taken while recording (top-k membership, rounded slot counts)
    never enter the tape, so they behave as constants here.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        return {name: g.copy() for name, g in tape.grads.items()}

    adjoints: list[Optional[FloatArray]] = [None] * len(tape.nodes)
    adjoints[loss._index] = np.ones((1, 1))
    tape.visited = []
    for index in range(loss._index, -1, -1):
        grad = adjoints[index]
        record = tape.nodes[index]
        if grad is None or record.vjp is None:
            continue
        tape.visited.append(index)
        for parent, parent_grad in zip(record.parents, record.vjp(grad)):
            if parent < 0 or parent_grad is None:
                continue
            if adjoints[parent] is None:
                adjoints[parent] = parent_grad
            else:
                adjoints[parent] = adjoints[parent] + parent_grad
        adjoints[index] = None

    for name, matrix in tape.parameters.items():
        grad = adjoints[matrix._index]
        if grad is not None:
            tape.grads[name] = tape.grads[name] + grad
    return {name: g.copy() for name, g in tape.grads.items()}


class GradientReport(BaseModel):
    """Outcome of comparing tape gradients with central differences."""

    max_relative_error: float
    worst_parameter: Optional[str] = None
    worst_index: Optional[int] = None
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    coordinates_checked: int
    step: float
    tolerance: float
    passed: bool


def _objective(f: Callable[[dict[str, Matrix]], Matrix], values: Mapping[str, FloatArray], where: tuple[str, int]) -> float:
    try:
        with no_grad():
            return as_matrix(f(bind(values))).item()
    except NumericError as exc:
        raise NumericError(f"non-finite objective ({exc.message})", coordinate=where) from exc


def check_gradients(
    f: Callable[[dict[str, Matrix]], Matrix],
    params: Mapping[str, Any],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coordinates: Optional[int] = None,
) -> GradientReport:
    """Compare ``backward`` against (f(p+step) − f(p−step))/(2·step) per coordinate.

    Relative error is |analytic − numeric| / max(1, |analytic|, |numeric|).
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    base = {name: Matrix(value).data.copy() for name, value in params.items()}

    tape = Tape()
    with tape:
        loss = as_matrix(f(bind(base)))
    analytic = backward(tape, loss)

    coords = [(name, i) for name in sorted(base) for i in range(base[name].size)]
    if max_coordinates is not None and len(coords) > max_coordinates:
        picks = np.unique(np.linspace(0, len(coords) - 1, max_coordinates).round().astype(int))
        coords = [coords[i] for i in picks]

    worst: tuple[float, str, int, float, float] = (0.0, "", -1, 0.0, 0.0)
    for name, i in coords:
        original = base[name].flat[i]
        base[name].flat[i] = original + step
        f_plus = _objective(f, base, (name, i))
        base[name].flat[i] = original - step
        f_minus = _objective(f, base, (name, i))
        base[name].flat[i] = original
        numeric = (f_plus - f_minus) / (2.0 * step)
        exact = float(analytic[name].flat[i])
        err = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
        if err >= worst[0] or worst[2] < 0:
            worst = (err, name, i, exact, numeric)

    report = GradientReport(
        max_relative_error=worst[0],
        worst_parameter=worst[1] or None,
        worst_index=worst[2] if worst[2] >= 0 else None,
        worst_analytic=worst[3],
        worst_numeric=worst[4],
        coordinates_checked=len(coords),
        step=step,
        tolerance=tol,
        passed=worst[0] <= tol,
    )
    logger.debug("gradient check: %s", report)
    return report


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return [int(v) for v in value.reshape(-1)]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


class Rng:
    """Seeded Philox stream; identical seed and split path give identical samples."""

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if int(seed) < 0:
            raise ConfigError("seed must be non-negative", key="seed")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def split(self, name: str) -> "Rng":
        """Child stream keyed by name, independent of how much this stream was used."""
        return Rng(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def uniform(self, low: float, high: float, shape: tuple[int, ...]) -> FloatArray:
        return self._generator.uniform(low, high, size=shape)

    def normal(self, std: float, shape: tuple[int, ...]) -> FloatArray:
        return self._generator.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size: Optional[int] = None) -> Any:
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int) -> npt.NDArray[np.int64]:
        """``size`` distinct indices from range(n), in ascending order."""
        return np.sort(self._generator.choice(n, size=size, replace=False))

    def get_state(self) -> dict[str, Any]:
        return {
            "algorithm": self.ALGORITHM,
            "seed": self.seed,
            "path": list(self.path),
            "bit_generator": _jsonable(self._generator.bit_generator.state),
        }

    @classmethod
    def from_state(cls, state: Mapping[str, Any]) -> "Rng":
        if state.get("algorithm") != cls.ALGORITHM:
            raise ConfigError(f"unsupported generator {state.get('algorithm')!r}", key="rng")
        rng = cls(state["seed"], state["path"])
        raw = dict(state["bit_generator"])
        inner = raw["state"]
        raw["state"] = {
            "counter": np.array(inner["counter"], dtype=np.uint64),
            "key": np.array(inner["key"], dtype=np.uint64),
        }
        raw["buffer"] = np.array(raw["buffer"], dtype=np.uint64)
        rng._generator.bit_generator.state = raw
        return rng
