import json
from typing import IO, Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from .error import ParameterError

# Decimal serialization used by every file format; 17 significant digits
# round-trips an IEEE double exactly.
REAL_FORMAT = ".17g"

PROBABILITY_TOLERANCE = 1e-9


def json_encode(data: Union[Dict, List], pretty: bool = False) -> str:
    data = to_builtin(data)
    if not pretty:
        return json.dumps(data, separators=(",", ":"))

    return json.dumps(data, indent=2, separators=(",", ": "))


def to_builtin(value: Any) -> Any:
    """Convert numpy scalars and arrays into JSON-encodable builtins."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def format_real(value: float) -> str:
    return format(float(value), REAL_FORMAT)


def parse_real(text: str) -> float:
    """Parse a decimal real written by format_real.

    Raises:
        ValueError: If the text is not a real number
    """
    return float(text.strip())


class RecordWriter:
    """Line-delimited structured records preceded by a one-line schema header.

    The header is itself a record: ``{"schema": name, "fields": [...]}``.
    Records are written in call order with compact JSON, so two runs with the
    same inputs produce byte-identical files.
    """

    def __init__(self, stream: IO[str], schema: str, fields: Sequence[str]):
        self.stream = stream
        self.schema = schema
        self.fields = list(fields)
        self.count = 0
        self.stream.write(
            json_encode({"schema": schema, "fields": self.fields}) + "\n")

    def write(self, record: Dict[str, Any]) -> None:
        unknown = set(record) - set(self.fields)
        if unknown:
            raise ParameterError(
                f"Record has fields outside schema {self.schema!r}: "
                f"{sorted(unknown)}"
            )
        ordered = {name: record.get(name) for name in self.fields}
        self.stream.write(json_encode(ordered) + "\n")
        self.count += 1

    def write_all(self, records: Iterable[Dict[str, Any]]) -> None:
        for record in records:
            self.write(record)


def read_records(stream: IO[str]) -> List[Dict[str, Any]]:
    """Read records written by RecordWriter, skipping the schema header."""
    lines = [line for line in stream.read().splitlines() if line.strip()]
    if not lines:
        return []
    header = json.loads(lines[0])
    if "schema" not in header:
        return [header] + [json.loads(line) for line in lines[1:]]
    return [json.loads(line) for line in lines[1:]]


def spawn_seeds(seed: int, n: int) -> List[np.random.SeedSequence]:
    """Independent per-stream seed sequences derived from one seed.

    Stream ``i`` depends only on ``(seed, i)``, so partitioning work across
    streams keeps results deterministic regardless of execution order.
    """
    return np.random.SeedSequence(seed).spawn(n)


def check_probability_vector(
    weights: Sequence[float], name: str = "weights"
) -> np.ndarray:
    """Validate a probability vector.

    Args:
        weights: Candidate distribution
        name: Name used in error messages

    Returns:
        The weights as a float array

    Raises:
        ParameterError: If entries are negative or do not sum to one
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ParameterError(f"{name} must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ParameterError(f"{name} must be finite and non-negative")
    if abs(w.sum() - 1.0) > PROBABILITY_TOLERANCE:
        raise ParameterError(
            f"{name} must sum to 1 within {PROBABILITY_TOLERANCE}, "
            f"got {w.sum()!r}"
        )
    return w


def check_stochastic_rows(
    matrix: np.ndarray, name: str, tol: float = PROBABILITY_TOLERANCE
) -> None:
    """Validate that the last axis of ``matrix`` holds distributions.

    Raises:
        ParameterError: If any row is negative or does not sum to one
    """
    if not np.all(np.isfinite(matrix)) or np.any(matrix < 0):
        raise ParameterError(f"{name} rows must be finite and non-negative")
    sums = matrix.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > tol:
        raise ParameterError(
            f"{name} rows must sum to 1 within {tol}, worst deviation {worst!r}"
        )
