"""Per-round metrics, communication and memory accounting, rounds-to-accuracy extraction and record files."""
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from fedsim.base import Algorithm
from fedsim.errors import InvalidParam, RecordIOError, UnknownAlgorithm

CSV_COLUMNS = ['round', 'train_loss', 'test_accuracy', 'grad_norm', 'bytes_up', 'bytes_down', 'enforcement',
               'wall_ms']


@dataclass(frozen=True)
class RoundRecord:
    """The metrics of one communication round, evaluated at the global model after the round.

    `bytes_up`/`bytes_down` follow the per-link convention (one client's traffic, so their sum is
    `bits_per_round()`); `total_bytes_up`/`total_bytes_down` are the aggregate traffic over all participants.
    `test_accuracy` is NaN for models that do not classify.
    """
    round: int
    train_loss: float
    test_accuracy: float
    global_grad_norm: float
    bytes_up: int = 0
    bytes_down: int = 0
    messages_up: int = 0
    messages_down: int = 0
    enforcement_triggered: bool = False
    wall_ms: float = 0.0
    total_bytes_up: int = 0
    total_bytes_down: int = 0

    def __post_init__(self):
        assert self.round >= 1, 'Rounds are numbered from 1.'
        assert min(self.bytes_up, self.bytes_down, self.messages_up, self.messages_down,
                   self.total_bytes_up, self.total_bytes_down) >= 0, 'Traffic counters cannot be negative.'

    @property
    def bytes_per_round(self) -> int:
        return self.bytes_up + self.bytes_down


@dataclass(frozen=True)
class CommModel:
    """Communication constants of a model with `param_count` parameters.

    n_c is FedAvg's traffic per round, one model down and one model up.
    """
    param_count: int
    bytes_per_scalar: int = 4

    def __post_init__(self):
        if self.param_count < 1 or self.bytes_per_scalar < 1:
            raise InvalidParam('param_count and bytes_per_scalar must be positive')

    @property
    def n_c(self) -> int:
        return 2 * self.param_count * self.bytes_per_scalar

    @property
    def model_bytes(self) -> int:
        return self.param_count * self.bytes_per_scalar


def _algorithm(algorithm: Union[Algorithm, str]) -> Algorithm:
    try:
        return Algorithm(algorithm)
    except ValueError:
        raise UnknownAlgorithm('unknown algorithm \'%s\'' % algorithm)


def bits_per_round(algorithm: Union[Algorithm, str], comm: CommModel) -> int:
    """Communication per round, in bytes, of one client link.

    FedAvg, FedSGD and FedSSO exchange one model each way (n_c); Scaffold and FedDANE twice that; FedNL is the
    uncompressed full-Hessian estimate d·n_c.

    :param algorithm: The algorithm.
    :param comm: The communication constants.
    :return: The number of bytes.
    """
    algorithm = _algorithm(algorithm)

    if algorithm in (Algorithm.FEDAVG, Algorithm.FEDSGD, Algorithm.FEDSSO):
        return comm.n_c

    if algorithm in (Algorithm.SCAFFOLD, Algorithm.FEDDANE):
        return 2 * comm.n_c

    return comm.param_count * comm.n_c


def memory_estimate(algorithm: Union[Algorithm, str], d: int) -> Tuple[int, int]:
    """Server and client memory, in parameter units, of an algorithm on a model with d parameters.

    :return: The pair (server units, client units).
    """
    if d < 1:
        raise InvalidParam('d must be at least 1, got %d' % d)

    algorithm = _algorithm(algorithm)

    if algorithm in (Algorithm.FEDAVG, Algorithm.FEDSGD):
        return d, d

    if algorithm in (Algorithm.SCAFFOLD, Algorithm.FEDDANE):
        return 2 * d, 2 * d

    if algorithm == Algorithm.FEDNL:
        return 2 * d * d + 2 * d, d * d + 2 * d

    return d * d + 4 * d, d


def rounds_to_accuracy(records: Sequence[RoundRecord], threshold: float) -> Optional[int]:
    """
    :return: The first round whose test accuracy reaches `threshold`, or None if it is never reached.
    """
    for record in records:
        if record.test_accuracy >= threshold:
            return record.round

    return None


def rounds_to_loss(records: Sequence[RoundRecord], target: float) -> Optional[int]:
    """
    :return: The first round whose train loss is at or below `target`, or None if it is never reached.
    """
    for record in records:
        if record.train_loss <= target:
            return record.round

    return None


def total_bytes(records: Sequence[RoundRecord], rounds: Optional[int]) -> Optional[int]:
    """Communication per round × rounds, using the per-round bytes recorded by the run."""
    if rounds is None or not records:
        return None

    return sum(record.bytes_per_round for record in records[:rounds])


# Record files #

def _csv_frame(records: Sequence[RoundRecord]) -> pd.DataFrame:
    df = pd.DataFrame([{
        'round': r.round,
        'train_loss': r.train_loss,
        'test_accuracy': r.test_accuracy,
        'grad_norm': r.global_grad_norm,
        'bytes_up': r.bytes_up,
        'bytes_down': r.bytes_down,
        'enforcement': int(r.enforcement_triggered),
        'wall_ms': r.wall_ms,
    } for r in records], columns=CSV_COLUMNS)

    return df


def emit_records(records: Sequence[RoundRecord], path: str, format: str = 'csv'):
    """Write run records to a CSV or JSONL file.

    CSV holds the plot-ready columns in `CSV_COLUMNS` with 17 significant digits; JSONL holds every field of
    `RoundRecord`, one object per line.

    :param records: The records, ordered by round.
    :param path: The file to (over)write.
    :param format: Either 'csv' or 'jsonl'.
    """
    format = format.lower()

    if format not in ('csv', 'jsonl'):
        raise InvalidParam('unknown record format \'%s\'' % format)

    try:
        if format == 'csv':
            _csv_frame(records).to_csv(path, index=False, float_format='%.17g', na_rep='nan', lineterminator='\n')
        else:
            with open(path, 'w') as f:
                for record in records:
                    f.write(json.dumps(asdict(record)) + '\n')
    except OSError as e:
        raise RecordIOError(path, e.strerror or str(e))


def read_records(path: str) -> List[RoundRecord]:
    """Read records written by `emit_records()`. The format is taken from the file extension.

    Fields that the CSV format does not carry are left at their defaults.
    """
    try:
        if path.endswith('.jsonl'):
            names = {f.name for f in fields(RoundRecord)}

            with open(path) as f:
                return [RoundRecord(**{k: v for k, v in json.loads(line).items() if k in names})
                        for line in f if line.strip()]

        df = pd.read_csv(path, float_precision='round_trip')
    except OSError as e:
        raise RecordIOError(path, e.strerror or str(e))

    missing = set(CSV_COLUMNS) - set(df.columns)

    if missing:
        raise RecordIOError(path, 'missing columns %s' % sorted(missing))

    return [RoundRecord(round=int(row['round']), train_loss=float(row['train_loss']),
                        test_accuracy=float(row['test_accuracy']), global_grad_norm=float(row['grad_norm']),
                        bytes_up=int(row['bytes_up']), bytes_down=int(row['bytes_down']),
                        enforcement_triggered=bool(row['enforcement']), wall_ms=float(row['wall_ms']))
            for _, row in df.iterrows()]


# Reports #

def summary_table(runs: Dict[str, Sequence[RoundRecord]], thresholds: Sequence[float],
                  reference: Optional[float] = None) -> pd.DataFrame:
    """Build a comparison table with one row per run: the rounds needed to reach each accuracy threshold ('-' if
    never reached), the total bytes spent to reach the reference threshold and the final loss and accuracy.

    :param runs: The records of each run, keyed by run label.
    :param thresholds: The accuracy thresholds.
    :param reference: The threshold used for the total bytes; defaults to the largest threshold.
    :return: The summary as a DataFrame indexed by run label.
    """
    if reference is None and thresholds:
        reference = max(thresholds)

    rows = {}

    for label, records in runs.items():
        row = {}

        for threshold in thresholds:
            rounds = rounds_to_accuracy(records, threshold)
            row['rounds@%g' % threshold] = '-' if rounds is None else rounds

        spent = total_bytes(records, rounds_to_accuracy(records, reference)) if reference is not None else None
        row['total_bytes'] = '-' if spent is None else spent
        row['rounds'] = len(records)
        row['final_loss'] = records[-1].train_loss if records else math.nan
        row['final_accuracy'] = records[-1].test_accuracy if records else math.nan
        rows[label] = row

    return pd.DataFrame.from_dict(rows, orient='index')


def memory_table(d: int, bytes_per_scalar: int = 4) -> pd.DataFrame:
    """Communication and memory of every known algorithm on a model with d parameters."""
    comm = CommModel(d, bytes_per_scalar)
    rows = {}

    for algorithm in Algorithm:
        server, client = memory_estimate(algorithm, d)
        rows[algorithm.display_name] = {
            'bytes_per_round': bits_per_round(algorithm, comm),
            'server_memory': server,
            'client_memory': client,
        }

    return pd.DataFrame.from_dict(rows, orient='index')
