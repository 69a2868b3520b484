"""Sample ingestion, synthetic data, non-IID partitioning and train/test splitting.

Samples are stored densely: a `SampleSet` is an n x p feature matrix plus n integer labels and stands for the
"sample list" that the rest of the package works on.
"""
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, TextIO, Tuple, Union

import numpy as np
import pandas as pd
import toml

from fedsim.errors import (EmptyBatch, IndexOutOfRange, InfeasiblePartition, InvalidParam, LabelError, ParseError,
                           TooFewSamples)

logger = logging.getLogger(__name__)

# client id -> label -> number of samples
PartitionManifest = Dict[int, Dict[int, int]]


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class SampleSet:
    """A dense collection of labelled samples."""
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

        if features.ndim == 1:
            features = features.reshape(len(labels), -1)

        assert features.shape[0] == labels.shape[0], 'Every sample needs exactly one label.'

        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    def __len__(self):
        return self.labels.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for x, y in zip(self.features, self.labels):
            yield Sample(x, int(y))

    def __getitem__(self, index) -> 'SampleSet':
        """Select a subset of samples by an index array, mask or slice."""
        return SampleSet(self.features[index], self.labels[index])

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @staticmethod
    def from_samples(samples: Iterable[Sample], num_features: Optional[int] = None) -> 'SampleSet':
        samples = list(samples)

        if not samples:
            return SampleSet.empty(num_features or 0)

        return SampleSet(np.stack([np.asarray(s.features, dtype=np.float64) for s in samples]),
                         np.array([s.label for s in samples], dtype=np.int64))

    @staticmethod
    def empty(num_features: int) -> 'SampleSet':
        return SampleSet(np.zeros((0, num_features)), np.zeros(0, dtype=np.int64))

    @staticmethod
    def concatenate(parts: List['SampleSet']) -> 'SampleSet':
        return SampleSet(np.concatenate([part.features for part in parts]),
                         np.concatenate([part.labels for part in parts]))


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    samples: SampleSet
    weight: float

    def __len__(self):
        return len(self.samples)


@dataclass
class FederatedDataset:
    train_shards: List[ClientShard]
    test_set: SampleSet
    num_features: int
    num_classes: int
    _train_set: Optional[SampleSet] = field(default=None, repr=False)

    def __post_init__(self):
        assert len(self.train_shards) >= 1, 'A federation needs at least one client.'
        assert abs(sum(shard.weight for shard in self.train_shards) - 1.0) <= 1e-12, \
            'Shard weights must sum to one.'

    @property
    def num_clients(self) -> int:
        return len(self.train_shards)

    @property
    def train_set(self) -> SampleSet:
        """The pooled training samples of all clients, in ascending client id order."""
        if self._train_set is None:
            shards = sorted(self.train_shards, key=lambda shard: shard.client_id)
            self._train_set = SampleSet.concatenate([shard.samples for shard in shards])

        return self._train_set


def _weighted_shards(parts: List[Tuple[int, SampleSet]]) -> List[ClientShard]:
    total = sum(len(samples) for _, samples in parts)

    return [ClientShard(client_id, samples, len(samples) / total) for client_id, samples in parts]


# LIBSVM / CSV #

def _lines(source: Union[str, bytes, Iterable]) -> Iterator[str]:
    """Yield the text lines of `source`, decoding bytes as UTF-8 one line at a time."""
    if isinstance(source, bytes):
        source = source.splitlines(keepends=True)
    elif isinstance(source, str):
        source = io.StringIO(source)

    lines = iter(source)
    line_number = 0

    while True:
        line_number += 1

        try:
            line = next(lines)
        except StopIteration:
            return
        except UnicodeDecodeError as e:
            raise ParseError('invalid UTF-8: %s' % e.reason, line_number)

        if isinstance(line, bytes):
            try:
                line = line.decode('utf-8')
            except UnicodeDecodeError as e:
                raise ParseError('invalid UTF-8: %s' % e.reason, line_number)

        yield line


def _parse_label(token: str, line_number: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise LabelError('label \'%s\' is not a number' % token, line_number)

    if value == -1.0:
        return 0

    if not math.isfinite(value) or value < 0 or value != int(value):
        raise LabelError('label \'%s\' is not a non-negative integer or ±1' % token, line_number)

    return int(value)


def parse_libsvm(source: Union[str, bytes, Iterable], num_features: int) -> SampleSet:
    """Parse samples in the sparse LIBSVM text format ("label idx:val idx:val ...").

    Indices are 1-based, unlisted features are zero and the binary labels {-1, +1} are remapped to {0, 1}. Blank lines
    and lines starting with '#' are skipped.

    :param source: The text, as a string, bytes or an iterable of lines (e.g. an open file).
    :param num_features: The number of features of each sample.
    :return: The parsed samples.
    """
    features = []
    labels = []

    for line_number, line in enumerate(_lines(source), start=1):
        line = line.strip()

        if not line or line.startswith('#'):
            continue

        tokens = line.split()
        label = _parse_label(tokens[0], line_number)
        x = np.zeros(num_features)

        for token in tokens[1:]:
            index, sep, value = token.partition(':')

            try:
                if not sep:
                    raise ValueError
                index = int(index)
                value = float(value)
            except ValueError:
                raise ParseError('token \'%s\' does not match \'int:real\'' % token, line_number)

            if not math.isfinite(value):
                raise ParseError('value in \'%s\' is not finite' % token, line_number)

            if index < 1 or index > num_features:
                raise IndexOutOfRange('feature index %d outside of [1, %d]' % (index, num_features), line_number)

            x[index - 1] = value

        features.append(x)
        labels.append(label)

    if not features:
        return SampleSet.empty(num_features)

    return SampleSet(np.stack(features), np.array(labels))


def emit_libsvm(samples: SampleSet, stream: TextIO):
    """Write samples in the LIBSVM text format, listing only non-zero features.

    :param samples: The samples to write.
    :param stream: A writable text stream.
    """
    for x, label in samples:
        entries = ' '.join('%d:%.17g' % (j + 1, value) for j, value in enumerate(x) if value != 0.0)
        stream.write(('%d %s' % (label, entries)).rstrip() + '\n')


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def parse_csv(source: Union[str, TextIO], num_features: Optional[int] = None) -> SampleSet:
    """Parse samples from CSV rows of the form "label,f1,f2,...". A header row is optional.

    :param source: A path or an open text stream.
    :param num_features: The expected number of features, checked if given.
    :return: The parsed samples.
    """
    if isinstance(source, str):
        with open(source, 'r') as f:
            text = f.read()
    else:
        text = source.read()

    first_line = next((line for line in text.splitlines() if line.strip()), '')
    has_header = not all(_is_number(token) for token in first_line.split(','))

    try:
        df = pd.read_csv(io.StringIO(text), header=0 if has_header else None, dtype=str, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        return SampleSet.empty(num_features or 0)

    offset = 2 if has_header else 1
    labels = [_parse_label(str(token).strip(), i + offset) for i, token in enumerate(df.iloc[:, 0])]

    try:
        features = df.iloc[:, 1:].astype(np.float64).to_numpy()
    except ValueError as e:
        raise ParseError('non-numeric feature value (%s)' % e)

    if num_features is not None and features.shape[1] != num_features:
        raise ParseError('expected %d features per row, found %d' % (num_features, features.shape[1]))

    if not np.all(np.isfinite(features)):
        raise ParseError('feature values must be finite')

    return SampleSet(features, np.array(labels))


# Synthetic data #

def synth_blobs(seed: int, num_classes: int, num_features: int, n_total: int, spread: float) -> SampleSet:
    """Generate Gaussian blobs, one unit-norm random centre per class.

    Class counts are balanced to within one sample (the first `n_total mod num_classes` classes get the extra
    samples) and the samples are shuffled.

    :param seed: The random seed.
    :param num_classes: The number of classes (blobs).
    :param num_features: The dimension of each sample.
    :param n_total: The total number of samples.
    :param spread: The standard deviation of the isotropic noise around each centre.
    :return: The generated samples.
    """
    if spread <= 0:
        raise InvalidParam('spread must be positive, got %g' % spread)

    if num_classes < 1 or num_features < 1:
        raise InvalidParam('num_classes and num_features must be positive')

    if n_total < num_classes:
        raise InvalidParam('n_total (%d) must be at least num_classes (%d)' % (n_total, num_classes))

    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((num_classes, num_features))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)

    base, extra = divmod(n_total, num_classes)
    counts = [base + (1 if c < extra else 0) for c in range(num_classes)]
    labels = np.repeat(np.arange(num_classes), counts)
    features = centres[labels] + spread * rng.standard_normal((n_total, num_features))

    order = rng.permutation(n_total)

    return SampleSet(features[order], labels[order])


# Partitioning #

def _num_classes(samples: SampleSet) -> int:
    return int(samples.labels.max()) + 1 if len(samples) else 0


def partition_label_skew(samples: SampleSet, num_clients: int, labels_per_client: int,
                         seed: int) -> List[ClientShard]:
    """Split samples across clients so that each client only holds a few labels.

    Labels are dealt to clients from a sequence of shuffled label permutations, so the first permutation guarantees
    every label a holder. Each label's samples are then split among its holders with Dirichlet-drawn (unequal)
    proportions, every holder getting at least one sample when possible.

    :param samples: The samples to partition.
    :param num_clients: The number of clients N.
    :param labels_per_client: The maximum number of distinct labels per client.
    :param seed: The random seed.
    :return: N shards with ids 0..N-1 and weights proportional to their sizes.
    """
    if num_clients < 1 or labels_per_client < 1:
        raise InvalidParam('num_clients and labels_per_client must be positive')

    if len(samples) == 0:
        raise EmptyBatch('cannot partition an empty sample set')

    labels = np.unique(samples.labels)

    if labels_per_client > _num_classes(samples):
        raise InvalidParam('labels_per_client (%d) exceeds the number of classes (%d)'
                           % (labels_per_client, _num_classes(samples)))

    if num_clients * labels_per_client < len(labels):
        raise InfeasiblePartition('%d clients x %d labels cannot cover %d labels'
                                  % (num_clients, labels_per_client, len(labels)))

    rng = np.random.default_rng(seed)

    sequence = []

    while len(sequence) < num_clients * labels_per_client:
        sequence.extend(rng.permutation(labels).tolist())

    holders: Dict[int, List[int]] = {int(label): [] for label in labels}

    for client in range(num_clients):
        for label in sorted(set(sequence[client * labels_per_client:(client + 1) * labels_per_client])):
            holders[label].append(client)

    assignment: Dict[int, List[np.ndarray]] = {client: [] for client in range(num_clients)}

    for label in sorted(holders):
        clients = holders[label]
        indices = rng.permutation(np.flatnonzero(samples.labels == label))
        n = len(indices)

        guaranteed = min(1, n // len(clients))
        proportions = rng.dirichlet(np.ones(len(clients)))
        rest = n - guaranteed * len(clients)
        counts = np.floor(proportions * rest).astype(int) + guaranteed
        # Hand the rounding remainder out one by one, largest proportion first.
        for i in np.argsort(-proportions, kind='stable')[:n - counts.sum()]:
            counts[i] += 1

        start = 0

        for client, count in zip(clients, counts):
            assignment[client].append(indices[start:start + count])
            start += count

    parts = []

    for client in range(num_clients):
        indices = np.sort(np.concatenate(assignment[client])) if assignment[client] else np.zeros(0, dtype=int)

        if len(indices) == 0:
            raise InfeasiblePartition('client %d received no samples' % client)

        parts.append((client, samples[indices]))

    return _weighted_shards(parts)


def load_manifest(path: str) -> PartitionManifest:
    """Load a partition manifest.

    The manifest is a TOML document with one table per client mapping labels to sample counts, e.g.::

        [clients.2]
        0 = 580
        7 = 7293

    :param path: The manifest file.
    :return: The manifest as a mapping of client id to (label, count) pairs, preserving label order.
    """
    with open(path, 'r') as f:
        document = toml.load(f)

    if 'clients' not in document:
        raise ParseError('manifest %s has no [clients] table' % path)

    manifest = {}

    for client, counts in document['clients'].items():
        try:
            manifest[int(client)] = {int(label): int(count) for label, count in counts.items()}
        except (ValueError, AttributeError):
            raise ParseError('manifest entry for client \'%s\' must map integer labels to integer counts' % client)

    return manifest


def partition_from_manifest(samples: SampleSet, manifest: PartitionManifest, seed: int) -> List[ClientShard]:
    """Build client shards whose per-label sample counts are exactly those of a manifest.

    Samples are drawn per label without replacement; samples that no client asks for are left out.

    :param samples: The pool of samples to draw from.
    :param manifest: Client id -> label -> count.
    :param seed: The random seed used to pick which samples of a label go where.
    :return: One shard per manifest client, in ascending client id order.
    """
    rng = np.random.default_rng(seed)
    pools = {int(label): rng.permutation(np.flatnonzero(samples.labels == label)).tolist()
             for label in np.unique(samples.labels)}

    parts = []

    for client in sorted(manifest):
        chosen = []

        for label, count in manifest[client].items():
            pool = pools.get(label, [])

            if count < 0 or count > len(pool):
                raise InfeasiblePartition('client %d wants %d samples of label %d but only %d are left'
                                          % (client, count, label, len(pool)))

            chosen.extend(pool[:count])
            del pool[:count]

        if not chosen:
            raise InfeasiblePartition('client %d receives no samples' % client)

        parts.append((client, samples[np.array(chosen)]))

    return _weighted_shards(parts)


# Splitting #

def train_test_split(samples: SampleSet, ratio: float, seed: int) -> Tuple[SampleSet, SampleSet]:
    """Randomly split samples into a train and a test part.

    The train part has round(ratio·n) samples, clamped so that neither part is empty.

    :param samples: The samples to split.
    :param ratio: The fraction of samples to train on, in (0, 1).
    :param seed: The random seed.
    :return: The pair (train, test).
    """
    if not 0 < ratio < 1:
        raise InvalidParam('ratio must lie in (0, 1), got %g' % ratio)

    n = len(samples)

    if n < 2:
        raise TooFewSamples('need at least 2 samples to split, got %d' % n)

    n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)

    return samples[np.sort(order[:n_train])], samples[np.sort(order[n_train:])]


def build_federated_dataset(samples: SampleSet, num_clients: int, labels_per_client: int, split_ratio: float,
                            seed: int, manifest: Optional[PartitionManifest] = None,
                            num_classes: Optional[int] = None) -> FederatedDataset:
    """Partition samples across clients and split every client's data into train and test parts.

    :param samples: All available samples.
    :param num_clients: The number of clients (ignored when a manifest is given).
    :param labels_per_client: The label budget per client (ignored when a manifest is given).
    :param split_ratio: The train fraction used on each client.
    :param seed: The random seed.
    :param manifest: An optional partition manifest that replaces the random label-skew procedure.
    :param num_classes: The number of classes; inferred from the labels if not given.
    :return: The federated dataset.
    """
    seeds = np.random.SeedSequence(seed).generate_state(2)

    if manifest is not None:
        shards = partition_from_manifest(samples, manifest, int(seeds[0]))
    else:
        shards = partition_label_skew(samples, num_clients, labels_per_client, int(seeds[0]))

    train_parts = []
    test_parts = []

    for shard in shards:
        train, test = train_test_split(shard.samples, split_ratio, int(seeds[1]) + shard.client_id)
        train_parts.append((shard.client_id, train))
        test_parts.append(test)

    logger.info('Partitioned %d samples across %d clients (sizes: %s).', len(samples), len(shards),
                [len(train) for _, train in train_parts])

    return FederatedDataset(train_shards=_weighted_shards(train_parts),
                            test_set=SampleSet.concatenate(test_parts),
                            num_features=samples.num_features,
                            num_classes=num_classes if num_classes is not None else _num_classes(samples))


def placeholder_dataset(num_clients: int) -> FederatedDataset:
    """Create an equally weighted federation of single-sample clients for models that ignore their samples (the
    quadratic objective)."""
    if num_clients < 1:
        raise InvalidParam('need at least one client, got %d' % num_clients)

    sample = SampleSet(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))

    return FederatedDataset(train_shards=[ClientShard(i, sample, 1.0 / num_clients) for i in range(num_clients)],
                            test_set=SampleSet.empty(1), num_features=1, num_classes=0)
