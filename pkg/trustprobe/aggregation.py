from abc import ABCMeta, abstractmethod
from enum import Enum, unique
from trustprobe.base import AggregationError
from trustprobe.ensembling import ProbeStream
from typing import Dict, Optional

import numpy as np


@unique
class AggregatorEffect(Enum):
    # Output keeps the probe's orientation
    Preserve = 'preserve'
    # Output is suspicion-oriented whatever the probe says
    Suspicion = 'suspicion'
    # Output flips the probe's orientation
    Invert = 'invert'


class Aggregator(metaclass=ABCMeta):
    """
    Streaming reducer from a probe stream to one value per row. Rows without a
    defined value (never out of bag, say) come out as NaN.
    """

    name: str = ''
    effect: AggregatorEffect = AggregatorEffect.Preserve
    needs_masks: bool = False
    needs_binary: bool = False
    needs_order: bool = False

    @abstractmethod
    def reduce(self, stream: ProbeStream) -> np.ndarray:
        raise NotImplementedError()

    def __call__(self, stream: ProbeStream) -> np.ndarray:
        if self.needs_binary and not stream.binary:
            raise AggregationError(f'aggregator {self.name} needs a binary probe, got {stream.probe_name}')
        if self.needs_order and not stream.ordered:
            raise AggregationError(f'aggregator {self.name} needs an ordered (progressive) stream')
        return self.reduce(stream)


def _empty(name: str) -> AggregationError:
    return AggregationError(f'aggregator {name} got an empty probe stream')


def _require_mask(name: str, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        raise AggregationError(f'aggregator {name} needs in-bag masks but the stream has none')
    return mask


class SumAggregator(Aggregator):
    name = 'sum'

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        total: Optional[np.ndarray] = None
        for matrix, _ in stream:
            part = matrix.values.sum(axis=1)
            total = part if total is None else total + part
        if total is None:
            raise _empty(self.name)
        return total


class MeanAggregator(Aggregator):
    name = 'mean'

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        total: Optional[np.ndarray] = None
        cells = 0
        for matrix, _ in stream:
            part = matrix.values.sum(axis=1)
            total = part if total is None else total + part
            cells += matrix.width
        if total is None:
            raise _empty(self.name)
        return total / cells


class OobMeanAggregator(Aggregator):
    """ Mean over the members that did not train on the row. """

    name = 'oob_mean'
    needs_masks = True

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        total = np.zeros(stream.n_rows)
        count = np.zeros(stream.n_rows)
        seen = False
        for matrix, mask in stream:
            out_of_bag = ~_require_mask(self.name, mask)
            total += np.where(out_of_bag, matrix.values.mean(axis=1), 0.0)
            count += out_of_bag
            seen = True
        if not seen:
            raise _empty(self.name)
        out = np.full(stream.n_rows, np.nan)
        defined = count > 0
        out[defined] = total[defined] / count[defined]
        return out


class VarianceAggregator(Aggregator):
    """ Population variance across members, averaged over probe columns (Welford updates). """

    name = 'variance'
    effect = AggregatorEffect.Suspicion

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        count = 0
        mean: Optional[np.ndarray] = None
        m2: Optional[np.ndarray] = None
        for matrix, _ in stream:
            values = matrix.values
            count += 1
            if mean is None or m2 is None:
                mean = values.copy()
                m2 = np.zeros_like(values)
                continue
            delta = values - mean
            mean = mean + delta / count
            m2 = m2 + delta * (values - mean)
        if m2 is None:
            raise _empty(self.name)
        return np.maximum(m2 / count, 0.0).mean(axis=1)


class ForgetCountAggregator(Aggregator):
    """
    Number of 0 -> 1 transitions between consecutive members. Rows no member
    ever gets right score the member count, above any reachable transition
    count, so they rank as the most forgotten.
    """

    name = 'forget_count'
    effect = AggregatorEffect.Suspicion
    needs_binary = True
    needs_order = True

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        previous: Optional[np.ndarray] = None
        counts: Optional[np.ndarray] = None
        learned: Optional[np.ndarray] = None
        members = 0
        for matrix, _ in stream:
            current = matrix.values[:, 0] > 0.5
            if previous is None:
                counts = np.zeros(stream.n_rows)
                learned = current.copy()
            else:
                counts = counts + (~previous & current)
                learned = learned | current
            previous = current
            members += 1
        if counts is None:
            raise _empty(self.name)
        counts[~learned] = members
        return counts



class VoteAggregator(Aggregator):
    """ Fraction of members agreeing with the label. """

    name = 'vote'
    needs_binary = True

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        total: Optional[np.ndarray] = None
        members = 0
        for matrix, _ in stream:
            part = matrix.values[:, 0]
            total = part.copy() if total is None else total + part
            members += 1
        if total is None:
            raise _empty(self.name)
        return total / members


class InOutDiffAggregator(Aggregator):
    """ Mean in-bag value minus mean out-of-bag value; NaN unless a row has both. """

    name = 'in_out_diff'
    effect = AggregatorEffect.Invert
    needs_masks = True

    def reduce(self, stream: ProbeStream) -> np.ndarray:
        in_total = np.zeros(stream.n_rows)
        in_count = np.zeros(stream.n_rows)
        out_total = np.zeros(stream.n_rows)
        out_count = np.zeros(stream.n_rows)
        seen = False
        for matrix, mask in stream:
            in_bag = _require_mask(self.name, mask)
            values = matrix.values.mean(axis=1)
            in_total += np.where(in_bag, values, 0.0)
            in_count += in_bag
            out_total += np.where(in_bag, 0.0, values)
            out_count += ~in_bag
            seen = True
        if not seen:
            raise _empty(self.name)
        out = np.full(stream.n_rows, np.nan)
        defined = (in_count > 0) & (out_count > 0)
        out[defined] = in_total[defined] / in_count[defined] - out_total[defined] / out_count[defined]
        return out


AGGREGATOR_LOOKUP: Dict[str, Aggregator] = {a.name: a for a in [
    SumAggregator(),
    MeanAggregator(),
    OobMeanAggregator(),
    VarianceAggregator(),
    ForgetCountAggregator(),
    VoteAggregator(),
    InOutDiffAggregator()
]}


def get_aggregator(name: str) -> Aggregator:
    aggregator = AGGREGATOR_LOOKUP.get(name)
    if aggregator is None:
        raise AggregationError(f'unknown aggregator {name!r}, expected one of {sorted(AGGREGATOR_LOOKUP)}')
    return aggregator
