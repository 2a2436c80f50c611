from typing import Any, Union

import hashlib
import json


class TrustProbeError(Exception):
    """ Base of every error raised for bad inputs or impossible block combinations. """


class DatasetError(TrustProbeError):
    pass


class NoiseError(TrustProbeError):
    pass


class ModelError(TrustProbeError):
    pass


class ProbeError(TrustProbeError):
    pass


class EnsembleError(TrustProbeError):
    pass


class AggregationError(TrustProbeError):
    pass


class DetectorError(TrustProbeError):
    pass


class PipelineError(TrustProbeError):
    pass


class EvaluationError(TrustProbeError):
    pass


class ConfigError(TrustProbeError):
    pass


class MatchException(Exception):
    def __init__(self, value: Any) -> None:
        super().__init__(f'Failed to match value: {value}')


SeedKey = Union[int, str]


def derive_seed(master_seed: int, *keys: SeedKey) -> int:
    """
    Derive an independent child seed from a master seed and a path of keys,
    e.g. `derive_seed(seed, 'bootstrap', 3)`. Stable across processes and platforms.
    """
    payload = ':'.join([str(master_seed)] + [str(k) for k in keys]).encode('utf-8')
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], 'little') & 0x7FFFFFFFFFFFFFFF


def stable_hash(value: Any, length: int = 16) -> str:
    """ Hex prefix of the SHA-256 of the canonical JSON rendering of `value`. """
    rendered = json.dumps(value, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(rendered.encode('utf-8')).hexdigest()[:length]
