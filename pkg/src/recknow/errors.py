"""Exception types raised across the pipeline."""


class RecknowError(Exception):
    """Base class for all package errors."""


class UnknownFormat(RecknowError):
    pass


class MalformedInput(RecknowError):
    pass


class EmptyResult(RecknowError):
    pass


class InsufficientItems(RecknowError):
    pass


class UnknownItem(RecknowError, KeyError):
    pass


class SelfPair(UnknownItem):
    """Relevance of an item with itself is undefined."""


class UnknownKey(RecknowError, KeyError):
    pass


class DivergedTraining(RecknowError):
    pass


class NoPaths(RecknowError):
    pass


class NoPositivePairs(RecknowError):
    pass


class MissingPlaceholder(RecknowError):
    pass


class GatewayError(RecknowError):
    """A completion request failed for good."""


class RateLimited(GatewayError):
    pass


class CacheMiss(RecknowError):
    pass


class Timeout(GatewayError):
    pass


class MissingIndex(RecknowError):
    pass


class ConfigError(RecknowError):
    pass


class UpstreamMissing(RecknowError):
    pass


class StaleUpstream(RecknowError):
    pass
