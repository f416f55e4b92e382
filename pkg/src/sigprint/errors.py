"""Exception hierarchy shared across the toolkit."""


class SigprintError(Exception):
    """Base class for all data errors raised by sigprint."""


# volume
class UnknownFormat(SigprintError):
    pass


class CorruptHeader(SigprintError):
    pass


class NonFinite(SigprintError):
    pass


class IoFailure(SigprintError):
    pass


# scale space / descriptors
class VolumeTooSmall(SigprintError):
    pass


class DegenerateGradient(SigprintError):
    pass


class CorruptSignature(SigprintError):
    pass


# index
class EmptyCollection(SigprintError):
    pass


class UnresolvableRef(SigprintError):
    pass


class EmptyForeignSet(SigprintError):
    pass


# jaccard
class NotIndexed(SigprintError):
    pass


class EmptySignature(SigprintError):
    pass


# curation
class DuplicateImageId(SigprintError):
    pass


class MissingMetadata(SigprintError):
    pass


class LabelCoverageGap(SigprintError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("no label/metadata for: " + ", ".join(map(str, self.missing)))


class EmptySample(SigprintError):
    pass


class InsufficientDistribution(SigprintError):
    pass
