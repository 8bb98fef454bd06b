"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`BirdSedError` and
carries an ``exit_code`` used by the command line front end:
2 for configuration problems, 3 for bad input data, 4 for runtime and
numerical failures.
"""


class BirdSedError(Exception):
    exit_code = 4


class ConfigError(BirdSedError, ValueError):
    exit_code = 2


class DataError(BirdSedError, ValueError):
    exit_code = 3


class NumericError(BirdSedError, RuntimeError):
    exit_code = 4


# audio_io
class MalformedHeader(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class TruncatedData(DataError):
    pass


class EmptyChannels(DataError):
    pass


# ingest
class NetworkError(BirdSedError, IOError):
    exit_code = 3


class ArchiveSchemaChanged(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class UnknownSpeciesDirectory(DataError):
    pass


# synth
class EmptySpeciesPool(DataError):
    def __init__(self, species_id):
        super().__init__(f"no pool entries for species id {species_id}")
        self.species_id = species_id


class ZeroLengthBackground(DataError):
    pass


class PlanOutOfRange(DataError):
    pass


# labelgrid
class InvalidInterval(DataError):
    pass


class SpeciesIdOutOfRange(DataError):
    pass


class FrameCountOverflow(DataError):
    pass


# features
class DegenerateBand(ConfigError):
    pass


class ShapeMismatch(DataError):
    pass


class BandCountMismatch(DataError):
    pass


# crnn
class AllMasked(DataError):
    pass


class EmptySplit(DataError):
    pass


class DivergedLoss(NumericError):
    pass


class ClipTooShort(DataError):
    pass


# eval
class SpeciesListMismatch(DataError):
    pass
