class RetrievalError(Exception):
    """Base error; exit_code is what the CLI returns for it"""

    exit_code = 2


class UsageError(RetrievalError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(RetrievalError):
    exit_code = 2


class FormatError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class MissingIdError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyVocabularyError(DataError):
    pass


class EmptyRelevanceError(DataError):
    pass


class BatchConstructionError(DataError):
    pass


class EmptySentenceError(DataError):
    pass


class NumericalError(RetrievalError):
    exit_code = 3


class DivergenceError(NumericalError):
    pass


class GradientCheckError(NumericalError):
    pass


class SelectionTieError(NumericalError):
    pass


class DegenerateEmbeddingError(NumericalError):
    pass
