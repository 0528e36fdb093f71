"""Exception types shared across the package."""


class BuildMemError(Exception):
    """Base class for all buildmem errors."""


class MissingColumn(BuildMemError):
    def __init__(self, name):
        super().__init__(f"missing column: {name!r}")
        self.name = name


class ParseError(BuildMemError):
    def __init__(self, row, field, value=None):
        super().__init__(f"row {row}: cannot parse field {field!r} ({value!r})")
        self.row = row
        self.field = field
        self.value = value


class EmptyDataset(BuildMemError):
    pass


class DegenerateSplit(BuildMemError):
    pass


class EmptyInput(BuildMemError):
    pass


class NotFitted(BuildMemError):
    pass


class InvalidParams(BuildMemError, ValueError):
    pass


class SchemaMismatch(BuildMemError):
    pass


class SingleClass(BuildMemError):
    pass


class LengthMismatch(BuildMemError, ValueError):
    pass


class AllZeroActuals(BuildMemError, ValueError):
    pass


class NonPositiveReq(BuildMemError, ValueError):
    pass


class CardinalityMismatch(BuildMemError):
    pass


class ArtifactInvalid(BuildMemError):
    pass
