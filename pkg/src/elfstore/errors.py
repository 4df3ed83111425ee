"""Exception hierarchy shared by all services, with stable wire codes."""


class ElfStoreError(Exception):
    """Base error; `code` is the kebab-case identifier used on the wire."""

    code = "internal"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message


class InvalidConfigError(ElfStoreError):
    code = "invalid-config"


class InvalidArgumentError(ElfStoreError):
    code = "invalid-argument"


class NotFoundError(ElfStoreError):
    code = "not-found"


class WrongRoleError(ElfStoreError):
    code = "wrong-role"


class AlreadyExistsError(ElfStoreError):
    code = "already-exists"


class StaleVersionError(ElfStoreError):
    code = "stale-version"

    def __init__(self, message: str = "", current_version: int | None = None):
        super().__init__(message)
        self.current_version = current_version


class LeaseUnavailableError(ElfStoreError):
    code = "lease-unavailable"


class LeaseLostError(ElfStoreError):
    code = "lease-lost"


class LeaseInvalidError(ElfStoreError):
    code = "lease-invalid"


class NoEdgesError(ElfStoreError):
    code = "no-edges"


class NoCapacityError(ElfStoreError):
    """A single fog partition cannot host the replica."""

    code = "no-capacity"


class InsufficientCapacityError(ElfStoreError):
    """The cluster as a whole cannot satisfy the replica bounds."""

    code = "insufficient-capacity"


class IntegrityError(ElfStoreError):
    code = "integrity-error"


class InvalidMergeError(ElfStoreError):
    code = "invalid-merge"


class PutFailedError(ElfStoreError):
    code = "put-failed"


class PartialUpdateError(ElfStoreError):
    code = "partial-update"

    def __init__(self, message: str = "", failed_fogs: list | None = None):
        super().__init__(message)
        self.failed_fogs = failed_fogs or []


class UnavailableError(ElfStoreError):
    code = "unavailable"


_BY_CODE = {
    cls.code: cls
    for cls in [
        ElfStoreError,
        InvalidConfigError,
        InvalidArgumentError,
        NotFoundError,
        WrongRoleError,
        AlreadyExistsError,
        StaleVersionError,
        LeaseUnavailableError,
        LeaseLostError,
        LeaseInvalidError,
        NoEdgesError,
        NoCapacityError,
        InsufficientCapacityError,
        IntegrityError,
        InvalidMergeError,
        PutFailedError,
        PartialUpdateError,
        UnavailableError,
    ]
}


def error_from_code(code: str, message: str = "") -> ElfStoreError:
    """Rebuild the exception a remote peer raised, defaulting to the base type."""
    return _BY_CODE.get(code, ElfStoreError)(message)
