class LStoreError(Exception):
    pass


class ConfigError(LStoreError, ValueError):
    pass


class TailSpaceExhausted(LStoreError):
    pass


class PageFull(LStoreError):
    pass


class WriteOnceViolation(LStoreError):
    pass


class UnknownEntry(LStoreError, KeyError):
    pass


class UnknownRecord(LStoreError, KeyError):
    pass


class DuplicateKey(LStoreError):
    pass


class TxnAbort(LStoreError):
    """The transaction has been aborted and must not be used further."""


class WriteWriteConflict(TxnAbort):
    pass


class ValidationFailed(TxnAbort):
    pass


class IllegalTransition(LStoreError):
    pass


class MergeBatchError(LStoreError):
    pass


class PoisonedRead(LStoreError):
    """A reader touched a page that the epoch reclaimer already freed."""
