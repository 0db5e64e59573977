class HermitError(Exception):
    """Base class for every error hermit reports to the user."""


class StoreError(HermitError):
    pass


class InvalidPathError(StoreError):
    pass


class IntegrityError(StoreError):
    pass


class CollisionError(IntegrityError):
    pass


class ArchiveError(HermitError):
    pass


class RecipeError(HermitError):
    pass


class ResolutionError(RecipeError):
    def __init__(self, message, suggestions=()):
        super().__init__(message)
        self.suggestions = list(suggestions)


class DerivationError(HermitError):
    pass


class BuildError(HermitError):
    def __init__(self, message, log=b""):
        super().__init__(message)
        self.log = log


class FetchHashMismatch(BuildError):
    pass


class NonDeterministicBuild(BuildError):
    pass


class ProfileError(HermitError):
    pass


class ProtocolError(HermitError):
    pass


class DaemonError(HermitError):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class DaemonNotRunning(DaemonError):
    def __init__(self, socket_path):
        super().__init__("DaemonNotRunning",
                         f"daemon not running (no listener at {socket_path})")
        self.socket_path = socket_path
