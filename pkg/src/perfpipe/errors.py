"""Exception taxonomy shared by all pipeline modules.

Configuration problems (exit code 2 territory) derive from ConfigError;
operational failures of a pipeline stage (exit code 1) derive from
StageError.
"""

from __future__ import annotations


class PerfPipeError(Exception):
    """Base class for all framework errors."""


class ConfigError(PerfPipeError):
    """Bad or unusable configuration: parse failures, contract violations."""


class MissingKeyError(ConfigError):
    """A configuration path is absent from user, out, and default trees."""

    def __init__(self, path: str, referred_from: str | None = None):
        self.path = path
        self.referred_from = referred_from
        if referred_from is None:
            msg = f"no value at configuration path {path!r}"
        else:
            msg = (
                f"reference at {referred_from!r} points to {path!r}, "
                "which has no value"
            )
        super().__init__(msg)


class ReferenceCycleError(ConfigError):
    """The reference graph contains a cycle."""

    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("reference cycle: " + " -> ".join(self.cycle))


class ShapeError(ConfigError):
    """A value has the wrong shape for the requested rendering."""


class OutFileContractError(ConfigError):
    """An out-file body violates the concrete-values-only contract."""


class StageError(PerfPipeError):
    """A pipeline stage ran and failed."""


class BootstrapError(StageError):
    pass


class ProvisioningError(StageError):
    pass


class TeardownError(StageError):
    pass


class ChannelError(StageError):
    """Command execution or file transfer on a host failed outright."""


class ChannelTimeout(ChannelError):
    """A command exceeded its timeout; carries whatever output was captured."""

    def __init__(self, msg: str, stdout: str = "", stderr: str = ""):
        super().__init__(msg)
        self.stdout = stdout
        self.stderr = stderr


class WorkloadSetupError(StageError):
    pass


class DeployError(StageError):
    pass


class TaskError(StageError):
    """A lifecycle hook failed; remaining tests are aborted.

    Carries the outcomes recorded before the abort so that artifact
    collection can still run.
    """

    def __init__(self, msg: str, outcomes: list | None = None):
        super().__init__(msg)
        self.outcomes = outcomes or []


class AnalysisError(StageError):
    pass
