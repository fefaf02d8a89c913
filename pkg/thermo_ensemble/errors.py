#
# errors.py
#

from typing import Iterable


class ThermoEnsembleError(Exception):
    """ Base class for every error raised by :mod:`thermo_ensemble`. """


class ContractViolation(ThermoEnsembleError, ValueError):
    """ A precondition of an operation was not met by its caller. """


class NumericError(ThermoEnsembleError, ArithmeticError):
    """ A computation produced a non-finite value.

        Parameters
        ----------
        message: :class:`str`
            Description of the failure.
        node: :class:`str` | `None`
            Identity of the operation or tape node where the value appeared.
    """

    def __init__(self, message: str, node: str | None = None) -> None:
        if node is not None:
            message = f"{message} (at {node})"
        super().__init__(message)
        self.node = node


class SimulationBlowUp(NumericError):
    """ The simulated room state left the plausibility bound. """


class FittingError(ThermoEnsembleError, ValueError):
    """ A base model could not be fitted to the supplied data. """


class ConfigError(ThermoEnsembleError, ValueError):
    """ The configuration failed validation.

        Parameters
        ----------
        message: :class:`str`
            Description of the failure.
        keys: Iterable[:class:`str`]
            Dotted names of every offending configuration key.
    """

    def __init__(self, message: str, keys: Iterable[str] = ()) -> None:
        self.keys = list(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class MissingArtifactError(ThermoEnsembleError, FileNotFoundError):
    """ A command needs an artifact that an earlier command has not produced.

        Parameters
        ----------
        path: :class:`str`
            The missing artifact.
        producer: :class:`str`
            The command that produces it.
    """

    def __init__(self, path: str, producer: str) -> None:
        super().__init__(f"Missing artifact '{path}'; run `thermo-ens {producer}` first.")
        self.path = path
        self.producer = producer


class ControllerError(ThermoEnsembleError, RuntimeError):
    """ The MPC controller could not evaluate its prediction model. """


class EndOfStream(ThermoEnsembleError):
    """ A stream cursor has no further step with a known next state. """
