"""Exception hierarchy shared across the package."""


class FedCustomError(Exception):
    pass


class DimensionError(FedCustomError, ValueError):
    pass


class NumericError(FedCustomError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, client_id, detail=""):
        self.client_id = client_id
        msg = f"client {client_id} diverged"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class InputError(FedCustomError, ValueError):
    pass


class LengthError(InputError):
    pass


class ConfigurationError(FedCustomError, ValueError):
    pass


class ValidationError(ConfigurationError):
    """Raised when an experiment config fails validation.

    ``fields`` lists every offending dotted key.
    """

    def __init__(self, problems):
        self.problems = dict(problems)
        self.fields = sorted(self.problems)
        lines = [f"{k}: {v}" for k, v in sorted(self.problems.items())]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))


class GenerationError(FedCustomError, RuntimeError):
    pass


class PartitionError(FedCustomError, ValueError):
    pass
