class RoutedAttentionError(Exception):
    """Base error. `category` is the machine-readable name reported by the CLI and API."""

    category = "internal"
    exit_code = 1
    status_code = 500

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigurationError(RoutedAttentionError):
    category = "configuration"
    exit_code = 2
    status_code = 400


class DimensionError(RoutedAttentionError):
    category = "dimension"
    exit_code = 3
    status_code = 400


class NumericError(RoutedAttentionError):
    category = "numeric"
    exit_code = 4
    status_code = 500


class DataError(RoutedAttentionError):
    category = "data"
    exit_code = 5
    status_code = 400


class CheckpointError(RoutedAttentionError):
    category = "checkpoint"
    exit_code = 6
    status_code = 500


class ContractError(RoutedAttentionError):
    category = "contract"
    exit_code = 7
    status_code = 500
