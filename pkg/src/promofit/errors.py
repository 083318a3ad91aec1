"""Exception types shared across the package.

ConfigError marks bad user input (CLI exit code 2); RuntimeAbort marks a
failure inside an otherwise valid run (CLI exit code 3).
"""


class ConfigError(ValueError):
    pass


class RuntimeAbort(RuntimeError):
    pass
