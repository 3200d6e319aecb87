"""Package exceptions."""


class DomainError(ValueError):
    """An argument violates an operation's stated domain (precondition)."""


class ParseError(ValueError):
    """A serialized artifact is malformed or inconsistent with its manifest."""


class ConfigError(ValueError):
    """A run configuration violates the schema or a module constraint."""
