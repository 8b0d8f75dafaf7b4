from .command import (
    CONFIG_FLAG,
    EXIT_INTERNAL_ERROR,
    EXIT_USER_ERROR,
    LOG_LEVEL_ENV,
    CmdError,
    Command,
    Extra,
    Group,
    dispatch,
    get_help_text,
    log_level_from_env,
    parse_argv,
    report_error,
)

__all__ = [
    "CONFIG_FLAG",
    "EXIT_INTERNAL_ERROR",
    "EXIT_USER_ERROR",
    "LOG_LEVEL_ENV",
    "CmdError",
    "Command",
    "Extra",
    "Group",
    "dispatch",
    "get_help_text",
    "log_level_from_env",
    "parse_argv",
    "report_error",
]
