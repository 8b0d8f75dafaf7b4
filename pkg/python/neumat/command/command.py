"""
Subcommands built from annotated functions.

    def cmd_train(dataset: pathlib.Path, *, iters: int = 100, baseline: bool) -> None:
        ...

    group = Group()
    group.add2("train", cmd_train)
    dispatch(group)

Positional parameters become positional arguments, keyword-only parameters become
`--flags` (underscores turn into hyphens) and `bool` parameters become switches. Use
`Annotated[T, Extra(...)]` for help text, a short alias or a different flag name.

Every command also accepts `--config PATH`, a flat `key = value` file whose keys are
flag names without the leading dashes. Flags given on the command line win over the
file, which wins over the defaults in the signature.
"""

import importlib.metadata
import inspect
import logging
import textwrap
import traceback
import types
import typing

from .. import tabular
from ..prelude import *

CONFIG_FLAG = "--config"
LOG_LEVEL_ENV = "NEUMAT_LOG_LEVEL"

EXIT_USER_ERROR = 2
EXIT_INTERNAL_ERROR = 3

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

SUPPORTED_TYPES = (int, float, str, pathlib.Path)


class _Missing:
    def __repr__(self) -> str:
        return "MISSING"


MISSING: Any = _Missing()


class CmdError(Exception):
    pass


class CmdHelpError(Exception):
    """
    Raised to print the help of `target`, plus `message` as an error when it is set.
    """

    def __init__(
        self, target: Union["Command", "Group"], depth: int, message: str = ""
    ) -> None:
        super().__init__(message)
        self.target = target
        self.depth = depth
        self.message = message


class CmdVersionError(Exception):
    pass


@dataclass
class Extra:
    help: str = ""
    # parses the raw string instead of the annotated type
    converter: Optional[Callable[[str], Any]] = None
    name: str = ""
    short: str = ""


class Kind(enum.Enum):
    SWITCH = "switch"
    VALUE = "value"
    LIST = "list"


@dataclass
class Param:
    name: str
    dest: str
    kind: Kind
    required: bool
    default: Any
    help: str
    converter: Optional[Callable[[str], Any]]

    @property
    def metavar(self) -> str:
        return {Kind.SWITCH: "", Kind.VALUE: " ARG", Kind.LIST: " ARGS.."}[self.kind]

    def convert(self, raw: Any) -> Any:
        if self.converter is None or not isinstance(raw, (str, list)):
            return raw

        try:
            if isinstance(raw, list):
                items = typing.cast(List[str], raw)
                return [self.converter(item) for item in items]
            return self.converter(raw)
        except (TypeError, ValueError) as e:
            raise CmdError(f"invalid value for {self.name}: {raw!r}") from e


def _unwrap_optional(t: Any) -> Tuple[Any, bool]:
    args = typing.get_args(t)
    if typing.get_origin(t) in (Union, types.UnionType) and len(args) == 2:
        members = [a for a in args if a is not type(None)]
        if len(members) == 1:
            return members[0], True
    return t, False


def _show_default(default: Any) -> bool:
    return not (default is MISSING or default is None or default is False)


def infer_param(p: inspect.Parameter) -> Tuple[Param, Extra, bool]:
    """
    Reads one function parameter. Returns the parameter, its `Extra` and whether it is
    a flag (as opposed to a positional argument).
    """
    if p.kind is inspect.Parameter.VAR_POSITIONAL:
        raise CmdError("`*args` is not supported; use a `List[...]` parameter")
    if p.kind is inspect.Parameter.VAR_KEYWORD:
        raise CmdError("`**kwargs` is not supported")
    if p.annotation is inspect.Parameter.empty:
        raise CmdError("missing type annotation")

    t = p.annotation
    extra = Extra()
    if typing.get_origin(t) is Annotated:
        t, extra = typing.get_args(t)[:2]

    t, optional = _unwrap_optional(t)
    is_list = typing.get_origin(t) is list
    if is_list:
        t = typing.get_args(t)[0]

    has_default = p.default is not inspect.Parameter.empty
    default = p.default if has_default else MISSING

    if t is bool:
        if optional or is_list:
            raise CmdError("switches must be plain `bool`")
        if has_default and p.default is not False:
            raise CmdError("switches must default to False")
        kind = Kind.SWITCH
        is_flag = True
        default = False
    else:
        if extra.converter is None and t not in SUPPORTED_TYPES:
            raise CmdError(f"type `{t!r}` is not supported")
        kind = Kind.LIST if is_list else Kind.VALUE
        is_flag = p.kind is inspect.Parameter.KEYWORD_ONLY

    if not is_flag and (has_default or extra.name or extra.short):
        raise CmdError("positional arguments take no default or flag name")

    if kind is not Kind.SWITCH and default is MISSING and optional:
        default = None

    help = extra.help
    if is_flag and _show_default(default):
        if isinstance(default, pathlib.Path):
            shown = default.as_posix()
        else:
            shown = repr(default)
        help = f"{help} (default: {shown})".strip()

    if is_flag:
        name = extra.name or "--" + p.name.replace("_", "-")
    else:
        name = p.name

    param = Param(
        name=name,
        dest=p.name,
        kind=kind,
        required=kind is not Kind.SWITCH and default is MISSING,
        default=default,
        help=help,
        converter=extra.converter or (None if kind is Kind.SWITCH else t),
    )
    return param, extra, is_flag


class Command:
    def __init__(
        self,
        handler: Callable[..., Any],
        *,
        help: str = "",
        program: str = "",
        less_logging: bool = True,
    ) -> None:
        self.handler = handler
        self.help = help
        self.program = program
        # long-running commands log progress at INFO by default
        self.less_logging = less_logging
        self.positionals: List[Param] = []
        self.flags: Dict[str, Param] = {}
        self.aliases: Dict[str, str] = {}

    @classmethod
    def from_function(
        cls,
        f: Callable[..., Any],
        *,
        help: str = "",
        program: str = "",
        less_logging: bool = True,
    ) -> "Command":
        doc = inspect.getdoc(f)
        cmd = cls(
            f,
            help=help or (doc.strip().splitlines()[0] if doc else ""),
            program=program,
            less_logging=less_logging,
        )
        for name, p in inspect.signature(f).parameters.items():
            try:
                param, extra, is_flag = infer_param(p)
                if is_flag:
                    cmd.add_flag(param)
                else:
                    cmd.add_positional(param)
                if extra.short:
                    cmd.add_alias(extra.short, param.name)
            except CmdError as e:
                where = f"function: {getattr(f, '__name__', f)!s}, param: {name}"
                raise CmdError(f"{e} ({where})") from e

        cmd.add_flag(
            Param(
                name=CONFIG_FLAG,
                dest="",
                kind=Kind.VALUE,
                required=False,
                default=None,
                help="key-value file of flag defaults",
                converter=str,
            )
        )
        return cmd

    def add_flag(self, param: Param) -> None:
        name = param.name
        if not name.startswith("--") or len(name) < 3:
            raise CmdError(f"flag names start with two hyphens: {name}")
        if name in self.flags or name in ("--help", "--version"):
            raise CmdError(f"flag name is taken: {name}")
        self.flags[name] = param

    def add_positional(self, param: Param) -> None:
        if self.positionals and self.positionals[-1].kind is Kind.LIST:
            raise CmdError(f"a list argument must be the last positional: {param.name}")
        if any(p.name == param.name for p in self.positionals):
            raise CmdError(f"duplicate argument name: {param.name}")
        self.positionals.append(param)

    def add_alias(self, short: str, name: str) -> None:
        if len(short) != 2 or short[0] != "-" or not short[1].isalpha():
            raise CmdError(f"short flags are a hyphen and one letter: {short}")
        if short in self.aliases or short == "-h":
            raise CmdError(f"short flag is taken: {short}")
        self.aliases[short] = name


class Group:
    def __init__(self, *, help: str = "", program: str = "") -> None:
        self.subcmds: Dict[str, Union[Command, "Group"]] = {}
        self.help = help
        self.program = program

    def add(self, name: str, cmd_or_group: Union[Command, "Group"]) -> None:
        if name in self.subcmds:
            raise CmdError(f"duplicate subcommand: {name}")
        self.subcmds[name] = cmd_or_group

    def add2(
        self,
        name: str,
        f: Callable[..., Any],
        help: str = "",
        program: str = "",
        less_logging: bool = True,
    ) -> None:
        self.add(
            name,
            Command.from_function(
                f, help=help, program=program, less_logging=less_logging
            ),
        )


@dataclass
class ParseResult:
    handler: Callable[..., Any]
    args: List[Any]
    kwargs: StrDict
    less_logging: bool


def _looks_like_flag(s: str) -> bool:
    # '-' alone and negative numbers are values
    if len(s) < 2 or not s.startswith("-"):
        return False
    try:
        float(s)
        return False
    except ValueError:
        return True


def _parse_bool(name: str, raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise CmdError(f"{name} takes true or false, not {raw!r}")


def _flag_name(key: str) -> str:
    return key if key.startswith("--") else "--" + key.replace("_", "-")


class _ArgvParser:
    """
    One pass over the arguments of a single command.
    """

    def __init__(self, cmd: Command, argv: List[str], start: int) -> None:
        self.cmd = cmd
        self.argv = argv
        self.start = start
        self.pos = start
        self.flag_values: Dict[str, Any] = {}
        self.positional_values: List[Any] = []
        self.only_positionals = False

    def _peek(self) -> Optional[str]:
        return self.argv[self.pos] if self.pos < len(self.argv) else None

    def _take_list(self, name: str) -> List[str]:
        out: List[str] = []
        while (arg := self._peek()) is not None and (
            self.only_positionals or not _looks_like_flag(arg)
        ):
            out.append(arg)
            self.pos += 1
        if not out:
            raise CmdError(f"expected an argument after {name}")
        return out

    def _flag(self, arg: str) -> None:
        name, eq, inline = arg.partition("=")
        name = self.cmd.aliases.get(name, name)
        param = self.cmd.flags.get(name)
        if param is None:
            raise CmdError(f"unknown flag: {name}")
        if name in self.flag_values:
            raise CmdError(f"flag was repeated: {name}")

        self.pos += 1
        if param.kind is Kind.SWITCH:
            value: Any = _parse_bool(name, inline) if eq else True
        elif eq:
            value = inline.split(",") if param.kind is Kind.LIST else inline
        elif param.kind is Kind.LIST:
            value = self._take_list(name)
        else:
            arg = self._peek()
            if arg is None or _looks_like_flag(arg):
                raise CmdError(f"expected an argument after {name}")
            value = arg
            self.pos += 1
        self.flag_values[name] = value

    def _positional(self, arg: str) -> None:
        index = len(self.positional_values)
        if index >= len(self.cmd.positionals):
            raise CmdError(f"extra argument: {arg}")

        param = self.cmd.positionals[index]
        if param.kind is Kind.LIST:
            self.positional_values.append(self._take_list(param.name))
        else:
            self.positional_values.append(arg)
            self.pos += 1

    def _merge_config(self, path: str) -> None:
        for kv in read_key_values(path):
            name = _flag_name(kv.key)
            param = self.cmd.flags.get(name)
            if param is None or name == CONFIG_FLAG:
                where = f"{path}, line {kv.lineno}"
                raise CmdError(f"unknown config key: {kv.key} ({where})")
            if name in self.flag_values:
                continue

            if param.kind is Kind.SWITCH:
                self.flag_values[name] = _parse_bool(kv.key, kv.value)
            elif param.kind is Kind.LIST:
                self.flag_values[name] = kv.value.split()
            else:
                self.flag_values[name] = kv.value

    def _collect_flags(self) -> StrDict:
        kwargs: StrDict = {}
        missing: List[str] = []
        for name, param in self.cmd.flags.items():
            if name == CONFIG_FLAG:
                continue
            if name in self.flag_values:
                kwargs[param.dest] = param.convert(self.flag_values[name])
            elif param.required:
                missing.append(name)
            else:
                kwargs[param.dest] = param.default

        if missing:
            s = "" if len(missing) == 1 else "s"
            raise CmdError(f"missing mandatory flag{s}: {', '.join(sorted(missing))}")
        return kwargs

    def run(self) -> ParseResult:
        while (arg := self._peek()) is not None:
            if self.only_positionals:
                self._positional(arg)
            elif arg == "--":
                self.only_positionals = True
                self.pos += 1
            elif arg in ("-h", "--help"):
                raise CmdHelpError(self.cmd, self.start)
            elif arg == "--version":
                raise CmdVersionError()
            elif _looks_like_flag(arg):
                self._flag(arg)
            else:
                self._positional(arg)

        config = self.flag_values.pop(CONFIG_FLAG, None)
        if config is not None:
            self._merge_config(config)

        missing = [p.name for p in self.cmd.positionals[len(self.positional_values) :]]
        if missing:
            s = "" if len(missing) == 1 else "s"
            raise CmdError(f"missing argument{s}: {', '.join(missing)}")

        kwargs = self._collect_flags()
        args = [
            param.convert(raw)
            for param, raw in zip(self.cmd.positionals, self.positional_values)
        ]
        return ParseResult(
            handler=self.cmd.handler,
            args=args,
            kwargs=kwargs,
            less_logging=self.cmd.less_logging,
        )


def parse_argv(
    target: Union[Command, Group], argv: List[str], start: int = 1
) -> ParseResult:
    """
    Resolves subcommands, then parses the rest of `argv` for the selected command.
    """
    pos = start
    while isinstance(target, Group):
        if not target.subcmds:
            raise CmdError("group is empty")
        if pos >= len(argv):
            raise CmdHelpError(target, pos, "too few arguments")

        arg = argv[pos]
        if arg in ("-h", "--help"):
            raise CmdHelpError(target, pos)
        if arg == "--version":
            raise CmdVersionError()

        sub = target.subcmds.get(arg)
        if sub is None:
            if _looks_like_flag(arg):
                raise CmdHelpError(target, pos, f"expected subcommand, got {arg}")
            raise CmdHelpError(target, pos, f"unknown subcommand: {arg}")
        target = sub
        pos += 1

    return _ArgvParser(target, argv, pos).run()


def log_level_from_env(less_logging: bool) -> int:
    raw = os.environ.get(LOG_LEVEL_ENV, "").strip().lower()
    if not raw:
        return logging.WARNING if less_logging else logging.INFO
    if raw not in LOG_LEVELS:
        raise InputError("unknown log level", variable=LOG_LEVEL_ENV, value=raw)
    return LOG_LEVELS[raw]


def report_error(e: BaseException) -> int:
    """
    Prints a failed command's exception to stderr and returns the exit code.
    """
    if isinstance(e, InputError):
        eprint(f"error: {e.to_human_str()}")
        return EXIT_USER_ERROR
    if isinstance(e, CmdError):
        eprint(f"error: {e}")
        return EXIT_USER_ERROR

    eprint(traceback.format_exc(), end="", flush=True)
    eprint()
    eprint("The command failed due to an internal error.")
    if isinstance(e, MatError):
        eprint()
        eprint(textwrap.indent(e.to_human_str(), prefix="  "))
    return EXIT_INTERNAL_ERROR


def dispatch(
    target: Union[Command, Group],
    *,
    argv: Optional[List[str]] = None,
    bail_on_error: bool = True,
    log_init: Optional[Callable[[int], None]] = None,
) -> Any:
    """
    Parses `argv` and calls the selected handler.

    With `bail_on_error`, failures exit the process: 2 for command-line and input
    errors, 3 for anything else. Otherwise exceptions propagate to the caller.
    """
    argv = sys.argv if argv is None else argv

    try:
        result = parse_argv(target, argv)
    except CmdHelpError as e:
        program_name = target.program or os.path.basename(argv[0])
        program = " ".join([program_name] + argv[1 : e.depth])
        print(get_help_text(e.target, program=program))
        if not e.message:
            return None
        if not bail_on_error:
            raise CmdError(e.message) from e
        eprint(f"error: {e.message}")
        sys.exit(EXIT_USER_ERROR)
    except CmdVersionError:
        print(get_version())
        return None
    except (CmdError, InputError) as e:
        if not bail_on_error:
            raise
        text = e.to_human_str() if isinstance(e, InputError) else str(e)
        eprint(f"Command-line error: {text}")
        sys.exit(EXIT_USER_ERROR)

    try:
        if log_init is not None:
            log_init(log_level_from_env(result.less_logging))
        return result.handler(*result.args, **result.kwargs)
    except Exception as e:
        if not bail_on_error:
            raise
        sys.exit(report_error(e))


def _flag_rows(cmd: Command) -> List[List[str]]:
    shorts = {name: short for short, name in cmd.aliases.items()}
    rows: List[List[str]] = []
    ordered = sorted(cmd.flags.items(), key=lambda kv: (not kv[1].required, kv[0]))
    for name, param in ordered:
        label = name + param.metavar
        if name in shorts:
            label = f"{shorts[name]}, {label}"
        if not param.required:
            label = f"[{label}]"
        rows.append([f"  {label}", param.help])
    return rows


def get_help_text(target: Union[Command, Group], *, program: str) -> str:
    table = tabular.Table()
    if isinstance(target, Group):
        usage = f"Usage: {program} SUBCMD"
        section = "Subcommands:"
        for name, sub in sorted(target.subcmds.items()):
            summary = sub.help.splitlines()[0] if sub.help else ""
            table.row([f"  {name}", summary])
    else:
        usage = f"Usage: {program} ..."
        section = "Arguments:"
        for param in target.positionals:
            table.row([f"  {param.name}", param.help])
        for row in _flag_rows(target):
            table.row(row)

    lines = [usage, ""]
    if target.help:
        wrapper = textwrap.TextWrapper(initial_indent="  ", subsequent_indent="  ")
        lines.extend(wrapper.fill(line) for line in target.help.splitlines())
        lines.append("")
    if table.nrows():
        lines.extend([section, ""] + table.to_list(spacing=4) + [""])
    return "\n".join(lines)


def get_version() -> str:
    try:
        return importlib.metadata.version("neumat")
    except importlib.metadata.PackageNotFoundError:
        return "<unknown>"
