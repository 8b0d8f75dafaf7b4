import contextlib
import io
import logging
import pprint
import tempfile
import textwrap
from unittest import mock

from expecttest import TestCase

from ..prelude import *
from .command import (
    CmdError,
    CmdHelpError,
    Command,
    Extra,
    Group,
    dispatch,
    get_help_text,
    log_level_from_env,
    parse_argv,
    report_error,
)


def parse(target: Any, *, argv: List[str]) -> Any:
    # `dispatch` exits the process on errors, which we don't want in tests
    result = parse_argv(target, argv)
    return result.handler(*result.args, **result.kwargs)


def train_like(
    dataset: pathlib.Path,
    out: pathlib.Path,
    *,
    iters: int = 30000,
    batch_size: int = 16384,
    learning_rate: float = 1e-3,
    baseline: bool,
    threads: int = 1,
    log: Optional[pathlib.Path] = None,
) -> Any:
    return dict(
        dataset=dataset,
        out=out,
        iters=iters,
        batch_size=batch_size,
        learning_rate=learning_rate,
        baseline=baseline,
        threads=threads,
        log=log,
    )


def write_config(text: str) -> str:
    f = tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False)
    with f:
        f.write(textwrap.dedent(text))
    return f.name


class Test(TestCase):
    def test_from_function(self):
        cmd = Command.from_function(train_like)
        dataset = cmd.positionals[0]
        self.assertEqual(("dataset", True), (dataset.name, dataset.required))
        self.assertIs(pathlib.Path, dataset.converter)
        self.assertExpectedInline(
            pprint.pformat(cmd.flags["--batch-size"]),
            """\
Param(name='--batch-size',
      dest='batch_size',
      kind=<Kind.VALUE: 'value'>,
      required=False,
      default=16384,
      help='(default: 16384)',
      converter=<class 'int'>)""",
        )
        self.assertEqual(
            [
                "--baseline",
                "--batch-size",
                "--config",
                "--iters",
                "--learning-rate",
                "--log",
                "--threads",
            ],
            sorted(cmd.flags),
        )

        result = dispatch(
            cmd, argv=["neumat", "a.mbtfq", "b.nmat"], bail_on_error=False
        )
        self.assertExpectedInline(
            pprint.pformat(result),
            """\
{'baseline': False,
 'batch_size': 16384,
 'dataset': PosixPath('a.mbtfq'),
 'iters': 30000,
 'learning_rate': 0.001,
 'log': None,
 'out': PosixPath('b.nmat'),
 'threads': 1}""",
        )

        result = dispatch(
            cmd,
            argv=[
                "neumat",
                "--iters=10",
                "a.mbtfq",
                "--baseline",
                "--learning-rate",
                "0.5",
                "b.nmat",
                "--log",
                "loss.tsv",
            ],
            bail_on_error=False,
        )
        self.assertEqual(10, result["iters"])
        self.assertEqual(0.5, result["learning_rate"])
        self.assertTrue(result["baseline"])
        self.assertEqual(pathlib.Path("loss.tsv"), result["log"])

    def test_negative_numbers_are_not_flags(self):
        def f(x: float) -> float:
            return x

        self.assertEqual(-1.5, dispatch(Command.from_function(f), argv=["p", "-1.5"]))

    def test_list_flag_and_positional(self):
        def f(names: List[str], *, sizes: List[int] = []) -> Any:
            return dict(names=names, sizes=sizes)

        cmd = Command.from_function(f)
        args = parse(cmd, argv=["p", "a", "b", "--sizes", "1", "2"])
        self.assertEqual({"names": ["a", "b"], "sizes": [1, 2]}, args)

        args = parse(cmd, argv=["p", "--sizes=3,4", "--", "--weird"])
        self.assertEqual({"names": ["--weird"], "sizes": [3, 4]}, args)

    def test_short_alias(self):
        def f(*, out: Annotated[str, Extra(short="-o")] = "a.pfm") -> str:
            return out

        cmd = Command.from_function(f)
        self.assertEqual("b.png", dispatch(cmd, argv=["p", "-o", "b.png"]))
        self.assertEqual("a.pfm", dispatch(cmd, argv=["p"]))

    def test_renamed_flag(self):
        def f(*, iterations: Annotated[int, Extra(name="--iters")] = 3) -> int:
            return iterations

        cmd = Command.from_function(f)
        self.assertEqual(7, dispatch(cmd, argv=["p", "--iters", "7"]))

    def test_parse_errors(self):
        cmd = Command.from_function(train_like)

        with self.assertRaisesRegex(CmdError, "unknown flag: --bogus"):
            parse(cmd, argv=["p", "a", "b", "--bogus"])

        with self.assertRaisesRegex(CmdError, "missing argument: out"):
            parse(cmd, argv=["p", "a"])

        with self.assertRaisesRegex(CmdError, "extra argument: c"):
            parse(cmd, argv=["p", "a", "b", "c"])

        with self.assertRaisesRegex(CmdError, "flag was repeated: --iters"):
            parse(cmd, argv=["p", "a", "b", "--iters", "1", "--iters", "2"])

        with self.assertRaisesRegex(CmdError, "expected an argument after --iters"):
            parse(cmd, argv=["p", "a", "b", "--iters"])

        with self.assertRaisesRegex(CmdError, "invalid value for --iters: 'ten'"):
            parse(cmd, argv=["p", "a", "b", "--iters", "ten"])

    def test_unsupported_signatures(self):
        def star_args(*args: int) -> None:
            pass

        def no_annotation(x) -> None:  # type: ignore
            pass

        def optional_bool(*, x: Optional[bool]) -> None:
            pass

        def positional_default(x: int = 1) -> None:
            pass

        for f in [star_args, no_annotation, optional_bool, positional_default]:
            with self.assertRaises(CmdError):
                Command.from_function(f)

    def test_config_file(self):
        config = write_config(
            """\
            # overnight run
            iters = 500
            batch-size = 64
            learning_rate = 0.01
            baseline = true
            threads = 2
            """
        )
        cmd = Command.from_function(train_like)
        args = parse(
            cmd, argv=["p", "a", "b", "--config", config, "--threads", "8"]
        )
        self.assertEqual(500, args["iters"])
        self.assertEqual(64, args["batch_size"])
        self.assertEqual(0.01, args["learning_rate"])
        self.assertTrue(args["baseline"])
        # the command line wins over the file
        self.assertEqual(8, args["threads"])
        self.assertNotIn("config", args)

    def test_config_file_unknown_key(self):
        config = write_config(
            """\
            iters = 5

            iterations = 10
            """
        )
        cmd = Command.from_function(train_like)
        with self.assertRaisesRegex(CmdError, r"unknown config key: iterations .*3"):
            parse(cmd, argv=["p", "a", "b", "--config", config])

    def test_config_file_bad_values(self):
        cmd = Command.from_function(train_like)

        config = write_config("baseline = maybe\n")
        with self.assertRaises(CmdError):
            parse(cmd, argv=["p", "a", "b", "--config", config])

        config = write_config("just some words\n")
        with self.assertRaises(ConfigError):
            parse(cmd, argv=["p", "a", "b", "--config", config])

        with self.assertRaises(InputError):
            parse(cmd, argv=["p", "a", "b", "--config", "/nonexistent/neumat.cfg"])

    def test_group(self):
        def gen(preset: str) -> str:
            return f"gen {preset}"

        def inspect(path: str) -> str:
            return f"inspect {path}"

        group = Group(help="Neural material tools.")
        group.add2("generate", gen, help="Generate a dataset.")
        group.add2("inspect", inspect)

        self.assertEqual("gen flat", dispatch(group, argv=["p", "generate", "flat"]))
        self.assertEqual("inspect x", dispatch(group, argv=["p", "inspect", "x"]))

        with self.assertRaises(CmdHelpError):
            parse(group, argv=["p", "frobnicate"])
        with self.assertRaises(CmdHelpError):
            parse(group, argv=["p"])
        with self.assertRaises(CmdError):
            group.add2("inspect", inspect)

    def test_help_text(self):
        def render(
            scene: pathlib.Path,
            *,
            out: Annotated[str, Extra(help="output image", short="-o")] = "out.pfm",
            reference: Annotated[bool, Extra(help="render the oracle")],
        ) -> None:
            pass

        cmd = Command.from_function(render, help="Render a scene.")
        self.assertExpectedInline(
            get_help_text(cmd, program="neumat render"),
            """\
Usage: neumat render ...

  Render a scene.

Arguments:

  scene
  [--config ARG]     key-value file of flag defaults
  [-o, --out ARG]    output image (default: 'out.pfm')
  [--reference]      render the oracle
""",
        )

    def test_help_exits_cleanly(self):
        cmd = Command.from_function(train_like)
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            self.assertIsNone(dispatch(cmd, argv=["neumat", "--help"]))
        self.assertIn("Usage: neumat ...", out.getvalue())

    def test_exit_codes(self):
        def fails_on_input() -> None:
            raise InputError("dataset not found", path="x.mbtfq")

        def fails_internally() -> None:
            raise InvariantError("weights went NaN", iteration=3)

        err = io.StringIO()
        with contextlib.redirect_stderr(err):
            with self.assertRaises(SystemExit) as cm:
                dispatch(Command.from_function(fails_on_input), argv=["p"])
            self.assertEqual(2, cm.exception.code)

            with self.assertRaises(SystemExit) as cm:
                dispatch(Command.from_function(fails_internally), argv=["p"])
            self.assertEqual(3, cm.exception.code)

            with self.assertRaises(SystemExit) as cm:
                dispatch(Command.from_function(train_like), argv=["p", "--nope"])
            self.assertEqual(2, cm.exception.code)

        self.assertIn("error: dataset not found", err.getvalue())
        self.assertIn("iteration: 3", err.getvalue())
        self.assertIn("unknown flag: --nope", err.getvalue())

    def test_report_error(self):
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(2, report_error(CmdError("bad flag")))
            self.assertEqual(2, report_error(FormatError("bad magic")))
            self.assertEqual(3, report_error(RuntimeError("boom")))

    def test_log_level_from_env(self):
        with mock.patch.dict(os.environ, {"NEUMAT_LOG_LEVEL": ""}):
            self.assertEqual(logging.WARNING, log_level_from_env(True))
            self.assertEqual(logging.INFO, log_level_from_env(False))

        with mock.patch.dict(os.environ, {"NEUMAT_LOG_LEVEL": "DEBUG"}):
            self.assertEqual(logging.DEBUG, log_level_from_env(True))

        with mock.patch.dict(os.environ, {"NEUMAT_LOG_LEVEL": "loud"}):
            with self.assertRaises(InputError):
                log_level_from_env(True)

    def test_log_init_receives_level(self):
        levels: List[int] = []

        def quiet() -> None:
            pass

        group = Group()
        group.add2("train", quiet, less_logging=False)
        with mock.patch.dict(os.environ, {"NEUMAT_LOG_LEVEL": ""}):
            dispatch(group, argv=["p", "train"], log_init=levels.append)
        self.assertEqual([logging.INFO], levels)
