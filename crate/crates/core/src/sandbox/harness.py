# Test harness executed inside the sandbox working directory.
#
# Loads solution.py, then tests.py, runs every discovered test and reports on
# the original stdout, one line per test:
#   TEST <name> PASS
#   TEST <name> FAIL <single-line message>
#   SUMMARY <passed>/<total>
# preceded by READY <n> once both files are loaded and n tests are collected.
# A load failure exits with status 2 before any TEST line, diagnostics on stderr.
# Output produced by the code under test is redirected to _stdout.txt.

import inspect
import io
import os
import sys
import traceback
import types
import unittest

WORKDIR = os.path.realpath(os.getcwd())
READ_ROOTS = tuple(
    os.path.realpath(p) for p in sys.path if p and os.path.isabs(p)
)
BLOCKED_PREFIXES = ("socket.", "ctypes.", "subprocess.", "os.exec", "os.posix_spawn",
                    "os.spawn", "os.fork", "os.system", "os.kill", "os.killpg",
                    "os.chdir", "os.putenv", "os.unsetenv", "pty.", "shutil.rmtree",
                    "webbrowser.", "urllib.Request")
WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC

_proto = os.fdopen(os.dup(1), "w", encoding="utf-8", buffering=1)
_user_out = open(os.path.join(WORKDIR, "_stdout.txt"), "w", encoding="utf-8", buffering=1)
os.dup2(_user_out.fileno(), 1)
sys.stdout = _user_out
with open(os.path.join(WORKDIR, "solution.py"), encoding="utf-8") as fh:
    SOLUTION_SRC = fh.read()
with open(os.path.join(WORKDIR, "tests.py"), encoding="utf-8") as fh:
    TESTS_SRC = fh.read()
# The test source must not be readable by the code under test.
os.remove(os.path.join(WORKDIR, "tests.py"))


def _under(path, root):
    return path == root or path.startswith(root.rstrip(os.sep) + os.sep)


def _audit(event, args):
    if event == "open":
        path, mode, flags = args
        if path is None or isinstance(path, int):
            return
        try:
            real = os.path.realpath(os.fsdecode(path))
        except Exception:
            raise PermissionError("sandbox: unresolvable path")
        if _under(real, WORKDIR):
            return
        writing = (isinstance(mode, str) and any(c in mode for c in "wax+")) or (
            isinstance(flags, int) and flags & WRITE_FLAGS
        )
        if not writing and any(_under(real, root) for root in READ_ROOTS):
            return
        raise PermissionError(f"sandbox: access to {os.fsdecode(path)!r} is not permitted")
    if event.startswith(BLOCKED_PREFIXES):
        raise PermissionError(f"sandbox: {event} is not permitted")


sys.addaudithook(_audit)


def _one_line(text, limit=300):
    text = " ".join(str(text).split())
    return text if len(text) <= limit else text[: limit - 3] + "..."


def _emit(line):
    _proto.write(line + "\n")
    _proto.flush()


def _load_failure(filename, exc):
    if isinstance(exc, SyntaxError):
        sys.stderr.write("".join(traceback.format_exception_only(type(exc), exc)))
    else:
        frames = [f for f in traceback.extract_tb(exc.__traceback__) if f.filename == filename]
        if frames:
            sys.stderr.write("Traceback (most recent call last):\n")
            sys.stderr.write("".join(traceback.format_list(frames)))
        sys.stderr.write("".join(traceback.format_exception_only(type(exc), exc)))
    sys.stderr.flush()
    os._exit(2)


def _missing_name(name):
    if name.startswith("__"):
        raise AttributeError(name)

    def absent(*_args, **_kwargs):
        raise NameError(f"name '{name}' is not defined in the solution")

    absent.__name__ = name
    return absent


try:
    TESTS_CODE = compile(TESTS_SRC, "tests.py", "exec")
except BaseException as exc:  # noqa: B902
    _load_failure("tests.py", exc)
del TESTS_SRC

solution = types.ModuleType("solution")
solution.__file__ = "solution.py"
sys.modules["solution"] = solution
try:
    exec(compile(SOLUTION_SRC, "solution.py", "exec"), solution.__dict__)
except BaseException as exc:  # noqa: B902
    _load_failure("solution.py", exc)
if "__getattr__" not in solution.__dict__:
    solution.__getattr__ = _missing_name

namespace = {"__name__": "tests", "__file__": "tests.py"}
namespace.update({k: v for k, v in solution.__dict__.items() if not k.startswith("__")})
try:
    exec(TESTS_CODE, namespace)
except BaseException as exc:  # noqa: B902
    _load_failure("tests.py", exc)


def _defined_in_tests(obj):
    code = getattr(obj, "__code__", None)
    return code is not None and code.co_filename == "tests.py"


def _collect():
    cases = []
    loader = unittest.TestLoader()
    for name, obj in list(namespace.items()):
        if inspect.isclass(obj) and issubclass(obj, unittest.TestCase) and obj.__module__ == "tests":
            for method in loader.getTestCaseNames(obj):
                cases.append((f"{name}.{method}", ("case", obj, method)))
        elif name.startswith("test") and inspect.isfunction(obj) and _defined_in_tests(obj):
            cases.append((name, ("func", obj)))
    return cases


def _run_function(fn):
    params = [
        p for p in inspect.signature(fn).parameters.values()
        if p.default is inspect.Parameter.empty and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)
    ]
    if params:
        return "test requires arguments: " + ", ".join(p.name for p in params)
    try:
        fn()
    except BaseException as exc:  # noqa: B902
        return f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
    return None


def _run_case(cls, method):
    result = unittest.TestResult()
    try:
        cls(method).run(result)
    except BaseException as exc:  # noqa: B902
        return f"{type(exc).__name__}: {exc}"
    problems = result.failures + result.errors
    if problems:
        last = problems[0][1].strip().splitlines()[-1]
        return last
    if result.skipped:
        return "skipped: " + str(result.skipped[0][1])
    if result.expectedFailures or result.unexpectedSuccesses:
        return "unexpected outcome"
    return None


passed = 0
cases = _collect()
_emit(f"READY {len(cases)}")
for name, spec in cases:
    safe = "_".join(name.split()) or "unnamed"
    if spec[0] == "func":
        failure = _run_function(spec[1])
    else:
        failure = _run_case(spec[1], spec[2])
    if failure is None:
        passed += 1
        _emit(f"TEST {safe} PASS")
    else:
        _emit(f"TEST {safe} FAIL {_one_line(failure) or 'failed'}")
_emit(f"SUMMARY {passed}/{len(cases)}")
try:
    _user_out.flush()
except Exception:
    pass
os._exit(0)
