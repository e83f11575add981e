import logging
import os
import re
import sys
from pathlib import Path
from traceback import format_exception

from avbastion.errors import SchemaError
from avbastion.matrix import format_matrix, run_matrix
from avbastion.runner import (bundled_scenarios, load_bundled, resolve_seed,
                              run_fuzz, run_scenario)
from avbastion.scenario import Scenario, parse_scenario

LOG_ENV = "AVB_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DEFAULT_FUZZ_COUNT = 1000

EXIT_OK = 0
EXIT_SCENARIO_FAILED = 1
EXIT_SCHEMA = 2
EXIT_INTERNAL = 3


def configure_logging(verbose: bool) -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if level not in logging.getLevelNamesMapping():
        level = "WARNING"
    if verbose:
        level = "DEBUG"
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def read_scenario(path: str) -> Scenario:
    """A path to a JSON file, or the name of a bundled scenario."""
    p = Path(path)
    if not p.exists() and path in bundled_scenarios():
        return load_bundled(path)
    return parse_scenario(p.read_text(), p.stem)


def write_output(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as f:
            f.write(text)


def main(argv: list[str] | None = None) -> int:
    # === Option parsing ===
    args = sys.argv[1:] if argv is None else argv
    command: str | None = None
    options: dict[str, str] = {}
    verbose = False
    i = 0
    while i < len(args):
        arg = args[i]
        if (m := re.fullmatch(r'--(scenario|seed|out|count)(?:=(.+))?', arg)) is not None:
            if m[2] is None:
                i += 1
                if i == len(args):
                    print(f"Error: {arg} needs a value", file=sys.stderr)
                    return EXIT_SCHEMA
                options[m[1]] = args[i]
            else:
                options[m[1]] = m[2]
        elif arg in ('-v', '--verbose'):
            verbose = True
        elif arg.startswith('-'):
            print(f"Error: unknown argument: {arg}", file=sys.stderr)
            return EXIT_SCHEMA
        elif command is None:
            command = arg
        else:
            print(f"Error: unexpected argument: {arg}", file=sys.stderr)
            return EXIT_SCHEMA
        i += 1

    valid_commands = ['run', 'matrix', 'fuzz', 'validate']
    if command is None:
        print(
            f"Error: command argument missing. Valid commands: {', '.join(valid_commands)}", file=sys.stderr)
        return EXIT_SCHEMA
    if command not in valid_commands:
        print(f"Error: unknown command: {command}", file=sys.stderr)
        return EXIT_SCHEMA
    if command in ('run', 'validate') and 'scenario' not in options:
        print(f"Error: {command} needs --scenario <path>", file=sys.stderr)
        return EXIT_SCHEMA

    configure_logging(verbose)

    def int_option(name: str) -> int | None:
        if name not in options:
            return None
        try:
            return int(options[name], 0)
        except ValueError:
            raise SchemaError([(f"--{name}", f"expected an integer, but got {options[name]!r}")]) from None

    # === Command implementations ===
    try:
        if command == 'validate':
            scenario = read_scenario(options['scenario'])
            print(f"ok: {scenario.name} ({len(scenario.files)} files, "
                  f"{len(scenario.timeline)} timeline entries)")
        elif command == 'run':
            scenario = read_scenario(options['scenario'])
            metrics = run_scenario(scenario, int_option('seed'))
            write_output(metrics.to_json(), options.get('out'))
            failures = metrics.expectation_failures
            for a in failures:
                print(f"tick {a.tick}: {a.action.value} expected {a.expect}, but was {a.outcome}",
                      file=sys.stderr)
            if failures:
                return EXIT_SCENARIO_FAILED
        elif command == 'matrix':
            rows = run_matrix()
            write_output(format_matrix(rows), options.get('out'))
            if not all(r.ok for r in rows):
                return EXIT_SCENARIO_FAILED
        elif command == 'fuzz':
            count = int_option('count')
            if count is None:
                count = DEFAULT_FUZZ_COUNT
            elif count < 1:
                raise SchemaError([("--count", f"expected at least 1, but got {count}")])
            seed = resolve_seed(Scenario(name="fuzz"), int_option('seed'))
            report = run_fuzz(count, seed)
            write_output(report.to_json(), options.get('out'))
            return report.exit_code
    except SchemaError as e:
        for path, message in e.issues:
            print(f"Error: {path}: {message}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as e:
        print("".join(format_exception(e)), file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
