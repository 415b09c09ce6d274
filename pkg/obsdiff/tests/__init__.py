import os
import sys


def run(*pytest_args):
    """
    Run the obsdiff test suite.

    Extra arguments are passed on to pytest, e.g. ``run('-k', 'hessian')``.
    Returns ``True`` if all tests passed.
    """
    try:
        import pytest
    except ImportError:
        raise ImportError('Running the test suite requires the pytest package.')
    dirname = os.path.abspath(os.path.dirname(__file__))
    sys.stderr.write(f'Running tests in "{dirname}"\n')
    argv = ['-c=', dirname] + list(pytest_args)  # -c=: ignore config files
    return pytest.main(argv) == 0
