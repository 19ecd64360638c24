"""
CleanAdapt Nox Configuration
Version: 1.0.0
Date: 2026-10-18
Owner: Platform.Engineering
"""

from __future__ import annotations

import pathlib

import nox

REPO_DIR = pathlib.Path(__file__).parent


@nox.session(python="3.11")
def lint(session: nox.Session) -> None:
    """Run Ruff and Black in check mode."""
    session.install("ruff", "black")
    session.run("ruff", "check", "cleanadapt", "tests")
    session.run("black", "--check", "cleanadapt", "tests", "noxfile.py")


@nox.session(python="3.11")
def tests(session: nox.Session) -> None:
    """Unit tests only; integration runs have their own session."""
    session.install("-e", ".[dev]")
    session.run("pytest", str(REPO_DIR / "tests"), "-m", "not integration and not benchmark")


@nox.session(python="3.11")
def integration(session: nox.Session) -> None:
    """CLI end-to-end runs over freshly generated datasets."""
    session.install("-e", ".[dev]")
    session.run("pytest", str(REPO_DIR / "tests" / "integration"), "-m", "integration and not benchmark")


@nox.session(python="3.11")
def benchmark(session: nox.Session) -> None:
    """Five-seed acceptance runs on the synthetic shift benchmark."""
    session.install("-e", ".[dev]")
    session.run("pytest", str(REPO_DIR / "tests" / "integration"), "-m", "benchmark")


@nox.session(name="type-check", python="3.11")
def type_check(session: nox.Session) -> None:
    """Run mypy for static type checking."""
    session.install("mypy", "numpy")
    session.run("mypy", "cleanadapt")


@nox.session(name="format", python="3.11")
def format_code(session: nox.Session) -> None:
    """Format the codebase with Black."""
    session.install("black")
    session.run("black", "cleanadapt", "tests", "noxfile.py")
