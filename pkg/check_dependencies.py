#!/usr/bin/env python
"""
Dependency checker for G-SHDL.
Checks that the required packages import and reports whether the compiled
convolution kernel is available.
"""

import importlib
import sys


def check_dependency(module_name, min_version=None, optional=False):
    """Check if a dependency is installed and meets the minimum version requirement."""
    try:
        module = importlib.import_module(module_name)
    except ImportError:
        status = "optional" if optional else "MISSING"
        print(f"{module_name:.<30} {status}")
        return optional

    version = getattr(module, "__version__", None)
    if not min_version:
        status = "✓"
    elif version is None:
        status = "? (version unknown)"
    elif _version_tuple(version) >= _version_tuple(min_version):
        status = "✓"
    else:
        status = f"⚠ (version {version} < {min_version})"
    print(f"{module_name:.<30} {status}")
    return True


def _version_tuple(version):
    parts = []
    for piece in str(version).split(".")[:3]:
        digits = "".join(ch for ch in piece if ch.isdigit())
        parts.append(int(digits) if digits else 0)
    return tuple(parts)


GROUPS = [
    ("Core dependencies", [
        ("numpy", "1.24.0"),
        ("scipy", "1.10.0"),
        ("tomli", "2.0.0"),
        ("polars", "0.18.0"),
        ("msgpack", "1.0.5"),
        ("PIL", "9.5.0"),
    ], False),
    ("Database dependencies", [
        ("sqlalchemy", "2.0.0"),
        ("psycopg2", "2.9.5"),
    ], False),
    ("Monitoring dependencies", [
        ("prometheus_client", None),
        ("psutil", "5.9.0"),
    ], False),
    ("Testing and benchmarking dependencies", [
        ("pytest", "7.3.1"),
        ("pytest_benchmark", None),
        ("hypothesis", None),
        ("matplotlib", "3.7.0"),
    ], False),
    ("Development tools (optional)", [
        ("Cython", "3.0.0"),
        ("memory_profiler", "0.61.0"),
        ("black", "23.3.0"),
        ("isort", "5.12.0"),
        ("mypy", "1.3.0"),
        ("ruff", "0.0.270"),
    ], True),
]


def check_all_dependencies():
    """Check all required and optional dependencies."""
    print("Checking G-SHDL dependencies...")
    print("-" * 50)

    all_good = True
    for title, deps, optional in GROUPS:
        print(f"\n{title}:")
        for dep, version in deps:
            if not check_dependency(dep, version, optional=optional):
                all_good = False

    try:
        import gshdl
        print("\nG-SHDL package is installed.")
        if gshdl.HAS_CYTHON:
            print("Compiled convolution kernel: available")
        else:
            print("Compiled convolution kernel: not built (scipy fallback in use)")
    except ImportError:
        print("\nG-SHDL package is not installed.")
        print("Run: pip install -e .")
        all_good = False

    print("-" * 50)
    if all_good:
        print("All required dependencies are installed correctly!")
    else:
        print("Some dependencies are missing. Please install them using:")
        print("pip install -r requirements.txt")

    return all_good


if __name__ == "__main__":
    sys.exit(0 if check_all_dependencies() else 1)
