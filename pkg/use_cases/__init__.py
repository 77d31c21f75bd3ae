"""
Use Case Registry (The Librarian)

This module acts as a dynamic registry that discovers and loads available
subcommands from the subdirectories. Adding a new folder with a compatible
UseCase implementation automatically adds it to the command line.
"""

import importlib
import inspect
import logging
import os
import pkgutil
from typing import List

from core.interfaces import UseCase

logger = logging.getLogger(__name__)


def get_available_use_cases() -> List[UseCase]:
    """
    Dynamically discover and instantiate all available Use Cases.

    Scans the current directory for subpackages, imports them, and looks for
    classes that inherit from core.interfaces.UseCase.

    Returns:
        List of instantiated UseCase objects, sorted by name.
    """
    use_cases = []
    package_dir = os.path.dirname(__file__)

    for _, module_name, is_pkg in pkgutil.iter_modules([package_dir]):
        if not is_pkg:
            continue
        try:
            module = importlib.import_module(f"use_cases.{module_name}")
        except ImportError as e:
            logger.warning("Failed to load use case '%s': %s", module_name, e)
            continue

        for _, obj in inspect.getmembers(module, inspect.isclass):
            if issubclass(obj, UseCase) and obj is not UseCase and obj.__module__.startswith(module.__name__):
                use_cases.append(obj())

    use_cases.sort(key=lambda uc: uc.name)
    return use_cases
