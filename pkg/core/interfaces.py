"""
Core Interfaces for the qMRI Toolkit

This module defines the abstract base class every subcommand implements so
that it is discovered automatically by main.py.
"""

import argparse
from abc import ABC, abstractmethod


class UseCase(ABC):
    """
    Abstract Base Class for all Use Cases (one subcommand each).

    Every new package added to /use_cases/ must implement this class to be
    automatically discovered by the main application.
    """

    @property
    @abstractmethod
    def name(self) -> str:
        """The subcommand name (e.g., 'simulate')."""
        pass

    @property
    @abstractmethod
    def description(self) -> str:
        """Brief description for the menu and --help."""
        pass

    @abstractmethod
    def configure_parser(self, parser: argparse.ArgumentParser) -> None:
        """Add the subcommand's arguments."""
        pass

    @abstractmethod
    def run(self, args: argparse.Namespace) -> int:
        """
        The entry point for the use case.

        Args:
            args: Parsed command-line arguments (includes the global --threads).

        Returns:
            Process exit code (0 on success).
        """
        pass
