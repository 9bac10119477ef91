"""CLI module for dedup-acq."""

from .commands import COMMANDS, CommandContext
from .render import render_report, report_document

__all__ = ["COMMANDS", "CommandContext", "render_report", "report_document"]
