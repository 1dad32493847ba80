"""File formats and the command-line entry point."""
