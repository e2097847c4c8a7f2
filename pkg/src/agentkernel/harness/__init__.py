"""Executable demonstration: the over-temperature diagnosis episode, fault injection and the CLI."""
