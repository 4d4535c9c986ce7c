"""Pool-based active learning with task-driven representations."""

__version__ = "0.1.0"
