"""Quality-estimation-driven acoustic model adaptation on synthetic speech corpora."""

__version__ = "0.1.0"
