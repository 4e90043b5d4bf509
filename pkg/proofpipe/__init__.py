"""
proofpipe
"""

from proofpipe.__about__ import __application__, __author__, __version__

__all__ = [
    "__application__",
    "__version__",
    "__author__",
]
