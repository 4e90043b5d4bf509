"""
proofpipe info file
"""

__author__ = "proofpipe maintainers"
__application__ = "proofpipe"
__version__ = "0.1.0"
