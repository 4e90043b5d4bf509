"""
proofpipe module hook
"""

from proofpipe.cli import cli

if __name__ == "__main__":
    cli()
