"""
localbench - local LLM inference benchmarking harness
"""

__version__ = "0.1.0"
