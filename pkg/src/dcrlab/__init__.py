"""Teacher-to-student module replacement in a NumPy micro-transformer.

Submodules: autodiff, model, gates, engine, theory, harness, cli.
"""

__version__ = "0.1.0"
