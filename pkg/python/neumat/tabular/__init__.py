from .tabular import Table

__all__ = ["Table"]
