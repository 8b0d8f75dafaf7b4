from .gradcheck import numeric_gradient, relative_error

__all__ = ["numeric_gradient", "relative_error"]
