from .binfile import ByteReader, ByteWriter, atomic_write

__all__ = ["ByteReader", "ByteWriter", "atomic_write"]
