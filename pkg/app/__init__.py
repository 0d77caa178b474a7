"""Frontend auditivo biomimetico diferenciavel."""

__version__ = "0.1.0"
