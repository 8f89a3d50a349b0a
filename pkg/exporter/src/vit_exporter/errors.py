class ExportError(Exception):
    """Raised for any failure while extracting or packaging features."""
