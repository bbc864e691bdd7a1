"""Root of the structured error hierarchy shared by every parp module."""


class ParpError(Exception):
    """A failure with a machine-readable code, a human detail and optional context."""

    def __init__(self, detail="", **context):
        """Store the detail and any keyword context for later reporting."""
        super().__init__(detail or type(self).__name__)
        self.detail = detail
        self.context = context

    @property
    def code(self):
        """Return the machine-readable code, which is the class name."""
        return type(self).__name__

    def as_record(self):
        """Return a plain dict suitable for receipts, traces and diagnostics."""
        record = {"error": self.code, "detail": self.detail}
        record.update({key: value for key, value in self.context.items() if key not in record})
        return record
