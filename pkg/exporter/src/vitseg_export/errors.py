class ExportError(Exception):
    """Checkpoint cannot be converted: unknown architecture, a missing or
    misshapen source tensor, or invalid export inputs."""
