from src.app.core.config import settings  # noqa: F401
