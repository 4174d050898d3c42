"""Handlers package."""
from src.handlers.corpus import router as corpus_router
from src.handlers.training import router as training_router
from src.handlers.studies import router as studies_router
from src.handlers.figures import router as figures_router

__all__ = [
    "corpus_router",
    "training_router",
    "studies_router",
    "figures_router",
]
