from fastapi import FastAPI

from app.api.v1 import experiments
from app.core.config import config
from app.core.logging import setup_logging

setup_logging()

app = FastAPI(
    title=config.app_name,
    description=(
        "Stochastic embedding laboratory: upload an experiment config to simulate a diffusion, "
        "estimate its Nelson derivatives and check embedded Euler-Lagrange, Noether, Hamilton "
        "and Schrödinger-bridge identities."
    ),
    version="0.1.0",
)


# Register routes
app.include_router(experiments.router, prefix="/api/v1")
