import logging
from contextlib import asynccontextmanager

from dotenv import load_dotenv
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

load_dotenv()

from hgfx.errors import ConfigError, DataError, HGFXError  # noqa: E402
from hgfx.registry import close_model, init_model  # noqa: E402
from hgfx.routers import inference  # noqa: E402

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    init_model()
    yield
    close_model()


app = FastAPI(title="Semantic Heterogeneous Graph Classifier", lifespan=lifespan)


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    errors = []
    for error in exc.errors():
        field = error["loc"][-1] if error["loc"] else "unknown"
        errors.append(f"{field}: {error['msg']}")
    return JSONResponse(status_code=422, content={"detail": "; ".join(errors)})


@app.exception_handler(HGFXError)
async def hgfx_exception_handler(request: Request, exc: HGFXError):
    status = 422 if isinstance(exc, (ConfigError, DataError)) else 500
    if status == 500:
        logger.error("%s on %s: %s", type(exc).__name__, request.url.path, exc)
    return JSONResponse(status_code=status, content={"detail": str(exc)})


app.include_router(inference.router, prefix="/api", tags=["inference"])


@app.get("/api/health")
async def health():
    return {"status": "ok"}
