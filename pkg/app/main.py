import logging

from fastapi import FastAPI, Depends, HTTPException, Request, Security
from fastapi.responses import JSONResponse
from fastapi.security import APIKeyHeader

from .api.endpoints import runs
from .errors import RoutedAttentionError
import config

logger = logging.getLogger(__name__)

app = FastAPI(title="Routed Attention Results API")

api_key_header = APIKeyHeader(name="Authorization", auto_error=False)

async def get_api_key(api_key_header: str = Security(api_key_header)):
    if api_key_header and api_key_header.startswith("Bearer "):
        token = api_key_header.split(" ")[1]
        if token == config.SECRET_TOKEN:
            return token
    raise HTTPException(status_code=403, detail="Could not validate credentials")

@app.exception_handler(RoutedAttentionError)
async def routed_attention_error(request: Request, exc: RoutedAttentionError):
    logger.error(f"{exc.category} error on {request.url.path}: {exc.detail}")
    return JSONResponse(status_code=exc.status_code, content={"error": exc.category, "detail": exc.detail})

app.include_router(runs.router, prefix="/api", dependencies=[Depends(get_api_key)])

@app.get("/")
async def root():
    return {"message": "Welcome to the Routed Attention Results API"}
