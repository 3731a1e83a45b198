from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from moekit.api.routers import runs, workflows
from moekit.core.config import settings
from moekit.core.errors import MoeKitError
from moekit.db.session import init_db

# Create the database tables
init_db()

app = FastAPI(title=settings.PROJECT_NAME)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=[str(origin) for origin in settings.BACKEND_CORS_ORIGINS],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(MoeKitError)
async def moekit_error_handler(request: Request, exc: MoeKitError) -> JSONResponse:
    return JSONResponse(status_code=422, content={"detail": str(exc)})


# Include routers
app.include_router(workflows.router, prefix=settings.API_V1_STR, tags=["workflows"])
app.include_router(runs.router, prefix=f"{settings.API_V1_STR}/runs", tags=["runs"])


@app.get("/health")
def health_check():
    """
    Health check endpoint
    """
    return {"status": "healthy"}
