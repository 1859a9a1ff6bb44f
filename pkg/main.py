"""
FastAPI app for HTTP-triggered segmentation and suite runs.

- POST /segment runs one image synchronously and returns its report
- POST /suite starts a benchmark run in a background thread, or queues it
  through Celery when ENABLE_CELERY=true
"""

import logging
import os
import threading
from typing import List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from config import configure_logging, load_settings
from errors import SeeCoError
from mini_vlm import build_model, load_model
from pipeline import segment_image
from pnm import read_ppm, write_pgm
from scl import load_synonyms

configure_logging()
logger = logging.getLogger(__name__)

VERSION = "1.0.0"

app = FastAPI(title="SeeCo Segmentation Worker", version=VERSION)

# Celery is optional; without it suite runs go to a background thread
ENABLE_CELERY = os.getenv('ENABLE_CELERY', 'false').lower() == 'true'

try:
    from tasks import _run_suite_task_impl, run_suite_task
except Exception as e:
    logger.error(f"Failed to import tasks module: {e}")
    run_suite_task = None
    _run_suite_task_impl = None
    ENABLE_CELERY = False

celery_app = None
if ENABLE_CELERY:
    try:
        from worker import celery_app
        if celery_app is None:
            ENABLE_CELERY = False
    except Exception as e:
        logger.warning(f"Celery enabled but failed to import: {e}. Falling back to direct execution.")
        ENABLE_CELERY = False


class SegmentRequest(BaseModel):
    image: str
    categories: List[str]
    out: str
    synonyms: Optional[str] = None
    config: Optional[str] = None
    model: Optional[str] = None
    static: bool = False


class SuiteRequest(BaseModel):
    out: str
    config: Optional[str] = None


def _status(message: str = "ok") -> dict:
    return {
        "status": message,
        "service": "seeco-worker",
        "version": VERSION,
        "celery_enabled": ENABLE_CELERY,
    }


@app.get("/")
async def root():
    return JSONResponse(_status())


@app.get("/health")
async def health():
    """Cheap readiness answer; no model is built here."""
    try:
        return JSONResponse(_status("healthy"), status_code=200)
    except Exception as e:
        logger.error(f"Health check error: {str(e)}")
        return JSONResponse({"status": "unhealthy", "error": str(e)}, status_code=503)


@app.post("/segment")
def segment(request: SegmentRequest):
    """
    Segment one P6 image and write the P5 label map to `out`.

    Returns:
        mode, window count, trainable count and per-window losses
    """
    try:
        logger.info(f"Received segment request for {request.image}")
        if not request.static and not request.synonyms:
            raise HTTPException(status_code=422, detail="synonyms is required unless static is set")
        settings = load_settings(request.config)
        model = load_model(request.model) if request.model else build_model(settings.model)
        library = None if request.static else load_synonyms(request.synonyms, request.categories)
        labels, report = segment_image(model, read_ppm(request.image), request.categories, library,
                                       settings.adaptation, static=request.static)
        write_pgm(request.out, labels)
        return JSONResponse({
            "success": True,
            "mode": report.mode,
            "windows": len(report.windows),
            "trainables": report.trainables,
            "losses": [[pre, post] for pre, post in report.losses],
            "out": request.out,
        })
    except HTTPException:
        raise
    except SeeCoError as e:
        status = 422 if e.exit_code in (1, 2) else 500
        logger.error(f"Segment request failed: {str(e)}")
        raise HTTPException(status_code=status, detail=str(e))
    except OSError as e:
        logger.error(f"Segment request I/O error: {str(e)}")
        raise HTTPException(status_code=404, detail=str(e))


@app.post("/suite")
async def suite(request: SuiteRequest):
    """Start a suite run; reports land in `out` when it finishes."""
    try:
        if _run_suite_task_impl is None:
            raise HTTPException(status_code=503, detail="Suite service unavailable - tasks module not loaded")

        if ENABLE_CELERY and celery_app:
            run_suite_task.delay(request.config, request.out)
            logger.info(f"Queued suite run into {request.out} via Celery")
            message = "Suite queued via Celery"
        else:
            def run_with_logging(config_path: Optional[str], out_dir: str):
                try:
                    logger.info(f"Background thread starting suite into {out_dir}")
                    _run_suite_task_impl(config_path, out_dir)
                    logger.info(f"Background thread completed suite into {out_dir}")
                except Exception as e:
                    logger.error(f"Background thread error for suite {out_dir}: {str(e)}", exc_info=True)

            thread = threading.Thread(target=run_with_logging, args=(request.config, request.out))
            thread.daemon = True
            thread.start()
            message = "Suite started directly"

        return JSONResponse({"success": True, "message": message, "out": request.out})
    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Error starting suite run: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Failed to start suite: {str(e)}")


if __name__ == "__main__":
    port = int(os.getenv('PORT', 8001))
    logger.info(f"Starting FastAPI server on port {port}")
    logger.info(f"Health check endpoint: http://0.0.0.0:{port}/health")
    uvicorn.run(app, host="0.0.0.0", port=port, log_level="info")
