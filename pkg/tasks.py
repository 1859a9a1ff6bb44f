"""
Celery tasks for suite runs.
"""

import logging
from pathlib import Path
from typing import Dict, Optional

from config import load_settings
from suite import run_suite
from worker import celery_app

logger = logging.getLogger(__name__)


def _run_suite_task_impl(config_path: Optional[str], out_dir: str) -> Dict[str, float]:
    """
    Core implementation of a suite run; called directly or via the Celery wrapper.

    Args:
        config_path: `key = value` settings file, defaults when None
        out_dir: directory receiving scenes.csv, summary.txt and reports/

    Returns:
        the aggregate summary
    """
    try:
        logger.info(f"Starting suite run into {out_dir}")
        settings = load_settings(config_path)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        report = run_suite(settings, out_dir)
        logger.info(f"Successfully completed suite run into {out_dir}")
        return report.summary
    except Exception as e:
        logger.error(f"Error running suite into {out_dir}: {str(e)}")
        raise


@celery_app.task(name='run_suite_task')
def run_suite_task(config_path: Optional[str], out_dir: str):
    """Celery wrapper; when Celery is disabled call _run_suite_task_impl() directly."""
    return _run_suite_task_impl(config_path, out_dir)
