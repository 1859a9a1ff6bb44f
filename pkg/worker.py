"""
Celery worker configuration (optional).

Suite runs are started over HTTP; with ENABLE_CELERY=true they are queued
here instead of running in a thread of the API process.
"""

import os

from celery import Celery

from config import configure_logging

configure_logging()

celery_app = Celery('seeco')

celery_app.conf.update(
    broker_url=os.getenv('CELERY_BROKER_URL', 'redis://localhost:6379/0'),
    result_backend=os.getenv('CELERY_RESULT_BACKEND', 'redis://localhost:6379/0'),
    task_serializer='json',
    accept_content=['json'],
    result_serializer='json',
    timezone='UTC',
    enable_utc=True,
    task_track_started=True,
    task_time_limit=1800,  # full suites at default size take minutes
    task_soft_time_limit=1500,
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=10,
    worker_concurrency=1,  # one suite at a time keeps reductions single-threaded
)

# tasks.py imports celery_app, not the other way round
celery_app.conf.imports = ('tasks',)

if __name__ == '__main__':
    celery_app.start()
