#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Quick readiness check for the SeeCo worker.
Tests float64 torch, the default backbone, the built-in synonym library and,
when Celery is enabled, the Redis broker.
"""

import os
import sys

from dotenv import load_dotenv

load_dotenv()

# Fix Windows console encoding
if sys.platform == 'win32':
    import io
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')


def check_torch():
    try:
        import torch
        x = torch.ones(2, dtype=torch.float64)
        return bool((x @ x) == 2.0), f"torch {torch.__version__}"
    except Exception as e:
        return False, str(e)


def check_model():
    try:
        from mini_vlm import ModelConfig, build_model, model_fingerprint
        model = build_model(ModelConfig())
        return True, f"fingerprint {model_fingerprint(model)[:16]}"
    except Exception as e:
        return False, str(e)


def check_library():
    try:
        from scenes import CATEGORY_POOL, builtin_library
        library = builtin_library()
        library.validate(CATEGORY_POOL)
        return True, f"{len(library.entries)} categories, Z={library.Z}"
    except Exception as e:
        return False, str(e)


def check_redis():
    if os.getenv('ENABLE_CELERY', 'false').lower() != 'true':
        return True, "Celery disabled, skipped"
    try:
        import redis
        broker_url = os.getenv('CELERY_BROKER_URL', 'redis://localhost:6379/0')
        r = redis.from_url(broker_url)
        r.ping()
        return True, "Connected"
    except Exception as e:
        return False, str(e)


def main():
    print("SeeCo Worker Health Check")
    print("=" * 50)

    checks = [
        ("Torch float64", check_torch),
        ("Backbone", check_model),
        ("Synonym library", check_library),
        ("Redis", check_redis),
    ]

    all_passed = True
    for name, check in checks:
        passed, message = check()
        status = "[OK]" if passed else "[FAIL]"
        print(f"{status} {name}: {message}")
        if not passed:
            all_passed = False

    print("=" * 50)
    if all_passed:
        print("[OK] All checks passed! Worker is ready.")
        return 0
    print("[FAIL] Some checks failed. Please fix the issues above.")
    return 1


if __name__ == "__main__":
    sys.exit(main())
