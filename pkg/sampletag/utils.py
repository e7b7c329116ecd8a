import hashlib
import logging
import math
import os
import re
import sys

import structlog
import yaml

from sampletag.config import Config
from sampletag.errors import ConfigError


def configure_logging(level=None, fmt=None, stream=None):
    """Install the structlog pipeline used by every module"""
    level = (level or Config.LOG_LEVEL).upper()
    fmt = fmt or Config.LOG_FORMAT
    processors = [structlog.processors.add_log_level]
    if fmt == 'console':
        processors.append(structlog.processors.TimeStamper(fmt='iso'))
        processors.append(structlog.dev.ConsoleRenderer())
    else:
        processors.append(structlog.processors.KeyValueRenderer(key_order=['event'], sort_keys=True))
    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(logging.getLevelName(level)),
        logger_factory=structlog.PrintLoggerFactory(file=stream or sys.stderr),
        cache_logger_on_first_use=False,
    )


def format_file_size(size_bytes):
    """Format file size in human readable format"""
    if size_bytes == 0:
        return "0B"
    size_names = ["B", "KB", "MB", "GB"]
    i = min(int(math.floor(math.log(size_bytes, 1024))), len(size_names) - 1)
    p = math.pow(1024, i)
    s = round(size_bytes / p, 2)
    return f"{s} {size_names[i]}"


def sha256_file(filepath, chunk_size=1 << 20):
    digest = hashlib.sha256()
    with open(filepath, 'rb') as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def get_file_info(filepath):
    """Get size and content hash of an artifact"""
    try:
        stat = os.stat(filepath)
    except OSError:
        return None
    return {
        'size': stat.st_size,
        'size_formatted': format_file_size(stat.st_size),
        'sha256': sha256_file(filepath),
    }


def sanitize_filename(filename):
    """Sanitize an id for use as a file name"""
    filename = os.path.basename(filename)
    filename = re.sub(r'[^\w\-_\.]', '_', filename)
    filename = re.sub(r'_+', '_', filename)
    return filename


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def list_artifacts(out_dir, exclude=('run.lock',)):
    artifacts = []
    for root, _dirs, files in os.walk(out_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            if rel not in exclude:
                artifacts.append(rel)
    return sorted(artifacts)


def write_run_lock(out_dir, command, argv, extra=None):
    """Write run.lock: the command that produced out_dir and a hash of every artifact in it"""
    from sampletag import __version__

    lock = {
        'command': command,
        'argv': list(argv),
        'version': __version__,
        'artifacts': {rel: get_file_info(os.path.join(out_dir, rel))['sha256']
                      for rel in list_artifacts(out_dir)},
    }
    if extra:
        lock.update(extra)
    path = os.path.join(out_dir, 'run.lock')
    with open(path, 'w', encoding='utf-8') as fh:
        yaml.safe_dump(lock, fh, sort_keys=True)
    return path
