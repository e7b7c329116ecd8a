import hashlib
import io
import os
from unittest.mock import patch

import pytest
import structlog
import yaml

from sampletag import utils
from sampletag.errors import ConfigError


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "audio").mkdir()
    (tmp_path / "audio" / "a.f32").write_bytes(b"\x00" * 8)
    (tmp_path / "manifest.csv").write_text("song_id,audio_path,split,tags\n")
    return tmp_path


def test_format_file_size():
    assert utils.format_file_size(0) == "0B"
    assert utils.format_file_size(512) == "512.0 B"
    assert utils.format_file_size(1536) == "1.5 KB"
    assert utils.format_file_size(5 * 1024 ** 2) == "5.0 MB"
    assert utils.format_file_size(3 * 1024 ** 4) == "3072.0 GB"


def test_sanitize_filename():
    assert utils.sanitize_filename("../etc/passwd") == "passwd"
    assert utils.sanitize_filename("song id #3?.wav") == "song_id_3_.wav"
    assert utils.sanitize_filename("synth00001") == "synth00001"


def test_get_file_info(run_dir):
    info = utils.get_file_info(str(run_dir / "audio" / "a.f32"))
    assert info['size'] == 8
    assert info['size_formatted'] == "8.0 B"
    assert info['sha256'] == hashlib.sha256(b"\x00" * 8).hexdigest()
    assert utils.get_file_info(str(run_dir / "missing")) is None


def test_sha256_reads_in_chunks(tmp_path):
    path = tmp_path / "blob"
    payload = os.urandom(5000)
    path.write_bytes(payload)
    assert utils.sha256_file(str(path), chunk_size=64) == hashlib.sha256(payload).hexdigest()


def test_ensure_dir(tmp_path):
    target = tmp_path / "a" / "b"
    assert utils.ensure_dir(str(target)) == str(target)
    assert target.is_dir()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError, match="cannot create"):
        utils.ensure_dir(str(blocker / "sub"))


def test_ensure_dir_not_writable(tmp_path):
    with patch('sampletag.utils.os.access', return_value=False):
        with pytest.raises(ConfigError, match="not writable"):
            utils.ensure_dir(str(tmp_path))


def test_list_artifacts(run_dir):
    (run_dir / "run.lock").write_text("old")
    assert utils.list_artifacts(str(run_dir)) == [os.path.join("audio", "a.f32"), "manifest.csv"]


def test_write_run_lock(run_dir):
    path = utils.write_run_lock(str(run_dir), 'synth', ['--seed', '3'], {'seed': 3})
    lock = yaml.safe_load(open(path))
    assert lock['command'] == 'synth' and lock['argv'] == ['--seed', '3'] and lock['seed'] == 3
    assert set(lock['artifacts']) == {os.path.join("audio", "a.f32"), "manifest.csv"}
    assert lock['artifacts']['manifest.csv'] == utils.sha256_file(str(run_dir / "manifest.csv"))


def test_run_lock_is_reproducible(run_dir):
    first = open(utils.write_run_lock(str(run_dir), 'synth', [])).read()
    second = open(utils.write_run_lock(str(run_dir), 'synth', [])).read()
    assert first == second


def test_configure_logging_key_value():
    stream = io.StringIO()
    utils.configure_logging('info', 'kv', stream=stream)
    try:
        log = structlog.get_logger('test')
        log.debug('hidden')
        log.info('epoch_done', epoch=3)
    finally:
        structlog.reset_defaults()
    line = stream.getvalue().strip()
    assert line.startswith("event='epoch_done'")
    assert "epoch=3" in line and "level='info'" in line
    assert "hidden" not in stream.getvalue()
