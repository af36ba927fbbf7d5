"""The key/value config file format."""

import pytest

from sparsetrain.errors import ConfigError
from sparsetrain.kvfile import dumps, loads, read_kv, write_kv


def test_round_trip_through_disk(tmp_path):
    mapping = {"mode": "dynamic", "ratio": 0.2, "epochs": 50, "resume": False}
    path = tmp_path / "run.cfg"
    write_kv(path, mapping)
    got = read_kv(path)
    assert got == {"mode": "dynamic", "ratio": "0.2", "epochs": "50", "resume": "false"}


def test_loads_skips_comments_and_blank_lines():
    text = "# run config\n\nmode: fixed\n   # indented comment\nbudget: 262144  \n"
    assert loads(text) == {"mode": "fixed", "budget": "262144"}


def test_value_may_contain_colons():
    assert loads("path: /tmp/a:b.bin") == {"path": "/tmp/a:b.bin"}


def test_duplicate_key_reports_line_number():
    with pytest.raises(ConfigError, match="line 3.*duplicate.*'mode'"):
        loads("mode: a\nratio: 0.5\nmode: b\n")


def test_missing_colon_reports_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        loads("mode: a\njust words\n")


def test_empty_key_rejected():
    with pytest.raises(ConfigError, match="empty key"):
        loads(": orphan value\n")


def test_dumps_formatting():
    text = dumps({"a": True, "b": False, "c": 0.1, "d": None, "e": 3})
    assert text == "a: true\nb: false\nc: 0.1\ne: 3\n"
    assert loads(text) == {"a": "true", "b": "false", "c": "0.1", "e": "3"}


def test_read_kv_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        read_kv("/nonexistent/nowhere.cfg")


def test_read_kv_prefixes_path_on_parse_error(tmp_path):
    path = tmp_path / "broken.cfg"
    path.write_text("oops\n")
    with pytest.raises(ConfigError, match="broken.cfg.*line 1"):
        read_kv(path)
