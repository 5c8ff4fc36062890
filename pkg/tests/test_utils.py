"""
Tests for utils.py module
"""

import logging
from pathlib import Path

import numpy as np
import pytest

import config
import utils


class TestSetupLogging:
    """Test logging configuration."""

    def test_returns_logger(self):
        logger = utils.setup_logging()
        assert isinstance(logger, logging.Logger)
        assert logger.name == "fedsynth"

    def test_log_file_created(self, tmp_path, monkeypatch):
        monkeypatch.setattr(config, "SAVE_PROCESSING_LOGS", True)
        log_file = str(tmp_path / "test.log")
        logger = utils.setup_logging(log_file=log_file)
        logger.info("test message")
        for handler in logger.handlers:
            handler.flush()
        assert Path(log_file).exists()
        utils.setup_logging()

    def test_no_file_handler_when_disabled(self, tmp_path, monkeypatch):
        monkeypatch.setattr(config, "SAVE_PROCESSING_LOGS", False)
        logger = utils.setup_logging(log_file=str(tmp_path / "nope.log"))
        file_handlers = [h for h in logger.handlers if isinstance(h, logging.FileHandler)]
        assert len(file_handlers) == 0
        assert not (tmp_path / "nope.log").exists()

    def test_repeated_setup_does_not_stack_handlers(self):
        utils.setup_logging()
        logger = utils.setup_logging()
        assert len(logger.handlers) == 1


class TestAtomicWriteText:
    """atomic_write_text leaves a complete destination file."""

    def test_content_visible(self, tmp_path):
        dest = tmp_path / "rounds.csv"
        utils.atomic_write_text(dest, "complete")
        assert dest.read_text(encoding="utf-8") == "complete"

    def test_newline_passthrough(self, tmp_path):
        dest = tmp_path / "rounds.csv"
        utils.atomic_write_text(dest, "a,b\n1,2\n", newline="")
        assert dest.read_bytes() == b"a,b\n1,2\n"

    def test_no_temp_file_left_on_failure(self, tmp_path, monkeypatch):
        dest = tmp_path / "out.json"

        def boom(self, target):
            raise OSError("rename failed")

        monkeypatch.setattr(Path, "replace", boom)
        with pytest.raises(OSError):
            utils.atomic_write_text(dest, "payload")
        assert list(tmp_path.iterdir()) == []


class TestAtomicWriteBinary:
    """Tests for atomic_write_binary: temp-file + rename for binary content."""

    def test_writes_binary_content(self, tmp_path):
        dest = tmp_path / "volume.raw"
        content = np.arange(10, dtype="<f4").tobytes()
        utils.atomic_write_binary(dest, content)
        assert dest.read_bytes() == content

    def test_overwrites_existing_file(self, tmp_path):
        dest = tmp_path / "out.bin"
        dest.write_bytes(b"old")
        utils.atomic_write_binary(dest, b"new")
        assert dest.read_bytes() == b"new"


class TestDeriveSeed:
    """Seeds are stable, order-sensitive and within numpy's accepted range."""

    def test_stable_across_calls(self):
        assert utils.derive_seed(0, "A", 3) == utils.derive_seed(0, "A", 3)

    def test_order_matters(self):
        assert utils.derive_seed(0, 1, 2) != utils.derive_seed(0, 2, 1)

    def test_distinct_clients_get_distinct_streams(self):
        seeds = {utils.derive_seed(5, client, 1) for client in range(16)}
        assert len(seeds) == 16

    def test_range(self):
        seed = utils.derive_seed("anything", 1.5, None)
        assert 0 <= seed < 2**63
        np.random.default_rng(seed)


class TestFormatTable:
    """format_table_to_markdown renders comparison tables."""

    def test_with_headers(self):
        result = utils.format_table_to_markdown([["FedAvg", "10.0 ± 1.0"]], ["Strategy", "Round"])
        lines = result.splitlines()
        assert lines[0] == "| Strategy | Round |"
        assert lines[1] == "| --- | --- |"
        assert lines[2] == "| FedAvg | 10.0 ± 1.0 |"

    def test_headers_inferred_from_first_row(self):
        data = [["Name", "MAE"], ["A", "30"]]
        result = utils.format_table_to_markdown(data, headers=None)
        assert "| Name | MAE |" in result
        assert "| A | 30 |" in result

    def test_short_rows_padded(self):
        result = utils.format_table_to_markdown([["only"]], ["a", "b"])
        assert "| only |  |" in result

    def test_single_empty_row_no_headers(self):
        assert utils.format_table_to_markdown([[]], headers=None) == ""


class TestUiPrint:
    """Tests for ui_print: thin wrapper around print."""

    def test_ui_print_outputs_to_stdout(self, capsys):
        utils.ui_print("hello world")
        assert "hello world" in capsys.readouterr().out

    def test_ui_print_no_args(self, capsys):
        utils.ui_print()
        assert capsys.readouterr().out == "\n"
