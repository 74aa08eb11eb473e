import gzip
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_record
from trafficforge.errors import MalformedLine, UnknownFormat
from trafficforge.logmodel import (DEFAULT_FIELDS, JSONL, TSV, ConnRecord, LogReader, LogWriter,
                                   open_stream, parse_conn_line, parse_json_line, serialize_conn)

LINE = "1609459200.000001\tCAbc123\t10.0.0.5\t51000\t93.184.216.34\t80\ttcp\thttp\t0.5\t100\t200\tSF\t-\t2\t3"


def test_parse_example_line():
    rec = parse_conn_line(LINE)
    assert rec.ts == 1609459200.000001
    assert rec.uid == "CAbc123"
    assert rec.orig_h == "10.0.0.5" and rec.resp_p == 80 and rec.proto == "tcp"
    assert rec.history is None
    assert rec.duration == 0.5 and rec.orig_pkts == 2 and rec.resp_pkts == 3


def test_fourteen_columns_is_malformed():
    with pytest.raises(MalformedLine):
        parse_conn_line(LINE.rsplit("\t", 1)[0])


@pytest.mark.parametrize("bad", [
    LINE.replace("10.0.0.5", "10.0.0.500"),
    LINE.replace("51000", "port"),
    LINE.replace("\ttcp\t", "\tsctp\t"),
    LINE.replace("1609459200.000001", "-"),
    LINE.replace("\t100\t", "\t-5\t"),
    LINE.replace("CAbc123", "-"),
])
def test_unparsable_values_are_malformed(bad):
    with pytest.raises(MalformedLine):
        parse_conn_line(bad)


def test_unset_duration_serializes_as_dash():
    rec = parse_conn_line(LINE.replace("\t0.5\t", "\t-\t"))
    assert rec.duration is None
    assert serialize_conn(rec).split("\t")[8] == "-"


def test_json_omits_unset_history():
    obj = json.loads(serialize_conn(parse_conn_line(LINE), JSONL))
    assert "history" not in obj
    assert obj["id.resp_p"] == 80


def test_unset_and_empty_stay_distinct():
    rec = parse_conn_line(LINE)
    rec.service = ""
    for fmt in (TSV, JSONL):
        line = serialize_conn(rec, fmt)
        back = parse_conn_line(line) if fmt == TSV else parse_json_line(line)
        assert back.service == "" and back.history is None


def test_literal_sentinels_survive():
    rec = parse_conn_line(LINE)
    rec.service, rec.history = "-", "(empty)"
    line = serialize_conn(rec)
    assert "\\x2d" in line
    back = parse_conn_line(line)
    assert back.service == "-" and back.history == "(empty)"


def test_custom_header_order_and_extras():
    header = ["uid", "ts", "id.orig_h", "id.orig_p", "id.resp_h", "id.resp_p", "proto", "note"]
    rec = parse_conn_line("Cx\t1.5\t10.0.0.1\t1\t10.0.0.2\t2\tudp\thello", header)
    assert rec.ts == 1.5 and rec.uid == "Cx" and rec.extras == {"note": "hello"}
    assert rec.duration is None
    assert parse_conn_line(serialize_conn(rec, TSV, header), header) == rec


def test_duplicate_header_column_rejected():
    with pytest.raises(UnknownFormat):
        parse_conn_line(LINE, ["ts", "ts"] + list(DEFAULT_FIELDS[2:]))


def test_round_trip_random_records_both_formats():
    rng = random.Random(3)
    for _ in range(2000):
        rec = random_record(rng)
        assert parse_conn_line(serialize_conn(rec, TSV)) == rec
        assert parse_json_line(serialize_conn(rec, JSONL)) == rec


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=12), st.one_of(st.none(), st.text(max_size=12)))
def test_round_trip_arbitrary_strings(service, history):
    rec = parse_conn_line(LINE)
    rec.service, rec.history = service, history
    assert parse_conn_line(serialize_conn(rec)) == rec
    assert parse_json_line(serialize_conn(rec, JSONL)) == rec


def _write(path, records, **kw):
    with LogWriter(path, **kw) as w:
        for r in records:
            w.write(r)


def test_gzip_detected_by_magic(tmp_path):
    recs = [parse_conn_line(LINE)]
    path = tmp_path / "x.log.gz"
    _write(path, recs)
    # rename so only magic bytes can tell
    plain_name = tmp_path / "x.log"
    path.rename(plain_name)
    with open_stream(plain_name) as reader:
        assert reader.compression == "gzip"
        assert list(reader) == recs
    assert gzip.decompress(plain_name.read_bytes()).startswith(b"#separator")


def test_gzip_output_is_byte_deterministic(tmp_path):
    recs = [parse_conn_line(LINE)]
    _write(tmp_path / "a.log.gz", recs)
    _write(tmp_path / "b.log.gz", recs)
    assert (tmp_path / "a.log.gz").read_bytes() == (tmp_path / "b.log.gz").read_bytes()


def test_empty_file_yields_nothing(tmp_path):
    path = tmp_path / "empty.log"
    path.write_bytes(b"")
    with LogReader(path) as reader:
        assert list(reader) == []
        assert reader.format is None


def test_unknown_format(tmp_path):
    path = tmp_path / "junk.log"
    path.write_text("hello world\n")
    with pytest.raises(UnknownFormat):
        LogReader(path)


def test_malformed_lines_skipped_or_fatal(tmp_path):
    path = tmp_path / "x.log"
    _write(path, [parse_conn_line(LINE)])
    text = path.read_text().replace("#close", "garbage\tline\n#close")
    path.write_text(text)
    with LogReader(path) as reader:
        assert len(list(reader)) == 1
        assert reader.skipped == 1
    with LogReader(path, strict=True) as reader, pytest.raises(MalformedLine, match="line 9:"):
        list(reader)


def test_json_lines_stream(tmp_path):
    rng = random.Random(5)
    recs = [random_record(rng) for _ in range(50)]
    _write(tmp_path / "x.jsonl", recs)
    with LogReader(tmp_path / "x.jsonl") as reader:
        assert reader.format == JSONL
        assert list(reader) == recs


def test_header_written_with_types(tmp_path):
    _write(tmp_path / "x.log", [])
    lines = (tmp_path / "x.log").read_text().splitlines()
    assert lines[0] == "#separator \\x09"
    assert lines[5].split("\t")[1:] == list(DEFAULT_FIELDS)
    assert lines[6].startswith("#types\ttime\tstring\taddr\tport")
    assert lines[-1] == "#close\t1970-01-01-00-00-00"


def test_bulk_round_trip(tmp_path):
    rng = random.Random(11)
    n = 1_000_000
    base = parse_conn_line(LINE)
    path = tmp_path / "bulk.log.gz"
    with LogWriter(path) as w:
        for i in range(n):
            base.ts = 1609459200.0 + i * 0.001
            base.orig_p = rng.randrange(65536)
            w.write(base)
    rng = random.Random(11)
    count = 0
    with LogReader(path) as reader:
        for i, rec in enumerate(reader):
            assert rec.orig_p == rng.randrange(65536)
            assert rec.ts == round(1609459200.0 + i * 0.001, 6)
            count += 1
    assert count == n


def test_record_validate():
    rec = ConnRecord(1.0, "C1", "10.0.0.1", 1, "10.0.0.2", 2, "tcp")
    rec.validate()
    rec.orig_bytes = -1
    with pytest.raises(ValueError):
        rec.validate()
