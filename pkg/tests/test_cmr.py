import hashlib
import json
import math
import threading
from datetime import date, datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from habnet import cmr
from habnet.errors import FetchError, FormatError, OfflineError

FIXTURE = Path(__file__).parent / "fixtures" / "granules_listing.json"
MB = 1 << 20


def haversine_km(lat1, lon1, lat2, lon2, r=6371.0088):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


def bbox(q):
    return [float(v) for v in dict(q.params)["bounding_box"].split(",")]


# --- queries -------------------------------------------------------------------

def test_query_box_at_27n():
    (q,) = cmr.build_search_query("MODISA_L2_OC", 27.0, -82.5, (date(2018, 1, 1), date(2018, 1, 10)), 50.0)
    w, s, e, n = bbox(q)
    assert s == pytest.approx(26.55, abs=0.005) and n == pytest.approx(27.45, abs=0.005)
    # every edge midpoint lies 50 km from the centre (sphere vs ellipsoid: 0.5%)
    for lat, lon in ((s, -82.5), (n, -82.5), (27.0, w), (27.0, e)):
        assert haversine_km(27.0, -82.5, lat, lon) == pytest.approx(50.0, rel=5e-3)
    p = dict(q.params)
    assert p["short_name"] == "MODISA_L2_OC"
    assert p["temporal"] == "2018-01-01T00:00:00Z,2018-01-10T23:59:59Z"
    assert q.path == cmr.SEARCH_PATH


def test_antimeridian_split():
    qs = cmr.build_search_query("MODISA_L2_OC", 27.0, 179.99, (date(2018, 1, 1), date(2018, 1, 10)), 50.0)
    assert len(qs) == 2
    (w1, s1, e1, n1), (w2, s2, e2, n2) = bbox(qs[0]), bbox(qs[1])
    assert e1 == 180.0 and w2 == -180.0
    assert w1 < 179.99 and -180.0 < e2 < -179.0
    assert (s1, n1) == (s2, n2)


def test_degenerate_date_window():
    (q,) = cmr.build_search_query("x", 27.0, -82.5, (date(2018, 1, 5), date(2018, 1, 5)), 10.0)
    start, end = dict(q.params)["temporal"].split(",")
    assert start[:10] == end[:10] == "2018-01-05"


def test_reversed_window_rejected():
    with pytest.raises(ValueError):
        cmr.build_search_query("x", 27.0, -82.5, (date(2018, 1, 5), date(2018, 1, 4)), 10.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-80, 80), st.floats(-179.0, 179.0), st.floats(1.0, 200.0))
def test_box_contains_centre_property(lat, lon, km):
    qs = cmr.build_search_query("x", lat, lon, (date(2018, 1, 1), date(2018, 1, 2)), km)
    boxes = [bbox(q) for q in qs]
    assert any(w <= lon <= e and s <= lat <= n for w, s, e, n in boxes)
    for w, s, e, n in boxes:
        assert -180 <= w <= e <= 180 and -90 <= s < n <= 90


# --- listings --------------------------------------------------------------------

def test_fixture_listing_in_order():
    refs = cmr.parse_granule_listing(FIXTURE.read_bytes())
    assert [r.granule_name for r in refs] == [
        "AQUA_MODIS.20180103T184000.L2.OC.nc",
        "AQUA_MODIS.20180104T192500.L2.OC.nc",
        "AQUA_MODIS.20180102T175500.L2.OC.nc",
    ]
    first = refs[0]
    assert first.download_url.endswith("AQUA_MODIS.20180103T184000.L2.OC.nc")
    assert first.start_time == datetime(2018, 1, 3, 18, 40, tzinfo=timezone.utc)
    assert first.size_bytes == 15728640
    assert first.checksum.startswith("sha256:9f86d0")
    assert refs[1].size_bytes is None and refs[1].checksum is None
    assert refs[2].size_bytes == 14680064
    assert refs.skipped == 0


def test_empty_feed():
    assert cmr.parse_granule_listing(b'{"feed":{"entry":[]}}') == []


def test_truncated_json_names_offset():
    body = FIXTURE.read_bytes()[:200]
    with pytest.raises(FormatError, match="byte offset"):
        cmr.parse_granule_listing(body)


def test_entries_without_data_link_are_skipped():
    doc = json.loads(FIXTURE.read_text())
    doc["feed"]["entry"][1]["links"] = [{"rel": "x/browse#", "href": "b"}]
    refs = cmr.parse_granule_listing(json.dumps(doc).encode())
    assert len(refs) == 2 and refs.skipped == 1


def test_granule_ref_invariants():
    t = datetime(2018, 1, 1, tzinfo=timezone.utc)
    with pytest.raises(ValueError):
        cmr.GranuleRef("", "x", t, t, "u")
    with pytest.raises(ValueError):
        cmr.GranuleRef("g", "x", t.replace(hour=2), t, "u")


# --- mock server -------------------------------------------------------------------

class Server:
    def __init__(self):
        self.hits = {}
        self.body = np.random.default_rng(0).integers(0, 256, MB, dtype=np.uint8).tobytes()
        self.listing = FIXTURE.read_bytes()
        owner = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_GET(self):
                path = self.path.split("?")[0]
                owner.hits[path] = owner.hits.get(path, 0) + 1
                n = owner.hits[path]
                if path == "/search/granules.json":
                    return self.send(200, owner.listing)
                if path == "/ok":
                    return self.send(200, owner.body)
                if path == "/flaky":
                    return self.send(503, b"busy") if n < 3 else self.send(200, owner.body)
                if path == "/short":
                    # declares 1 MB, sends half, then closes
                    self.send_response(200)
                    self.send_header("Content-Length", str(MB))
                    self.end_headers()
                    self.wfile.write(owner.body[: MB // 2])
                    self.close_connection = True
                    return None
                return self.send(404, b"not found")

            def send(self, code, data):
                self.send_response(code)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server(monkeypatch):
    monkeypatch.delenv(cmr.OFFLINE_ENV, raising=False)
    s = Server()
    yield s
    s.close()


def ref(url, name="g.nc", size=None, checksum=None):
    t = datetime(2018, 1, 1, tzinfo=timezone.utc)
    return cmr.GranuleRef(name, "MODISA_L2_OC", t, t, url, size, checksum)


def no_sleep(_):
    pass


def test_fetch_one_megabyte(server, tmp_path):
    digest = "sha256:" + hashlib.sha256(server.body).hexdigest()
    path = cmr.fetch_granule(ref(server.url + "/ok", size=MB, checksum=digest), tmp_path, sleep=no_sleep)
    assert path.stat().st_size == MB
    assert path.read_bytes() == server.body
    assert [p.name for p in tmp_path.iterdir()] == ["g.nc"]


def test_existing_complete_file_skips_network(server, tmp_path, no_network):
    (tmp_path / "g.nc").write_bytes(b"x" * 10)
    path = cmr.fetch_granule(ref(server.url + "/ok", size=10), tmp_path)
    assert path == tmp_path / "g.nc" and no_network == []


def test_404_retries_then_fails_leaving_dest_untouched(server, tmp_path):
    delays = []
    with pytest.raises(FetchError):
        cmr.fetch_granule(ref(server.url + "/missing"), tmp_path, attempts=3, sleep=delays.append)
    assert server.hits["/missing"] == 3
    assert delays == [1.0, 4.0]
    assert list(tmp_path.iterdir()) == []


def test_transient_errors_are_retried(server, tmp_path):
    path = cmr.fetch_granule(ref(server.url + "/flaky"), tmp_path, attempts=3, sleep=no_sleep)
    assert server.hits["/flaky"] == 3 and path.stat().st_size == MB


def test_checksum_mismatch_fails(server, tmp_path):
    bad = "sha256:" + "0" * 64
    with pytest.raises(FetchError, match="checksum"):
        cmr.fetch_granule(ref(server.url + "/ok", checksum=bad), tmp_path, attempts=2, sleep=no_sleep)
    assert list(tmp_path.iterdir()) == []


def test_truncated_body_fails(server, tmp_path):
    with pytest.raises(FetchError):
        cmr.fetch_granule(ref(server.url + "/short"), tmp_path, attempts=1, sleep=no_sleep)
    assert list(tmp_path.iterdir()) == []


def test_search_against_mock_endpoint(server):
    (q,) = cmr.build_search_query("MODISA_L2_OC", 27.0, -82.5, (date(2018, 1, 1), date(2018, 1, 10)), 50.0)
    refs = cmr.search_granules(q, base_url=server.url)
    assert len(refs) == 3


def test_endpoint_override(monkeypatch):
    monkeypatch.setenv(cmr.ENDPOINT_ENV, "http://mirror.example/")
    assert cmr.endpoint() == "http://mirror.example"


def test_offline_mode_refuses_before_any_socket(tmp_path, monkeypatch, no_network):
    monkeypatch.setenv(cmr.OFFLINE_ENV, "1")
    (q,) = cmr.build_search_query("x", 27.0, -82.5, (date(2018, 1, 1), date(2018, 1, 2)), 10.0)
    with pytest.raises(OfflineError):
        cmr.search_granules(q)
    with pytest.raises(OfflineError):
        cmr.fetch_granule(ref("http://example.invalid/g"), tmp_path)
    assert no_network == []


# --- swath files -----------------------------------------------------------------------

def test_swath_missing_samples_are_dropped(tmp_path):
    rng = np.random.default_rng(1)
    lines = ["HABSWATH 1", json.dumps({"modality": 3, "day": "2018-01-05"})]
    missing = set(rng.choice(100, 7, replace=False).tolist())
    for k in range(100):
        v = "nan" if k in missing else f"{rng.uniform(0, 5)!r}"
        lines.append(f"{27 + k * 1e-3!r},{-82.5 + k * 1e-3!r},{v}")
    p = tmp_path / "a.swath"
    p.write_text("\n".join(lines) + "\n")
    sc = cmr.read_swath_file(p)
    assert len(sc) == 93 and sc.n_missing == 7
    assert sc.modality == 3 and sc.day == date(2018, 1, 5)


def test_swath_empty_sample_section(tmp_path):
    p = tmp_path / "e.swath"
    p.write_text("HABSWATH 1\n" + json.dumps({"modality": 5, "day": "2018-01-05"}) + "\n")
    sc = cmr.read_swath_file(p)
    assert len(sc) == 0 and sc.samples.shape == (0, 3)


def test_swath_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    sc = cmr.SwathScene(11, date(2018, 2, 1), rng.uniform(26, 28, 500), rng.uniform(-83, -81, 500),
                        rng.lognormal(0, 1, 500), granule="TERRA_MODIS.x.nc")
    cmr.write_swath_file(sc, tmp_path / "r.swath")
    back = cmr.read_swath_file(tmp_path / "r.swath")
    assert np.max(np.abs(back.samples - sc.samples)) < 1e-6
    assert back.granule == sc.granule and back.day == sc.day


def test_swath_bad_magic(tmp_path):
    p = tmp_path / "bad.swath"
    p.write_text("NOT A SWATH\n{}\n")
    with pytest.raises(FormatError):
        cmr.read_swath_file(p)


def test_swath_modality_mismatch(tmp_path):
    p = tmp_path / "m.swath"
    p.write_text("HABSWATH 1\n" + json.dumps({"modality": 5, "day": "2018-01-05"}) + "\n")
    with pytest.raises(FormatError):
        cmr.read_swath_file(p, expected_modality=3)
