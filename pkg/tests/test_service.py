import concurrent.futures
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient

from volclip import volio
from volclip.retrieval import build_index
from volclip.service import VolumeStore, create_app
from volclip.volume import VolumeGrid


@pytest.fixture
def fixture_service(tmp_path):
    rng = np.random.default_rng(0)
    n, dim = 4, 8
    ids = [f"S{i}" for i in range(n)]
    embeddings = rng.normal(size=(n, dim))
    labels = np.array([[1, 0], [0, 1], [1, 1], [1, 0]], dtype=float)
    index = build_index(ids, embeddings, labels, ["alpha sign", "beta sign"])

    paths = {}
    for sid in ids:
        data = rng.uniform(-1, 1, size=(8, 6, 4)).astype(np.float32)
        path = tmp_path / f"{sid}.vol"
        volio.save_volume(VolumeGrid(data, (1.0, 1.0, 2.0), unit="normalized"), path)
        paths[sid] = str(path)

    table = {}

    def encoder(text):
        if text not in table:
            table[text] = np.random.default_rng(abs(hash(text)) % 2 ** 31).normal(size=dim)
        return table[text]

    app = create_app(index, encoder, VolumeStore(paths))
    return TestClient(app), index


class TestEndpoints:
    def test_healthz(self, fixture_service):
        client, _ = fixture_service
        response = client.get("/healthz")
        assert response.status_code == 200
        assert response.json() == {"status": "ok"}

    def test_index_info(self, fixture_service):
        client, index = fixture_service
        blob = client.get("/index/info").json()
        assert blob["count"] == len(index)
        assert blob["dim"] == index.dim
        assert blob["label_names"] == ["alpha sign", "beta sign"]

    def test_query_text_contract(self, fixture_service):
        client, _ = fixture_service
        response = client.post("/query/text", json={"text": "alpha sign", "k": 3})
        assert response.status_code == 200
        blob = response.json()
        assert blob["query_kind"] == "text"
        assert len(blob["results"]) == 3
        scores = [r["score"] for r in blob["results"]]
        assert scores == sorted(scores, reverse=True)
        assert all("labels" in r for r in blob["results"])

    def test_query_volume_excludes_self(self, fixture_service):
        client, _ = fixture_service
        response = client.post("/query/volume", json={"study_id": "S1", "k": 3})
        assert response.status_code == 200
        ids = [r["study_id"] for r in response.json()["results"]]
        assert len(ids) == 3
        assert "S1" not in ids

    def test_query_volume_matches_library_oracle(self, fixture_service):
        client, index = fixture_service
        from volclip.retrieval import query_by_volume

        got = client.post("/query/volume", json={"study_id": "S0", "k": 2}).json()
        expected = query_by_volume(index, "S0", 2)
        assert [r["study_id"] for r in got["results"]] == [s for s, _ in expected.ranked]

    def test_query_volume_unknown_id_404(self, fixture_service):
        client, _ = fixture_service
        response = client.post("/query/volume", json={"study_id": "NOPE", "k": 2})
        assert response.status_code == 404
        assert "detail" in response.json()

    def test_query_volume_requires_exactly_one_probe(self, fixture_service):
        client, _ = fixture_service
        assert client.post("/query/volume", json={"k": 2}).status_code == 400
        both = {"study_id": "S0", "embedding": [1.0] * 8, "k": 2}
        assert client.post("/query/volume", json=both).status_code == 400

    def test_query_volume_by_embedding(self, fixture_service):
        client, _ = fixture_service
        response = client.post("/query/volume",
                               json={"embedding": [1.0] * 8, "k": 4})
        assert response.status_code == 200
        assert len(response.json()["results"]) == 4

    def test_malformed_request_is_4xx_json(self, fixture_service):
        client, _ = fixture_service
        response = client.post("/query/text", json={"text": "", "k": 0})
        assert 400 <= response.status_code < 500
        assert response.headers["content-type"].startswith("application/json")

    def test_volume_meta(self, fixture_service):
        client, _ = fixture_service
        blob = client.get("/volumes/S0/meta").json()
        assert blob["shape"] == [8, 6, 4]
        assert blob["unit"] == "normalized"
        assert client.get("/volumes/NOPE/meta").status_code == 404

    def test_slice_png(self, fixture_service):
        from PIL import Image

        client, _ = fixture_service
        response = client.get("/volumes/S0/slice/axial/0")
        assert response.status_code == 200
        assert response.headers["content-type"] == "image/png"
        img = Image.open(io.BytesIO(response.content))
        assert img.mode == "L"
        assert img.size == (8, 6)  # PIL reports (width=x, height=y)

    def test_slice_named_and_numeric_axes_agree(self, fixture_service):
        client, _ = fixture_service
        a = client.get("/volumes/S0/slice/z/1")
        b = client.get("/volumes/S0/slice/axial/1")
        assert a.content == b.content

    def test_slice_out_of_range_404(self, fixture_service):
        client, _ = fixture_service
        assert client.get("/volumes/S0/slice/axial/99").status_code == 404
        assert client.get("/volumes/S0/slice/bogus/0").status_code == 400

    def test_identical_requests_identical_responses(self, fixture_service):
        client, _ = fixture_service
        payload = {"text": "beta sign", "k": 4}
        first = client.post("/query/text", json=payload).json()
        second = client.post("/query/text", json=payload).json()
        assert first == second


class TestConcurrency:
    def test_32_request_soak_consistent(self, fixture_service):
        client, _ = fixture_service
        reference = client.post("/query/text", json={"text": "soak", "k": 4}).json()

        def hit(i):
            if i % 3 == 0:
                return ("text", client.post("/query/text",
                                            json={"text": "soak", "k": 4}).json())
            if i % 3 == 1:
                return ("vol", client.post("/query/volume",
                                           json={"study_id": "S2", "k": 2}).json())
            return ("slice", client.get("/volumes/S1/slice/z/0").content)

        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(hit, range(32)))
        vol_ref = client.post("/query/volume", json={"study_id": "S2", "k": 2}).json()
        slice_ref = client.get("/volumes/S1/slice/z/0").content
        for kind, value in results:
            if kind == "text":
                assert value == reference
            elif kind == "vol":
                assert value == vol_ref
            else:
                assert value == slice_ref
