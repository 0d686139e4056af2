"""Inference engine, catalog validation, HTTP endpoints, benchmark."""
import base64
import os
import io
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from PIL import Image

from medbox.errors import CatalogError
from medbox.service import (
    BenchmarkReport,
    EngineConfig,
    FrameDecodeError,
    InferenceEngine,
    benchmark,
    calibrate_threshold,
    load_catalog,
    make_app,
    softmax,
)

from fastapi.testclient import TestClient


def png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def frame_from_dataset(manifest, idx):
    with open(manifest.sample_path(idx), "rb") as f:
        return f.read()


class TestEngineConfig:
    def test_threshold_range(self):
        with pytest.raises(ValueError):
            EngineConfig("m", "c", threshold=1.5)
        EngineConfig("m", "c", threshold=0.0)  # 0 disables thresholding


class TestCatalogValidation:
    def test_duplicate_ids_rejected(self, tmp_path):
        doc = [{"id": "a", "name": "A", "class_index": 0, "posology": "p",
                "pil": {"usage": "u", "warnings": "w", "interactions": "i"}}] * 2
        p = tmp_path / "cat.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(CatalogError, match="unique"):
            load_catalog(p)

    def test_class_index_outside_model_refused(self, tiny_model, tmp_path):
        from medbox import modelio

        records = []
        for i in range(5):  # model has 4 classes; index 4 is out of range
            records.append({"id": f"m{i}", "name": f"M{i}", "class_index": i,
                            "posology": "p",
                            "pil": {"usage": "u", "warnings": "w", "interactions": "i"}})
        p = tmp_path / "cat.json"
        p.write_text(json.dumps(records))
        with pytest.raises(CatalogError, match="outside the model"):
            InferenceEngine.load(EngineConfig(tiny_model["path"], str(p)))

    def test_uncovered_model_class_refused(self, tiny_model, tmp_path):
        records = [{"id": "m0", "name": "M0", "class_index": 0, "posology": "p",
                    "pil": {"usage": "u", "warnings": "w", "interactions": "i"}}]
        p = tmp_path / "cat.json"
        p.write_text(json.dumps(records))
        with pytest.raises(CatalogError, match="without a catalog record"):
            InferenceEngine.load(EngineConfig(tiny_model["path"], str(p)))


class TestClassify:
    def test_dataset_frame_recognized_fields(self, tiny_engine, tiny_dataset):
        result = tiny_engine.classify_frame(frame_from_dataset(tiny_dataset, 0))
        assert result.status in ("recognized", "below_threshold")
        assert len(result.top) <= 5
        confs = [c for _, c in result.top]
        assert confs == sorted(confs, reverse=True)
        assert all(0.0 <= c <= 1.0 for c in confs)
        assert result.probabilities.sum() == pytest.approx(1.0, abs=1e-5)
        assert result.latency_ms > 0

    def test_undecodable_frame(self, tiny_engine):
        with pytest.raises(FrameDecodeError):
            tiny_engine.classify_frame(b"this is not an image")

    def test_zero_threshold_always_recognizes(self, tiny_model, tiny_dataset):
        import os

        cfg = EngineConfig(tiny_model["path"],
                           os.path.join(tiny_dataset.root, "catalog.json"),
                           threshold=0.0)
        engine = InferenceEngine.load(cfg)
        noise = png_bytes(np.random.default_rng(0).integers(
            0, 256, (32, 32, 3), dtype=np.uint8))
        assert engine.classify_frame(noise).status == "recognized"

    def test_threshold_monotonicity(self, tiny_engine, tiny_dataset):
        frame = frame_from_dataset(tiny_dataset, 3)
        result = tiny_engine.classify_frame(frame)
        top_conf = result.top[0][1]
        # raising the threshold past the top confidence flips to
        # below_threshold and can never flip back
        statuses = []
        for lam in np.linspace(0, 1, 21):
            statuses.append(top_conf >= lam)
        flips = sum(1 for a, b in zip(statuses, statuses[1:]) if a != b)
        assert flips <= 1

    def test_byte_identical_frames_identical_results(self, tiny_engine, tiny_dataset):
        frame = frame_from_dataset(tiny_dataset, 5)
        a = tiny_engine.classify_frame(frame)
        b = tiny_engine.classify_frame(frame)
        assert a.status == b.status and a.top == b.top

    def test_oversized_frame_downscaled(self, tiny_model, tiny_dataset):
        import os

        cfg = EngineConfig(tiny_model["path"],
                           os.path.join(tiny_dataset.root, "catalog.json"),
                           threshold=0.5, max_frame_dim=64)
        engine = InferenceEngine.load(cfg)
        big = png_bytes(np.zeros((640, 480, 3), dtype=np.uint8))
        result = engine.classify_frame(big)  # no error; downscaled internally
        assert result.probabilities.shape == (4,)

    def test_softmax_normalization(self):
        rng = np.random.default_rng(0)
        p = softmax(rng.standard_normal((5, 7)).astype(np.float32))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestCalibration:
    def test_threshold_separates(self, tiny_engine, tiny_dataset):
        from medbox.data import load_image

        accept = [load_image(tiny_dataset.sample_path(i)) for i in (0, 1, 2)]
        rng = np.random.default_rng(1)
        reject = [rng.integers(0, 256, (32, 32, 3)).astype(np.uint8) for _ in range(3)]
        try:
            lam, stats = calibrate_threshold(tiny_engine, accept, reject)
        except ValueError:
            pytest.skip("tiny fixture model does not separate noise; covered "
                        "by the acceptance suite on the full desk model")
        assert stats["reject_max"] < lam < stats["accept_min"]


class TestHttpApi:
    @pytest.fixture()
    def client(self, tiny_engine):
        return TestClient(make_app(tiny_engine))

    def test_health_reports_model_summary(self, client):
        r = client.get("/v1/health")
        assert r.status_code == 200
        doc = r.json()
        assert doc["model"]["growth_rate"] == 8
        assert doc["model"]["num_classes"] == 4
        assert doc["threshold"] == 0.5

    def test_classify_png_body(self, client, tiny_dataset):
        frame = frame_from_dataset(tiny_dataset, 0)
        r = client.post("/v1/classify", content=frame,
                        headers={"content-type": "image/png"})
        assert r.status_code == 200
        doc = r.json()
        assert doc["status"] in ("recognized", "below_threshold")
        if doc["status"] == "recognized":
            assert {"id", "name", "posology"} <= set(doc["medicine"])
            assert doc["top"][0]["medicine_id"] == doc["medicine"]["id"]
        else:
            assert "medicine" not in doc
            assert "suppressed_top" in doc

    def test_classify_json_base64(self, client, tiny_dataset):
        frame = frame_from_dataset(tiny_dataset, 1)
        r = client.post("/v1/classify",
                        json={"image_b64": base64.b64encode(frame).decode()})
        assert r.status_code == 200

    def test_text_body_rejected_415(self, client):
        r = client.post("/v1/classify", content=b"hello",
                        headers={"content-type": "text/plain"})
        assert r.status_code == 415
        assert "unsupported content type" in r.json()["error"]

    def test_undecodable_image_is_4xx(self, client):
        r = client.post("/v1/classify", content=b"notpng",
                        headers={"content-type": "image/png"})
        assert r.status_code == 422

    def test_malformed_json_is_400(self, client):
        r = client.post("/v1/classify", content=b"{\"image_b64\": 42}",
                        headers={"content-type": "application/json"})
        assert r.status_code == 400

    def test_medicine_catalog_round_trip(self, client, tiny_dataset):
        index = client.get("/v1/medicines").json()
        assert len(index) == 4
        rid = index[0]["id"]
        full = client.get(f"/v1/medicines/{rid}")
        assert full.status_code == 200
        doc = full.json()
        raw = json.load(open(f"{tiny_dataset.root}/catalog.json"))
        src = next(r for r in raw if r["id"] == rid)
        assert doc["posology"] == src["posology"]
        assert doc["pil"] == src["pil"]

    def test_unknown_medicine_404(self, client):
        assert client.get("/v1/medicines/nope").status_code == 404

    def test_concurrent_equals_serial(self, client, tiny_dataset):
        frames = [frame_from_dataset(tiny_dataset, i) for i in range(8)]

        def call(f):
            r = client.post("/v1/classify", content=f,
                            headers={"content-type": "image/png"})
            doc = r.json()
            doc.pop("latency_ms", None)
            return doc

        serial = [call(f) for f in frames]
        with ThreadPoolExecutor(max_workers=8) as pool:
            concurrent = list(pool.map(call, frames * 4))
        for i, doc in enumerate(concurrent):
            assert doc == serial[i % len(frames)]


class TestBenchmark:
    def test_zero_iterations_empty_report(self, tiny_engine):
        report = benchmark(tiny_engine, [], 0)
        assert report == BenchmarkReport(0, None, None, None)

    def test_reports_percentiles(self, tiny_engine, tiny_dataset):
        frames = [frame_from_dataset(tiny_dataset, i) for i in range(4)]
        report = benchmark(tiny_engine, frames, 12)
        assert report.iterations == 12
        assert 0 < report.p50_ms <= report.p95_ms
        assert report.fps > 0


class TestConcurrentThroughput:
    def test_pool_benchmark_reports(self, tiny_engine, tiny_dataset):
        from medbox.service import benchmark_concurrent

        frames = [frame_from_dataset(tiny_dataset, i) for i in range(4)]
        report = benchmark_concurrent(tiny_engine, frames, 12, workers=2)
        assert report.iterations == 12 and report.fps > 0

    @pytest.mark.skipif((os.cpu_count() or 1) < 4,
                        reason="thread-scaling measurement needs >= 4 cores")
    @pytest.mark.slow
    def test_throughput_scales_with_workers(self, tiny_engine, tiny_dataset):
        from medbox.service import benchmark, benchmark_concurrent

        frames = [frame_from_dataset(tiny_dataset, i) for i in range(8)]
        serial = benchmark(tiny_engine, frames, 64)
        pooled = benchmark_concurrent(tiny_engine, frames, 64, workers=4)
        assert pooled.fps >= 2.0 * serial.fps
