"""Inference service: loads a trained network plus a medicine catalog,
classifies frames with a confidence threshold, and serves HTTP endpoints
for the live overlay client.

The loaded model and catalog are immutable after startup; request handlers
are stateless, so concurrent requests are safe and equivalent to serial
execution.
"""
from __future__ import annotations

import base64
import binascii
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .data import IMAGENET_MEAN, IMAGENET_STD, preprocess
from .errors import CatalogError
from . import modelio
from .net import Network


@dataclass(frozen=True)
class MedicineRecord:
    id: str
    name: str
    class_index: int
    posology: str
    pil: dict  # sections: usage, warnings, interactions


def load_catalog(path) -> list[MedicineRecord]:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CatalogError(f"catalog is not valid JSON: {e}") from e
    if not isinstance(doc, list):
        raise CatalogError("catalog must be a JSON array of records")
    records = []
    for i, r in enumerate(doc):
        try:
            records.append(MedicineRecord(
                id=str(r["id"]), name=str(r["name"]),
                class_index=int(r["class_index"]),
                posology=str(r["posology"]), pil=dict(r["pil"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise CatalogError(f"catalog record {i} malformed: {e}") from e
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise CatalogError("catalog ids are not unique")
    return records


@dataclass(frozen=True)
class EngineConfig:
    model_path: str
    catalog_path: str
    threshold: float = 0.85  # 0 disables thresholding
    top_k: int = 5
    max_frame_dim: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")


@dataclass
class ClassificationResult:
    status: str  # "recognized" | "below_threshold"
    top: list[tuple[int, float]]  # (class index, confidence), descending
    latency_ms: float
    probabilities: np.ndarray = field(repr=False, default=None)


class FrameDecodeError(ValueError):
    """Submitted bytes are not a decodable image."""


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class InferenceEngine:
    def __init__(self, net: Network, catalog: list[MedicineRecord], config: EngineConfig):
        self.net = net
        self.config = config
        self.catalog = catalog
        self.by_class = {r.class_index: r for r in catalog}
        self.by_id = {r.id: r for r in catalog}
        self._validate()

    @classmethod
    def load(cls, config: EngineConfig) -> "InferenceEngine":
        net = modelio.load(config.model_path)
        catalog = load_catalog(config.catalog_path)
        return cls(net, catalog, config)

    def _validate(self):
        num_classes = self.net.config.num_classes
        indices = [r.class_index for r in self.catalog]
        if len(set(indices)) != len(indices):
            raise CatalogError("multiple catalog records share a class index")
        out_of_range = [r.id for r in self.catalog
                        if not 0 <= r.class_index < num_classes]
        if out_of_range:
            raise CatalogError(
                f"catalog entries reference class indices outside the model's "
                f"{num_classes} classes: {out_of_range}"
            )
        uncovered = sorted(set(range(num_classes)) - set(indices))
        if uncovered:
            raise CatalogError(
                f"model classes without a catalog record: {uncovered}"
            )

    # -- classification ------------------------------------------------------

    def decode_frame(self, image_bytes: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(image_bytes)) as im:
                im = im.convert("RGB")
                if max(im.size) > self.config.max_frame_dim:
                    scale = self.config.max_frame_dim / max(im.size)
                    im = im.resize((max(1, int(im.width * scale)),
                                    max(1, int(im.height * scale))),
                                   resample=Image.BILINEAR)
                return np.asarray(im)
        except (UnidentifiedImageError, OSError, ValueError) as e:
            raise FrameDecodeError(f"cannot decode image: {e}") from e

    def classify_array(self, image: np.ndarray) -> ClassificationResult:
        t0 = time.perf_counter()
        _, h, w = self.net.config.input_size
        x = preprocess(image, (h, w), IMAGENET_MEAN, IMAGENET_STD)[None]
        logits = self.net.forward(x, mode="eval")
        probs = softmax(logits[0].astype(np.float64))
        order = np.argsort(-probs)[: self.config.top_k]
        top = [(int(i), float(probs[i])) for i in order]
        status = "recognized" if top[0][1] >= self.config.threshold else "below_threshold"
        latency_ms = (time.perf_counter() - t0) * 1e3
        return ClassificationResult(status, top, latency_ms, probs)

    def classify_frame(self, image_bytes: bytes) -> ClassificationResult:
        return self.classify_array(self.decode_frame(image_bytes))

    # -- catalog ---------------------------------------------------------

    def get_medicine(self, medicine_id: str) -> MedicineRecord:
        rec = self.by_id.get(medicine_id)
        if rec is None:
            raise KeyError(medicine_id)
        return rec

    def result_payload(self, result: ClassificationResult) -> dict:
        def entry(ci, conf):
            rec = self.by_class[ci]
            return {"class_index": ci, "medicine_id": rec.id,
                    "confidence": round(conf, 6)}

        payload = {
            "status": result.status,
            "latency_ms": round(result.latency_ms, 3),
            "threshold": self.config.threshold,
        }
        top = [entry(ci, conf) for ci, conf in result.top]
        if result.status == "recognized":
            rec = self.by_class[result.top[0][0]]
            payload["top"] = top
            payload["medicine"] = {"id": rec.id, "name": rec.name,
                                   "class_index": rec.class_index,
                                   "posology": rec.posology}
        else:
            # identity suppressed; the list stays for diagnostics only
            payload["suppressed_top"] = top
        return payload


def calibrate_threshold(engine: InferenceEngine, accept_images, reject_images,
                        margin: float = 0.5):
    """Pick a threshold separating accept confidences from reject ones.

    Returns (threshold, stats). The threshold sits ``margin`` of the way
    between the highest reject confidence and the lowest accept confidence;
    raises ValueError when the two overlap (no separating threshold).
    """
    accept = [engine.classify_array(img).top[0][1] for img in accept_images]
    reject = [engine.classify_array(img).top[0][1] for img in reject_images]
    lo = max(reject) if reject else 0.0
    hi = min(accept) if accept else 1.0
    stats = {"accept_min": hi, "reject_max": lo}
    if lo >= hi:
        raise ValueError(f"no separating threshold: reject max {lo:.4f} >= "
                         f"accept min {hi:.4f}")
    return lo + margin * (hi - lo), stats


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    iterations: int
    p50_ms: float | None
    p95_ms: float | None
    fps: float | None


def benchmark(engine: InferenceEngine, frames: list[bytes], iterations: int) -> BenchmarkReport:
    """Measure end-to-end classify latency over encoded frames."""
    if iterations <= 0 or not frames:
        return BenchmarkReport(0, None, None, None)
    times = []
    t_start = time.perf_counter()
    for i in range(iterations):
        t0 = time.perf_counter()
        engine.classify_frame(frames[i % len(frames)])
        times.append((time.perf_counter() - t0) * 1e3)
    wall = time.perf_counter() - t_start
    times = np.array(times)
    return BenchmarkReport(
        iterations=iterations,
        p50_ms=float(np.percentile(times, 50)),
        p95_ms=float(np.percentile(times, 95)),
        fps=iterations / wall,
    )


def benchmark_concurrent(engine: InferenceEngine, frames: list[bytes],
                         iterations: int, workers: int) -> BenchmarkReport:
    """Throughput over a pool of request threads (batch-of-1 streams)."""
    if iterations <= 0 or not frames:
        return BenchmarkReport(0, None, None, None)
    from concurrent.futures import ThreadPoolExecutor

    times = []
    t_start = time.perf_counter()

    def one(i):
        t0 = time.perf_counter()
        engine.classify_frame(frames[i % len(frames)])
        return (time.perf_counter() - t0) * 1e3

    with ThreadPoolExecutor(max_workers=workers) as pool:
        times = list(pool.map(one, range(iterations)))
    wall = time.perf_counter() - t_start
    times = np.array(times)
    return BenchmarkReport(iterations, float(np.percentile(times, 50)),
                           float(np.percentile(times, 95)), iterations / wall)


# ---------------------------------------------------------------------------
# HTTP app
# ---------------------------------------------------------------------------

def make_app(engine: InferenceEngine) -> FastAPI:
    app = FastAPI(title="medbox inference service")

    @app.get("/v1/health")
    def health():
        cfg = engine.net.config
        return {
            "status": "ok",
            "model": {
                "growth_rate": cfg.growth_rate,
                "compression": cfg.compression if not isinstance(cfg.compression, tuple)
                else list(cfg.compression),
                "block_layout": list(cfg.block_layout),
                "num_classes": cfg.num_classes,
                "input_size": list(cfg.input_size),
            },
            "threshold": engine.config.threshold,
            "catalog_size": len(engine.catalog),
        }

    @app.post("/v1/classify")
    async def classify(request: Request):
        ctype = request.headers.get("content-type", "").split(";")[0].strip().lower()
        body = await request.body()
        if ctype in ("image/jpeg", "image/png"):
            payload = body
        elif ctype == "application/json":
            try:
                doc = json.loads(body)
                payload = base64.b64decode(doc["image_b64"], validate=True)
            except (json.JSONDecodeError, KeyError, TypeError, binascii.Error) as e:
                return JSONResponse(
                    {"error": f"bad request: {e}"}, status_code=400)
        else:
            return JSONResponse(
                {"error": f"unsupported content type {ctype!r}; send image/jpeg, "
                          "image/png, or JSON with image_b64"},
                status_code=415)
        try:
            result = engine.classify_frame(payload)
        except FrameDecodeError as e:
            return JSONResponse({"error": str(e)}, status_code=422)
        return engine.result_payload(result)

    @app.get("/v1/medicines")
    def medicines():
        return [{"id": r.id, "name": r.name, "class_index": r.class_index}
                for r in engine.catalog]

    @app.get("/v1/medicines/{medicine_id}")
    def medicine(medicine_id: str):
        try:
            rec = engine.get_medicine(medicine_id)
        except KeyError:
            return JSONResponse({"error": f"unknown medicine {medicine_id!r}"},
                                status_code=404)
        return {"id": rec.id, "name": rec.name, "class_index": rec.class_index,
                "posology": rec.posology, "pil": rec.pil}

    return app


def serve(engine: InferenceEngine, host: str = "127.0.0.1", port: int = 8008):
    import uvicorn

    uvicorn.run(make_app(engine), host=host, port=port, log_level="warning")
