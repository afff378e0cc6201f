import numpy as np
import pytest
from stub_mllm import StubMLLMServer

from partforge.captioner import (
    API_KEY_ENV,
    CaptionJob,
    CaptionRunState,
    CaptionerError,
    EndpointConfig,
    ViewImage,
    build_prompt,
    caption_library,
    render_views,
)
from partforge.geometry import GeometryError, PointCloud
from partforge.library import build_synthetic_library

FAST = dict(max_retries=3, backoff_base=0.001, timeout=5.0)


@pytest.fixture(autouse=True)
def _api_key(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "test-key")


def _job(rng=None, part_id="p0"):
    rng = rng or np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(40, 3)))
    return CaptionJob(part_id=part_id, views=render_views(cloud, 32),
                      shape_caption="a table with a wide top",
                      part_type="tabletop")


def test_render_views_shapes_and_brightness(rng):
    views = render_views(PointCloud(rng.normal(size=(100, 3))), 48)
    assert len(views) == 6
    assert [v.camera_id for v in views] == [1, 2, 3, 4, 5, 6]
    for v in views:
        assert v.pixels.shape == (48, 48) and v.pixels.dtype == np.uint8
        assert v.pixels.max() > 0  # something was drawn


def test_render_views_single_point_centered():
    views = render_views(PointCloud([(3.0, 3.0, 3.0)]), 33)
    for v in views:
        lit = np.argwhere(v.pixels > 0)
        assert len(lit) == 1
        assert np.all(np.abs(lit[0] - 16) <= 1)


def test_render_views_nearer_is_brighter():
    # two points along x: the +X camera (view 1) sees the x=+1 point brighter
    cloud = PointCloud([(1.0, -0.2, 0.0), (-1.0, 0.2, 0.0)])
    view = render_views(cloud, 64)[0]
    vals = sorted(view.pixels[view.pixels > 0].tolist(), reverse=True)
    assert len(vals) == 2 and vals[0] > vals[1]


def test_render_views_empty_cloud():
    with pytest.raises(GeometryError):
        render_views(PointCloud(np.zeros((0, 3))))


def test_view_png_roundtrip():
    from PIL import Image
    import io

    view = ViewImage(8, 8, np.arange(64, dtype=np.uint8).reshape(8, 8), 1)
    img = Image.open(io.BytesIO(view.to_png_bytes()))
    assert img.size == (8, 8)
    assert np.array_equal(np.asarray(img), view.pixels)


def test_build_prompt_contents():
    job = _job()
    prompt = build_prompt(job)
    assert "tabletop" in prompt
    assert "a table with a wide top" in prompt
    assert "distinct descriptive phrases" in prompt


def test_request_caption_success_and_payload():
    from partforge.captioner import request_caption

    with StubMLLMServer([("ok", "a sleek slab")]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        job = _job()
        assert request_caption(job, endpoint) == "a sleek slab"
        assert job.response == "a sleek slab"
    payload = stub.requests[0]
    content = payload["messages"][0]["content"]
    kinds = [part["type"] for part in content]
    assert kinds.count("image_url") == 6 and kinds.count("text") == 1
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert payload["model"] == "llava"


def test_request_caption_retries_on_429_then_succeeds():
    from partforge.captioner import request_caption

    script = [("status", 429), ("status", 429), ("ok", "finally")]
    with StubMLLMServer(script) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        assert request_caption(_job(), endpoint) == "finally"
        assert len(stub.requests) == 3  # exactly two retries


def test_request_caption_gives_up_after_budget():
    from partforge.captioner import request_caption

    with StubMLLMServer([("status", 503)]) as stub:
        endpoint = EndpointConfig(url=stub.url, max_retries=2,
                                  backoff_base=0.001, timeout=5.0)
        with pytest.raises(CaptionerError, match="gave up"):
            request_caption(_job(), endpoint)
        assert len(stub.requests) == 3  # initial try + 2 retries


def test_request_caption_auth_terminal():
    from partforge.captioner import request_caption

    with StubMLLMServer([("status", 401)]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        with pytest.raises(CaptionerError, match="authentication"):
            request_caption(_job(), endpoint)
        assert len(stub.requests) == 1  # no retry on auth failure


def test_request_caption_malformed_terminal():
    from partforge.captioner import request_caption

    with StubMLLMServer([("malformed",)]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        with pytest.raises(CaptionerError, match="malformed"):
            request_caption(_job(), endpoint)
        assert len(stub.requests) == 1


def test_request_caption_empty_terminal():
    from partforge.captioner import request_caption

    with StubMLLMServer([("empty",)]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        with pytest.raises(CaptionerError, match="empty caption"):
            request_caption(_job(), endpoint)


def test_missing_credential(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    endpoint = EndpointConfig(url="http://127.0.0.1:1/unused")
    with pytest.raises(CaptionerError, match=API_KEY_ENV):
        endpoint.api_key()


def _fresh_library(tmp_path):
    from partforge.library import save_library

    lib = build_synthetic_library(seed=3, point_count=32)
    save_library(lib, tmp_path / "library")
    return lib, tmp_path / "library"


def test_caption_library_full_run(tmp_path):
    lib, lib_dir = _fresh_library(tmp_path)
    with StubMLLMServer([("echo",)]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        errors = caption_library(lib, endpoint, lib_dir, concurrency=2,
                                 resolution=24)
        assert errors == []
        assert len(stub.requests) == len(lib.all_records())
    assert all(r.source == "mllm" for r in lib.all_records())
    assert all(r.caption.startswith("stub caption") for r in lib.all_records())
    state = CaptionRunState.open(lib_dir / "caption_state.jsonl")
    assert len(state.completed) == len(lib.all_records())
    # the manifest now carries the new captions
    from partforge.library import ingest
    back, _ = ingest(lib_dir)
    assert all(r.source == "mllm" for r in back.all_records())


def test_caption_library_resume_issues_no_duplicates(tmp_path):
    lib, lib_dir = _fresh_library(tmp_path)
    n = len(lib.all_records())
    state = CaptionRunState.open(lib_dir / "caption_state.jsonl")
    done_ids = [r.part_id for r in lib.all_records()[: n // 2]]
    for pid in done_ids:
        state.record(pid, f"prior caption for {pid}")
    with StubMLLMServer([("echo",)]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        errors = caption_library(lib, endpoint, lib_dir, concurrency=2,
                                 resolution=24)
        assert errors == []
        assert len(stub.requests) == n - len(done_ids)
    by_id = {r.part_id: r for r in lib.all_records()}
    for pid in done_ids:
        assert by_id[pid].caption == f"prior caption for {pid}"
    # a second run has nothing left to do
    with StubMLLMServer([("echo",)]) as stub2:
        endpoint2 = EndpointConfig(url=stub2.url, **FAST)
        assert caption_library(lib, endpoint2, lib_dir) == []
        assert len(stub2.requests) == 0


def test_caption_library_bounded_concurrency(tmp_path):
    lib, lib_dir = _fresh_library(tmp_path)
    with StubMLLMServer([("echo",)], delay=0.05) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        caption_library(lib, endpoint, lib_dir, concurrency=3, resolution=24)
        assert stub.max_active <= 3


def test_caption_library_collects_errors_and_continues(tmp_path):
    lib, lib_dir = _fresh_library(tmp_path)
    n = len(lib.all_records())
    # first request malformed (terminal), everything after succeeds
    with StubMLLMServer([("malformed",), ("echo",)]) as stub:
        endpoint = EndpointConfig(url=stub.url, **FAST)
        errors = caption_library(lib, endpoint, lib_dir, concurrency=1,
                                 resolution=24)
        assert len(errors) == 1 and "malformed" in errors[0]
        assert len(stub.requests) == n
    state = CaptionRunState.open(lib_dir / "caption_state.jsonl")
    assert len(state.completed) == n - 1
