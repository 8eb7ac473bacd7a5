from __future__ import annotations

import numpy as np
import pytest

from http_stub import StubService, serve
from live_support import live_endpoints, run_against_stub, run_live
from stagepaint.backends import HttpDenoiser, HttpError, HttpTextPort, decode_array, encode_array
from stagepaint.geometry import BBox
from stagepaint.mocks import ToyDenoiser
from stagepaint.schema import validate_manifest


def test_array_wire_roundtrip():
    a = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert decode_array(encode_array(a)).tobytes() == a.tobytes()


def test_http_denoiser_matches_local_toy():
    base, stop = serve(StubService(""))
    try:
        remote, local = HttpDenoiser(f"{base}/denoiser"), ToyDenoiser()
        assert remote.latent_shape == local.latent_shape
        z = local.initial_latent(4)
        assert remote.initial_latent(4).tobytes() == z.tobytes()
        (zr, mr), (zl, ml) = remote.step(z, 7, "a red apple"), local.step(z, 7, "a red apple")
        assert zr.tobytes() == zl.tobytes()
        assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(mr.blocks, ml.blocks))
        box = BBox(0, 0, 8, 16)
        assert remote.energy_gradient(z, 7, "a red apple", box, 2, "near_middle").tobytes() == \
            local.energy_gradient(z, 7, "a red apple", box, 2, "near_middle").tobytes()
        assert (remote.decode(z) == local.decode(z)).all()
    finally:
        stop()


def test_http_errors_are_reported():
    with pytest.raises(HttpError):
        HttpTextPort("http://127.0.0.1:9/none", timeout=2).complete("hi")


def test_pipeline_over_http_stub(tmp_path):
    m, service = run_against_stub(tmp_path / "run")
    assert m.ok and len(m.stages) == 2
    validate_manifest(m.data)
    assert "/denoiser/energy_gradient" in service.calls and "/checker" in service.calls


@pytest.mark.live
@pytest.mark.skipif(live_endpoints() is None, reason="STAGEPAINT_LIVE_* endpoints not configured")
def test_live_smoke(tmp_path):
    m = run_live(tmp_path / "live", live_endpoints())
    assert m.ok and len(m.stages) == 2
    validate_manifest(m.data)
