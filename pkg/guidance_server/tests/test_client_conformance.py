"""Secondary acceptance: the primary remote guidance client runs against a
live stub server with exact round-trip payloads."""

import socket
import threading
import time

import numpy as np
import pytest
import uvicorn

from guidance_server.server import ServerConfig, create_app

avatarforge_guidance = pytest.importorskip(
    "avatarforge.guidance",
    reason="primary package not installed; wire client unavailable")


@pytest.fixture(scope="module")
def live_stub():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    app = create_app(ServerConfig(stub=True, max_side=1024))
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port,
                                           log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10.0
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("stub server failed to start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5.0)


def test_remote_client_round_trip(live_stub):
    model = avatarforge_guidance.RemoteScoreModel(live_stub)
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (16, 16, 3))
    condition = rng.uniform(0, 1, (16, 16, 3))
    eps_cond, eps_uncond = model.predict(image, condition, "a prompt",
                                         t=0.5, seed=42)
    assert eps_cond.shape == (16, 16, 3)
    assert np.all(eps_cond == 0.0)
    assert np.all(eps_uncond == 0.0)


def test_sds_gradient_against_stub(live_stub):
    # zero epsilons: the SDS pixel gradient reduces to -omega(t) * eps(seed)
    from avatarforge.guidance import SCHEDULE, sds_pixel_gradient

    model = avatarforge_guidance.RemoteScoreModel(live_stub)
    image = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
    cond = np.zeros((16, 16, 3))
    t, seed = 0.3, 9
    grad, _ = sds_pixel_gradient(model, image, cond, "p", 0, "coarse",
                                 cfg_scale=7.5, rescale=0.0, t=t, seed=seed)
    omega = 1.0 - SCHEDULE.alpha_bar_at(t)
    eps = np.random.default_rng(seed).standard_normal((16, 16, 3))
    assert np.max(np.abs(grad - (-omega * eps))) < 1e-6


def test_client_shape_error_against_live_server(live_stub):
    model = avatarforge_guidance.RemoteScoreModel(live_stub)
    with pytest.raises(avatarforge_guidance.GuidanceShapeError):
        model.predict(np.zeros((2000, 8, 3)), np.zeros((2000, 8, 3)),
                      "p", t=0.5, seed=0)
