"""Serve a model over WebSocket and drive it with the bundled client.

Starts the render service on a loopback port, requests a few frames
along an orbit, and prints per-frame latency, demonstrating the
pose-in / frame-out loop an interactive viewer runs.

Run:  python3 demos/05_serve_and_client.py
"""

import tempfile
from pathlib import Path

import numpy as np

from nelf.network import NetConfig, SRStageSpec, build_model
from nelf.rays import encoding_channels, orbit_pose
from nelf.service import RenderService, ServiceClient
from nelf.tensor import Tensor4
from nelf.weights import load_weights, save_weights

# Any weights file with serving metadata works; here, an untrained model.
cfg = NetConfig(
    in_channels=encoding_channels(4, 4),
    width=32,
    n_res_blocks=2,
    sr_plan=(SRStageSpec(2, 16), SRStageSpec(2, 16)),
)
model = build_model(cfg, seed=0)
rng = np.random.default_rng(0)
model.forward(Tensor4(rng.standard_normal((1, cfg.in_channels, 8, 8)).astype(np.float32)),
              mode="train")
path = Path(tempfile.mkdtemp()) / "demo.nlf"
save_weights(model, path, ray={"k": 4, "l": 4, "near": 2.0, "far": 6.0,
                               "width": 16, "height": 16, "focal": 20.0})

service = RenderService(load_weights(path), port=0)
service.start()
print(f"service listening on 127.0.0.1:{service.port}")

client = ServiceClient("127.0.0.1", service.port)
for i in range(4):
    client.request(i, orbit_pose(4.0, i * 0.8, 0.4))
    kind, (header, png) = client.recv_message()
    print(f"frame {header['id']}: {header['width']}x{header['height']}, "
          f"{header['bytes']} bytes, {header['render_us'] / 1000:.1f} ms")

client.close()
service.stop()
print("done")
