"""Render service tests: wire codec, request validation, live round trips."""

import json
import socket
import struct
import time

import numpy as np
import pytest

import nelf.service
from nelf.dataset import png_bytes
from nelf.network import NetConfig, SRStageSpec, build_model
from nelf.rays import Pose, encoding_channels, orbit_pose
from nelf.service import (
    ProtocolError,
    RenderService,
    ServiceClient,
    encode_frame,
    pack_response,
    parse_request,
    read_frame,
    unpack_response,
)
from nelf.tensor import Tensor4
from nelf.train import render_view
from nelf.weights import load_weights, save_weights

RAY = {"k": 2, "l": 2, "near": 2.0, "far": 6.0, "width": 8, "height": 8, "focal": 10.0}


@pytest.fixture(scope="module")
def served_weights(tmp_path_factory):
    cfg = NetConfig(
        in_channels=encoding_channels(2, 2),
        width=16,
        n_res_blocks=1,
        sr_plan=(SRStageSpec(2, 16),),
    )
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(2):  # realistic running stats
        model.forward(
            Tensor4(rng.standard_normal((1, cfg.in_channels, 8, 8)).astype(np.float32)),
            mode="train",
        )
    path = tmp_path_factory.mktemp("w") / "serve.nlf"
    save_weights(model, path, ray=RAY)
    return load_weights(path)


@pytest.fixture()
def live(served_weights):
    service = RenderService(served_weights, port=0)
    service.start()
    client = ServiceClient("127.0.0.1", service.port)
    yield service, client
    client.close()
    service.stop()


def pose_floats(pose: Pose):
    return [float(v) for v in pose.matrix.reshape(-1)]


class TestFrameCodec:
    def pump(self, *frames):
        a, b = socket.socketpair()
        for f in frames:
            a.sendall(f)
        out = read_frame(b)
        a.close()
        b.close()
        return out

    def test_masked_round_trip(self):
        """Client-style masked frames decode back to the original payload."""
        payload = b"hello service"
        op, data = self.pump(encode_frame(0x1, payload, mask=True))
        assert (op, data) == (0x1, payload)

    def test_extended_length_round_trip(self):
        payload = bytes(range(256)) * 3  # needs the 16-bit length form
        op, data = self.pump(encode_frame(0x2, payload))
        assert op == 0x2 and data == payload

    def test_fragmented_message_reassembled(self):
        # first frame: FIN=0 opcode=text; second: FIN=1 opcode=continuation
        f1 = bytes([0x01, 3]) + b"abc"
        f2 = bytes([0x80, 3]) + b"def"
        op, data = self.pump(f1, f2)
        assert (op, data) == (0x1, b"abcdef")

    def test_response_pack_unpack(self):
        blob = pack_response(42, 16, 16, 1234, b"\x89PNGxxxx")
        header, png = unpack_response(blob)
        assert header == {"id": 42, "width": 16, "height": 16, "render_us": 1234, "bytes": 8}
        assert png == b"\x89PNGxxxx"

    def test_truncated_response_rejected(self):
        blob = pack_response(1, 8, 8, 1, b"abc")
        with pytest.raises(ProtocolError):
            unpack_response(blob[:-1])


class TestRequestParsing:
    def test_valid_request(self):
        pose = orbit_pose(4.0, 0.3, 0.2)
        req = parse_request(json.dumps({"id": "a", "pose": pose_floats(pose)}))
        assert req.id == "a" and req.near is None
        np.testing.assert_allclose(req.pose.matrix, pose.matrix, atol=1e-9)

    def test_wrong_length_pose_rejected(self):
        with pytest.raises(ProtocolError):
            parse_request(json.dumps({"pose": [1.0] * 11}))

    def test_malformed_json_rejected(self):
        with pytest.raises(ProtocolError):
            parse_request("{nope")

    def test_non_finite_pose_rejected(self):
        vals = pose_floats(Pose.identity())
        vals[3] = float("nan")
        with pytest.raises(ProtocolError):
            parse_request(json.dumps({"pose": vals}))

    def test_slightly_bent_rotation_snapped(self):
        """Rotations within 1e-3 of orthonormal are repaired, not rejected."""
        mat = Pose.identity().matrix.copy()
        mat[0, 1] += 2e-4
        req = parse_request(json.dumps({"pose": list(mat.reshape(-1))}))
        r = req.pose.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)

    def test_badly_bent_rotation_rejected(self):
        mat = Pose.identity().matrix.copy()
        mat[:, :3] *= 2.0
        with pytest.raises(ProtocolError):
            parse_request(json.dumps({"pose": list(mat.reshape(-1))}))

    def test_inverted_depth_range_rejected(self):
        with pytest.raises(ProtocolError):
            parse_request(
                json.dumps({"pose": pose_floats(Pose.identity()), "near": 5.0, "far": 2.0})
            )


class TestLiveService:
    def test_frame_has_model_resolution(self, live):
        _, client = live
        client.request(1, orbit_pose(4.0, 0.0, 0.3))
        kind, (header, png) = client.recv_message()
        assert kind == "frame"
        assert (header["width"], header["height"]) == (16, 16)
        assert header["id"] == 1 and header["render_us"] > 0
        assert png.startswith(b"\x89PNG")

    def test_identical_requests_identical_bytes(self, live):
        _, client = live
        pose = orbit_pose(4.0, 1.0, 0.4)
        client.request("x", pose)
        _, (h1, png1) = client.recv_message()
        client.request("y", pose)
        _, (h2, png2) = client.recv_message()
        assert png1 == png2

    def test_frame_matches_direct_render(self, live, served_weights):
        """The service returns byte-identical PNGs to an offline render."""
        service, client = live
        pose = orbit_pose(4.0, 2.0, 0.1)
        client.request(5, pose)
        _, (_, png) = client.recv_message()
        img = render_view(service.model, service.intr, pose, 2.0, 6.0, 2, 2)
        assert png == png_bytes(img)

    def test_malformed_json_keeps_connection_open(self, live):
        _, client = live
        client.send_text("{broken")
        kind, err = client.recv_message()
        assert kind == "error" and "JSON" in err["error"]
        client.request(2, orbit_pose(4.0, 0.5, 0.2))
        kind, _ = client.recv_message()
        assert kind == "frame"

    def test_depth_override_changes_frame(self, live):
        _, client = live
        pose = orbit_pose(4.0, 0.7, 0.3)
        client.request(1, pose)
        _, (_, png_default) = client.recv_message()
        client.request(2, pose, near=3.0, far=5.0)
        _, (_, png_override) = client.recv_message()
        assert png_default != png_override

    def test_burst_coalesces_to_newest(self, served_weights, monkeypatch):
        """Ten rapid poses yield between 1 and 10 frames, ending on the last."""
        service = RenderService(served_weights, port=0)
        real = RenderService.render_frame

        def slow_render(self, req):
            time.sleep(0.08)
            return real(self, req)

        monkeypatch.setattr(RenderService, "render_frame", slow_render)
        service.start()
        client = ServiceClient("127.0.0.1", service.port)
        try:
            for i in range(10):
                client.request(i, orbit_pose(4.0, 0.1 * i, 0.3))
            got = []
            client.sock.settimeout(5.0)
            while len(got) < 10:
                try:
                    kind, (header, _) = client.recv_message()
                except socket.timeout:
                    break
                got.append(header["id"])
                if header["id"] == 9:
                    break
            assert 1 <= len(got) <= 10
            assert got[-1] == 9
            assert len(got) < 10  # the slow worker must have skipped some
        finally:
            client.close()
            service.stop()

    def test_queue_bound_validated(self, served_weights):
        with pytest.raises(ValueError):
            RenderService(served_weights, max_queue=0)

    def test_missing_ray_metadata_rejected(self, served_weights, tmp_path):
        from nelf.weights import model_from_weights

        model = model_from_weights(served_weights)
        path = tmp_path / "bare.nlf"
        save_weights(model, path)  # no ray metadata
        with pytest.raises(ValueError):
            RenderService(load_weights(path))
