/** Browser entry point: orbit controls on a canvas, frames from the service.
 *
 * The service URL comes from the ?service= query parameter, defaulting to
 * ws://localhost:8765 (the serve subcommand's default port).
 */

import { ViewerClient, Transport } from "./client.js";
import { clampState, OrbitState } from "./orbit.js";

function webSocketTransport(url: string): Transport {
  const ws = new WebSocket(url);
  ws.binaryType = "arraybuffer";
  const t: Transport = {
    send: (data) => ws.send(data),
    close: () => ws.close(),
    onopen: null,
    onclose: null,
    onerror: null,
    onmessage: null,
  };
  ws.onopen = () => t.onopen?.();
  ws.onclose = () => t.onclose?.();
  ws.onerror = () => t.onerror?.();
  ws.onmessage = (ev) => t.onmessage?.(ev.data);
  return t;
}

function start(): void {
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  const status = document.getElementById("status") as HTMLElement;
  const ctx = canvas.getContext("2d");
  if (ctx === null) throw new Error("canvas 2d context unavailable");

  const url =
    new URLSearchParams(location.search).get("service") ?? "ws://localhost:8765";

  let state: OrbitState = { azimuth: 0.4, elevation: 0.25, radius: 4.0, center: [0, 0, 0] };

  const client = new ViewerClient(url, webSocketTransport, {
    onFrame: async (frame) => {
      const blob = new Blob([frame.png.slice().buffer], { type: "image/png" });
      const bitmap = await createImageBitmap(blob);
      canvas.width = frame.header.width;
      canvas.height = frame.header.height;
      ctx.drawImage(bitmap, 0, 0);
    },
    onStatus: (s) => {
      status.textContent = s;
      status.dataset.state = s;
      if (s === "connected") client.requestRender(state);
    },
    onError: (message) => {
      status.textContent = `error: ${message}`;
    },
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;

  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointerup", (ev) => {
    dragging = false;
    canvas.releasePointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    lastX = ev.clientX;
    lastY = ev.clientY;
    state = clampState({
      ...state,
      azimuth: state.azimuth - dx * 0.01,
      elevation: state.elevation + dy * 0.01,
    });
    client.requestRender(state);
  });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    state = clampState({ ...state, radius: state.radius * Math.exp(ev.deltaY * 1e-3) });
    client.requestRender(state);
  });
}

start();
