/** Streaming client: one in-flight request, newest-pose coalescing,
 * and automatic reconnection.
 *
 * The transport is injected so tests can drive the client with a fake;
 * the browser entry point passes a thin WebSocket wrapper.
 */

import { OrbitState, orbitToPose } from "./orbit.js";
import { DecodedFrame, decodeMessage, encodeRequest } from "./protocol.js";

export interface Transport {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  onmessage: ((data: ArrayBuffer | string) => void) | null;
}

export type TransportFactory = (url: string) => Transport;

export type Status = "connecting" | "connected" | "disconnected";

export interface ClientCallbacks {
  onFrame(frame: DecodedFrame, state: OrbitState): void;
  onStatus?(status: Status): void;
  onError?(message: string): void;
}

export interface ClientOptions {
  /** First retry delay; doubles per attempt up to maxBackoffMs. */
  backoffMs?: number;
  maxBackoffMs?: number;
  near?: number;
  far?: number;
}

interface PendingRequest {
  state: OrbitState;
  id: number;
}

export class ViewerClient {
  private transport: Transport | null = null;
  private ready = false;
  private inFlight: PendingRequest | null = null;
  private pending: OrbitState | null = null;
  private nextId = 1;
  private closed = false;
  private retryDelay: number;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly url: string,
    private readonly factory: TransportFactory,
    private readonly callbacks: ClientCallbacks,
    private readonly options: ClientOptions = {},
  ) {
    this.retryDelay = options.backoffMs ?? 250;
    this.connect();
  }

  /** Ask for a frame at this state; newer calls replace unsent ones. */
  requestRender(state: OrbitState): void {
    if (this.closed) throw new Error("client is closed");
    this.pending = state;
    this.flush();
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    this.transport?.close();
    this.transport = null;
  }

  /** True while a request is awaiting its response. */
  get busy(): boolean {
    return this.inFlight !== null;
  }

  private setStatus(status: Status): void {
    this.callbacks.onStatus?.(status);
  }

  private connect(): void {
    if (this.closed) return;
    this.setStatus("connecting");
    const t = this.factory(this.url);
    this.transport = t;
    t.onopen = () => {
      this.ready = true;
      this.retryDelay = this.options.backoffMs ?? 250;
      this.setStatus("connected");
      // a response in flight when the old link died will never arrive
      if (this.inFlight !== null) {
        this.pending = this.pending ?? this.inFlight.state;
        this.inFlight = null;
      }
      this.flush();
    };
    t.onmessage = (data) => this.handleMessage(data);
    const dropped = () => this.handleDisconnect(t);
    t.onclose = dropped;
    t.onerror = dropped;
  }

  private handleDisconnect(from: Transport): void {
    if (this.transport !== from) return; // stale handler after reconnect
    this.transport = null;
    this.ready = false;
    if (this.inFlight !== null) {
      this.pending = this.pending ?? this.inFlight.state;
      this.inFlight = null;
    }
    this.setStatus("disconnected");
    if (this.closed) return;
    this.retryTimer = setTimeout(() => {
      this.retryTimer = null;
      this.connect();
    }, this.retryDelay);
    this.retryDelay = Math.min(this.retryDelay * 2, this.options.maxBackoffMs ?? 5000);
  }

  private flush(): void {
    if (this.pending === null || this.inFlight !== null || !this.ready || this.transport === null) return;
    const state = this.pending;
    this.pending = null;
    const id = this.nextId++;
    const text = encodeRequest(id, orbitToPose(state), this.options.near, this.options.far);
    this.inFlight = { state, id };
    this.transport.send(text);
  }

  private handleMessage(data: ArrayBuffer | string): void {
    let message;
    try {
      message = decodeMessage(data);
    } catch (err) {
      this.callbacks.onError?.(`undecodable message: ${String(err)}`);
      return;
    }
    if (message.kind === "error") {
      this.callbacks.onError?.(message.message);
      this.inFlight = null;
      this.flush();
      return;
    }
    const request = this.inFlight;
    this.inFlight = null;
    if (request !== null && message.header.id === request.id) {
      this.callbacks.onFrame(message, request.state);
    }
    this.flush();
  }
}
