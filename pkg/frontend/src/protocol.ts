/** Wire codec for the render service.
 *
 * Requests are JSON text frames.  Responses are binary frames laid out as
 * a 4-byte big-endian header length, the JSON header, then the PNG bytes.
 * Server-side failures arrive as JSON text frames with an "error" field
 * and the connection stays open.
 */

export interface FrameHeader {
  id: string | number | null;
  width: number;
  height: number;
  render_us: number;
  bytes: number;
}

export interface DecodedFrame {
  kind: "frame";
  header: FrameHeader;
  png: Uint8Array;
}

export interface DecodedError {
  kind: "error";
  id: string | number | null;
  message: string;
}

export type DecodedMessage = DecodedFrame | DecodedError;

export function encodeRequest(
  id: string | number,
  pose: number[],
  near?: number,
  far?: number,
): string {
  if (pose.length !== 12) throw new Error(`pose must have 12 entries, got ${pose.length}`);
  for (const v of pose) {
    if (!Number.isFinite(v)) throw new Error("pose contains non-finite values");
  }
  const req: Record<string, unknown> = { id, pose };
  if (near !== undefined) req.near = near;
  if (far !== undefined) req.far = far;
  return JSON.stringify(req);
}

export function decodeBinaryFrame(buf: ArrayBuffer): DecodedFrame {
  if (buf.byteLength < 4) throw new Error("frame shorter than its length prefix");
  const view = new DataView(buf);
  const headerLen = view.getUint32(0, false);
  if (4 + headerLen > buf.byteLength) {
    throw new Error(`header length ${headerLen} overruns ${buf.byteLength}-byte frame`);
  }
  const headerText = new TextDecoder().decode(new Uint8Array(buf, 4, headerLen));
  const header = JSON.parse(headerText) as FrameHeader;
  const png = new Uint8Array(buf, 4 + headerLen);
  if (png.length !== header.bytes) {
    throw new Error(`header promises ${header.bytes} PNG bytes, frame carries ${png.length}`);
  }
  return { kind: "frame", header, png };
}

export function decodeMessage(data: ArrayBuffer | string): DecodedMessage {
  if (typeof data === "string") {
    const obj = JSON.parse(data) as { error?: string; id?: string | number | null };
    if (typeof obj.error !== "string") throw new Error("text frame without an error field");
    return { kind: "error", id: obj.id ?? null, message: obj.error };
  }
  return decodeBinaryFrame(data);
}
